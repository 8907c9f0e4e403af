"""Command line: ``simulate``, ``bench`` and ``keygen``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .bus import dump_transcript
from .errors import ConfigError, MeterAggError, ProtocolAbort
from .fleet import load_fleet_config
from .runner import RunConfig, bench, keygen, simulate, write_bench_csv

EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3

config_opt = click.option("--config", "config_path", required=True,
                          type=click.Path(exists=True, dir_okay=False, path_type=Path),
                          help="Fleet config JSON.")
backend_opt = click.option("--backend", default="all", show_default=True,
                           type=click.Choice(["plain", "enclave", "homomorphic", "all"]))
seed_opt = click.option("--seed", type=int, default=None, help="Override the fleet seed.")


def _parse_sizes(ctx, param, value):
    if value is None:
        return None
    try:
        sizes = [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter("sizes are comma-separated integers") from None
    if not sizes or any(n < 1 for n in sizes):
        raise click.BadParameter("need at least one positive size")
    return sizes


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("simulate")
@config_opt
@backend_opt
@click.option("--slots", type=click.IntRange(min=1), default=None,
              help="Slots to run (default: one billing period).")
@seed_opt
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write the JSON run report here.")
@click.option("--group-bits", type=click.IntRange(min=16), default=None)
@click.option("--transcript", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Record every bus topic and dump the transcript as JSON.")
def simulate_cmd(config_path, backend, slots, seed, out, group_bits, transcript):
    """Run the fleet through one or more backends and cross-check the sums."""
    try:
        fleet = load_fleet_config(config_path)
        cfg = RunConfig(fleet, backend, slots, out, seed, group_bits=group_bits,
                        record=transcript is not None)
        report = simulate(cfg)
    except ProtocolAbort as exc:
        click.echo(f"protocol error: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if transcript is not None:
        envs = [e for topic in sorted(report.bus.full_transcript())
                for e in report.bus.transcript(topic)]
        transcript.write_text(dump_transcript(envs), encoding="utf-8")
    if out is None:
        click.echo(json.dumps(report.to_json(), indent=2))
    for line in report.mismatches + report.errors:
        click.echo(f"MISMATCH {line}" if line in report.mismatches else f"ERROR {line}", err=True)
    if report.audit is not None and not report.audit.ok:
        for v in report.audit.violations:
            click.echo(f"AUDIT {v}", err=True)
    sys.exit(0 if report.ok and (report.audit is None or report.audit.ok) else EXIT_MISMATCH)


@main.command("bench")
@config_opt
@backend_opt
@click.option("--sizes", callback=_parse_sizes, default="10,50,100,200", show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=10, show_default=True)
@seed_opt
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="CSV output path (stdout if omitted).")
@click.option("--group-bits", type=click.IntRange(min=16), default=None)
def bench_cmd(config_path, backend, sizes, runs, seed, out, group_bits):
    """Per-round latency table: backend,n,mean_ms,ci95_ms."""
    try:
        fleet = load_fleet_config(config_path)
        cfg = RunConfig(fleet, backend, seed=seed, group_bits=group_bits)
        rows = bench(cfg, sizes, runs)
    except ProtocolAbort as exc:
        click.echo(f"protocol error: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if out is not None:
        write_bench_csv(rows, out)
    else:
        click.echo("backend,n,mean_ms,ci95_ms")
        for r in rows:
            click.echo(f"{r.backend},{r.n},{r.mean_ms:.6f},{r.ci95_ms:.6f}")


@main.command("keygen")
@config_opt
@seed_opt
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Directory for the key files.")
def keygen_cmd(config_path, seed, out):
    """Write utility, attestation-authority, aggregator and per-meter key files."""
    try:
        fleet = load_fleet_config(config_path)
        written = keygen(fleet, out, seed)
    except (ConfigError, MeterAggError, OSError) as exc:
        click.echo(f"keygen failed: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"wrote {len(written)} files to {out}")


if __name__ == "__main__":
    main()
