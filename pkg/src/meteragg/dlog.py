"""Bounded discrete logarithm by baby-step giant-step."""

from __future__ import annotations

from functools import lru_cache
from math import isqrt

from .errors import LogNotFound
from .group import GroupParams, invert, powmod


@lru_cache(maxsize=16)
def _baby_steps(p: int, g: int, m: int) -> dict[int, int]:
    table: dict[int, int] = {}
    e = 1
    for j in range(m):
        table.setdefault(e, j)
        e = e * g % p
    return table


def discrete_log(D: int, params: GroupParams, bound: int) -> int:
    """Smallest ``x`` in ``[0, bound]`` with ``g^x = D (mod p)``.

    Costs about ``2 * sqrt(bound)`` group multiplications; the baby-step table
    is cached per ``(p, g, m)`` so repeated rounds reuse it.
    """
    if bound < 0:
        raise ValueError("bound must be non-negative")
    p, g = params.p, params.g
    D %= p
    m = isqrt(bound) + 1
    table = _baby_steps(p, g, m)
    giant = invert(powmod(g, m, p), p)
    gamma = D
    for i in range(m):
        j = table.get(gamma)
        if j is not None:
            x = i * m + j
            if x <= bound:
                return x
            break
        gamma = gamma * giant % p
    raise LogNotFound(f"no exponent <= {bound} maps to the given element")
