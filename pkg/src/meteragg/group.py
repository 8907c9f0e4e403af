"""Order-q subgroup of Z_p^* for a safe prime p = 2q + 1."""

from __future__ import annotations

import random
import secrets
from dataclasses import dataclass

import gmpy2

from .errors import InvalidGroup, NotInSubgroup, PrimalitySearchExhausted

# RFC 3526 group 14 (2048-bit MODP). p is a safe prime.
MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)

PRIME_REPS = 40


def powmod(base: int, exp: int, mod: int) -> int:
    return int(gmpy2.powmod(base, exp, mod))


def invert(a: int, mod: int) -> int:
    return int(gmpy2.invert(a, mod))


def is_probable_prime(n: int) -> bool:
    return n >= 2 and bool(gmpy2.is_prime(n, PRIME_REPS))


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.p != 2 * self.q + 1:
            raise InvalidGroup("p must equal 2q + 1")
        if not is_probable_prime(self.q):
            raise InvalidGroup("q is not prime")
        if not is_probable_prime(self.p):
            raise InvalidGroup("p is not prime")
        if not 1 < self.g < self.p:
            raise InvalidGroup("generator must lie in (1, p)")
        if powmod(self.g, self.q, self.p) != 1:
            raise InvalidGroup("generator does not have order q")

    @property
    def bits(self) -> int:
        return self.p.bit_length()

    def is_member(self, x: int) -> bool:
        # for a safe prime the order-q subgroup is exactly the quadratic residues
        return 0 < x < self.p and gmpy2.legendre(x, self.p) == 1

    def check_member(self, x: int, what: str = "element") -> int:
        if not self.is_member(x):
            raise NotInSubgroup(f"{what} is not in the order-q subgroup")
        return x

    def exp(self, e: int) -> int:
        return powmod(self.g, e, self.p)

    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def encode(self, x: int) -> bytes:
        return x.to_bytes(self.element_bytes(), "big")

    def to_json(self) -> dict:
        return {"p": to_hex(self.p), "q": to_hex(self.q), "g": to_hex(self.g)}

    @classmethod
    def from_json(cls, obj: dict) -> GroupParams:
        return cls(from_hex(obj["p"]), from_hex(obj["q"]), from_hex(obj["g"]))


def to_hex(x: int) -> str:
    return format(x, "x")


def from_hex(s: str) -> int:
    if s != s.lower():
        raise ValueError("group elements are lowercase hex")
    return int(s, 16)


def _generator(p: int, rng) -> int:
    # Squaring any h outside {0, 1, p-1} lands in the order-q subgroup, minus 1.
    while True:
        h = rng.randrange(2, p - 1)
        g = h * h % p
        if g != 1:
            return g


def setup_group(bits: int = 2048, rng: random.Random | None = None,
                max_attempts: int | None = None, search: bool = False) -> GroupParams:
    """Safe-prime group with ``bits``-bit modulus.

    For 2048 bits the RFC 3526 prime is used unless ``search`` is set; smaller
    sizes are searched for with ``rng`` so test groups are reproducible.
    """
    if bits < 16:
        raise InvalidGroup("group must have at least 16 bits")
    rng = rng or secrets.SystemRandom()
    if bits == 2048 and not search:
        p = MODP_2048_P
        return GroupParams(p, (p - 1) // 2, _generator(p, rng))
    attempts = max_attempts if max_attempts is not None else 200 * bits * bits
    for _ in range(attempts):
        q = rng.getrandbits(bits - 1) | (1 << (bits - 2)) | 1
        # q = 1 mod 3 forces 3 | 2q+1; skip cheaply
        if q % 3 == 1:
            continue
        if not gmpy2.is_prime(q, 1) or not gmpy2.is_prime(2 * q + 1, 1):
            continue
        if is_probable_prime(q) and is_probable_prime(2 * q + 1):
            p = 2 * q + 1
            return GroupParams(p, q, _generator(p, rng))
    raise PrimalitySearchExhausted(f"no {bits}-bit safe prime in {attempts} candidates")


TOY_GROUP = GroupParams(23, 11, 2)
