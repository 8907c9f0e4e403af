import random

from meteragg.attestation import (
    EphemeralKey,
    derive_session_key,
    key_confirmation,
    transcript_hash,
    verify_quote,
)
from meteragg.channel import NonceCounter, seal_measurement
from meteragg.enclave import Enclave, SubstitutionPolicy, challenge_message
from meteragg.keys import KeyMaterial
from meteragg.model import MeterId


class Rig:
    """An enclave plus attested meter-side channel state, without the bus."""

    def __init__(self, n=3, policy=None, t=3, seed=1, attest=None, region="r"):
        self.meters = [MeterId(region, i) for i in range(1, n + 1)]
        self.keys = KeyMaterial(seed, self.meters)
        self.rng = random.Random(seed)
        self.enclave = Enclave(self.meters, policy or SubstitutionPolicy(), t,
                               self.keys.authority, self.keys.utility.public_key, rng=self.rng)
        self.sessions = {}
        for m in (self.meters if attest is None else attest):
            self.attest(m)

    def attest(self, m):
        ch = self.rng.randbytes(32)
        eph = EphemeralKey(rng=self.rng)
        sig = self.keys.meter_key(m).sign(challenge_message(ch, eph.public))
        quote, epub, sid = self.enclave.accept_challenge(self.keys.credential(m), ch,
                                                         eph.public, sig)
        bound = verify_quote(quote, self.enclave.measurement, ch, self.keys.authority.public_key)
        th = transcript_hash(m, ch, eph.public, epub, sid)
        sk = derive_session_key(eph.secret, epub, th, bound, sid)
        self.enclave.confirm_session(m, key_confirmation(sk, th))
        self.sessions[m] = (sk, NonceCounter(sid))

    def seal(self, m, v, j):
        sk, ctr = self.sessions[m]
        return seal_measurement(v, j, sk, ctr, m)

    def send(self, m, v, j):
        self.enclave.ingest(self.seal(m, v, j))

    def slot(self, j, values):
        """``values`` maps meter index to reading; absent indices are silent."""
        for i, v in values.items():
            self.send(self.meters[i - 1], v, j)
        return self.enclave.close_slot(j)
