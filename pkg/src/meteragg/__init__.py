"""Privacy-preserving smart-meter aggregation: enclave AEAD pipeline and
multi-party ElGamal secure sum over a simulated meter fleet."""

__version__ = "0.1.0"
