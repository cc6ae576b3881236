"""Authenticated encryption primitives for the memory encryption engine.

The engine only needs a 128-bit-key, 128-bit-tag AEAD whose associated data
carries the full access tweak.  Two interchangeable backends are provided:

* ``AesGcmAead`` -- AES-128-GCM via the ``cryptography`` package.  Default,
  because the test suites run hundreds of thousands of line operations.
* ``Ascon128Aead`` -- a pure-Python Ascon-128 (v1.2), the lightweight
  permutation cipher family the hardware prototype is configured with.

Both raise :class:`AeadAuthError` on any verification failure so callers
never see partial plaintext.
"""

from __future__ import annotations

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_LEN = 16
TAG_LEN = 16


class AeadAuthError(Exception):
    """Tag verification failed; ciphertext, tag, nonce or AD was wrong."""


class AesGcmAead:
    """AES-128-GCM behind the common seal/open interface."""

    name = "aes-gcm"
    nonce_len = 12

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, ad: bytes) -> tuple[bytes, bytes]:
        blob = AESGCM(key).encrypt(nonce, plaintext, ad)
        return blob[:-TAG_LEN], blob[-TAG_LEN:]

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes, ad: bytes) -> bytes:
        try:
            return AESGCM(key).decrypt(nonce, ciphertext + tag, ad)
        except InvalidTag as exc:
            raise AeadAuthError("authentication tag mismatch") from exc


# --- Ascon-128 v1.2 ---------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF
_ASCON128_IV = 0x80400C0600000000  # key=128, rate=64, a=12, b=6


def _ror(x: int, n: int) -> int:
    return ((x >> n) | (x << (64 - n))) & _MASK64


def ascon_permutation(s: list[int], rounds: int) -> None:
    """In-place Ascon permutation on a 5x64-bit state."""
    for r in range(12 - rounds, 12):
        s[2] ^= 0xF0 - r * 0x10 + r * 0x1
        # substitution layer
        s[0] ^= s[4]
        s[4] ^= s[3]
        s[2] ^= s[1]
        t = [(s[i] ^ _MASK64) & s[(i + 1) % 5] for i in range(5)]
        for i in range(5):
            s[i] ^= t[(i + 1) % 5]
        s[1] ^= s[0]
        s[0] ^= s[4]
        s[3] ^= s[2]
        s[2] ^= _MASK64
        # linear diffusion layer
        s[0] ^= _ror(s[0], 19) ^ _ror(s[0], 28)
        s[1] ^= _ror(s[1], 61) ^ _ror(s[1], 39)
        s[2] ^= _ror(s[2], 1) ^ _ror(s[2], 6)
        s[3] ^= _ror(s[3], 10) ^ _ror(s[3], 17)
        s[4] ^= _ror(s[4], 7) ^ _ror(s[4], 41)


def _w(b: bytes) -> int:
    return int.from_bytes(b, "big")


def _b(x: int, n: int = 8) -> bytes:
    return x.to_bytes(n, "big")


class Ascon128Aead:
    """Ascon-128 (64-bit rate, 12 init/final rounds, 6 intermediate)."""

    name = "ascon128"
    nonce_len = 16

    def _init_state(self, key: bytes, nonce: bytes) -> tuple[list[int], int, int]:
        k0, k1 = _w(key[:8]), _w(key[8:])
        s = [_ASCON128_IV, k0, k1, _w(nonce[:8]), _w(nonce[8:])]
        ascon_permutation(s, 12)
        s[3] ^= k0
        s[4] ^= k1
        return s, k0, k1

    def _absorb_ad(self, s: list[int], ad: bytes) -> None:
        if ad:
            padded = ad + b"\x80" + b"\x00" * (7 - len(ad) % 8)
            for i in range(0, len(padded), 8):
                s[0] ^= _w(padded[i : i + 8])
                ascon_permutation(s, 6)
        s[4] ^= 1  # domain separation

    def _finalize(self, s: list[int], k0: int, k1: int) -> bytes:
        s[1] ^= k0
        s[2] ^= k1
        ascon_permutation(s, 12)
        return _b(s[3] ^ k0) + _b(s[4] ^ k1)

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, ad: bytes) -> tuple[bytes, bytes]:
        assert len(key) == KEY_LEN and len(nonce) == self.nonce_len
        s, k0, k1 = self._init_state(key, nonce)
        self._absorb_ad(s, ad)

        last = len(plaintext) % 8
        padded = plaintext + b"\x80" + b"\x00" * (7 - last)
        ct = b""
        for i in range(0, len(padded) - 8, 8):
            s[0] ^= _w(padded[i : i + 8])
            ct += _b(s[0])
            ascon_permutation(s, 6)
        s[0] ^= _w(padded[-8:])
        ct += _b(s[0])[:last]

        return ct, self._finalize(s, k0, k1)

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes, ad: bytes) -> bytes:
        assert len(key) == KEY_LEN and len(nonce) == self.nonce_len
        s, k0, k1 = self._init_state(key, nonce)
        self._absorb_ad(s, ad)

        last = len(ciphertext) % 8
        padded = ciphertext + b"\x00" * (8 - last)
        pt = b""
        for i in range(0, len(padded) - 8, 8):
            ci = _w(padded[i : i + 8])
            pt += _b(s[0] ^ ci)
            s[0] = ci
            ascon_permutation(s, 6)
        ci = _w(padded[-8:])
        pt += _b(s[0] ^ ci)[:last]
        mask = _MASK64 >> (last * 8)
        s[0] = ci ^ (s[0] & mask) ^ (0x80 << ((7 - last) * 8))

        if self._finalize(s, k0, k1) != tag:
            raise AeadAuthError("authentication tag mismatch")
        return pt


_BACKENDS = {cls.name: cls for cls in (AesGcmAead, Ascon128Aead)}


def get_aead(name: str):
    """Look up an AEAD backend by name (``aes-gcm`` or ``ascon128``)."""
    try:
        return _BACKENDS[name]()
    except KeyError:
        raise ValueError(f"unknown AEAD backend {name!r}") from None
