"""AES block cipher and a deterministic field codec for sensitive columns.

The state is the usual 4x4 byte matrix stored column-major: byte ``r + 4*c``
sits in row ``r``, column ``c``. Encryption is an initial AddRoundKey, then
``N-1`` full rounds (SubBytes, ShiftRows, MixColumns, AddRoundKey) and a
final round without MixColumns; ``N`` is 10, 12 or 14 for 16, 24 or 32 byte
keys.

The field codec pads with PKCS#7 and encrypts block by block (ECB). It is
deterministic on purpose so encrypted columns support equality lookups; it
is not semantically secure and must not be used as general-purpose
encryption.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .errors import BlockError, PaddingError

BLOCK_SIZE = 16
ROUNDS_BY_KEY_LEN = {16: 10, 24: 12, 32: 14}


def gf_mul(a: int, b: int) -> int:
    """Multiply two elements of GF(2^8) modulo x^8 + x^4 + x^3 + x + 1."""
    result = 0
    while b:
        if b & 1:
            result ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11B
        b >>= 1
    return result


def gf_inverse(a: int) -> int:
    if a == 0:
        return 0
    # a^254 = a^-1 in the multiplicative group of order 255
    result, base, exp = 1, a, 254
    while exp:
        if exp & 1:
            result = gf_mul(result, base)
        base = gf_mul(base, base)
        exp >>= 1
    return result


def _affine(b: int) -> int:
    out = 0x63
    for shift in range(5):
        out ^= ((b << shift) | (b >> (8 - shift))) & 0xFF
    return out


def _build_sbox() -> tuple[bytes, bytes]:
    sbox = bytes(_affine(gf_inverse(x)) for x in range(256))
    inv = bytearray(256)
    for x, y in enumerate(sbox):
        inv[y] = x
    return sbox, bytes(inv)


SBOX, INV_SBOX = _build_sbox()

_MUL = {c: bytes(gf_mul(x, c) for x in range(256)) for c in (2, 3, 9, 11, 13, 14)}
_M2, _M3 = _MUL[2], _MUL[3]
_M9, _M11, _M13, _M14 = _MUL[9], _MUL[11], _MUL[13], _MUL[14]

# ShiftRows as a gather: out[i] = state[_SHIFT[i]]
_SHIFT = tuple(r + 4 * ((c + r) % 4) for c in range(4) for r in range(4))
_INV_SHIFT = tuple(r + 4 * ((c - r) % 4) for c in range(4) for r in range(4))


def sub_bytes(state: bytes) -> bytes:
    return bytes(SBOX[b] for b in state)


def inv_sub_bytes(state: bytes) -> bytes:
    return bytes(INV_SBOX[b] for b in state)


def shift_rows(state: bytes) -> bytes:
    return bytes(state[i] for i in _SHIFT)


def inv_shift_rows(state: bytes) -> bytes:
    return bytes(state[i] for i in _INV_SHIFT)


def mix_column(col: bytes) -> bytes:
    a0, a1, a2, a3 = col
    return bytes((
        _M2[a0] ^ _M3[a1] ^ a2 ^ a3,
        a0 ^ _M2[a1] ^ _M3[a2] ^ a3,
        a0 ^ a1 ^ _M2[a2] ^ _M3[a3],
        _M3[a0] ^ a1 ^ a2 ^ _M2[a3],
    ))


def inv_mix_column(col: bytes) -> bytes:
    a0, a1, a2, a3 = col
    return bytes((
        _M14[a0] ^ _M11[a1] ^ _M13[a2] ^ _M9[a3],
        _M9[a0] ^ _M14[a1] ^ _M11[a2] ^ _M13[a3],
        _M13[a0] ^ _M9[a1] ^ _M14[a2] ^ _M11[a3],
        _M11[a0] ^ _M13[a1] ^ _M9[a2] ^ _M14[a3],
    ))


def mix_columns(state: bytes) -> bytes:
    return b"".join(mix_column(state[4 * c : 4 * c + 4]) for c in range(4))


def inv_mix_columns(state: bytes) -> bytes:
    return b"".join(inv_mix_column(state[4 * c : 4 * c + 4]) for c in range(4))


def add_round_key(state: bytes, round_key: bytes) -> bytes:
    return bytes(s ^ k for s, k in zip(state, round_key))


_RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


@dataclass(frozen=True)
class KeySchedule:
    cipher_key: bytes
    round_keys: tuple[bytes, ...]

    @property
    def rounds(self) -> int:
        return len(self.round_keys) - 1


def expand_key(cipher_key: bytes) -> KeySchedule:
    """Rijndael key expansion into ``rounds + 1`` 16-byte round keys."""
    nk = len(cipher_key) // 4
    if len(cipher_key) not in ROUNDS_BY_KEY_LEN:
        raise BlockError(f"key must be 16, 24 or 32 bytes, got {len(cipher_key)}")
    rounds = ROUNDS_BY_KEY_LEN[len(cipher_key)]
    words = [list(cipher_key[4 * i : 4 * i + 4]) for i in range(nk)]
    for i in range(nk, 4 * (rounds + 1)):
        temp = list(words[i - 1])
        if i % nk == 0:
            temp = temp[1:] + temp[:1]
            temp = [SBOX[b] for b in temp]
            temp[0] ^= _RCON[i // nk - 1]
        elif nk > 6 and i % nk == 4:
            temp = [SBOX[b] for b in temp]
        words.append([a ^ b for a, b in zip(words[i - nk], temp)])
    round_keys = tuple(
        bytes(b for w in words[4 * r : 4 * r + 4] for b in w) for r in range(rounds + 1)
    )
    return KeySchedule(bytes(cipher_key), round_keys)


@lru_cache(maxsize=32)
def _cached_schedule(key: bytes) -> KeySchedule:
    return expand_key(key)


def _check_block(block: bytes) -> None:
    if len(block) != BLOCK_SIZE:
        raise BlockError(f"block must be {BLOCK_SIZE} bytes, got {len(block)}")


def encrypt_block(block: bytes, ks: KeySchedule) -> bytes:
    _check_block(block)
    keys = ks.round_keys
    state = add_round_key(block, keys[0])
    for rnd in range(1, ks.rounds):
        state = add_round_key(mix_columns(shift_rows(sub_bytes(state))), keys[rnd])
    return add_round_key(shift_rows(sub_bytes(state)), keys[ks.rounds])


def decrypt_block(block: bytes, ks: KeySchedule) -> bytes:
    _check_block(block)
    keys = ks.round_keys
    state = inv_sub_bytes(inv_shift_rows(add_round_key(block, keys[ks.rounds])))
    for rnd in range(ks.rounds - 1, 0, -1):
        state = inv_sub_bytes(inv_shift_rows(inv_mix_columns(add_round_key(state, keys[rnd]))))
    return add_round_key(state, keys[0])


def pkcs7_pad(data: bytes) -> bytes:
    pad = BLOCK_SIZE - len(data) % BLOCK_SIZE
    return data + bytes([pad]) * pad


def pkcs7_unpad(data: bytes) -> bytes:
    if not data or len(data) % BLOCK_SIZE:
        raise PaddingError("padded data must be a non-empty multiple of the block size")
    pad = data[-1]
    if not 1 <= pad <= BLOCK_SIZE or data[-pad:] != bytes([pad]) * pad:
        raise PaddingError("invalid padding")
    return data[:-pad]


@dataclass(frozen=True)
class EncryptedField:
    ciphertext: bytes

    def __post_init__(self) -> None:
        if not self.ciphertext or len(self.ciphertext) % BLOCK_SIZE:
            raise BlockError("ciphertext length must be a positive multiple of 16")

    @property
    def hex(self) -> str:
        return self.ciphertext.hex()

    @classmethod
    def from_hex(cls, text: str) -> "EncryptedField":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise BlockError(f"not a hex string: {exc}") from None
        return cls(raw)

    def __str__(self) -> str:
        return self.hex


def encode_field(plaintext: str, key: bytes) -> EncryptedField:
    if not plaintext:
        raise ValueError("cannot encrypt an empty field")
    ks = _cached_schedule(bytes(key))
    data = pkcs7_pad(plaintext.encode("utf-8"))
    return EncryptedField(
        b"".join(encrypt_block(data[i : i + BLOCK_SIZE], ks) for i in range(0, len(data), BLOCK_SIZE))
    )


def decode_field(field: EncryptedField | str, key: bytes) -> str:
    if isinstance(field, str):
        field = EncryptedField.from_hex(field)
    ks = _cached_schedule(bytes(key))
    data = field.ciphertext
    plain = b"".join(
        decrypt_block(data[i : i + BLOCK_SIZE], ks) for i in range(0, len(data), BLOCK_SIZE)
    )
    try:
        return pkcs7_unpad(plain).decode("utf-8")
    except UnicodeDecodeError:
        raise PaddingError("decrypted bytes are not valid UTF-8") from None
