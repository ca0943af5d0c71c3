"""Small helpers shared by the storage modules."""

import zlib

BLOCK_SIZE = 4096

ZERO_BLOCK = bytes(BLOCK_SIZE)


def xor_bytes(a: bytes, b: bytes) -> bytes:
    """Bytewise XOR of two equal-length buffers."""
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(n, "little")


def xor_many(blocks) -> bytes:
    """XOR-fold an iterable of equal-length buffers; empty input yields zeros."""
    acc = 0
    n = BLOCK_SIZE
    for blk in blocks:
        n = len(blk)
        acc ^= int.from_bytes(blk, "little")
    return acc.to_bytes(n, "little")


def crc32(data: bytes, value: int = 0) -> int:
    return zlib.crc32(data, value) & 0xFFFFFFFF


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
