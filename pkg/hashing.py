from __future__ import annotations

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes, seed: int = FNV64_OFFSET_BASIS) -> int:
    """64-bit FNV-1a. ``seed`` replaces the offset basis for independent hash families."""
    h = seed & _MASK64
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


class Fnv1a64:
    """Incremental FNV-1a, for checksumming a file section line by line."""

    def __init__(self, seed: int = FNV64_OFFSET_BASIS) -> None:
        self._h = seed & _MASK64

    def update(self, data: bytes) -> None:
        h = self._h
        for byte in data:
            h ^= byte
            h = (h * FNV64_PRIME) & _MASK64
        self._h = h

    def digest(self) -> int:
        return self._h

    def hexdigest(self) -> str:
        return f"{self._h:016x}"


def text_hash(text: str) -> str:
    return f"{fnv1a_64(text.encode('utf-8')):016x}"
