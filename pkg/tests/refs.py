"""Pure-python reference for the record format and key checksum, written
from the documented layout; shares no code with the package kernels."""

M64 = (1 << 64) - 1


def ref_mix(x):
    x = (x + 0x9E3779B97F4A7C15) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def ref_record(seed, row):
    """Pure-python record for (seed, row), written from the layout alone."""
    base = ref_mix(seed)
    key = bytearray()
    for half in range(2):
        h = ref_mix((base + 2 * row + half) & M64)
        for _ in range(5):
            key.append(32 + h % 95)
            h //= 95
    filler = bytes(65 + (row + m) % 26 for m in range(48))
    return bytes(key) + b"\x00\x11" + b"%032X" % row + b"\x88\x99\xaa\xbb" + filler + b"\xcc\xdd\xee\xff"


def ref_checksum(records):
    total = 0
    for rec in records:
        h = 0xCBF29CE484222325
        for b in rec[:10]:
            h = ((h ^ b) * 0x100000001B3) & M64
        total = (total + ref_mix(h)) & M64
    return total
