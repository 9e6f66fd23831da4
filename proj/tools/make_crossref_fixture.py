#!/usr/bin/env python3
"""Writes tests/fixtures/crossref_gauss.cted from an independent
SplitMix64 + Box-Muller implementation, so the C++ tensor loader and RNG
can be checked against a second language."""

import math
import struct
import sys
from pathlib import Path

MASK = (1 << 64) - 1


def splitmix64(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield (z ^ (z >> 31)) & MASK


def gaussians(seed, count):
    gen = splitmix64(seed)
    out = []
    while len(out) < count:
        u1 = ((next(gen) >> 11) + 0.5) * 2.0 ** -53
        u2 = ((next(gen) >> 11) + 0.5) * 2.0 ** -53
        r = math.sqrt(-2.0 * math.log(u1))
        out.append(r * math.cos(2.0 * math.pi * u2))
        if len(out) < count:
            out.append(r * math.sin(2.0 * math.pi * u2))
    return out


def write_cted(path, dims, values):
    with open(path, "wb") as f:
        f.write(b"CTED")
        f.write(struct.pack("<II", 1, len(dims)))
        for d in dims:
            f.write(struct.pack("<Q", d))
        f.write(struct.pack(f"<{len(values)}f", *values))


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests/fixtures/crossref_gauss.cted"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cted(out, (4, 8), gaussians(0, 32))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
