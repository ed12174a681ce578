#!/usr/bin/env python3
"""Writes the preprocessing fixture and its golden frame.

The golden frame comes from a direct area-average computed in exact rational
arithmetic: each output cell is the mean of the grayscale image over the
rectangle it covers, with fractional coverage at cell borders.
"""
import struct
import sys
from fractions import Fraction
from pathlib import Path

H, W, OUT = 210, 160, 84


def fixture():
    # Gradients, a few solid blocks and LCG noise, so every channel matters.
    state = 2024
    px = bytearray()
    for y in range(H):
        for x in range(W):
            state = (state * 1103515245 + 12345) % (1 << 31)
            noise = (state >> 16) & 0x3F
            r = (x * 255) // (W - 1)
            g = (y * 255) // (H - 1)
            b = ((x + y) * 3 + noise) % 256
            if 40 <= y < 90 and 20 <= x < 70:
                r, g, b = 201, 30, 90
            if 150 <= y < 200 and 100 <= x < 150:
                r, g, b = 10, 240, 240
            px += bytes((r, g, b))
    return bytes(px)


def coverage(in_n, out_n, o):
    # Overlap of input cell i with output cell o, in units where input cells
    # have length out_n and output cells have length in_n.
    lo, hi = in_n * o, in_n * (o + 1)
    return [(i, min(hi, out_n * (i + 1)) - max(lo, out_n * i))
            for i in range(in_n) if min(hi, out_n * (i + 1)) > max(lo, out_n * i)]


def golden(px):
    wr, wg, wb = Fraction(299, 1000), Fraction(587, 1000), Fraction(114, 1000)
    gray = [[wr * px[3 * (y * W + x)] + wg * px[3 * (y * W + x) + 1] + wb * px[3 * (y * W + x) + 2]
             for x in range(W)] for y in range(H)]
    rows = [coverage(H, OUT, o) for o in range(OUT)]
    cols = [coverage(W, OUT, o) for o in range(OUT)]
    frame = []
    for oy in range(OUT):
        for ox in range(OUT):
            acc = sum(ry * cx * gray[y][x] for y, ry in rows[oy] for x, cx in cols[ox])
            frame.append(acc / (H * W * 255))
    return frame


def main(out_dir):
    out = Path(out_dir)
    px = fixture()
    (out / "fixture_210x160x3.ppm").write_bytes(b"P6\n%d %d\n255\n" % (W, H) + px)
    frame = golden(px)
    quantized = bytearray()
    for v in frame:
        scaled = v * 255
        q = int(scaled + Fraction(1, 2))
        if abs(scaled - int(scaled) - Fraction(1, 2)) < Fraction(1, 10**6):
            sys.exit("fixture puts a cell on a rounding boundary; change the fixture")
        quantized.append(q)
    (out / "golden_84x84.pgm").write_bytes(b"P5\n%d %d\n255\n" % (OUT, OUT) + bytes(quantized))
    (out / "golden_84x84.f64").write_bytes(b"".join(struct.pack("<d", float(v)) for v in frame))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent)
