#!/usr/bin/env python3
"""Independent NumPy rendering of the MNIST Large Scale pipeline, used to
freeze golden pixels for the C++ tests.

    python3 tests/oracles/large_scale_golden.py data/mnist/train-images-idx3-ubyte.gz
"""
import gzip
import math
import sys

import numpy as np


def catmull_rom(t):
    t = abs(t)
    a = -0.5
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def resample_matrix(n_in, n_out, s):
    """Rows: output samples; zero extension outside the source."""
    m = np.zeros((n_out, n_in))
    c_in, c_out = (n_in - 1) / 2, (n_out - 1) / 2
    for o in range(n_out):
        pos = (o - c_out) / s + c_in
        base = math.floor(pos)
        for k in range(base - 1, base + 3):
            if 0 <= k < n_in:
                m[o, k] += catmull_rom(pos - k)
    return m


def smooth_matrix(n, sigma):
    r = max(1, math.ceil(4 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    m = np.zeros((n, n))
    for x in range(n):
        for u in range(-r, r + 1):
            i = x - u
            i = i % (2 * n)
            if i >= n:
                i = 2 * n - 1 - i
            m[x, i] += k[u + r]
    return m


def render(digit, s, canvas=112):
    n = 2 * math.ceil(14 * s)
    R = resample_matrix(28, n, s)
    img = np.clip(R @ digit @ R.T, 0, 256)
    out = np.zeros((canvas, canvas))
    off = (canvas - n) // 2 if canvas >= n else -((n - canvas) // 2)
    for y in range(canvas):
        for x in range(canvas):
            sy, sx = y - off, x - off
            if 0 <= sy < n and 0 <= sx < n:
                out[y, x] = img[sy, sx]
    S = smooth_matrix(canvas, 7 * s / 8)
    out = S @ out @ S.T
    out = np.clip(out, 0, 256) * 255 / 256
    return 2 / math.pi * np.arctan(0.02 * (out - 128))


def main():
    raw = gzip.open(sys.argv[1]).read()
    digits = np.frombuffer(raw[16:16 + 3 * 784], dtype=np.uint8).reshape(3, 28, 28).astype(float)
    points = [(55, 55), (50, 60), (40, 70), (20, 30), (0, 0)]
    for d in range(3):
        for s in (0.5, 1.0, 2.0 ** 1.5, 8.0):
            img = render(digits[d], s)
            vals = ", ".join(f"{img[y, x]:.12f}" for x, y in points)
            print(f"{{{d}, {s!r}, {{{vals}}}}},")


if __name__ == "__main__":
    main()
