#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package (v1.1.0) into
gzip-compressed IDX files.

The package stores 10,000 MNIST digits as per-class JSON arrays of floats in
[0, 1] (3 decimals). Samples are rounded back to uint8, interleaved with a
fixed-seed shuffle and split into a "train" and a "t10k" file pair.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_npm_to_idx.py package/src/digits data/mnist --test 2000
"""
import argparse
import gzip
import json
import random
import struct
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20200101)
    args = ap.parse_args()

    items = []
    for label in range(10):
        data = json.loads((args.digits_dir / f"{label}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            items.append((px, label))
    random.Random(args.seed).shuffle(items)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": items[:-args.test], "t10k": items[-args.test:]}
    for name, rows in splits.items():
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", 0x803, [len(rows), 28, 28],
                  [p for px, _ in rows for p in px])
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)],
                  [lab for _, lab in rows])
        print(name, len(rows))


if __name__ == "__main__":
    main()
