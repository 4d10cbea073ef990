#!/usr/bin/env python3
"""Rebuild Fashion-MNIST IDX files from the `fashion-mnist` npm package.

The npm package ships the 70,000 images as per-class JSON arrays of raw
0..255 pixels without the official train/test split. This script takes the
first 6,000 images of each class as the training split and the remaining
1,000 as the test split, shuffles each split with a fixed seed, and writes
the four standard gzip'd IDX files plus a `manifest.txt` of SHA-256 sums.

usage: fmnist_from_npm.py <package/src/clothes dir> <out dir> [--subset TRAIN EVAL]
"""
import gzip
import hashlib
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, out = sys.argv[1], sys.argv[2]
    subset = None
    if "--subset" in sys.argv:
        i = sys.argv.index("--subset")
        subset = (int(sys.argv[i + 1]), int(sys.argv[i + 2]))
    train, test = [], []
    for label in range(10):
        with open(os.path.join(src, f"{label}.json")) as f:
            rows = json.load(f)["data"]
        train += [(r, label) for r in rows[:6000]]
        test += [(r, label) for r in rows[6000:7000]]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    if subset:
        train, test = train[: subset[0]], test[: subset[1]]
    os.makedirs(out, exist_ok=True)
    for prefix, split in (("train", train), ("t10k", test)):
        pixels = bytes(p for row, _ in split for p in row)
        labels = bytes(l for _, l in split)
        write_idx(os.path.join(out, f"{prefix}-images-idx3-ubyte.gz"), 0x803, (len(split), 28, 28), pixels)
        write_idx(os.path.join(out, f"{prefix}-labels-idx1-ubyte.gz"), 0x801, (len(split),), labels)
    with open(os.path.join(out, "manifest.txt"), "w") as m:
        for name in sorted(os.listdir(out)):
            if not name.endswith(".gz"):
                continue
            data = open(os.path.join(out, name), "rb").read()
            m.write(f"file={name} sha256={hashlib.sha256(data).hexdigest()} bytes={len(data)}\n")


if __name__ == "__main__":
    main()
