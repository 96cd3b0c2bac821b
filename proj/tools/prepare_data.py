#!/usr/bin/env python3
"""Convert locally available dataset packages into the on-disk formats the
loaders read (IDX for MNIST, 3073-byte records for CIFAR-10).

  prepare_data.py mnist-npm <package_dir> <out_dir> [--test-fraction 0.2]
  prepare_data.py cifar-npm <package_dir> <out_dir>

mnist-npm reads the `mnist` npm package (10k digits stored as JSON floats in
src/digits/<d>.json) and writes train/t10k IDX files with a per-class split.
"""
import argparse
import json
import os
import random
import struct
import sys


def write_idx(images, labels, rows, cols, img_path, lbl_path):
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for im in images:
            f.write(bytes(im))
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def mnist_npm(pkg, out, test_fraction, seed):
    train, test = [], []
    for d in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{d}.json")) as f:
            flat = json.load(f)["data"]
        if len(flat) % 784:
            sys.exit(f"digit {d}: {len(flat)} values is not a multiple of 784")
        samples = [
            [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            for i in range(0, len(flat), 784)
        ]
        n_test = round(len(samples) * test_fraction)
        train += [(s, d) for s in samples[: len(samples) - n_test]]
        test += [(s, d) for s in samples[len(samples) - n_test :]]
    rng = random.Random(seed)
    rng.shuffle(train)
    rng.shuffle(test)
    os.makedirs(out, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx(
            [r[0] for r in rows],
            [r[1] for r in rows],
            28,
            28,
            os.path.join(out, f"{name}-images-idx3-ubyte"),
            os.path.join(out, f"{name}-labels-idx1-ubyte"),
        )
        print(f"{name}: {len(rows)} samples")


def cifar_npm(pkg, out):
    # tfjs-cifar10 ships the canonical binary batches under data/.
    found = []
    for root, _, files in os.walk(pkg):
        for f in files:
            if f.endswith(".bin") and ("data_batch" in f or "test_batch" in f):
                found.append(os.path.join(root, f))
    if not found:
        sys.exit(f"no CIFAR-10 .bin batches under {pkg}")
    os.makedirs(out, exist_ok=True)
    for path in sorted(found):
        size = os.path.getsize(path)
        if size % 3073:
            sys.exit(f"{path}: {size} bytes is not a multiple of 3073")
        dst = os.path.join(out, os.path.basename(path))
        with open(path, "rb") as src, open(dst, "wb") as d:
            d.write(src.read())
        print(f"{dst}: {size // 3073} records")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=["mnist-npm", "cifar-npm"])
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    if a.kind == "mnist-npm":
        mnist_npm(a.package_dir, a.out_dir, a.test_fraction, a.seed)
    else:
        cifar_npm(a.package_dir, a.out_dir)


if __name__ == "__main__":
    main()
