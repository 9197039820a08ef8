#!/usr/bin/env python3
"""Convert the digit subset shipped by the `mnist` npm package into IDX files.

The package stores ~1000 digits per class as 784-float vectors (pixel/255,
rounded to three decimals).  This writes train/test IDX pairs laid out like
the original distribution so the C++ loaders consume them unchanged.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_json_to_idx.py package/src/digits data/mnist
"""

import argparse
import json
import pathlib
import random
import struct


def write_idx(out_dir, prefix, samples):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(samples)))
    for label, pixels in samples:
        images.extend(pixels)
        labels.append(label)
    (out_dir / f"{prefix}-images-idx3-ubyte").write_bytes(images)
    (out_dir / f"{prefix}-labels-idx1-ubyte").write_bytes(labels)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=pathlib.Path)
    parser.add_argument("out_dir", type=pathlib.Path)
    parser.add_argument("--train-fraction", type=float, default=0.8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    train, test = [], []
    for digit in range(10):
        flat = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"{digit}.json: length {len(flat)} is not a multiple of 784")
        images = [
            bytes(min(255, max(0, round(v * 255))) for v in flat[i:i + 784])
            for i in range(0, len(flat), 784)
        ]
        cut = int(len(images) * args.train_fraction)
        train += [(digit, img) for img in images[:cut]]
        test += [(digit, img) for img in images[cut:]]

    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir, "train", train)
    write_idx(args.out_dir, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
