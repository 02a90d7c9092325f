#!/usr/bin/env python3
"""Build an IDX-format MNIST directory from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel
intensities rounded to three decimals; each value is mapped back to its
original byte (round(v * 255) is exact at that precision). The last
`--test-per-class` digits of every class go to the test split, the rest
to the train split.

Usage:
    python3 scripts/prepare_mnist.py [--out data] [--package-dir DIR]

Without --package-dir the package is fetched with `npm pack mnist@1.1.0`.
Output layout: <out>/mnist/{train,test}-{images,labels}.idx
"""

import argparse
import json
import os
import struct
import subprocess
import tarfile
import tempfile

ROWS = COLS = 28


def load_digits(package_dir):
    digits = []
    for label in range(10):
        path = os.path.join(package_dir, "src", "digits", f"{label}.json")
        with open(path) as fh:
            flat = json.load(fh)["data"]
        count = len(flat) // (ROWS * COLS)
        images = []
        for i in range(count):
            chunk = flat[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            images.append(bytes(int(round(v * 255.0)) for v in chunk))
        digits.append(images)
    return digits


def write_idx_images(path, images):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), ROWS, COLS))
        for img in images:
            fh.write(img)


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


def interleave(per_class):
    # round-robin over classes so files are not sorted by label
    out = []
    longest = max(len(v) for v in per_class)
    for i in range(longest):
        for label, items in enumerate(per_class):
            if i < len(items):
                out.append((items[i], label))
    return out


def fetch_package(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    tgz = [f for f in os.listdir(workdir) if f.endswith(".tgz")][0]
    with tarfile.open(os.path.join(workdir, tgz)) as tar:
        tar.extractall(workdir)
    return os.path.join(workdir, "package")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data")
    parser.add_argument("--package-dir", default=None)
    parser.add_argument("--test-per-class", type=int, default=200)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        package_dir = args.package_dir or fetch_package(tmp)
        digits = load_digits(package_dir)

    train = interleave([imgs[:-args.test_per_class] for imgs in digits])
    test = interleave([imgs[-args.test_per_class:] for imgs in digits])

    out_dir = os.path.join(args.out, "mnist")
    os.makedirs(out_dir, exist_ok=True)
    for split, rows in (("train", train), ("test", test)):
        write_idx_images(os.path.join(out_dir, f"{split}-images.idx"), [r[0] for r in rows])
        write_idx_labels(os.path.join(out_dir, f"{split}-labels.idx"), [r[1] for r in rows])
        print(f"{split}: {len(rows)} samples")


if __name__ == "__main__":
    main()
