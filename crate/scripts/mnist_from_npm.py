#!/usr/bin/env python3
"""Rebuild the bundled MNIST IDX files from the `mnist` npm package.

The package ships 10,000 MNIST digits as JSON (pixel bytes divided by 255 and
rounded to three decimals). This script restores the bytes, shuffles with a
fixed seed and writes an 8000/2000 train/test split in gzipped IDX format.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import pathlib
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(header + payload)


def main(src, dst):
    src, dst = pathlib.Path(src), pathlib.Path(dst)
    images, labels = [], []
    for digit in range(10):
        doc = json.loads((src / f"{digit}.json").read_text())
        data = np.asarray(doc["data"], dtype=np.float64).reshape(-1, 784)
        images.append(np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(len(data), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(20240601).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_train = 8000
    dst.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        imgs, labs = images[sl], labels[sl]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(imgs), 28, 28), imgs.tobytes())
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(labs),), labs.tobytes())
        print(name, len(labs), np.bincount(labs, minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
