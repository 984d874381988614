#!/usr/bin/env python3
"""Download the four MNIST IDX files, verify checksums, decompress.

Usage: python scripts/fetch_mnist.py [--out data/mnist]
"""

import argparse
import gzip
import hashlib
import os
import sys
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

FILES = {
    # name -> md5 of the .gz archive
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}


def fetch(name, md5, out_dir):
    target = os.path.join(out_dir, name[:-3])
    if os.path.exists(target):
        print(f"{target} already present, skipping")
        return
    last_err = None
    for mirror in MIRRORS:
        url = mirror + name
        try:
            print(f"downloading {url}")
            blob = urllib.request.urlopen(url, timeout=60).read()
        except OSError as exc:
            last_err = exc
            continue
        digest = hashlib.md5(blob).hexdigest()
        if digest != md5:
            last_err = ValueError(
                f"{name}: checksum mismatch ({digest} != {md5})"
            )
            continue
        with open(target, "wb") as f:
            f.write(gzip.decompress(blob))
        print(f"wrote {target}")
        return
    raise SystemExit(f"could not fetch {name}: {last_err}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name, md5 in FILES.items():
        fetch(name, md5, args.out)
    print(f"done; train with: bnn train --model lenet --dataset mnist "
          f"--data-dir {args.out}")


if __name__ == "__main__":
    sys.exit(main())
