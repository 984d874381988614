#!/usr/bin/env python3
"""Download the CIFAR-10 binary batches, verify checksum, extract.

Usage: python scripts/fetch_cifar10.py [--out data/cifar10]
"""

import argparse
import hashlib
import io
import os
import sys
import tarfile
import urllib.request

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
MD5 = "c32a1d4ab5d03f1284b67883e8d87530"

WANTED = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/cifar10")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if all(os.path.exists(os.path.join(args.out, n)) for n in WANTED):
        print("all batch files already present, nothing to do")
        return
    print(f"downloading {URL} (~162 MB)")
    blob = urllib.request.urlopen(URL, timeout=300).read()
    digest = hashlib.md5(blob).hexdigest()
    if digest != MD5:
        raise SystemExit(f"checksum mismatch: {digest} != {MD5}")
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for member in tar.getmembers():
            base = os.path.basename(member.name)
            if base in WANTED:
                with open(os.path.join(args.out, base), "wb") as f:
                    f.write(tar.extractfile(member).read())
                print(f"wrote {os.path.join(args.out, base)}")
    print(f"done; train with: bnn train --model densenet:k=64,b=2 "
          f"--dataset cifar10 --data-dir {args.out} --augment")


if __name__ == "__main__":
    sys.exit(main())
