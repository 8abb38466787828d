#!/usr/bin/env python3
"""Fetch handwritten digit images and store them as gzipped IDX files.

The digits come from the `mnist` npm package (10,000 MNIST images stored as
JSON arrays of 28x28 intensities in [0, 1]). They are quantized to uint8 and
written as the standard IDX3/IDX1 pair that `lcbm toy-mnist` reads.

    tools/fetch_digits.py [--out data/digits] [--tarball mnist-1.1.0.tgz]
"""
import argparse
import gzip
import hashlib
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
TARBALL_SHA256 = "3fb5bb119c556ae7d1aa647653ca603a1b3abf001aae410732cc55d923c5a390"


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_tarball(workdir):
    out = subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir,
                         check=True, capture_output=True, text=True)
    return os.path.join(workdir, out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/digits")
    ap.add_argument("--tarball", help="use a local mnist-*.tgz instead of npm")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.tarball or fetch_tarball(tmp)
        if sha256(tgz) != TARBALL_SHA256:
            sys.exit("checksum mismatch for %s" % tgz)
        images, labels = [], []
        with tarfile.open(tgz) as tar:
            for digit in range(10):
                member = tar.getmember("package/src/digits/%d.json" % digit)
                data = json.load(tar.extractfile(member))["data"]
                if len(data) % 784:
                    sys.exit("digit %d: payload is not a multiple of 784" % digit)
                for i in range(len(data) // 784):
                    px = data[i * 784:(i + 1) * 784]
                    images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
                    labels.append(digit)

    n = len(images)
    img_path = os.path.join(args.out, "digits-images-idx3-ubyte.gz")
    lbl_path = os.path.join(args.out, "digits-labels-idx1-ubyte.gz")
    # mtime=0 keeps the gzip bytes reproducible
    with open(img_path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for im in images:
            f.write(im)
    with open(lbl_path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))

    sums = {os.path.basename(p): sha256(p) for p in (img_path, lbl_path)}
    with open(os.path.join(args.out, "SHA256SUMS"), "w") as f:
        for name in sorted(sums):
            f.write("%s  %s\n" % (sums[name], name))
    print("wrote %d digits to %s" % (n, args.out))


if __name__ == "__main__":
    main()
