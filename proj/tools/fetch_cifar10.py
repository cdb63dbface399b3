#!/usr/bin/env python3
"""Builds the CIFAR-10 binary batches (data_batch_{1..5}.bin, test_batch.bin).

Source is the npm package tfjs-cifar10, which ships each batch as a
1024 x 10000 RGB PNG (one image per row, pixels row-major) plus JSON label
lists. Output records are the standard 3073-byte layout: label byte, then
the red, green and blue 32x32 planes.

    python3 tools/fetch_cifar10.py data/cifar-10-batches-bin
"""
import argparse
import hashlib
import io
import json
import tarfile
import urllib.request
from pathlib import Path

import numpy as np
from PIL import Image

TARBALL = "https://registry.npmjs.org/tfjs-cifar10/-/tfjs-cifar10-1.1.1.tgz"


def convert(png: bytes, labels: list[int]) -> bytes:
    pixels = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"), dtype=np.uint8)
    if pixels.shape != (len(labels), 1024, 3):
        raise SystemExit(f"unexpected image shape {pixels.shape}")
    planes = pixels.transpose(0, 2, 1).reshape(len(labels), 3072)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    return records.tobytes()


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("out", type=Path)
    parser.add_argument("--tarball", help="local copy of the npm tarball instead of downloading")
    args = parser.parse_args()

    data = Path(args.tarball).read_bytes() if args.tarball else urllib.request.urlopen(TARBALL).read()
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:gz") as tar:
        read = lambda name: tar.extractfile(f"package/{name}").read()
        train_labels = json.loads(read("train_lables.json"))
        test_labels = json.loads(read("test_lables.json"))
        args.out.mkdir(parents=True, exist_ok=True)
        batches = [(f"data_batch_{k}", train_labels[(k - 1) * 10000 : k * 10000]) for k in range(1, 6)]
        batches.append(("test_batch", test_labels))
        for name, labels in batches:
            blob = convert(read(f"{name}.png"), labels)
            (args.out / f"{name}.bin").write_bytes(blob)
            print(f"{hashlib.sha256(blob).hexdigest()}  {name}.bin")


if __name__ == "__main__":
    main()
