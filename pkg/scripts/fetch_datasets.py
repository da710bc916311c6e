"""Fetch MNIST and CIFAR-10 into the on-disk layout the loaders expect.

Both datasets are pulled from npm packages, for machines where npm is
reachable but the usual dataset hosts are not:

* ``mnist-data`` ships the four original IDX files unchanged.
* ``tfjs-cifar10`` ships each CIFAR-10 batch as one PNG (10000 rows of
  1024 RGB pixels) with labels in JSON; this script rewrites them as the
  canonical 3073-byte binary records (label byte, then R, G, B planes).

Usage::

    python scripts/fetch_datasets.py /path/to/data
    export ADAPTIVE_GAN_DATA=/path/to/data
"""

import argparse
import hashlib
import json
import os
import shutil
import subprocess
import tarfile
import tempfile

import numpy as np
from PIL import Image

MNIST_PACKAGE = "mnist-data@1.2.6"
CIFAR_PACKAGE = "tfjs-cifar10@1.1.1"
MNIST_MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
}


def npm_unpack(package, workdir):
    name = subprocess.run(["npm", "pack", package], cwd=workdir, check=True, capture_output=True,
                          text=True).stdout.strip().splitlines()[-1]
    target = os.path.join(workdir, package.split("@")[0])
    with tarfile.open(os.path.join(workdir, name)) as tar:
        tar.extractall(target)
    return os.path.join(target, "package")


def md5(path):
    with open(path, "rb") as f:
        return hashlib.md5(f.read()).hexdigest()


def fetch_mnist(workdir, out):
    src = os.path.join(npm_unpack(MNIST_PACKAGE, workdir), "data")
    os.makedirs(out, exist_ok=True)
    for name in os.listdir(src):
        shutil.copy(os.path.join(src, name), os.path.join(out, name))
    for name, digest in MNIST_MD5.items():
        if md5(os.path.join(out, name)) != digest:
            raise SystemExit(f"{name}: MD5 mismatch")


def png_to_records(png, labels):
    pixels = np.asarray(Image.open(png).convert("RGB"))  # [10000, 1024, 3]
    planar = pixels.transpose(0, 2, 1).reshape(len(pixels), 3 * 1024)
    return np.concatenate([np.asarray(labels, np.uint8)[:, None], planar], axis=1)


def fetch_cifar(workdir, out):
    src = npm_unpack(CIFAR_PACKAGE, workdir)
    os.makedirs(out, exist_ok=True)
    # the package spells the label files this way
    with open(os.path.join(src, "train_lables.json")) as f:
        train = json.load(f)
    with open(os.path.join(src, "test_lables.json")) as f:
        test = json.load(f)
    for i in range(5):
        png_to_records(os.path.join(src, f"data_batch_{i + 1}.png"),
                       train[i * 10000 : (i + 1) * 10000]).tofile(os.path.join(out, f"data_batch_{i + 1}.bin"))
    png_to_records(os.path.join(src, "test_batch.png"), test).tofile(os.path.join(out, "test_batch.bin"))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root", help="output directory; mnist/ and cifar-10-batches-bin/ are created inside")
    parser.add_argument("--skip-cifar", action="store_true")
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as workdir:
        fetch_mnist(workdir, os.path.join(args.root, "mnist"))
        if not args.skip_cifar:
            fetch_cifar(workdir, os.path.join(args.root, "cifar-10-batches-bin"))
    print(f"datasets ready under {args.root}")


if __name__ == "__main__":
    main()
