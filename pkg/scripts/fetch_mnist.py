#!/usr/bin/env python3
"""Download the four MNIST IDX files into a directory for use via FPKIT_DATA.

    python scripts/fetch_mnist.py ~/data/mnist
    export FPKIT_DATA=~/data/mnist

Without these files fpkit falls back to the 5,000-image subset shipped with mlxtend.
"""

import argparse
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def fetch(name: str, dest: Path) -> None:
    errors = []
    for base in MIRRORS:
        try:
            with urllib.request.urlopen(base + name, timeout=60) as resp:
                dest.write_bytes(resp.read())
            return
        except OSError as exc:
            errors.append(f"{base}: {exc}")
    raise OSError(f"could not fetch {name}:\n  " + "\n  ".join(errors))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("directory", type=Path)
    args = parser.parse_args(argv)
    args.directory.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        dest = args.directory / name
        if dest.exists():
            print(f"have {dest}")
            continue
        try:
            fetch(name, dest)
        except OSError as exc:
            print(exc, file=sys.stderr)
            return 1
        print(f"wrote {dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
