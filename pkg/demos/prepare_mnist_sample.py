"""Build a small MNIST stand-in from the 5,000-digit sample shipped in mlxtend.

Full MNIST is the intended input for ``qrkd train-teacher``/``qrkd distill``.
When it cannot be fetched, this script writes a real (but smaller) MNIST
sample in the same IDX layout, so the whole pipeline runs unchanged:

    python demos/prepare_mnist_sample.py data/mnist_sample
    qrkd train-teacher --mnist-dir data/mnist_sample --train-size 4000 --test-size 1000 --seeds 1..5
    qrkd distill       --mnist-dir data/mnist_sample --train-size 4000 --test-size 1000 --seeds 1..5

The sample has 500 digits per class. It is split 4,000/1,000, stratified.
The CSV is read out of the mlxtend wheel; mlxtend itself is never imported.
"""
from __future__ import annotations

import argparse
import gzip
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from qrkd.data import LabeledDataset, save_mnist_idx, subset

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_csv(workdir: Path) -> bytes:
    """Download the mlxtend wheel (no dependencies) and pull out the CSV."""
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-q",
                    "-d", str(workdir)], check=True)
    wheel = next(workdir.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        return zf.read(MEMBER)


def parse_csv(blob: bytes) -> LabeledDataset:
    # 784 pixel columns then the label
    table = np.loadtxt(gzip.decompress(blob).decode().splitlines(), delimiter=",")
    images = table[:, :-1].reshape(-1, 1, 28, 28) / 255.0
    return LabeledDataset(images, table[:, -1].astype(np.int64))


def split(full: LabeledDataset, n_test: int, seed: int):
    test = subset(full, n_test, seed)
    # subset() draws without replacement, so recover the complement by content
    taken = {row.tobytes() for row in test.images.reshape(len(test), -1)}
    keep = np.array([img.tobytes() not in taken for img in full.images.reshape(len(full), -1)])
    train = full.take(np.flatnonzero(keep))
    return train, test


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir", nargs="?", default="data/mnist_sample")
    p.add_argument("--csv", help="use an existing mnist_5k.csv.gz instead of downloading")
    p.add_argument("--test", type=int, default=1000, help="test split size")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    if args.csv:
        blob = Path(args.csv).read_bytes()
    else:
        with tempfile.TemporaryDirectory() as tmp:
            blob = fetch_csv(Path(tmp))
    full = parse_csv(blob)
    train, test = split(full, args.test, args.seed)
    out = Path(args.out_dir)
    save_mnist_idx(train, out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz")
    save_mnist_idx(test, out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz")
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")
    print("train per class:", np.bincount(train.labels).tolist())
    return 0


if __name__ == "__main__":
    sys.exit(main())
