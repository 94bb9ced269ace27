"""Convert mlxtend's bundled 5000-sample MNIST CSV into IDX files.

The CSV has 784 pixel columns followed by the label.  Output goes to
data/mnist5k/ as gzipped IDX, which is what the harness configs point at.

    pip install mlxtend   # only needed for this one-off conversion
    python scripts/make_mnist_fixture.py [--csv path/to/mnist_5k.csv.gz]
"""

import argparse
import gzip
from pathlib import Path

import numpy as np

from robustlab.data import load_mnist_idx, write_mnist_idx


def default_csv() -> Path:
    import mlxtend.data
    return Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--csv", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "mnist5k")
    args = ap.parse_args()
    csv = args.csv or default_csv()
    with gzip.open(csv, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    assert pixels.min() >= 0 and pixels.max() <= 255 and pixels.shape[1] == 784
    args.out.mkdir(parents=True, exist_ok=True)
    img, lab = args.out / "images-idx3-ubyte.gz", args.out / "labels-idx1-ubyte.gz"
    write_mnist_idx(img, lab, pixels.astype(np.uint8).reshape(-1, 28, 28), labels)
    ds = load_mnist_idx(img, lab)
    print(f"wrote {len(ds)} images to {args.out}; class counts {np.bincount(ds.labels).tolist()}")


if __name__ == "__main__":
    main()
