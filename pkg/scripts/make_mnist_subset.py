"""Write IDX files from the 5000-digit MNIST sample shipped inside mlxtend.

Produces train-images-idx3-ubyte / train-labels-idx1-ubyte (4000 digits) and
t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte (1000 digits) in OUT_DIR, so
the toy training preset can run where the official files are unavailable.

    python scripts/make_mnist_subset.py data/mnist-subset
"""

import sys
from pathlib import Path

from resfri.data import mnist_sample_from_mlxtend, write_mnist_idx


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (tr_x, tr_y), (te_x, te_y) = mnist_sample_from_mlxtend()
    write_mnist_idx(tr_x, tr_y, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    write_mnist_idx(te_x, te_y, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte")
    print(f"wrote {len(tr_y)} train / {len(te_y)} test digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-subset")
