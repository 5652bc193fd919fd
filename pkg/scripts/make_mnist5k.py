"""Write the 5,000-image MNIST sample bundled in the mlxtend wheel as gzipped IDX files.

Usage: python scripts/make_mnist5k.py path/to/mlxtend-*.whl data/mnist5k

Rows are grouped by class, so the 4,000 train / 1,000 test split uses a
fixed permutation.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from binfreeze.data import encode_idx_images, encode_idx_labels

N_TRAIN = 4000
SPLIT_SEED = 5000


def main(wheel, out):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    arr = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    arr = arr[np.random.default_rng(SPLIT_SEED).permutation(len(arr))]
    labels, pixels = arr[:, -1], arr[:, :-1].reshape(-1, 28, 28)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, sl in (("train", slice(0, N_TRAIN)), ("t10k", slice(N_TRAIN, None))):
        # mtime=0 keeps the archives byte-stable
        for suffix, blob in ((f"{prefix}-images-idx3-ubyte.gz", encode_idx_images(pixels[sl])),
                             (f"{prefix}-labels-idx1-ubyte.gz", encode_idx_labels(labels[sl]))):
            (out / suffix).write_bytes(gzip.compress(blob, mtime=0))
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
