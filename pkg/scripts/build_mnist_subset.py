"""Convert the 5k-sample MNIST subset bundled in the mlxtend wheel to IDX files.

Usage: python scripts/build_mnist_subset.py path/to/mlxtend-*.whl data/mnist5k

Writes gzip-compressed IDX files with the standard MNIST names. The first
4000 rows (after a class-stratified split) become the train split, the rest
the test split.
"""

import gzip
import pathlib
import struct
import sys
import zipfile

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, array):
    codes = {1: 0x08}
    header = struct.pack(">HBB", 0, codes[array.itemsize], array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main(wheel, out_dir):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(raw.decode().splitlines(), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    # every fifth sample of each class goes to test
    test = np.zeros(len(labels), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        test[idx[::5]] = True

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, sel in (("train", ~test), ("t10k", test)):
        write_idx(out / f"{split}-images-idx3-ubyte.gz", images[sel])
        write_idx(out / f"{split}-labels-idx1-ubyte.gz", labels[sel])
        print(split, int(sel.sum()))


if __name__ == "__main__":
    main(*sys.argv[1:3])
