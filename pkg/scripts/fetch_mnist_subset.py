"""Build a small real-MNIST IDX pool when the official files are unreachable.

The mlxtend wheel on PyPI ships 5000 MNIST digits as CSV. This script pulls
the wheel with pip, converts the CSV to IDX and writes

    <out>/mnist5k-images-idx3-ubyte
    <out>/mnist5k-labels-idx1-ubyte

Point $BLINDAT_MNIST at <out> afterwards. If you have the official files,
put them in that directory instead; they take precedence.
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from blindat.data import MNIST_FILES, Dataset, write_idx

WHEEL = "mlxtend==0.24.0"
MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist", help="output directory")
    ap.add_argument("--wheel", help="use a local mlxtend wheel instead of downloading")
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL], check=True
            )
            wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    im, lb = MNIST_FILES["pool"]
    write_idx(Dataset(images / 255.0, labels), out / im, out / lb)
    print(f"wrote {len(labels)} digits to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
