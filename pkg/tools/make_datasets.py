"""Write the IDX files used by the MNIST experiments and tests.

Digits come from the 5000-image MNIST sample bundled with ``mlxtend``
(500 per class). The first ``--train-per-class`` images of each class form
the training split and the rest form the test split. The foreign set is
built from 28x28 grayscale patches cut out of the ``scikit-image`` sample
pictures, so it contains no digits at all.

    python3 tools/make_datasets.py --out data
"""

from __future__ import annotations

import argparse
import gzip
from pathlib import Path

import numpy as np

from boundmargin.data import write_idx

FOREIGN_SOURCES = ("camera", "coins", "moon", "text", "page", "brick", "grass", "gravel", "clock", "horse")


def mnist_sample() -> tuple[np.ndarray, np.ndarray]:
    import mlxtend

    path = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def split(images, labels, train_per_class: int):
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train.append(idx[:train_per_class])
        test.append(idx[train_per_class:])
    train, test = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return (images[train], labels[train]), (images[test], labels[test])


def foreign_patches(count: int, seed: int = 0) -> np.ndarray:
    from skimage import data as skdata
    from skimage.color import rgb2gray
    from skimage.transform import resize

    rng = np.random.default_rng(seed)
    pictures = []
    for name in FOREIGN_SOURCES:
        img = getattr(skdata, name)()
        if img.ndim == 3:
            img = rgb2gray(img[..., :3])
        img = np.asarray(img, dtype=np.float64)
        pictures.append(img / img.max() if img.max() > 1 else img)
    out = np.empty((count, 28, 28), dtype=np.uint8)
    for k in range(count):
        pic = pictures[k % len(pictures)]
        side = int(rng.integers(28, min(pic.shape[:2]) // 2))
        r = int(rng.integers(0, pic.shape[0] - side))
        c = int(rng.integers(0, pic.shape[1] - side))
        patch = resize(pic[r : r + side, c : c + side], (28, 28), anti_aliasing=True)
        out[k] = np.clip(np.rint(patch * 255), 0, 255).astype(np.uint8)
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--train-per-class", type=int, default=300)
    ap.add_argument("--foreign-count", type=int, default=500)
    args = ap.parse_args(argv)

    out = Path(args.out)
    (out / "mnist").mkdir(parents=True, exist_ok=True)
    (out / "foreign").mkdir(parents=True, exist_ok=True)
    (tr_x, tr_y), (te_x, te_y) = split(*mnist_sample(), args.train_per_class)
    write_idx(out / "mnist" / "train-images-idx3-ubyte", tr_x)
    write_idx(out / "mnist" / "train-labels-idx1-ubyte", tr_y)
    write_idx(out / "mnist" / "t10k-images-idx3-ubyte", te_x)
    write_idx(out / "mnist" / "t10k-labels-idx1-ubyte", te_y)
    write_idx(out / "foreign" / "images-idx3-ubyte", foreign_patches(args.foreign_count))
    print(f"train {len(tr_y)}  test {len(te_y)}  foreign {args.foreign_count}  -> {out}")


if __name__ == "__main__":
    main()
