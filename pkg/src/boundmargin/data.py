"""Labeled/unlabeled dataset construction, noise generation and IDX ingestion."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import container
from .errors import ConfigError, ContractError, FormatError
from .rng import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_PAD = 2
DEFAULT_MU_SAMPLE_CAP = 2000
MIN_NEIGHBOR_DISTANCE = 1e-12


@dataclass
class LabeledSet:
    points: np.ndarray
    labels: np.ndarray
    class_count: int
    normalization: dict | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.points.shape[0]} points but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def point_shape(self) -> tuple[int, ...]:
        return tuple(self.points.shape[1:])

    def subset(self, index) -> "LabeledSet":
        return LabeledSet(self.points[index], self.labels[index], self.class_count, self.normalization)


@dataclass
class UnlabeledSet:
    points: np.ndarray
    source: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NoiseConfig:
    sigma_u: float
    sigma_b: float
    n_u: int = 1
    n_b: int = 1

    def __post_init__(self):
        if not self.sigma_u > 0 or not self.sigma_b > 0:
            raise ConfigError("sigma_u and sigma_b must be positive")
        if self.n_u < 0 or self.n_b < 1:
            raise ConfigError("need n_u >= 0 and n_b >= 1")

    def scaled(self, multiplier: float) -> "NoiseConfig":
        return NoiseConfig(self.sigma_u * multiplier, self.sigma_b * multiplier, self.n_u, self.n_b)

    def to_dict(self) -> dict:
        return {"sigma_u": self.sigma_u, "sigma_b": self.sigma_b, "n_u": self.n_u, "n_b": self.n_b}


@dataclass(frozen=True)
class Entry:
    point: np.ndarray
    labeled: bool
    _label: int

    @property
    def label(self) -> int:
        if not self.labeled:
            raise ContractError("unlabeled entries carry no label")
        return self._label


@dataclass
class CombinedDataset:
    """Labeled points first, then generated unlabeled points (``labels == -1``)."""

    points: np.ndarray
    labeled: np.ndarray
    labels: np.ndarray
    class_count: int

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, k: int) -> Entry:
        return Entry(self.points[k], bool(self.labeled[k]), int(self.labels[k]))

    @property
    def point_shape(self) -> tuple[int, ...]:
        return tuple(self.points.shape[1:])


# -- noise scale -----------------------------------------------------------------

def mu_pair(points, sample_cap: int = DEFAULT_MU_SAMPLE_CAP, rng: RngStream | None = None) -> float:
    """Mean pairwise Euclidean distance, over a random subset above ``sample_cap`` points."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.shape[0] < 2:
        raise ConfigError("mu_pair needs at least two points")
    flat = pts.reshape(pts.shape[0], -1)
    if flat.shape[0] > sample_cap:
        rng = rng if rng is not None else RngStream(0, "mu_pair")
        flat = flat[np.sort(rng.choice(flat.shape[0], sample_cap))]
    return float(pdist(flat).mean())


def derive_sigmas(mu: float) -> tuple[float, float]:
    """Unlabeled-noise scale is three times ``mu``; neighbor noise is a tenth of that."""
    if not mu > 0:
        raise ConfigError(f"mu must be positive, got {mu}")
    sigma_u = 3.0 * mu
    return sigma_u, sigma_u / 10.0


# -- generators --------------------------------------------------------------------

def gen_unlabeled(X: LabeledSet, cfg: NoiseConfig, rng: RngStream) -> UnlabeledSet:
    n_l = len(X)
    shape = X.point_shape
    if cfg.n_u == 0:
        return UnlabeledSet(np.zeros((0, *shape)), np.zeros(0, dtype=np.int64), {"noise": cfg.to_dict()})
    noise = rng.normal((n_l, cfg.n_u, *shape)) * cfg.sigma_u
    points = (X.points[:, None] + noise).reshape(n_l * cfg.n_u, *shape)
    source = np.repeat(np.arange(n_l, dtype=np.int64), cfg.n_u)
    return UnlabeledSet(points, source, {"noise": cfg.to_dict(), "seed": rng.seed, "tag": rng.tag})


def gen_neighbors(psi, cfg: NoiseConfig, rng: RngStream, sigma: float | None = None) -> np.ndarray:
    """``cfg.n_b`` Gaussian neighbors of one point at scale ``sigma_b``; shape ``n_b x shape``."""
    sigma = cfg.sigma_b if sigma is None else sigma
    psi = np.asarray(psi, dtype=np.float64)
    return gen_neighbor_batch(psi[None], cfg.n_b, sigma, rng)[0]


def gen_neighbor_batch(centers: np.ndarray, n_b: int, sigma: float, rng: RngStream) -> np.ndarray:
    """Neighbors for a batch of centers: result shape ``G x n_b x shape``."""
    centers = np.asarray(centers, dtype=np.float64)
    g = centers.shape[0]
    offsets = rng.normal((g, n_b, *centers.shape[1:])) * sigma
    flat = offsets.reshape(g * n_b, -1)
    dist = np.sqrt((flat**2).sum(axis=1))
    while (dist < MIN_NEIGHBOR_DISTANCE).any():
        bad = np.flatnonzero(dist < MIN_NEIGHBOR_DISTANCE)
        flat[bad] = rng.normal((bad.size, flat.shape[1])) * sigma
        dist = np.sqrt((flat**2).sum(axis=1))
    return centers[:, None] + flat.reshape(offsets.shape)


def assemble(X: LabeledSet, U: UnlabeledSet) -> CombinedDataset:
    if len(U) and tuple(U.points.shape[1:]) != X.point_shape:
        raise ConfigError(f"unlabeled shape {U.points.shape[1:]} differs from labeled {X.point_shape}")
    points = np.concatenate([X.points, U.points.reshape(len(U), *X.point_shape)])
    labeled = np.concatenate([np.ones(len(X), dtype=bool), np.zeros(len(U), dtype=bool)])
    labels = np.concatenate([X.labels, -np.ones(len(U), dtype=np.int64)])
    return CombinedDataset(points, labeled, labels, X.class_count)


DEFAULT_2D_CLUSTERS = (
    {"center": (-1.0, 0.0), "stdev": 0.25, "count": 100, "label": 0},
    {"center": (1.0, 0.0), "stdev": 0.25, "count": 100, "label": 1},
)


def gen_2d_points(clusters=DEFAULT_2D_CLUSTERS, seed: int = 0) -> LabeledSet:
    clusters = [dict(c) for c in clusters]
    if len(clusters) < 2 or len({int(c["label"]) for c in clusters}) < 2:
        raise ConfigError("need at least two clusters covering two labels")
    rng = RngStream(seed, "points2d")
    pts, labels = [], []
    for c in clusters:
        count = int(c["count"])
        pts.append(np.asarray(c["center"], dtype=np.float64) + rng.normal((count, 2)) * float(c["stdev"]))
        labels.append(np.full(count, int(c["label"]), dtype=np.int64))
    labels = np.concatenate(labels)
    return LabeledSet(np.concatenate(pts), labels, int(labels.max()) + 1)


# -- IDX ---------------------------------------------------------------------------

def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX files are supported")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims, dtype=np.int64)):
        raise FormatError(f"{path}: payload is {len(body)} bytes, header declares {dims}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    container.atomic_write_bytes(path, header + array.tobytes())


def preprocess_images(raw: np.ndarray, stats: dict | None = None) -> tuple[np.ndarray, dict]:
    """Zero-pad 28x28 to 32x32, scale to [0, 1], standardize with global mean/stdev.

    ``stats`` (``{"mean", "std", "pad"}``) reuses training-set statistics;
    when omitted they are computed from ``raw`` itself.
    """
    pad = MNIST_PAD if stats is None else int(stats.get("pad", MNIST_PAD))
    imgs = np.asarray(raw, dtype=np.float64) / 255.0
    if pad:
        imgs = np.pad(imgs, ((0, 0), (pad, pad), (pad, pad)))
    if stats is None:
        std = float(imgs.std())
        stats = {"mean": float(imgs.mean()), "std": std if std > 0 else 1.0, "pad": pad}
    imgs = (imgs - stats["mean"]) / stats["std"]
    return imgs[:, None], stats


def balanced_indices(labels: np.ndarray, per_class: int, rng: RngStream) -> np.ndarray:
    """First ``per_class`` indices of each class in a seeded shuffle, returned sorted."""
    order = rng.permutation(labels.shape[0])
    taken: dict[int, list[int]] = {}
    for idx in order:
        bucket = taken.setdefault(int(labels[idx]), [])
        if len(bucket) < per_class:
            bucket.append(int(idx))
    short = {c: len(v) for c, v in taken.items() if len(v) < per_class}
    if short:
        raise ConfigError(f"not enough examples for a balanced subset of {per_class}: {short}")
    return np.sort(np.concatenate([np.asarray(v, dtype=np.int64) for v in taken.values()]))


def load_mnist(
    images_path,
    labels_path,
    subset_per_class: int | None = None,
    seed: int = 0,
    stats: dict | None = None,
    class_count: int = 10,
) -> LabeledSet:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    points, stats = preprocess_images(images, stats)
    data = LabeledSet(points, labels, class_count, stats)
    if subset_per_class is not None:
        data = data.subset(balanced_indices(labels, int(subset_per_class), RngStream(seed, "subset")))
    return data


# -- cached tensors on disk ------------------------------------------------------------

DATASET_SUFFIX = ".bmds"


def save_labeled(path, X: LabeledSet, config: dict | None = None) -> None:
    manifest = {
        "format_version": 1,
        "kind": "labeled",
        "dtype": "f64le",
        "shape": list(X.point_shape),
        "count": len(X),
        "class_count": X.class_count,
        "normalization": X.normalization,
        "config": config or {},
    }
    container.write(path, manifest, [("points", X.points), ("labels", X.labels)])


def load_labeled(path) -> LabeledSet:
    manifest, arrays = container.read(path)
    if manifest.get("kind") != "labeled" or manifest.get("format_version") != 1:
        raise FormatError(f"{path}: not a labeled dataset cache")
    if "points" not in arrays or "labels" not in arrays:
        raise FormatError(f"{path}: missing points or labels")
    points = arrays["points"]
    if list(points.shape[1:]) != manifest["shape"] or points.shape[0] != manifest["count"]:
        raise FormatError(f"{path}: points do not match the declared shape")
    return LabeledSet(points, arrays["labels"], int(manifest["class_count"]), manifest.get("normalization"))


def save_unlabeled(path, U: UnlabeledSet, shape, config: dict | None = None) -> None:
    manifest = {
        "format_version": 1,
        "kind": "unlabeled",
        "dtype": "f64le",
        "shape": list(shape),
        "count": len(U),
        "config": config if config is not None else U.config,
    }
    container.write(path, manifest, [("points", U.points.reshape(len(U), *shape))])


def load_external_unlabeled(path, expected_shape=None) -> UnlabeledSet:
    """Import unlabeled points from a manifest-plus-blob file.

    A zero-length file is accepted as an empty set.
    """
    raw = Path(path).read_bytes()
    if not raw:
        shape = tuple(expected_shape or ())
        return UnlabeledSet(np.zeros((0, *shape)))
    manifest, arrays = container.decode(raw)
    if manifest.get("format_version") != 1 or manifest.get("dtype") != "f64le":
        raise FormatError(f"{path}: unsupported unlabeled container")
    shape = tuple(manifest.get("shape", ()))
    count = int(manifest.get("count", -1))
    points = arrays.get("points", np.zeros((0, *shape)))
    if points.shape != (count, *shape):
        raise FormatError(f"{path}: blob holds {points.shape}, manifest declares {(count, *shape)}")
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise FormatError(f"{path}: point shape {shape} does not match labeled shape {tuple(expected_shape)}")
    return UnlabeledSet(points, config=manifest.get("config", {}))
