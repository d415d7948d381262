"""Command-line driver: ``boundmargin <command> --config exp.json --out runs/``.

Every command reads one JSON experiment config and writes its results under
the output directory. Commands talk to each other only through those files:
``gen`` writes dataset caches, ``train`` reads them and writes checkpoints,
``attack``, ``surface`` and ``uuc`` read checkpoints, and ``report`` gathers
whatever is present into one summary with figures.

Exit codes: 0 success, 1 configuration error, 2 aborted run, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as A
from . import container
from . import data as D
from . import model as M
from . import train as TR
from .errors import ConfigError, ContractError, DimensionError, FormatError, NonFiniteError, TrainingAborted
from .rng import RngStream

log = logging.getLogger("boundmargin")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3
FORMAT_VERSION = 1
COMMANDS = ("gen", "train", "attack", "surface", "sigma-sweep", "uuc", "report")
DEFAULT_MULTIPLIERS = (0.1, 0.5, 1.0, 1.5, 2.0, 3.0)


# -- configuration ------------------------------------------------------------------

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(container.canonical_json(cfg).encode()).hexdigest()[:16]


@dataclass
class Experiment:
    """A parsed experiment config plus the output directory it writes to."""

    raw: dict
    out: Path
    seeds: list[int]
    threads: int = 1
    hash: str = field(init=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.hash = config_hash(self.raw)

    # sections
    @property
    def dataset(self) -> dict:
        return dict(self.raw.get("dataset", {"kind": "2d"}))

    @property
    def model(self) -> dict:
        return dict(self.raw.get("model", {"kind": "mlp", "widths": [2, 8, 8, 2], "activation": "tanh"}))

    @property
    def train(self) -> dict:
        return dict(self.raw.get("train", {}))

    @property
    def attacks(self) -> list[dict]:
        return [dict(a) for a in self.raw.get("attacks", [])]

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    # paths
    def data_dir(self) -> Path:
        return self.out / "data"

    def run_dir(self, seed: int) -> Path:
        return self.out / "runs" / f"seed-{seed}"

    def final_checkpoint(self, seed: int) -> Path:
        return self.run_dir(seed) / "model.bmck"

    def stamp(self, seed: int | None = None) -> dict:
        return {"config_hash": self.hash, "seed": seed}


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def parse_seeds(values) -> list[int]:
    seeds = []
    for v in values or []:
        for part in str(v).split(","):
            if part.strip():
                seed = int(part)
                if not 0 <= seed < 2**64:
                    raise ConfigError(f"seed {seed} is not a u64")
                seeds.append(seed)
    return seeds


def thread_count(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("BM_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"BM_THREADS={env!r} is not an integer") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def check_paths(exp: Experiment) -> None:
    """Fail fast on input files named in the config that do not exist."""
    ds = exp.dataset
    keys = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if k in ds]
    if ds.get("kind") == "idx":
        missing = [k for k in ("train_images", "train_labels") if k not in ds]
        if missing:
            raise ConfigError(f"idx dataset needs {missing}")
    named = [ds[k] for k in keys]
    if "images" in exp.section("uuc"):
        named.append(exp.section("uuc")["images"])
    for p in named:
        if not Path(p).exists():
            raise ConfigError(f"referenced file {p} does not exist")


def fan_out(exp: Experiment, fn, items):
    """Run ``fn`` over ``items``, in a worker pool when threads > 1; results keep item order."""
    items = list(items)
    if exp.threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=exp.threads) as pool:
        return list(pool.map(fn, items))


# -- output helpers ---------------------------------------------------------------

def write_json(path: Path, obj: dict) -> None:
    container.atomic_write_text(path, json.dumps({"format_version": FORMAT_VERSION, **obj}, indent=2, sort_keys=True) + "\n")


def csv_text(header, rows, stamp: dict) -> str:
    """CSV with a leading ``#`` line carrying the config hash and seed."""
    buf = io.StringIO()
    buf.write(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "boundmargin"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def save_svg(fig, path: Path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    container.atomic_write_text(path, buf.getvalue())


# -- datasets -----------------------------------------------------------------------

def build_labeled(exp: Experiment) -> tuple[D.LabeledSet, D.LabeledSet | None]:
    ds = exp.dataset
    kind = ds.get("kind", "2d")
    seed = int(ds.get("seed", 0))
    if kind == "2d":
        train = D.gen_2d_points(ds.get("clusters", D.DEFAULT_2D_CLUSTERS), seed)
        return train, None
    if kind == "idx":
        train = D.load_mnist(ds["train_images"], ds["train_labels"], ds.get("subset_per_class"), seed, None, int(ds.get("class_count", 10)))
        test = None
        if "test_images" in ds:
            test = D.load_mnist(ds["test_images"], ds["test_labels"], None, seed, train.normalization, train.class_count)
            if ds.get("test_per_class"):
                test = test.subset(D.balanced_indices(test.labels, int(ds["test_per_class"]), RngStream(seed, "test-subset")))
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


def noise_config(exp: Experiment, train: D.LabeledSet, multiplier: float = 1.0) -> D.NoiseConfig:
    nz = exp.section("noise")
    su, sb = nz.get("sigma_u"), nz.get("sigma_b")
    if su is None or sb is None:
        mu = D.mu_pair(train, int(nz.get("mu_sample_cap", D.DEFAULT_MU_SAMPLE_CAP)), RngStream(int(exp.dataset.get("seed", 0)), "mu_pair"))
        auto_u, auto_b = D.derive_sigmas(mu)
        su = auto_u if su is None else su
        sb = auto_b if sb is None else sb
    base = D.NoiseConfig(float(su), float(sb), int(nz.get("n_u", 1)), int(nz.get("n_b", 1)))
    return base.scaled(multiplier) if multiplier != 1.0 else base


def _unlabeled_path(exp: Experiment, seed: int) -> Path:
    return exp.data_dir() / f"unlabeled-seed-{seed}{D.DATASET_SUFFIX}"


def cmd_gen(exp: Experiment) -> dict:
    train, test = build_labeled(exp)
    noise = noise_config(exp, train)
    meta = {**exp.stamp(int(exp.dataset.get("seed", 0))), "noise": noise.to_dict()}
    D.save_labeled(exp.data_dir() / f"train{D.DATASET_SUFFIX}", train, meta)
    if test is not None:
        D.save_labeled(exp.data_dir() / f"test{D.DATASET_SUFFIX}", test, meta)
    written = []
    for seed in exp.seeds:
        if noise.n_u == 0:
            continue
        U = D.gen_unlabeled(train, noise, RngStream(seed, "unlabeled"))
        D.save_unlabeled(_unlabeled_path(exp, seed), U, train.point_shape, {**exp.stamp(seed), "noise": noise.to_dict()})
        written.append(seed)
    write_json(exp.data_dir() / "gen.json", {**exp.stamp(), "noise": noise.to_dict(), "train_count": len(train),
                                             "test_count": len(test) if test is not None else 0, "unlabeled_seeds": written})
    return {"train": len(train), "noise": noise.to_dict()}


def load_caches(exp: Experiment, seed: int) -> tuple[D.LabeledSet, D.LabeledSet | None, D.UnlabeledSet, D.NoiseConfig]:
    train_path = exp.data_dir() / f"train{D.DATASET_SUFFIX}"
    if not train_path.exists():
        raise ConfigError(f"{train_path} is missing; run `gen` first")
    manifest, _ = container.read(train_path)
    noise = D.NoiseConfig(**manifest["config"]["noise"])
    train = D.load_labeled(train_path)
    test_path = exp.data_dir() / f"test{D.DATASET_SUFFIX}"
    test = D.load_labeled(test_path) if test_path.exists() else None
    if noise.n_u:
        upath = _unlabeled_path(exp, seed)
        if not upath.exists():
            raise ConfigError(f"{upath} is missing; run `gen` with seed {seed}")
        U = D.load_external_unlabeled(upath, train.point_shape)
    else:
        U = D.UnlabeledSet(np.zeros((0, *train.point_shape)))
    return train, test, U, noise


# -- models and training ------------------------------------------------------------

def build_model(exp: Experiment, seed: int, input_shape, class_count: int) -> M.Model:
    mc = exp.model
    kind = mc.get("kind", "mlp")
    if kind == "mlp":
        widths = list(mc.get("widths", [2, 8, 8, 2]))
        model = M.build_mlp(widths, mc.get("activation", "tanh"), seed)
    elif kind == "lenet":
        model = M.build_lenet(tuple(mc.get("input_shape", input_shape)), mc.get("activation", "relu"), seed)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    if tuple(model.spec.input_shape) != tuple(input_shape):
        raise ConfigError(f"model input {model.spec.input_shape} does not match data {tuple(input_shape)}")
    if model.spec.class_count != class_count:
        raise ConfigError(f"model has {model.spec.class_count} outputs, data has {class_count} classes")
    return model


def train_config(exp: Experiment, seed: int, noise: D.NoiseConfig) -> TR.TrainConfig:
    d = exp.train
    d.pop("checkpoint_every", None)
    d["seed"] = seed
    d["noise"] = noise.to_dict()
    try:
        return TR.TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def _epoch_path(exp: Experiment, seed: int, epoch: int) -> Path:
    return exp.run_dir(seed) / f"epoch-{epoch:04d}{M.CHECKPOINT_SUFFIX}"


def _latest_resumable(exp: Experiment, seed: int, epochs: int):
    for epoch in range(epochs, 0, -1):
        path = _epoch_path(exp, seed, epoch)
        if path.exists():
            ck = M.load_checkpoint(path)
            if ck.manifest["metadata"].get("config_hash") == exp.hash:
                return ck
    return None


def train_seed(exp: Experiment, seed: int, multiplier: float = 1.0, run_dir: Path | None = None) -> tuple[M.Model, TR.TrainLog]:
    """Train one seed, resuming from the newest epoch checkpoint in ``run_dir`` if any."""
    train, _, U, noise = load_caches(exp, seed)
    if multiplier != 1.0:
        noise = noise.scaled(multiplier)
        U = D.gen_unlabeled(train, noise, RngStream(seed, "unlabeled"))
    cfg = train_config(exp, seed, noise)
    every = int(exp.train.get("checkpoint_every", 1))
    dataset = D.assemble(train, U)
    model = build_model(exp, seed, train.point_shape, train.class_count)
    previous: list[dict] = []
    state = None
    ck = _latest_resumable(exp, seed, cfg.epochs) if run_dir is None else None
    if ck is not None:
        model = ck.model
        model.metadata = {}
        state = TR.TrainState(int(ck.manifest["metadata"]["epoch"]), TR.optimizer_state_from_arrays(ck.extras))
        previous = ck.manifest["metadata"]["records"]
        log.info("seed %d: resuming after epoch %d", seed, state.epoch)
    model.metadata["normalization"] = train.normalization
    records = list(previous)

    def on_epoch(m, st, train_log):
        records.append(train_log.records[-1].to_dict())
        if run_dir is None and (st.epoch % every == 0 or st.epoch == cfg.epochs):
            meta = {**exp.stamp(seed), "epoch": st.epoch, "records": records}
            M.save(m, _epoch_path(exp, seed, st.epoch), meta, TR.optimizer_state_arrays(st.optimizer))

    if state is None or state.epoch < cfg.epochs:
        model, train_log = TR.fit(model, dataset, None, cfg, state=state, on_epoch=on_epoch)
    else:
        train_log = TR.TrainLog(cfg.to_dict(), metadata=TR.run_metadata(cfg))
    train_log.records = [TR.EpochRecord(**{("lam" if k == "lambda" else k): v for k, v in r.items()}) for r in records]
    return model, train_log


def cmd_train(exp: Experiment) -> dict:
    def one(seed):
        model, train_log = train_seed(exp, seed)
        meta = {**exp.stamp(seed), **train_log.metadata, "epochs": len(train_log.records)}
        M.save(model, exp.final_checkpoint(seed), meta)
        container.atomic_write_text(exp.run_dir(seed) / "log.jsonl", train_log.to_jsonl())
        last = train_log.records[-1]
        return {"seed": seed, "train_accuracy": last.train_accuracy, "sup": last.sup, "reg": last.reg}

    return {"runs": fan_out(exp, one, exp.seeds)}


def load_final(exp: Experiment, seed: int) -> M.Model:
    path = exp.final_checkpoint(seed)
    if not path.exists():
        raise ConfigError(f"{path} is missing; run `train` for seed {seed}")
    return M.load(path)


def eval_set(exp: Experiment) -> D.LabeledSet:
    test_path = exp.data_dir() / f"test{D.DATASET_SUFFIX}"
    path = test_path if test_path.exists() else exp.data_dir() / f"train{D.DATASET_SUFFIX}"
    if not path.exists():
        raise ConfigError(f"{path} is missing; run `gen` first")
    return D.load_labeled(path)


# -- attacks ------------------------------------------------------------------------

def aggregate(reports: list[A.RobustnessReport]) -> list[tuple[float, float, float, int]]:
    """Per-epsilon mean and standard error of robust accuracy across seeds."""
    eps = reports[0].epsilons
    rows = []
    for i, e in enumerate(eps):
        vals = np.array([r.robust_accuracy[i] for r in reports])
        # centering on the first value keeps identical inputs exact (zero spread, mean unchanged)
        dev = vals - vals[0]
        se = float(dev.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append((float(e), float(vals[0] + dev.mean()), se, len(vals)))
    return rows


def attack_seed(exp: Experiment, seed: int, spec: dict, points: D.LabeledSet) -> A.RobustnessReport:
    model = load_final(exp, seed)
    if tuple(model.spec.input_shape) != points.point_shape:
        raise ConfigError(f"model input {model.spec.input_shape} does not match data {points.point_shape}")
    spec = dict(spec)
    epsilons = [float(e) for e in spec.pop("epsilons", [spec.get("epsilon", 0.1)])]
    cfg = A.AttackConfig.from_dict(spec)
    report = A.robust_accuracy(model, points, cfg, epsilons, RngStream(seed, f"attack/{cfg.kind}"))
    if cfg.kind == "deepfool" and cfg.deepfool_norm == "l2":
        det = A.rho_adv_details(model, points.points, cfg)
        report.rho_adv = det["rho_adv"]
        report.rho_skipped = det["skipped"]
        report.l2_delta = [float(v) for v in det["l2_delta"]]
        report.rel_rho = [float(v) if np.isfinite(v) else None for v in det["rel_rho"]]
    report.metadata.update(exp.stamp(seed))
    return report


def _attack_name(spec: dict) -> str:
    kind = spec.get("kind", "fgsm")
    return f"{kind}-{spec['deepfool_norm']}" if kind == "deepfool" and "deepfool_norm" in spec else kind


def cmd_attack(exp: Experiment) -> dict:
    if not exp.attacks:
        raise ConfigError("config has no attacks")
    points = eval_set(exp)
    limit = exp.section("evaluation").get("points")
    if limit:
        points = points.subset(np.arange(min(int(limit), len(points))))
    out = exp.out / "reports"
    summary = {}
    for spec in exp.attacks:
        name = _attack_name(spec)
        reports = fan_out(exp, lambda s: attack_seed(exp, s, spec, points), exp.seeds)
        for seed, rep in zip(exp.seeds, reports):
            container.atomic_write_text(out / f"{name}-seed-{seed}.json", rep.to_json())
            if rep.l2_delta:
                container.atomic_write_text(
                    out / f"{name}-seed-{seed}-samples.csv",
                    csv_text(["sample_index", "l2_delta", "rel_rho"],
                             [(i, d, r if r is not None else "nan") for i, (d, r) in enumerate(zip(rep.l2_delta, rep.rel_rho))],
                             exp.stamp(seed)),
                )
        rows = aggregate(reports)
        container.atomic_write_text(out / f"{name}-aggregate.csv",
                                    csv_text(["epsilon", "mean_robust_acc", "stderr", "n_seeds"], rows, exp.stamp(exp.seeds)))
        summary[name] = {
            "aggregate": rows,
            "clean_accuracy": [r.clean_accuracy for r in reports],
            "rho_adv": [r.rho_adv for r in reports],
        }
    write_json(out / "attack.json", {**exp.stamp(exp.seeds), "attacks": summary})
    return summary


# -- SoftMax surface ----------------------------------------------------------------

def surface_grid(model: M.Model, x_range, y_range, resolution, klass: int = 0) -> np.ndarray:
    """Rows of ``(x, y, score)`` with ``score`` the SoftMax output for ``klass``."""
    if tuple(model.spec.input_shape) != (2,):
        raise ConfigError(f"surface needs a 2-D input model, got input shape {model.spec.input_shape}")
    nx, ny = (int(r) for r in resolution)
    if nx < 1 or ny < 1:
        raise ConfigError("surface resolution must be positive")
    xs = np.linspace(float(x_range[0]), float(x_range[1]), nx)
    ys = np.linspace(float(y_range[0]), float(y_range[1]), ny)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return np.column_stack([pts, model.predict(pts)[:, klass]])


def render_surface(grid: np.ndarray, resolution, points: D.LabeledSet | None, title: str):
    plt = _matplotlib()
    nx, ny = (int(r) for r in resolution)
    fig, ax = plt.subplots(figsize=(5, 5))
    gx, gy, z = (grid[:, i].reshape(ny, nx) for i in range(3))
    levels = np.linspace(0.0, 1.0, 11)
    filled = ax.contourf(gx, gy, z, levels=levels, cmap="coolwarm")
    ax.contour(gx, gy, z, levels=levels[1:-1], colors="k", linewidths=0.4)
    if points is not None:
        for c, marker in zip(range(points.class_count), "os^v<>"):
            sel = points.labels == c
            ax.scatter(points.points[sel, 0], points.points[sel, 1], s=6, marker=marker, c="k", label=f"class {c}")
        ax.legend(loc="upper right", fontsize=7)
    fig.colorbar(filled, ax=ax, label="SoftMax score")
    ax.set_title(title, fontsize=9)
    ax.set_xlim(gx.min(), gx.max())
    ax.set_ylim(gy.min(), gy.max())
    return fig


def cmd_surface(exp: Experiment) -> dict:
    sc = exp.section("surface")
    x_range = sc.get("x_range", [-3.0, 3.0])
    y_range = sc.get("y_range", [-3.0, 3.0])
    resolution = sc.get("resolution", [200, 200])
    klass = int(sc.get("class", 0))
    train_path = exp.data_dir() / f"train{D.DATASET_SUFFIX}"
    points = D.load_labeled(train_path) if train_path.exists() else None
    plt = _matplotlib()
    out = exp.out / "surface"
    result = {}
    for seed in exp.seeds:
        model = load_final(exp, seed)
        grid = surface_grid(model, x_range, y_range, resolution, klass)
        container.atomic_write_text(out / f"seed-{seed}.csv", csv_text(["x", "y", "score"], grid.tolist(), exp.stamp(seed)))
        fig = render_surface(grid, resolution, points, f"class-{klass} score, seed {seed}, config {exp.hash}")
        save_svg(fig, out / f"seed-{seed}.svg")
        plt.close(fig)
        result[seed] = {"cells": int(grid.shape[0]), "min": float(grid[:, 2].min()), "max": float(grid[:, 2].max())}
    return result


# -- sigma sweep --------------------------------------------------------------------

def cmd_sigma_sweep(exp: Experiment) -> dict:
    sw = exp.section("sigma_sweep")
    multipliers = [float(m) for m in sw.get("multipliers", DEFAULT_MULTIPLIERS)]
    if not multipliers or min(multipliers) <= 0:
        raise ConfigError("multipliers must be positive")
    points = eval_set(exp)
    limit = exp.section("evaluation").get("points")
    if limit:
        points = points.subset(np.arange(min(int(limit), len(points))))
    rows = []
    for mult in multipliers:
        def one(seed, mult=mult):
            model, _ = train_seed(exp, seed, mult, run_dir=exp.out / "sweep")
            return A.rho_adv(model, points.points), TR.accuracy(model, points)

        res = fan_out(exp, one, exp.seeds)
        _, _, _, noise = load_caches(exp, exp.seeds[0])
        scaled = noise.scaled(mult)
        rows.append((mult, scaled.sigma_u, scaled.sigma_b, float(np.mean([r[0] for r in res])),
                     float(np.mean([r[1] for r in res])), len(res)))
    header = ["multiplier", "sigma_u", "sigma_b", "rho_adv", "test_accuracy", "n_seeds"]
    container.atomic_write_text(exp.out / "sweep" / "sigma-sweep.csv", csv_text(header, rows, exp.stamp(exp.seeds)))
    return {"rows": rows}


# -- unseen-class confidence --------------------------------------------------------

def uuc_table(model: M.Model, images: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class mean SoftMax output over ``images`` and the stdev across those means."""
    if tuple(images.shape[1:]) != tuple(model.spec.input_shape):
        raise ConfigError(f"foreign images {images.shape[1:]} do not match model input {model.spec.input_shape}")
    means = model.predict(images).mean(axis=0)
    return means, float(means.std())


def foreign_images(path, model: M.Model) -> np.ndarray:
    raw = D.read_idx(path, D.IDX_IMAGES_MAGIC)
    stats = model.metadata.get("normalization")
    if not stats:
        raise ConfigError("checkpoint carries no input normalization; cannot preprocess foreign images")
    images, _ = D.preprocess_images(raw, stats)
    return images


def cmd_uuc(exp: Experiment) -> dict:
    uc = exp.section("uuc")
    if "images" not in uc:
        raise ConfigError("uuc section needs an `images` path")
    out = exp.out / "uuc"
    result = {}
    for seed in exp.seeds:
        model = load_final(exp, seed)
        means, std = uuc_table(model, foreign_images(uc["images"], model))
        rows = [(c, float(m)) for c, m in enumerate(means)]
        container.atomic_write_text(out / f"seed-{seed}.csv", csv_text(["class", "mean_prediction"], rows, exp.stamp(seed)))
        write_json(out / f"seed-{seed}.json", {**exp.stamp(seed), "class_means": means.tolist(), "std_across_classes": std})
        result[seed] = {"class_means": means.tolist(), "std_across_classes": std}
    return result


# -- report -------------------------------------------------------------------------

def _section(title: str, body: str) -> str:
    return f"===== {title} =====\n{body.rstrip()}\n===== end {title} =====\n"


def cmd_report(exp: Experiment) -> dict:
    plt = _matplotlib()
    out = exp.out / "report"
    parts, found = [], {}
    agg_files = sorted((exp.out / "reports").glob("*-aggregate.csv"))
    if agg_files:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for path in agg_files:
            name = path.name[: -len("-aggregate.csv")]
            rows = read_csv(path)
            eps = [float(r["epsilon"]) for r in rows]
            mean = [float(r["mean_robust_acc"]) for r in rows]
            se = [float(r["stderr"]) for r in rows]
            ax.errorbar(eps, mean, yerr=se, marker="o", ms=3, capsize=2, label=name)
            found[name] = rows
            parts.append(_section(f"robust accuracy {name}", path.read_text()))
        ax.set_xlabel("epsilon")
        ax.set_ylabel("robust accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        save_svg(fig, out / "robust-accuracy.svg")
        plt.close(fig)
    sweep = exp.out / "sweep" / "sigma-sweep.csv"
    if sweep.exists():
        rows = read_csv(sweep)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([float(r["multiplier"]) for r in rows], [float(r["rho_adv"]) for r in rows], marker="o")
        ax.set_xlabel("sigma multiplier")
        ax.set_ylabel("rho_adv")
        fig.tight_layout()
        save_svg(fig, out / "sigma-sweep.svg")
        plt.close(fig)
        found["sigma_sweep"] = rows
        parts.append(_section("sigma sweep", sweep.read_text()))
    uuc = sorted((exp.out / "uuc").glob("seed-*.json"))
    if uuc:
        lines = ["seed,std_across_classes"]
        for path in uuc:
            d = json.loads(path.read_text())
            lines.append(f"{d['seed']},{d['std_across_classes']!r}")
        found["uuc"] = lines[1:]
        parts.append(_section("uuc", "\n".join(lines)))
    logs = sorted((exp.out / "runs").glob("seed-*/log.jsonl"))
    if logs:
        lines = ["seed,epochs,final_sup,final_reg,train_accuracy"]
        for path in logs:
            recs = [json.loads(x) for x in path.read_text().splitlines() if x]
            last = recs[-1]
            lines.append(f"{path.parent.name[5:]},{len(recs)},{last['sup']!r},{last['reg']!r},{last['train_accuracy']!r}")
        found["training"] = lines[1:]
        parts.append(_section("training", "\n".join(lines)))
    if not parts:
        raise ConfigError(f"nothing to report under {exp.out}")
    text = f"# config_hash={exp.hash}\n" + "".join(parts)
    container.atomic_write_text(out / "report.txt", text)
    write_json(out / "report.json", {**exp.stamp(exp.seeds), "sections": found})
    sys.stdout.write(text)
    return found


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "attack": cmd_attack,
    "surface": cmd_surface,
    "sigma-sweep": cmd_sigma_sweep,
    "uuc": cmd_uuc,
    "report": cmd_report,
}


# -- entry point --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors, so they exit with 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="boundmargin", description="Train and evaluate SoftMax-slope regularized classifiers.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", help="output directory (default: config `output` or ./out)")
        p.add_argument("--seed", action="append", help="seed or comma-separated seeds; overrides config")
        p.add_argument("--threads", type=int, help="worker threads (fallback: BM_THREADS)")
    return ap


def experiment_from_args(args) -> Experiment:
    raw = load_config(args.config)
    seeds = parse_seeds(args.seed) if args.seed else parse_seeds(raw.get("seeds", [0]))
    out = Path(args.out or raw.get("output", "out"))
    exp = Experiment(raw, out, seeds, thread_count(args.threads))
    check_paths(exp)
    return exp


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        exp = experiment_from_args(args)
        result = HANDLERS[args.command](exp)
        if args.command != "report":
            print(json.dumps({"command": args.command, "config_hash": exp.hash, "result": result}, sort_keys=True, default=str))
        return EXIT_OK
    except (ConfigError, DimensionError, FormatError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as exc:
        diag = getattr(exc, "diagnostic", None)
        print(f"aborted: {exc}" + (f" {json.dumps(diag)}" if diag else ""), file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
