"""White-box attacks (FGSM, PGD, DeepFool) and robustness reporting.

All attacks run in the model's (normalized) input space and process a batch
of samples at once; each sample is attacked independently.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .loss import input_gradient
from .model import Model, forward
from .rng import RngStream

ATTACK_KINDS = ("fgsm", "pgd", "deepfool")
REPORT_FORMAT_VERSION = 1
DEEPFOOL_STEP_PAD = 1e-4


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.1
    pgd_steps: int = 40
    pgd_alpha: float | None = None
    random_start: bool = True
    deepfool_norm: str = "l2"
    deepfool_overshoot: float = 0.02
    deepfool_max_iter: int = 50
    clamp_pixel_range: bool = False
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.pgd_alpha is not None and not self.pgd_alpha > 0:
            raise ConfigError("pgd_alpha must be > 0")
        if self.pgd_steps < 1 or self.deepfool_max_iter < 1 or self.deepfool_overshoot < 0:
            raise ConfigError("need pgd_steps >= 1, deepfool_max_iter >= 1, deepfool_overshoot >= 0")
        if self.deepfool_norm not in ("l2", "linf"):
            raise ConfigError(f"unknown DeepFool norm {self.deepfool_norm!r}")

    @property
    def alpha(self) -> float:
        """PGD step size; defaults to a quarter of the budget."""
        return self.epsilon / 4.0 if self.pgd_alpha is None else self.pgd_alpha

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pgd_alpha"] = self.alpha
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    success: np.ndarray
    iterations: np.ndarray

    def __len__(self) -> int:
        return self.x_adv.shape[0]


def _batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(model.spec.input_shape)
    return (x[None] if single else x), single


def _predict(model: Model, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return forward(model, x).data.argmax(axis=1)


def _finish(model: Model, x0: np.ndarray, x_adv: np.ndarray, y: np.ndarray, iterations) -> AttackResult:
    delta = x_adv - x0
    x_adv = x0 + delta
    success = _predict(model, x_adv) != y
    return AttackResult(x_adv, delta, success, np.broadcast_to(np.asarray(iterations), y.shape).copy())


def _clamp(cfg: AttackConfig, x: np.ndarray) -> np.ndarray:
    return np.clip(x, cfg.pixel_min, cfg.pixel_max) if cfg.clamp_pixel_range else x


def fgsm(model: Model, x, y, epsilon: float, cfg: AttackConfig | None = None) -> AttackResult:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy."""
    cfg = cfg or AttackConfig("fgsm", epsilon)
    xb, _ = _batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    frozen = model.frozen()
    grad, _, _ = input_gradient(frozen, xb, y)
    x_adv = _clamp(cfg, xb + epsilon * np.sign(grad))
    return _finish(frozen, xb, x_adv, y, 1)


def pgd(model: Model, x, y, cfg: AttackConfig, rng: RngStream | None = None) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the epsilon ball around ``x``."""
    xb, _ = _batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    frozen = model.frozen()
    eps, alpha = cfg.epsilon, cfg.alpha
    lo, hi = xb - eps, xb + eps
    if cfg.random_start:
        rng = rng if rng is not None else RngStream(0, "pgd")
        x_adv = xb + (2.0 * rng.uniform(xb.shape) - 1.0) * eps
    else:
        x_adv = xb.copy()
    x_adv = _clamp(cfg, x_adv)
    for _ in range(cfg.pgd_steps):
        grad, _, _ = input_gradient(frozen, x_adv, y)
        x_adv = _clamp(cfg, np.minimum(np.maximum(x_adv + alpha * np.sign(grad), lo), hi))
    return _finish(frozen, xb, x_adv, y, cfg.pgd_steps)


def _logit_gradients(model: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``B x n`` and their input gradients ``n x B x ...``."""
    inp = T.Tensor(x, requires_grad=True)
    logits = forward(model, inp)
    grads = []
    for k in range(logits.shape[1]):
        inp.grad = None
        seed = np.zeros(logits.shape)
        seed[:, k] = 1.0
        T.backward(logits, seed)
        grads.append(inp.grad)
    return logits.data, np.stack(grads)


def deepfool(model: Model, x, cfg: AttackConfig | None = None, y=None) -> AttackResult:
    """Iterative boundary linearization toward the closest competing class.

    The reference class of each sample is its clean prediction. When ``y``
    is given, samples already misclassified are returned untouched with zero
    iterations.
    """
    cfg = cfg or AttackConfig("deepfool")
    xb, _ = _batch(model, x)
    frozen = model.frozen()
    batch = xb.shape[0]
    flat_dim = int(np.prod(xb.shape[1:]))
    k0 = _predict(frozen, xb)
    r_tot = np.zeros_like(xb)
    iterations = np.zeros(batch, dtype=np.int64)
    active = np.ones(batch, dtype=bool)
    if y is not None:
        active &= k0 == np.atleast_1d(np.asarray(y, dtype=np.int64))
    stuck = np.zeros(batch, dtype=bool)
    scale = 1.0 + cfg.deepfool_overshoot
    for _ in range(cfg.deepfool_max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        logits, grads = _logit_gradients(frozen, xb[idx] + scale * r_tot[idx])
        current = logits.argmax(axis=1)
        flipped = current != k0[idx]
        active[idx[flipped]] = False
        todo = ~flipped
        if not todo.any():
            break
        rows = np.flatnonzero(todo)
        sel = idx[rows]
        kk = k0[sel]
        g = grads[:, rows].reshape(grads.shape[0], rows.size, flat_dim)
        w = g - g[kk, np.arange(rows.size)][None]
        f = logits[rows] - logits[rows, kk][:, None]
        if cfg.deepfool_norm == "l2":
            wn = np.sqrt((w**2).sum(axis=2))
        else:
            wn = np.abs(w).sum(axis=2)
        wn = wn.T
        w_t = np.moveaxis(w, 0, 1)
        valid = wn > 0
        valid[np.arange(rows.size), kk] = False
        ratio = np.where(valid, np.abs(f) / np.where(valid, wn, 1.0), np.inf)
        best = ratio.argmin(axis=1)
        no_dir = ~np.isfinite(ratio[np.arange(rows.size), best])
        if no_dir.any():
            stuck[sel[no_dir]] = True
            active[sel[no_dir]] = False
        ok = np.flatnonzero(~no_dir)
        if ok.size == 0:
            continue
        w_best = w_t[ok, best[ok]]
        # the pad is in logit units, as in the original algorithm
        mag = (np.abs(f[ok, best[ok]]) + DEEPFOOL_STEP_PAD) / wn[ok, best[ok]]
        if cfg.deepfool_norm == "l2":
            step = mag[:, None] * w_best / np.sqrt((w_best**2).sum(axis=1))[:, None]
        else:
            step = mag[:, None] * np.sign(w_best)
        r_tot[sel[ok]] += step.reshape(ok.size, *xb.shape[1:])
        iterations[sel[ok]] += 1
    delta = scale * r_tot
    delta[stuck] = 0.0
    x_adv = _clamp(cfg, xb + delta)
    result = _finish(frozen, xb, x_adv, k0, iterations)
    result.success &= ~stuck
    return result


def run_attack(model: Model, x, y, cfg: AttackConfig, rng: RngStream | None = None, chunk: int = 256) -> AttackResult:
    """Apply one attack to a dataset in chunks and concatenate the results."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    parts = []
    for start in range(0, x.shape[0], chunk):
        xs, ys = x[start : start + chunk], y[start : start + chunk]
        if cfg.kind == "fgsm":
            parts.append(fgsm(model, xs, ys, cfg.epsilon, cfg))
        elif cfg.kind == "pgd":
            parts.append(pgd(model, xs, ys, cfg, rng))
        else:
            parts.append(deepfool(model, xs, cfg))
    if not parts:
        empty = np.zeros((0, *model.spec.input_shape))
        return AttackResult(empty, empty.copy(), np.zeros(0, bool), np.zeros(0, np.int64))
    return AttackResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("x_adv", "delta", "success", "iterations")))


@dataclass
class RobustnessReport:
    attack: dict
    epsilons: list[float]
    robust_accuracy: list[float]
    clean_accuracy: float
    model_hash: str = ""
    rho_adv: float | None = None
    rho_skipped: int = 0
    l2_delta: list[float] = field(default_factory=list)
    rel_rho: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format_version": REPORT_FORMAT_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessReport":
        if d.get("format_version") != REPORT_FORMAT_VERSION:
            raise ConfigError("unsupported report format_version")
        return cls(**{k: v for k, v in d.items() if k != "format_version"})

    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epsilon", "robust_accuracy"])
        for eps, acc in zip(self.epsilons, self.robust_accuracy):
            writer.writerow([repr(float(eps)), repr(float(acc))])
        return buf.getvalue()

    def samples_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_index", "l2_delta", "rel_rho"])
        for i, (d, r) in enumerate(zip(self.l2_delta, self.rel_rho)):
            writer.writerow([i, repr(float(d)), repr(float(r))])
        return buf.getvalue()


def robust_accuracy(
    model: Model,
    dataset,
    cfg: AttackConfig,
    epsilons,
    rng: RngStream | None = None,
) -> RobustnessReport:
    """Fraction of points still classified correctly after attack, per budget.

    For DeepFool, which minimizes rather than budgets the perturbation, a point
    counts as broken at budget eps when the attack flips its label with an
    infinity-norm perturbation no larger than eps.
    """
    x, y = np.asarray(dataset.points, dtype=np.float64), np.asarray(dataset.labels, dtype=np.int64)
    clean_pred = _predict(model, x) if len(y) else np.zeros(0, dtype=np.int64)
    clean = clean_pred == y
    accs = []
    meta = {}
    if cfg.kind == "deepfool":
        res = run_attack(model, x, y, cfg)
        linf = np.abs(res.delta.reshape(len(y), -1)).max(axis=1) if len(y) else np.zeros(0)
        for eps in epsilons:
            broken = res.success & (linf <= eps)
            accs.append(float(np.mean(clean & ~broken)) if len(y) else 0.0)
        meta["deepfool_budget_rule"] = "success_within_linf_epsilon"
    else:
        for i, eps in enumerate(epsilons):
            step_cfg = replace(cfg, epsilon=float(eps))
            stream = rng.child(f"eps{i}") if rng is not None else None
            res = run_attack(model, x, y, step_cfg, stream)
            budget = np.abs(res.delta.reshape(len(y), -1)).max(axis=1) if len(y) else np.zeros(0)
            if (budget > eps + 1e-12).any():
                raise ContractError("perturbation exceeded its budget")
            accs.append(float(np.mean(_predict(model, res.x_adv) == y)) if len(y) else 0.0)
    return RobustnessReport(
        attack=cfg.to_dict(),
        epsilons=[float(e) for e in epsilons],
        robust_accuracy=accs,
        clean_accuracy=float(np.mean(clean)) if len(y) else 0.0,
        model_hash=model.fingerprint(),
        metadata=meta,
    )


def rho_adv_details(model: Model, points, cfg: AttackConfig | None = None) -> dict:
    """Per-sample l2-DeepFool perturbation norms and their ratio to ``||x||_2``."""
    cfg = cfg or AttackConfig("deepfool")
    cfg = replace(cfg, kind="deepfool", deepfool_norm="l2")
    x = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if x.shape[0] < 1:
        raise ContractError("rho_adv needs at least one point")
    res = run_attack(model, x, np.zeros(x.shape[0], dtype=np.int64), cfg)
    dnorm = np.sqrt((res.delta.reshape(x.shape[0], -1) ** 2).sum(axis=1))
    xnorm = np.sqrt((x.reshape(x.shape[0], -1) ** 2).sum(axis=1))
    keep = xnorm > 0
    if not keep.any():
        raise ContractError("every point has zero norm; rho_adv is undefined")
    rel = np.where(keep, dnorm / np.where(keep, xnorm, 1.0), np.nan)
    return {
        "rho_adv": float(rel[keep].mean()),
        "skipped": int((~keep).sum()),
        "l2_delta": dnorm,
        "rel_rho": rel,
        "success": res.success,
    }


def rho_adv(model: Model, points, cfg: AttackConfig | None = None) -> float:
    """Mean over points of ``||delta||_2 / ||x||_2`` with l2-DeepFool deltas."""
    return rho_adv_details(model, points, cfg)["rho_adv"]


def rho_from_deltas(x, delta) -> float:
    """The metric itself, for precomputed perturbations."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    delta = np.asarray(delta, dtype=np.float64).reshape(len(x), -1)
    xn = np.linalg.norm(x, axis=1)
    keep = xn > 0
    if not keep.any():
        raise ContractError("every point has zero norm; rho_adv is undefined")
    return float((np.linalg.norm(delta, axis=1)[keep] / xn[keep]).mean())
