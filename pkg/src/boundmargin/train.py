"""Training loops for the regularized objective and its variants.

Each optimizer step draws ``groups_per_step`` entries from the shuffled
combined dataset, surrounds every entry with freshly sampled neighbors, and
averages the group losses before one optimizer update.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import loss as L
from . import tensor as T
from .attack import AttackConfig, pgd
from .data import CombinedDataset, LabeledSet, NoiseConfig, derive_sigmas, gen_neighbor_batch, mu_pair
from .errors import ConfigError, NonFiniteError, TrainingAborted
from .model import Model, forward_split, last_conv_boundary
from .rng import RngStream

log = logging.getLogger(__name__)

NEIGHBOR_CAP = 256


# -- optimizers -------------------------------------------------------------------

def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> dict:
    """Heavy-ball SGD with coupled L2 decay; updates ``params`` arrays in place."""
    velocity = state.setdefault("velocity", {})
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        d = g + weight_decay * p if weight_decay else g
        v = velocity.get(name)
        v = d.copy() if v is None else momentum * v + d
        velocity[name] = v
        p -= lr * v
    state["step"] = state.get("step", 0) + 1
    return state


def adam_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict:
    """Bias-corrected Adam with weight decay added to the gradient."""
    t = state.get("step", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * m_all.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * v_all.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    state["step"] = t
    return state


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")

    def step(self, params: dict, grads: dict, state: dict) -> dict:
        if self.kind == "sgd":
            return sgd_step(params, grads, state, self.lr, self.momentum, self.weight_decay)
        return adam_step(params, grads, state, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def optimizer_state_arrays(state: dict) -> dict[str, np.ndarray]:
    """Flatten optimizer state into named arrays for checkpointing."""
    out = {"step": np.array([state.get("step", 0)], dtype=np.int64)}
    for slot in ("velocity", "m", "v"):
        for name, arr in state.get(slot, {}).items():
            out[f"{slot}/{name}"] = arr
    return out


def optimizer_state_from_arrays(arrays: dict[str, np.ndarray]) -> dict:
    state: dict = {"step": int(arrays["step"][0]) if "step" in arrays else 0}
    for key, arr in arrays.items():
        if "/" in key:
            slot, name = key.split("/", 1)
            state.setdefault(slot, {})[name] = np.array(arr, dtype=np.float64)
    return state


# -- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class InjectionConfig:
    boundary: int | None = None
    sigma_b: float | None = None
    mu_sample_cap: int = 2000


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    epochs: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    groups_per_step: int = 32
    noise: NoiseConfig | None = None
    adversarial: AttackConfig | None = None
    adversarial_prob: float = 0.5
    injection: InjectionConfig | None = None
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.epochs < 1 or self.groups_per_step < 1:
            raise ConfigError("need epochs >= 1 and groups_per_step >= 1")
        if not 0.0 <= self.adversarial_prob <= 1.0:
            raise ConfigError("adversarial_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lam = d.pop("lambda", d.pop("lam", 0.0))
        opt = OptimizerConfig(**d.pop("optimizer", {}))
        noise = d.pop("noise", None)
        adv = d.pop("adversarial", None)
        inj = d.pop("injection", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(
            lam=float(lam),
            optimizer=opt,
            noise=NoiseConfig(**noise) if noise else None,
            adversarial=AttackConfig.from_dict(adv) if adv else None,
            injection=InjectionConfig(**inj) if inj is not None else None,
            **d,
        )


@dataclass
class EpochRecord:
    epoch: int
    sup: float
    reg: float
    total: float
    lam: float
    steps: int
    train_accuracy: float
    val_accuracy: float | None
    adversarial_replacements: int = 0
    wall_time: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class TrainLog:
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.records:
            row = {**rec.to_dict(), "metadata": self.metadata}
            lines.append(json.dumps(row, sort_keys=True))
        return "".join(line + "\n" for line in lines)


@dataclass
class TrainState:
    """Everything needed to continue a run at an epoch boundary."""

    epoch: int
    optimizer: dict


# -- helpers ------------------------------------------------------------------------

def accuracy(model: Model, data: LabeledSet | None) -> float | None:
    if data is None or len(data) == 0:
        return None
    return float((model.predict(data.points).argmax(axis=1) == data.labels).mean())


def make_group(entry, noise: NoiseConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """One center and its ``n_b`` freshly drawn neighbors."""
    psi = np.asarray(getattr(entry, "point", entry), dtype=np.float64)
    return psi, gen_neighbor_batch(psi[None], noise.n_b, noise.sigma_b, rng)[0]


def _grads(model: Model) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in model.params.items() if p.grad is not None}


def _neighbor_chunks(groups: int, n_b: int) -> list[tuple[np.ndarray, slice]]:
    """Split ``groups x n_b`` neighbors into forward passes of at most NEIGHBOR_CAP neighbors."""
    if groups * n_b <= NEIGHBOR_CAP:
        return [(np.arange(groups), slice(0, n_b))]
    if n_b <= NEIGHBOR_CAP:
        per = max(1, NEIGHBOR_CAP // n_b)
        return [(np.arange(s, min(s + per, groups)), slice(0, n_b)) for s in range(0, groups, per)]
    return [
        (np.array([g]), slice(s, min(s + NEIGHBOR_CAP, n_b)))
        for g in range(groups)
        for s in range(0, n_b, NEIGHBOR_CAP)
    ]


def _step_loss(model: Model, centers, labels, labeled, neighbors, lam: float) -> L.LossBreakdown:
    """Accumulate parameter gradients of the mean group loss; returns its breakdown."""
    groups = centers.shape[0]
    if lam == 0.0:
        f_center, _ = L.group_forward(model, centers, None)
        total, brk = L.combine(L.supervised_terms(f_center, labels, labeled), None, 0.0, groups)
        T.backward(total)
        return brk
    sup_sum = reg_sum = 0.0
    seen_center = np.zeros(groups, dtype=bool)
    for gidx, nb_slice in _neighbor_chunks(groups, neighbors.shape[1]):
        c = centers[gidx]
        nb = neighbors[gidx, nb_slice]
        f_center, f_nb = L.group_forward(model, c, nb)
        first = ~seen_center[gidx]
        seen_center[gidx] = True
        sup = L.supervised_terms(f_center, labels[gidx], labeled[gidx] & first)
        reg = L.slope_terms(f_center, f_nb, L.neighbor_distances(c, nb))
        total, brk = L.combine(sup, reg, lam, groups)
        T.backward(total)
        sup_sum += brk.sup
        reg_sum += brk.reg
    return L.LossBreakdown(sup_sum, reg_sum, sup_sum + lam * reg_sum, lam)


def _abort(epoch: int, index, brk: L.LossBreakdown | None, why: str):
    diag = {"epoch": epoch, "entries": [int(i) for i in np.atleast_1d(index)], "loss": brk.to_dict() if brk else None}
    raise TrainingAborted(f"non-finite loss at epoch {epoch}: {why}", diag)


# -- main loops ---------------------------------------------------------------------

def fit(
    model: Model,
    dataset: CombinedDataset,
    val: LabeledSet | None,
    cfg: TrainConfig,
    *,
    state: TrainState | None = None,
    on_epoch=None,
) -> tuple[Model, TrainLog]:
    """Train ``model`` in place on the combined dataset.

    ``state`` resumes from an epoch boundary; ``on_epoch(model, state, log)``
    runs after every epoch (checkpointing hooks in here).
    """
    if cfg.injection is not None:
        return fit_injected(model, dataset, val, cfg, state=state, on_epoch=on_epoch)
    if cfg.noise is None:
        raise ConfigError("training needs a noise configuration")
    if dataset.point_shape != tuple(model.spec.input_shape):
        raise ConfigError(f"dataset points {dataset.point_shape} do not fit model input {model.spec.input_shape}")
    noise = cfg.noise
    params = {name: p.data for name, p in model.params.items()}
    opt_state = state.optimizer if state else {}
    start = state.epoch if state else 0
    train_log = TrainLog(cfg.to_dict(), metadata=run_metadata(cfg))
    labeled_points = LabeledSet(dataset.points[dataset.labeled], dataset.labels[dataset.labeled], dataset.class_count)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        order = RngStream(cfg.seed, f"shuffle/{epoch}").permutation(len(dataset))
        nb_rng = RngStream(cfg.seed, f"neighbors/{epoch}")
        adv_rng = RngStream(cfg.seed, f"adversarial/{epoch}")
        sums = np.zeros(3)
        steps = replaced = 0
        for s in range(0, len(order), cfg.groups_per_step):
            idx = order[s : s + cfg.groups_per_step]
            centers = dataset.points[idx].copy()
            labels = dataset.labels[idx]
            labeled = dataset.labeled[idx]
            if cfg.adversarial is not None:
                replaced += _adversarial_swap(model, centers, labels, labeled, cfg, adv_rng)
            neighbors = gen_neighbor_batch(centers, noise.n_b, noise.sigma_b, nb_rng)
            model.zero_grad()
            try:
                brk = _step_loss(model, centers, labels, labeled, neighbors, cfg.lam)
            except NonFiniteError as exc:
                _abort(epoch, idx, None, str(exc))
            if not brk.is_finite():
                _abort(epoch, idx, brk, "loss breakdown")
            cfg.optimizer.step(params, _grads(model), opt_state)
            sums += (brk.sup, brk.reg, brk.total)
            steps += 1
        model.zero_grad()
        record = EpochRecord(
            epoch=epoch + 1,
            sup=float(sums[0] / steps),
            reg=float(sums[1] / steps),
            total=float(sums[2] / steps),
            lam=cfg.lam,
            steps=steps,
            train_accuracy=accuracy(model, labeled_points),
            val_accuracy=accuracy(model, val),
            adversarial_replacements=replaced,
            wall_time=time.perf_counter() - t0 if cfg.record_wall_time else None,
        )
        train_log.records.append(record)
        log.info("epoch %d: sup=%.4g reg=%.4g val=%s", record.epoch, record.sup, record.reg, record.val_accuracy)
        if on_epoch is not None:
            on_epoch(model, TrainState(epoch + 1, opt_state), train_log)
    return model, train_log


_RUN_LABELS = {
    (False, False): "no defence",
    (True, False): "regularized",
    (False, True): "adversarial training",
    (True, True): "regularized+adversarial",
}


def run_metadata(cfg: TrainConfig) -> dict:
    meta = {"label": _RUN_LABELS[(cfg.lam > 0, cfg.adversarial is not None)]}
    if cfg.adversarial is not None:
        meta["adversarial_recipe"] = {"attack": cfg.adversarial.to_dict(), "replace_prob": cfg.adversarial_prob}
    return meta


def _adversarial_swap(model, centers, labels, labeled, cfg: TrainConfig, rng: RngStream) -> int:
    """Replace labeled centers by PGD examples with probability ``adversarial_prob``."""
    coin = rng.uniform(centers.shape[0])
    pick = np.flatnonzero(labeled & (coin < cfg.adversarial_prob))
    if pick.size == 0:
        return 0
    res = pgd(model, centers[pick], labels[pick], cfg.adversarial, rng.child("pgd"))
    centers[pick] = res.x_adv
    return int(pick.size)


def fit_adversarial(model, dataset, val, cfg: TrainConfig, **kw):
    if cfg.adversarial is None:
        raise ConfigError("adversarial training needs an attack configuration")
    return fit(model, dataset, val, cfg, **kw)


def injection_sigmas(model: Model, points: np.ndarray, boundary: int, sample_cap: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Noise scales at a layer boundary from the mean pairwise distance of activations."""
    rng = RngStream(seed, "injection/mu")
    if points.shape[0] > sample_cap:
        points = points[np.sort(rng.choice(points.shape[0], sample_cap))]
    acts = []
    with T.no_grad():
        for s in range(0, points.shape[0], 512):
            mid, _ = forward_split(model, points[s : s + 512], boundary)
            acts.append(mid.data)
    return derive_sigmas(mu_pair(np.concatenate(acts), sample_cap))


def fit_injected(
    model: Model,
    dataset,
    val: LabeledSet | None,
    cfg: TrainConfig,
    *,
    state: TrainState | None = None,
    on_epoch=None,
) -> tuple[Model, TrainLog]:
    """Regularized training with noise injected at an intermediate layer.

    For each labeled image the activation ``h`` at the boundary is paired with
    a neighbor ``h + N(0, sigma_b)``; then an unlabeled activation
    ``u = h + N(0, sigma_u)`` is paired with its own neighbor. Both pairs run
    through the remaining layers and feed the slope regularizer.
    """
    inj = cfg.injection or InjectionConfig()
    if isinstance(dataset, CombinedDataset):
        dataset = LabeledSet(dataset.points[dataset.labeled], dataset.labels[dataset.labeled], dataset.class_count)
    boundary = last_conv_boundary(model.spec) if inj.boundary is None else inj.boundary
    if not 0 < boundary < len(model.spec.layers):
        raise ConfigError(f"injection boundary {boundary} is not an interior layer boundary")
    if inj.sigma_b is not None:
        sigma_b = float(inj.sigma_b)
        sigma_u = 10.0 * sigma_b
    else:
        sigma_u, sigma_b = injection_sigmas(model, dataset.points, boundary, inj.mu_sample_cap, cfg.seed)
    params = {name: p.data for name, p in model.params.items()}
    opt_state = state.optimizer if state else {}
    start = state.epoch if state else 0
    meta = {"label": "regularized+injected", "boundary": boundary, "sigma_u_i": sigma_u, "sigma_b_i": sigma_b}
    train_log = TrainLog(cfg.to_dict(), metadata=meta)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        order = RngStream(cfg.seed, f"shuffle/{epoch}").permutation(len(dataset))
        rng = RngStream(cfg.seed, f"injection/{epoch}")
        sums = np.zeros(3)
        steps = 0
        for s in range(0, len(order), cfg.groups_per_step):
            idx = order[s : s + cfg.groups_per_step]
            model.zero_grad()
            try:
                total, brk = injected_group_loss(model, dataset.points[idx], dataset.labels[idx], boundary, sigma_u, sigma_b, cfg.lam, rng)
                T.backward(total)
            except NonFiniteError as exc:
                _abort(epoch, idx, None, str(exc))
            if not brk.is_finite():
                _abort(epoch, idx, brk, "loss breakdown")
            cfg.optimizer.step(params, _grads(model), opt_state)
            sums += (brk.sup, brk.reg, brk.total)
            steps += 1
        model.zero_grad()
        train_log.records.append(
            EpochRecord(
                epoch=epoch + 1,
                sup=float(sums[0] / steps),
                reg=float(sums[1] / steps),
                total=float(sums[2] / steps),
                lam=cfg.lam,
                steps=steps,
                train_accuracy=accuracy(model, dataset),
                val_accuracy=accuracy(model, val),
                wall_time=time.perf_counter() - t0 if cfg.record_wall_time else None,
            )
        )
        if on_epoch is not None:
            on_epoch(model, TrainState(epoch + 1, opt_state), train_log)
    return model, train_log


def injected_group_loss(model: Model, images, labels, boundary: int, sigma_u: float, sigma_b: float, lam: float, rng: RngStream):
    """Mean loss over labeled images with both injection rounds; returns ``(total, breakdown)``."""
    g = images.shape[0]
    h, resume = forward_split(model, images, boundary)
    shape = h.shape[1:]
    nb_noise = rng.normal((g, *shape)) * sigma_b
    u_noise = rng.normal((g, *shape)) * sigma_u
    u_nb_noise = rng.normal((g, *shape)) * sigma_b
    u = T.add(h, u_noise)
    batch = T.concat([h, T.add(h, nb_noise), u, T.add(u, u_nb_noise)])
    probs = T.softmax(resume(batch))
    n = probs.shape[1]
    f_h = T.take(probs, slice(0, g))
    f_hn = T.reshape(T.take(probs, slice(g, 2 * g)), (g, 1, n))
    f_u = T.take(probs, slice(2 * g, 3 * g))
    f_un = T.reshape(T.take(probs, slice(3 * g, 4 * g)), (g, 1, n))
    d1 = np.sqrt((nb_noise.reshape(g, -1) ** 2).sum(axis=1))[:, None]
    d2 = np.sqrt((u_nb_noise.reshape(g, -1) ** 2).sum(axis=1))[:, None]
    reg = T.add(L.slope_terms(f_h, f_hn, d1), L.slope_terms(f_u, f_un, d2))
    sup = T.cross_entropy(f_h, labels)
    return L.combine(sup, reg, lam, g)
