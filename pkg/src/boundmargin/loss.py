"""Training objectives: SoftMax-slope regularizer, cross-entropy, and two baselines.

The slope regularizer compares the SoftMax output at a center point with the
outputs at nearby noisy copies::

    reg = sum_m ||softmax(f(nb_m)) - softmax(f(center))||_2 / ||nb_m - center||_2

Cross-entropy only applies to labeled centers; the total for a group is
``[labeled] * sup + lam * reg``. A step averages group totals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .model import Model, forward
from .tensor import Tensor


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    reg: float
    total: float
    lam: float

    def is_finite(self) -> bool:
        return bool(np.isfinite([self.sup, self.reg, self.total]).all())

    def to_dict(self) -> dict:
        return {"sup": self.sup, "reg": self.reg, "total": self.total, "lambda": self.lam}


def loss_sup(probabilities, y: int, labeled: bool = True) -> Tensor:
    if not labeled:
        raise ContractError("supervised loss requested for an unlabeled entry")
    return T.cross_entropy(probabilities, y)


def slope_terms(f_center: Tensor, f_neighbors: Tensor, distances: np.ndarray) -> Tensor:
    """Per-group regularizer for batched groups.

    ``f_center`` is ``G x n``, ``f_neighbors`` is ``G x N_b x n`` and
    ``distances`` is the ``G x N_b`` array of input-space neighbor distances.
    Returns a length-``G`` tensor.
    """
    g, n_b = distances.shape
    diff = T.sub(f_neighbors, T.reshape(f_center, (g, 1, f_center.shape[-1])))
    return T.tsum(T.div(T.norm(diff, axis=-1), distances), axis=1)


def loss_reg(f_center, f_neighbors, center, neighbors) -> Tensor:
    """Slope regularizer for a single group of one center and its neighbors."""
    f_center = T.as_tensor(f_center)
    f_nb = T.concat([T.reshape(T.as_tensor(f), (1, -1)) for f in f_neighbors]) if isinstance(
        f_neighbors, (list, tuple)
    ) else T.as_tensor(f_neighbors)
    center = np.asarray(center, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if f_nb.shape[0] != neighbors.shape[0] or f_nb.shape[0] < 1:
        raise DimensionError("need as many neighbor predictions as neighbor points (at least one)")
    dist = np.sqrt(((neighbors - center[None]).reshape(neighbors.shape[0], -1) ** 2).sum(axis=1))
    if (dist < 1e-12).any():
        raise ContractError("neighbor coincides with its center")
    out = slope_terms(T.reshape(f_center, (1, -1)), T.reshape(f_nb, (1, *f_nb.shape)), dist[None])
    return T.reshape(out, ())


def neighbor_distances(centers: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """``G x N_b`` Euclidean distances between each neighbor and its center."""
    g, n_b = neighbors.shape[:2]
    diff = (neighbors - centers[:, None]).reshape(g, n_b, -1)
    return np.sqrt((diff**2).sum(axis=-1))


def combine(sup_terms: Tensor | None, reg_terms: Tensor | None, lam: float, groups: int) -> tuple[Tensor, LossBreakdown]:
    """Average group losses: ``(sum sup + lam * sum reg) / groups``.

    ``sup_terms`` already carries zeros for unlabeled groups (or is ``None``
    when the step has none); ``reg_terms`` is ``None`` when the regularizer
    is skipped.
    """
    zero = T.Tensor(0.0)
    sup = T.mul(T.tsum(sup_terms), 1.0 / groups) if sup_terms is not None else zero
    reg = T.mul(T.tsum(reg_terms), 1.0 / groups) if reg_terms is not None else zero
    total = T.add(sup, T.mul(reg, float(lam))) if reg_terms is not None else sup
    return total, LossBreakdown(sup.item(), reg.item(), total.item(), float(lam))


def group_forward(model: Model, centers: np.ndarray, neighbors: np.ndarray | None):
    """SoftMax outputs for centers (``G x n``) and neighbors (``G x N_b x n``)."""
    g = centers.shape[0]
    if neighbors is None:
        return T.softmax(forward(model, centers)), None
    n_b = neighbors.shape[1]
    batch = np.concatenate([centers, neighbors.reshape(g * n_b, *centers.shape[1:])])
    probs = T.softmax(forward(model, batch))
    n = probs.shape[1]
    f_center = T.take(probs, slice(0, g))
    f_nb = T.reshape(T.take(probs, slice(g, g + g * n_b)), (g, n_b, n))
    return f_center, f_nb


def supervised_terms(f_center: Tensor, labels: np.ndarray, labeled: np.ndarray) -> Tensor | None:
    """Cross-entropy per group, zero for unlabeled groups; ``None`` if nothing is labeled."""
    labeled = np.asarray(labeled, dtype=bool)
    if not labeled.any():
        return None
    safe = np.where(labeled, labels, 0)
    return T.mul(T.cross_entropy(f_center, safe), labeled.astype(np.float64))


def total_loss(
    model: Model,
    centers: np.ndarray,
    neighbors: np.ndarray,
    labels: np.ndarray,
    labeled: np.ndarray,
    lam: float,
) -> tuple[Tensor, LossBreakdown]:
    """Mean group loss for ``G`` groups of one center plus ``N_b`` neighbors each."""
    centers = np.asarray(centers, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    f_center, f_nb = group_forward(model, centers, neighbors)
    sup = supervised_terms(f_center, labels, labeled)
    reg = slope_terms(f_center, f_nb, neighbor_distances(centers, neighbors))
    return combine(sup, reg, lam, centers.shape[0])


# -- baselines --------------------------------------------------------------------

def _single(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.shape == tuple(model.spec.input_shape) else x


def logit_jacobian(model: Model, x) -> np.ndarray:
    """Jacobian of the logits w.r.t. one input: ``n x prod(input_shape)``.

    Built from one backward pass per logit.
    """
    xb = _single(model, x)
    if xb.shape[0] != 1:
        raise DimensionError("logit_jacobian takes a single input")
    inp = T.Tensor(xb, requires_grad=True)
    logits = forward(model.frozen(), inp)
    rows = []
    for j in range(logits.shape[1]):
        inp.grad = None
        seed = np.zeros(logits.shape)
        seed[0, j] = 1.0
        T.backward(logits, seed)
        rows.append(inp.grad.reshape(-1).copy())
    return np.stack(rows)


def jacobian_reg(model: Model, x) -> float:
    """Frobenius norm of the logit Jacobian at ``x``."""
    return float(np.sqrt((logit_jacobian(model, x) ** 2).sum()))


def input_gradient(model: Model, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the per-sample cross-entropy w.r.t. a batch of inputs.

    Returns ``(grad, per-sample loss, logits)``. Pass ``model.frozen()`` when
    calling repeatedly; with a live model the parameter grads are restored.
    """
    xb = np.asarray(x, dtype=np.float64)
    inp = T.Tensor(xb, requires_grad=True)
    logits = forward(model, inp)
    losses = T.log_softmax_cross_entropy(logits, np.atleast_1d(y))
    saved = {name: p.grad for name, p in model.params.items()}
    T.backward(T.tsum(losses))
    for name, p in model.params.items():
        p.grad = saved[name]
    return inp.grad, losses.data, logits.data


def input_gradient_reg(model: Model, x, y: int) -> float:
    """Squared Euclidean norm of the cross-entropy input gradient at ``x``."""
    grad, _, _ = input_gradient(model.frozen(), _single(model, x), np.atleast_1d(y))
    return float((grad**2).sum())
