"""Training objectives for the classification and objectiveness heads.

All losses are stateless functions of ``(params, batch)`` returning the loss
and its analytic gradient.  Class logits are laid out as the thing classes
followed by background; proposal labels use the class index, with
``BACKGROUND`` meaning ``num_things`` and ``VOID_LABEL`` marking void
proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

VOID_LABEL = -1


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class HeadParams:
    class_weights: np.ndarray  # (num_things + 1, D), background last
    obj_weights: np.ndarray  # (D,)

    def __post_init__(self):
        W = np.asarray(self.class_weights, dtype=np.float64)
        theta = np.asarray(self.obj_weights, dtype=np.float64)
        if W.ndim != 2 or theta.ndim != 1 or W.shape[1] != theta.shape[0] or theta.size == 0:
            raise ValueError(f"incompatible shapes {W.shape} and {theta.shape}")
        if W.shape[0] < 2:
            raise ValueError("need at least one thing class plus background")
        if not (np.isfinite(W).all() and np.isfinite(theta).all()):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "class_weights", W)
        object.__setattr__(self, "obj_weights", theta)

    @property
    def num_things(self) -> int:
        return self.class_weights.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.obj_weights.shape[0]

    @classmethod
    def zeros(cls, num_things: int, dim: int) -> HeadParams:
        return cls(np.zeros((num_things + 1, dim)), np.zeros(dim))


@dataclass(frozen=True)
class Batch:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) thing index, num_things for background, VOID_LABEL for void

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64).reshape(len(self.labels), -1)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def masks(self, num_things: int):
        void = self.labels == VOID_LABEL
        bg = self.labels == num_things
        thing = (self.labels >= 0) & (self.labels < num_things)
        return thing, bg, void


def _softmax_parts(W: np.ndarray, f: np.ndarray):
    z = f @ W.T
    lse = logsumexp(z, axis=1, keepdims=True)
    return z, lse, np.exp(z - lse)


def cls_loss(params: HeadParams, batch: Batch):
    """Softmax cross-entropy over things + background on non-void proposals."""
    keep = batch.labels != VOID_LABEL
    n = int(keep.sum())
    if n == 0:
        raise EmptyBatch("classification loss needs at least one non-void proposal")
    f, y = batch.features[keep], batch.labels[keep]
    z, lse, p = _softmax_parts(params.class_weights, f)
    loss = float(np.sum(lse[:, 0] - z[np.arange(n), y]) / n)
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    return loss, dz.T @ f / n


def void_suppression_loss(params: HeadParams, batch: Batch):
    """Mean over void proposals of -sum_k log(1 - p_k) for every thing class k.

    ``log(1 - p_k)`` is evaluated as the leave-one-out log-sum-exp minus the
    full one, which stays finite when ``p_k`` rounds to 1.
    """
    void = batch.labels == VOID_LABEL
    n = int(void.sum())
    if n == 0:
        raise EmptyBatch("void suppression loss needs at least one void proposal")
    f = batch.features[void]
    c = params.num_things
    z, lse, p = _softmax_parts(params.class_weights, f)
    # loo[:, k] = logsumexp over all classes except thing class k
    masked = np.broadcast_to(z[:, None, :], (n, c, c + 1)).copy()
    masked[:, np.arange(c), np.arange(c)] = -np.inf
    loo = logsumexp(masked, axis=2)
    loss = float(np.sum(lse - loo) / n)
    # d/dz_j = [j thing] p_j - sum_{k thing, k != j} p_j p_k/(1-p_k); each cross
    # term is at most 1, so evaluate it in log space instead of forming the odds
    log_cross = (z - lse)[:, :, None] + (z[:, :c] - loo)[:, None, :]
    log_cross[:, np.arange(c), np.arange(c)] = -np.inf
    dz = -np.exp(log_cross).sum(axis=2)
    dz[:, :c] += p[:, :c]
    return loss, dz.T @ f / n


def objectiveness_loss(params: HeadParams, batch: Batch):
    """Binary log-loss of the objectiveness head: things positive, background negative."""
    thing, bg, _ = batch.masks(params.num_things)
    n = int(thing.sum() + bg.sum())
    if n == 0:
        raise EmptyBatch("objectiveness loss needs a thing or background proposal")
    s = batch.features @ params.obj_weights
    loss = -(np.sum(log_expit(s[thing])) + np.sum(log_expit(-s[bg]))) / n
    ds = np.zeros_like(s)
    ds[thing] = -expit(-s[thing])
    ds[bg] = expit(s[bg])
    return float(loss), ds @ batch.features / n


def pseudo_obj_loss(params: HeadParams, batch: Batch, delta: float):
    """Objectiveness log-loss on void proposals scored at or above ``delta``.

    The selection indicator carries no gradient.  The normalizer is the total
    number of void proposals, filtered ones included.  Returns
    ``(loss, grad_theta, kept)``.
    """
    void = batch.labels == VOID_LABEL
    n = int(void.sum())
    if n == 0:
        raise EmptyBatch("pseudo-label loss needs at least one void proposal")
    f = batch.features[void]
    s = f @ params.obj_weights
    sel = expit(s) >= delta
    loss = -np.sum(log_expit(s[sel])) / n
    ds = np.where(sel, -expit(-s), 0.0)
    return float(loss), ds @ f / n, int(sel.sum())


LOSSES = ("cls", "void_suppression", "objectiveness", "pseudo_obj")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); absolute difference when both are ~0."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > 1e-12 else diff


def numeric_gradient(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = fn(x)
        x[idx] = orig - step
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def check_gradient(name: str, params: HeadParams, batch: Batch, delta: float = 0.9, step: float = 1e-5):
    """Relative error between the analytic and finite-difference gradient."""
    W, theta = params.class_weights, params.obj_weights
    if name == "cls":
        _, g = cls_loss(params, batch)
        fn = lambda w: cls_loss(HeadParams(w, theta), batch)[0]  # noqa: E731
        return relative_error(g, numeric_gradient(fn, W, step))
    if name == "void_suppression":
        _, g = void_suppression_loss(params, batch)
        fn = lambda w: void_suppression_loss(HeadParams(w, theta), batch)[0]  # noqa: E731
        return relative_error(g, numeric_gradient(fn, W, step))
    if name == "objectiveness":
        _, g = objectiveness_loss(params, batch)
        fn = lambda t: objectiveness_loss(HeadParams(W, t), batch)[0]  # noqa: E731
        return relative_error(g, numeric_gradient(fn, theta, step))
    if name == "pseudo_obj":
        _, g, _ = pseudo_obj_loss(params, batch, delta)
        fn = lambda t: pseudo_obj_loss(HeadParams(W, t), batch, delta)[0]  # noqa: E731
        return relative_error(g, numeric_gradient(fn, theta, step))
    raise ValueError(f"unknown loss {name!r}")


def random_instance(rng: np.random.Generator, num_things: int, dim: int, size: int, scale: float = 1.0):
    """Random parameters and a batch holding at least one thing, background and void proposal."""
    params = HeadParams(
        rng.normal(scale=scale, size=(num_things + 1, dim)), rng.normal(scale=scale, size=dim)
    )
    size = max(size, 3)
    labels = rng.integers(VOID_LABEL, num_things + 1, size=size)
    labels[:3] = [0, num_things, VOID_LABEL]
    rng.shuffle(labels)
    return params, Batch(rng.normal(size=(size, dim)), labels)


def boundary_margin(params: HeadParams, batch: Batch, delta: float) -> float:
    """Smallest |sigmoid(score) - delta| over void proposals."""
    s = batch.features[batch.labels == VOID_LABEL] @ params.obj_weights
    return float(np.min(np.abs(expit(s) - delta)))


def gradient_suite(trials: int, seed: int, dim: int | None = None, batch: int | None = None,
                   max_dim: int = 16, max_batch: int = 32, max_things: int = 6,
                   delta: float = 0.9, margin: float = 1e-3, step: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per loss over ``trials`` random instances.

    ``dim``/``batch`` pin the feature dimension and batch size; when left as
    None they are drawn up to ``max_dim``/``max_batch``.  Instances whose void
    scores fall within ``margin`` of ``delta`` are redrawn so no
    finite-difference probe can cross the selection boundary.
    """
    if batch is not None and batch < 1:
        raise EmptyBatch("gradient check needs a non-empty batch")
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSSES, 0.0)
    for _ in range(trials):
        while True:
            params, sample = random_instance(
                rng,
                int(rng.integers(1, max_things + 1)),
                dim if dim is not None else int(rng.integers(1, max_dim + 1)),
                batch if batch is not None else int(rng.integers(3, max_batch + 1)),
            )
            if boundary_margin(params, sample, delta) > margin:
                break
        for name in LOSSES:
            worst[name] = max(worst[name], check_gradient(name, params, sample, delta, step))
    return worst
