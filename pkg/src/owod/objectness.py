"""Class-agnostic objectness as a diagonal Gaussian over query embeddings.

The density is estimated by an exponential moving average of batch mean
and (biased) variance, and queries are scored by a temperature-scaled
Mahalanobis likelihood exp(-tau * d^2). Training alternates estimation
with likelihood maximization of matched queries: the squared distance of
matched embeddings is penalized while the Gaussian parameters themselves
receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Lower bound on every variance component. Besides keeping the inverse
# finite, this is the regularizer that keeps likelihood maximization
# stable: an unregularized inverse lets low-variance dimensions dominate
# both the distance and its gradient, and training then collapses the
# embedding structure the other losses need.
VARIANCE_FLOOR = 0.1


@dataclass(frozen=True)
class GaussianState:
    """Mean and per-dimension variance of the objectness density."""

    mu: np.ndarray
    sigma: np.ndarray
    momentum: float = 0.1

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if mu.ndim != 1 or sigma.shape != mu.shape:
            raise ValueError("mu and sigma must be 1-D vectors of equal length")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("Gaussian parameters must be finite")
        if np.any(sigma < VARIANCE_FLOOR):
            raise ValueError(f"every variance must be >= {VARIANCE_FLOOR}")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def initial(cls, dim: int, momentum: float = 0.1) -> "GaussianState":
        """Unit Gaussian start; overwritten within tens of EMA steps."""
        return cls(mu=np.zeros(dim), sigma=np.ones(dim), momentum=momentum)


@dataclass(frozen=True)
class ObjectnessConfig:
    """Inference temperature and joint-loss weight."""

    tau: float = 1.3
    alpha: float = 0.1

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def ema_update(state: GaussianState, batch: np.ndarray) -> GaussianState:
    """Blend batch mean/variance into the running estimate.

    new = (1 - m) * old + m * batch, with the biased (1/n) batch variance
    and a floor keeping every variance positive. Uses every embedding in
    the batch, matched or not. Returns a new state.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("ema_update requires a non-empty batch")
    if batch.shape[1] != state.dim:
        raise ValueError(f"embedding dim {batch.shape[1]} != state dim {state.dim}")
    m = state.momentum
    mu = (1.0 - m) * state.mu + m * batch.mean(axis=0)
    sigma = (1.0 - m) * state.sigma + m * batch.var(axis=0)
    return replace(state, mu=mu, sigma=np.maximum(VARIANCE_FLOOR, sigma))


def mahalanobis_sq(state: GaussianState, q: np.ndarray) -> float:
    """Squared Mahalanobis distance of one embedding; zero iff q equals mu."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != state.mu.shape:
        raise ValueError(f"embedding shape {q.shape} != state dim ({state.dim},)")
    d = q - state.mu
    return float(np.sum(d * d / state.sigma))


def mahalanobis_sq_batch(state: GaussianState, queries: np.ndarray) -> np.ndarray:
    """Squared distances for an (N, D) block of embeddings."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape[-1] != state.dim:
        raise ValueError(f"embedding dim {queries.shape[-1]} != state dim {state.dim}")
    d = queries - state.mu
    return np.sum(d * d / state.sigma, axis=-1)


def objectness_prob(state: GaussianState, q: np.ndarray, tau: float) -> float:
    """exp(-tau * d^2); equals 1 exactly at the mean, decays with distance."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(np.exp(-tau * mahalanobis_sq(state, q)))


def objectness_prob_batch(state: GaussianState, queries: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return np.exp(-tau * mahalanobis_sq_batch(state, queries))


def objectness_loss_and_grad(
    state: GaussianState,
    queries: np.ndarray,
    matched: "frozenset[int] | set[int] | list[int] | tuple[int, ...]",
) -> tuple[float, np.ndarray]:
    """Sum of squared distances over matched queries and its gradient.

    The gradient of query i is 2 * (q_i - mu) / sigma for matched i and
    zero otherwise; mu and sigma are EMA-estimated constants here and get
    no gradient.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != state.dim:
        raise ValueError(f"queries must be (N, {state.dim})")
    n = queries.shape[0]
    idx = sorted(set(int(i) for i in matched))
    if idx and (idx[0] < 0 or idx[-1] >= n):
        raise ValueError(f"matched index out of range for {n} queries")
    grads = np.zeros_like(queries)
    if not idx:
        return 0.0, grads
    d = queries[idx] - state.mu
    loss = float(np.sum(d * d / state.sigma))
    grads[idx] = 2.0 * d / state.sigma
    return loss, grads
