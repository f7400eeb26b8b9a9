"""Generic M-estimation layer: losses, empirical risk derivatives, Newton decrements.

Squared loss is ``0.5 * (y - x^T theta)^2``, so its empirical Hessian is the
sample covariance and Bartlett's identity holds with unit noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg, models
from .errors import PreconditionError
from .linalg import TolLike
from .models import Sample


class LossModel:
    """Per-observation loss ``l(theta, z)`` with ``z = (x, y)``.

    Subclasses implement the scalar methods; the batched ones fall back to
    loops and are overridden where a closed form exists.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)

    def value(self, theta, x, y) -> float:
        raise NotImplementedError

    def gradient(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def values(self, theta, X, Y) -> np.ndarray:
        return np.array([self.value(theta, x, y) for x, y in zip(X, Y)])

    def gradients(self, theta, X, Y) -> np.ndarray:
        """Row ``i`` is the gradient at observation ``i``."""
        return np.array([self.gradient(theta, x, y) for x, y in zip(X, Y)]).reshape(len(Y), -1)

    def mean_hessian(self, theta, X, Y) -> np.ndarray:
        H = sum(self.hessian(theta, x, y) for x, y in zip(X, Y)) / len(Y)
        return 0.5 * (H + H.T)


class GlmLoss(LossModel):
    """Canonical negative log-likelihood ``a(x^T theta) - y x^T theta`` (base measure dropped)."""

    def __init__(self, dim: int, family="gaussian"):
        super().__init__(dim)
        self.family = models.get_family(family)

    def value(self, theta, x, y):
        eta = float(np.dot(x, theta))
        return float(self.family.cumulant(eta) - y * eta)

    def gradient(self, theta, x, y):
        x = np.asarray(x, dtype=float)
        return (float(self.family.mean(x @ theta)) - y) * x

    def hessian(self, theta, x, y):
        x = np.asarray(x, dtype=float)
        return float(self.family.variance(x @ theta)) * np.outer(x, x)

    def values(self, theta, X, Y):
        eta = X @ theta
        return self.family.cumulant(eta) - Y * eta

    def gradients(self, theta, X, Y):
        return (self.family.mean(X @ theta) - Y)[:, None] * X

    def mean_hessian(self, theta, X, Y):
        w = self.family.variance(X @ theta)
        H = (X * w[:, None]).T @ X / X.shape[0]
        return 0.5 * (H + H.T)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim}, family={self.family.name!r})"


class SquaredLoss(GlmLoss):
    """``0.5 * (y - x^T theta)^2``; differs from the gaussian GLM loss by ``y^2 / 2``."""

    def __init__(self, dim: int):
        super().__init__(dim, "gaussian")

    def value(self, theta, x, y):
        return 0.5 * float(y - np.dot(x, theta)) ** 2

    def values(self, theta, X, Y):
        return 0.5 * (Y - X @ theta) ** 2

    def __repr__(self):
        return f"SquaredLoss(dim={self.dim})"


def loss_for(name: str, dim: int) -> LossModel:
    if name in ("squared", "linear"):
        return SquaredLoss(dim)
    return GlmLoss(dim, name)


def _check(loss: LossModel, sample: Sample, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if sample.n < 1:
        raise PreconditionError("empty sample")
    if theta.size != sample.d or loss.dim != sample.d:
        raise PreconditionError(
            f"dimension mismatch: theta {theta.size}, sample {sample.d}, loss {loss.dim}")
    return theta


def emp_risk(loss: LossModel, sample: Sample, theta) -> float:
    theta = _check(loss, sample, theta)
    return float(np.mean(loss.values(theta, sample.design, sample.labels)))


def emp_grad(loss: LossModel, sample: Sample, theta) -> np.ndarray:
    theta = _check(loss, sample, theta)
    return loss.gradients(theta, sample.design, sample.labels).mean(axis=0)


def emp_hessian(loss: LossModel, sample: Sample, theta) -> np.ndarray:
    theta = _check(loss, sample, theta)
    return loss.mean_hessian(theta, sample.design, sample.labels)


@dataclass(frozen=True)
class Decrement:
    """``value = n ||H^{+/2} grad||^2``; ``annihilated`` is ``n ||(I - P_H) grad||^2``."""

    value: float
    annihilated: float
    rank: int


def _glm_decrement(loss: GlmLoss, sample: Sample, theta, tol: TolLike) -> Decrement:
    # n ||H^{+/2} g||^2 equals ||P rho||^2 for the local design X~ = sqrt(a'') X,
    # since H = X~^T X~ / n and g = X~^T rho / n
    if isinstance(loss, SquaredLoss) or loss.family.name == "gaussian":
        rho = sample.design @ theta - sample.labels
        Xl, svd = sample.design, sample.svd
    else:
        rho, Xl = models.local_residuals(loss.family, sample, theta)
        svd = linalg.thin_svd(Xl)
    U, s, _ = svd
    r = linalg.design_rank(Xl, tol, svd)
    coef = U.T @ rho
    kept = float(min(coef[:r] @ coef[:r], rho @ rho))
    dropped = float(np.sum((s[r:] * coef[r:s.size]) ** 2) / sample.n)
    return Decrement(kept, dropped, r)


def decrement(loss: LossModel, sample: Sample, theta, tol: TolLike = None) -> Decrement:
    """Newton decrement with diagnostics.

    GLM losses go through the SVD of the local design (machine-precision rank
    rule); other losses use the eigendecomposition of the empirical Hessian.
    """
    theta = _check(loss, sample, theta)
    if isinstance(loss, GlmLoss):
        return _glm_decrement(loss, sample, theta, tol)
    g = emp_grad(loss, sample, theta)
    H = emp_hessian(loss, sample, theta)
    w, V, keep = linalg._psd_eigh(H, tol)
    c = V.T @ g
    val = sample.n * float(np.sum(c[keep] ** 2 / w[keep]))
    return Decrement(val, sample.n * float(np.sum(c[~keep] ** 2)), int(keep.sum()))


def newton_decrement(loss: LossModel, sample: Sample, theta, tol: TolLike = None) -> float:
    """``n ||H(theta)^{+/2} grad L(theta)||^2`` over the sample."""
    return decrement(loss, sample, theta, tol).value


@dataclass(frozen=True)
class FisherBundle:
    H: np.ndarray
    G: np.ndarray
    J: np.ndarray
    tr_J: float
    tr_J2: float
    op_norm_J: float


def fisher_bundle_empirical(loss: LossModel, sample: Sample, theta,
                            tol: TolLike = None) -> FisherBundle:
    """Plug-in ``H``, gradient covariance ``G`` (1/n normalization) and ``J = H^{+/2} G H^{+/2}``."""
    theta = _check(loss, sample, theta)
    if sample.n < 2:
        raise PreconditionError("fisher_bundle_empirical needs n >= 2")
    grads = loss.gradients(theta, sample.design, sample.labels)
    centered = grads - grads.mean(axis=0)
    G = centered.T @ centered / sample.n
    G = 0.5 * (G + G.T)
    H = loss.mean_hessian(theta, sample.design, sample.labels)
    R = linalg.pinv_sqrt(H, tol)
    J = R @ G @ R
    J = 0.5 * (J + J.T)
    ev = np.clip(np.linalg.eigvalsh(J), 0.0, None)
    return FisherBundle(H, G, J, float(ev.sum()), float(np.sum(ev**2)),
                        float(ev.max(initial=0.0)))


def separation_bar_delta(loss: LossModel, spec_k, theta_other, mc_trials: int = 100_000,
                         rng: Optional[np.random.Generator] = None) -> float:
    """Population decrement ``||H_k(theta)^{+/2} grad L_k(theta)||^2`` at ``theta = theta_other``.

    Closed form for squared loss on a linear-mean law (it equals the
    Mahalanobis separation); otherwise Monte Carlo over designs with the
    conditional mean in closed form for GLM losses.
    """
    theta = np.asarray(theta_other, dtype=float)
    linear_mean = isinstance(spec_k, models.LinearModelSpec) or (
        isinstance(spec_k, models.GlmSpec) and spec_k.family.name == "gaussian"
        and (spec_k.misspec is None or spec_k.misspec.mean_shift == 0.0))
    if isinstance(loss, GlmLoss) and loss.family.name == "gaussian" and linear_mean:
        Sigma = spec_k.covariance
        g = Sigma @ (theta - spec_k.theta)
        return float(g @ linalg.pinv_psd(Sigma) @ g)
    if mc_trials < 1000:
        raise PreconditionError("separation_bar_delta needs mc_trials >= 1000")
    rng = np.random.default_rng() if rng is None else rng
    if isinstance(loss, GlmLoss) and not isinstance(spec_k, models.MixtureSpec):
        X = spec_k.draw_design(mc_trials, rng)
        mu = spec_k.conditional_moments(X)[0]
        eta = X @ theta
        g = X.T @ (loss.family.mean(eta) - mu) / mc_trials
        H = (X * loss.family.variance(eta)[:, None]).T @ X / mc_trials
    else:
        s = models.draw_sample(spec_k, mc_trials, rng)
        g = emp_grad(loss, s, theta)
        H = emp_hessian(loss, s, theta)
    return float(g @ linalg.pinv_psd(H) @ g)
