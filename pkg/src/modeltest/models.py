"""Synthetic data-generating processes with full oracle knowledge.

Every sampler takes an explicit ``numpy.random.Generator``; the design is
always drawn before the labels so that a fixed seed reproduces a sample bit
for bit.
"""
from __future__ import annotations

import csv
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from . import linalg
from .errors import DimensionError, PreconditionError, SingularCurvatureError

CURVATURE_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# cumulant families


class CumulantFamily(ABC):
    """Canonical exponential family ``P(y|eta) = exp(eta*y - a(eta) + b(y))``.

    ``mean`` and ``variance`` are ``a'`` and ``a''``; they coincide with the
    first two central moments of the canonical conditional law.
    """

    name: str

    @abstractmethod
    def cumulant(self, eta): ...

    @abstractmethod
    def mean(self, eta): ...

    @abstractmethod
    def variance(self, eta): ...

    @abstractmethod
    def fourth_central(self, eta):
        """Fourth central moment of the canonical law at ``eta``."""

    @abstractmethod
    def sample(self, eta, rng: np.random.Generator) -> np.ndarray: ...

    def check_labels(self, y) -> None:
        pass

    def __repr__(self):
        return f"{type(self).__name__}()"


class GaussianFamily(CumulantFamily):
    name = "gaussian"

    def cumulant(self, eta):
        return 0.5 * np.square(eta)

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def variance(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def fourth_central(self, eta):
        return 3.0 * np.ones_like(np.asarray(eta, dtype=float))

    def sample(self, eta, rng):
        eta = np.asarray(eta, dtype=float)
        return eta + rng.standard_normal(eta.shape)


class LogisticFamily(CumulantFamily):
    """Labels in {-1, +1}; ``a(eta) = log(e^eta + e^-eta)``."""

    name = "logistic"

    def cumulant(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.logaddexp(eta, -eta)

    def mean(self, eta):
        return np.tanh(eta)

    def variance(self, eta):
        # sech^2 written to avoid cosh overflow
        t = np.exp(-2.0 * np.abs(np.asarray(eta, dtype=float)))
        return 4.0 * t / (1.0 + t) ** 2

    def fourth_central(self, eta):
        mu = np.tanh(eta)
        p = 0.5 * (1.0 + mu)
        return p * (1.0 - mu) ** 4 + (1.0 - p) * (1.0 + mu) ** 4

    def sample(self, eta, rng):
        eta = np.asarray(eta, dtype=float)
        u = rng.random(eta.shape)
        return np.where(u < 0.5 * (1.0 + np.tanh(eta)), 1.0, -1.0)

    def check_labels(self, y):
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise PreconditionError("logistic labels must be -1 or +1")


class PoissonFamily(CumulantFamily):
    """Counts; ``a(eta) = exp(eta)``. Experimental: unbounded curvature."""

    name = "poisson"

    def cumulant(self, eta):
        return np.exp(eta)

    def mean(self, eta):
        return np.exp(eta)

    def variance(self, eta):
        return np.exp(eta)

    def fourth_central(self, eta):
        lam = np.exp(eta)
        return lam + 3.0 * lam**2

    def sample(self, eta, rng):
        return rng.poisson(np.exp(np.asarray(eta, dtype=float))).astype(float)

    def check_labels(self, y):
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise PreconditionError("poisson labels must be nonnegative integers")


FAMILIES: dict[str, CumulantFamily] = {
    f.name: f for f in (GaussianFamily(), LogisticFamily(), PoissonFamily())
}


def get_family(family: Union[str, CumulantFamily]) -> CumulantFamily:
    if isinstance(family, CumulantFamily):
        return family
    try:
        return FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; known: {sorted(FAMILIES)}") from None


def safe_curvature(family: CumulantFamily, eta) -> np.ndarray:
    v = np.asarray(family.variance(eta), dtype=float)
    if np.any(~(v >= CURVATURE_FLOOR)):
        raise SingularCurvatureError("a''(eta) underflowed; local residuals undefined")
    return v


# ---------------------------------------------------------------------------
# samples


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Sample:
    """Design matrix with paired labels, optionally a conditional resample of them."""

    design: np.ndarray
    labels: np.ndarray
    resampled_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        X = _frozen(self.design)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        y = _frozen(self.labels).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionError(f"design {X.shape} does not match {y.shape[0]} labels")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "labels", y)
        if self.resampled_labels is not None:
            yr = _frozen(self.resampled_labels).reshape(-1)
            if yr.shape != y.shape:
                raise DimensionError("resampled_labels must match labels in length")
            object.__setattr__(self, "resampled_labels", yr)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def d(self) -> int:
        return self.design.shape[1]

    @cached_property
    def svd(self):
        """Thin SVD of the design, computed once per sample."""
        return linalg.thin_svd(self.design)

    def residuals(self, theta) -> np.ndarray:
        return self.labels - self.design @ np.asarray(theta, dtype=float)

    def with_resampled(self, resampled) -> "Sample":
        return replace(self, resampled_labels=resampled)

    def rows(self, idx) -> "Sample":
        yr = None if self.resampled_labels is None else self.resampled_labels[idx]
        return Sample(self.design[idx], self.labels[idx], yr)

    def scaled(self, factor: float) -> "Sample":
        yr = None if self.resampled_labels is None else self.resampled_labels * factor
        return Sample(self.design * factor, self.labels * factor, yr)

    def to_csv(self, path) -> None:
        header = [f"x{j + 1}" for j in range(self.d)] + ["y"]
        cols = [self.design, self.labels[:, None]]
        if self.resampled_labels is not None:
            header.append("y_resampled")
            cols.append(self.resampled_labels[:, None])
        table = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "Sample":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise PreconditionError(f"{path}: empty sample file")
        header, body = rows[0], rows[1:]
        if "y" not in header:
            raise PreconditionError(f"{path}: header must contain a 'y' column")
        table = np.array([[float(v) for v in r] for r in body if r], dtype=float)
        table = table.reshape(-1, len(header))
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        yr = table[:, header.index("y_resampled")] if "y_resampled" in header else None
        return cls(table[:, xcols], table[:, header.index("y")], yr)


# ---------------------------------------------------------------------------
# model specifications


def _psd_root(cov: np.ndarray) -> np.ndarray:
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
        return np.diag(np.sqrt(np.clip(np.diag(cov), 0.0, None)))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _check_cov(theta, cov):
    theta = _frozen(theta).reshape(-1)
    cov = _frozen(cov)
    if cov.shape != (theta.size, theta.size):
        raise DimensionError(f"covariance {cov.shape} incompatible with theta of length {theta.size}")
    linalg.numerical_rank(cov)  # raises on asymmetric / indefinite input
    return theta, cov


class _DesignMixin:
    theta: np.ndarray
    covariance: np.ndarray

    @property
    def d(self) -> int:
        return self.theta.size

    @cached_property
    def design_root(self) -> np.ndarray:
        return _psd_root(self.covariance)

    def draw_design(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise PreconditionError("sample size must be >= 1")
        return rng.standard_normal((n, self.d)) @ self.design_root


@dataclass(frozen=True, eq=False)
class LinearModelSpec(_DesignMixin):
    """``x ~ N(0, covariance)``, ``y = x^T theta + noise_sigma * eps``.

    Student-t noise is standardized to unit variance.
    """

    theta: np.ndarray
    covariance: np.ndarray
    noise_sigma: float = 1.0
    noise_family: str = "gaussian"
    dof: Optional[float] = None

    def __post_init__(self):
        theta, cov = _check_cov(self.theta, self.covariance)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "covariance", cov)
        if self.noise_sigma < 0:
            raise PreconditionError("noise_sigma must be nonnegative")
        if self.noise_family not in ("gaussian", "student_t"):
            raise ValueError(f"unknown noise_family {self.noise_family!r}")
        if self.noise_family == "student_t" and not (self.dof and self.dof > 2):
            raise PreconditionError("student_t noise needs dof > 2")

    family = property(lambda self: FAMILIES["gaussian"])

    def noise(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.noise_family == "gaussian":
            eps = rng.standard_normal(n)
        else:
            eps = rng.standard_t(self.dof, n) * math.sqrt((self.dof - 2.0) / self.dof)
        return self.noise_sigma * eps

    def draw_labels(self, X, rng):
        return X @ self.theta + self.noise(X.shape[0], rng)

    def conditional_moments(self, X):
        mean = X @ self.theta
        if self.noise_family == "gaussian":
            m4 = 3.0
        else:
            m4 = 3.0 * (self.dof - 2.0) / (self.dof - 4.0) if self.dof > 4 else math.inf
        s2 = self.noise_sigma**2
        ones = np.ones_like(mean)
        return mean, s2 * ones, s2 * s2 * m4 * ones


@dataclass(frozen=True, eq=False)
class Misspecification:
    """Label distortion applied on top of the canonical conditional law.

    ``y = a'(eta) + label_scale * (y_canonical - a'(eta)) + mean_shift * tanh(x^T w)``
    with ``w = shift_direction`` (default: first coordinate).
    """

    label_scale: float = 1.0
    mean_shift: float = 0.0
    shift_direction: Optional[np.ndarray] = None

    def shift(self, X) -> np.ndarray:
        if self.mean_shift == 0.0:
            return np.zeros(X.shape[0])
        if self.shift_direction is None:
            proj = X[:, 0]
        else:
            proj = X @ np.asarray(self.shift_direction, dtype=float)
        return self.mean_shift * np.tanh(proj)


@dataclass(frozen=True, eq=False)
class GlmSpec(_DesignMixin):
    theta: np.ndarray
    covariance: np.ndarray
    family: CumulantFamily = field(default_factory=GaussianFamily)
    misspec: Optional[Misspecification] = None

    def __post_init__(self):
        theta, cov = _check_cov(self.theta, self.covariance)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "family", get_family(self.family))

    def draw_labels(self, X, rng):
        eta = X @ self.theta
        y = self.family.sample(eta, rng)
        if self.misspec is not None:
            mu = self.family.mean(eta)
            y = mu + self.misspec.label_scale * (y - mu) + self.misspec.shift(X)
        return y

    def conditional_moments(self, X):
        eta = X @ self.theta
        mean = self.family.mean(eta)
        var = self.family.variance(eta)
        m4 = self.family.fourth_central(eta)
        if self.misspec is not None:
            s = self.misspec.label_scale
            mean = mean + self.misspec.shift(X)
            var, m4 = s**2 * var, s**4 * m4
        return mean, var, m4


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Row-wise mixture: each observation comes from a component picked by weight."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), s) for w, s in self.components)
        if not comps:
            raise PreconditionError("mixture needs at least one component")
        weights = np.array([w for w, _ in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise PreconditionError("mixture weights must be nonnegative and sum to 1")
        dims = {s.d for _, s in comps}
        fams = {_family_of(s).name for _, s in comps}
        if len(dims) != 1 or len(fams) != 1:
            raise PreconditionError("mixture components must share dimension and family")
        object.__setattr__(self, "components", comps)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    @property
    def d(self) -> int:
        return self.components[0][1].d

    @property
    def family(self) -> CumulantFamily:
        return _family_of(self.components[0][1])

    def shared_covariance(self) -> bool:
        covs = [s.covariance for _, s in self.components]
        return all(np.allclose(c, covs[0]) for c in covs[1:])


ModelSpec = Union[LinearModelSpec, GlmSpec, MixtureSpec]


def _family_of(spec) -> CumulantFamily:
    if isinstance(spec, (LinearModelSpec, GlmSpec, MixtureSpec)):
        return spec.family
    raise TypeError(f"not a model spec: {type(spec).__name__}")


# ---------------------------------------------------------------------------
# samplers


def sample_linear(spec: LinearModelSpec, n: int, rng: np.random.Generator) -> Sample:
    X = spec.draw_design(n, rng)
    return Sample(X, spec.draw_labels(X, rng))


def sample_glm(spec: GlmSpec, n: int, rng: np.random.Generator) -> Sample:
    X = spec.draw_design(n, rng)
    return Sample(X, spec.draw_labels(X, rng))


def sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator,
                   return_components: bool = False):
    if n < 1:
        raise PreconditionError("sample size must be >= 1")
    comp = rng.choice(len(spec.components), size=n, p=spec.weights)
    X = np.empty((n, spec.d))
    y = np.empty(n)
    for j, (_, s) in enumerate(spec.components):
        idx = np.flatnonzero(comp == j)
        if idx.size:
            part = draw_sample(s, idx.size, rng)
            X[idx], y[idx] = part.design, part.labels
    out = Sample(X, y)
    return (out, comp) if return_components else out


def draw_sample(spec: ModelSpec, n: int, rng: np.random.Generator) -> Sample:
    if isinstance(spec, LinearModelSpec):
        return sample_linear(spec, n, rng)
    if isinstance(spec, GlmSpec):
        return sample_glm(spec, n, rng)
    if isinstance(spec, MixtureSpec):
        return sample_mixture(spec, n, rng)
    raise TypeError(f"not a model spec: {type(spec).__name__}")


def resample_labels(spec: ModelSpec, sample: Sample, rng: np.random.Generator) -> Sample:
    """Fresh draws of ``y | x`` at the sample's design rows."""
    if sample.d != spec.d:
        raise PreconditionError(f"sample has d={sample.d}, spec has d={spec.d}")
    X = sample.design
    if isinstance(spec, MixtureSpec):
        if not spec.shared_covariance():
            raise PreconditionError(
                "conditional resampling of a mixture needs a shared design covariance")
        comp = rng.choice(len(spec.components), size=sample.n, p=spec.weights)
        y = np.empty(sample.n)
        for j, (_, s) in enumerate(spec.components):
            idx = np.flatnonzero(comp == j)
            if idx.size:
                y[idx] = s.draw_labels(X[idx], rng)
    else:
        y = spec.draw_labels(X, rng)
    return sample.with_resampled(y)



# ---------------------------------------------------------------------------
# GLM quantities


def local_residuals(family, sample: Sample, theta):
    """Curvature-standardized residuals and predictors at ``theta``.

    Returns ``(rho, local_design)`` with ``rho_i = (a'(eta_i) - y_i) / sqrt(a''(eta_i))``
    and rows ``sqrt(a''(eta_i)) x_i``.
    """
    family = get_family(family)
    eta = sample.design @ np.asarray(theta, dtype=float)
    root = np.sqrt(safe_curvature(family, eta))
    rho = (family.mean(eta) - sample.labels) / root
    return rho, sample.design * root[:, None]


def delta_hat_glm(family, x, theta0, theta1, k: int):
    """Conditional separation ``(a'(x.theta0) - a'(x.theta1))^2 / a''(x.theta_{1-k})``.

    ``x`` may be one point or a matrix of rows.
    """
    if k not in (0, 1):
        raise ValueError("hypothesis index k must be 0 or 1")
    family = get_family(family)
    x = np.asarray(x, dtype=float)
    eta0, eta1 = x @ np.asarray(theta0, float), x @ np.asarray(theta1, float)
    curv = safe_curvature(family, eta1 if k == 0 else eta0)
    out = (family.mean(eta0) - family.mean(eta1)) ** 2 / curv
    return float(out) if np.ndim(out) == 0 else out


def population_delta_linear(spec_k: LinearModelSpec, theta0, theta1) -> float:
    """Squared Mahalanobis distance ``||Sigma_k^{1/2}(theta1 - theta0)||^2``."""
    v = np.asarray(theta1, float) - np.asarray(theta0, float)
    return float(v @ spec_k.covariance @ v)


def population_minimizer(spec: ModelSpec, rng: Optional[np.random.Generator] = None,
                         n_mc: int = 200_000, max_iter: int = 50) -> np.ndarray:
    """Population risk minimizer under the canonical loss of the spec's family.

    Closed form when the conditional mean is linear in the canonical link
    (no mean shift; linear mixtures); otherwise damped Newton over a fixed
    Monte-Carlo draw of designs using closed-form conditional means.
    """
    if isinstance(spec, LinearModelSpec):
        return spec.theta.copy()
    if isinstance(spec, GlmSpec) and (spec.misspec is None or spec.misspec.mean_shift == 0.0):
        return spec.theta.copy()
    if isinstance(spec, MixtureSpec) and all(
            isinstance(s, LinearModelSpec) for _, s in spec.components):
        S = sum(w * s.covariance for w, s in spec.components)
        b = sum(w * s.covariance @ s.theta for w, s in spec.components)
        return linalg.pinv_psd(S) @ b

    rng = np.random.default_rng(0) if rng is None else rng
    family = _family_of(spec)
    if isinstance(spec, MixtureSpec):
        comp = rng.choice(len(spec.components), size=n_mc, p=spec.weights)
        X = np.empty((n_mc, spec.d))
        mu = np.empty(n_mc)
        for j, (_, s) in enumerate(spec.components):
            idx = np.flatnonzero(comp == j)
            X[idx] = s.draw_design(idx.size, rng) if idx.size else X[idx]
            mu[idx] = s.conditional_moments(X[idx])[0] if idx.size else mu[idx]
        theta = np.zeros(spec.d)
    else:
        X = spec.draw_design(n_mc, rng)
        mu = spec.conditional_moments(X)[0]
        theta = spec.theta.copy()

    def risk(t):
        eta = X @ t
        return float(np.mean(family.cumulant(eta) - mu * eta))

    current = risk(theta)
    for _ in range(max_iter):
        eta = X @ theta
        grad = X.T @ (family.mean(eta) - mu) / n_mc
        hess = (X * family.variance(eta)[:, None]).T @ X / n_mc
        step = linalg.pinv_psd(hess) @ grad
        t = 1.0
        while t > 1e-8:
            cand = theta - t * step
            val = risk(cand)
            if val <= current:
                break
            t *= 0.5
        theta, prev, current = cand, current, val
        if abs(prev - current) <= 1e-15 * max(1.0, abs(current)) or np.linalg.norm(t * step) < 1e-12:
            break
    return theta


@dataclass(frozen=True)
class GlmMoments:
    """Monte-Carlo marginals of the conditional moment ratios, with standard errors.

    ``delta``/``e_delta_sq`` are the first two moments of the conditional
    separation between the spec's own minimizer and ``eval_theta``.
    """

    nu: float
    nu_se: float
    kappa: float
    kappa_se: float
    beta: float
    beta_se: float
    e_delta_sq: float
    e_delta_sq_se: float
    delta: float
    delta_se: float
    trials: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    if v.size < 2:
        return float(v.mean()), math.inf
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def conditional_ratios(spec, X, eval_theta, minimizer):
    """Pointwise ``nu, kappa, beta, delta_hat`` at design rows ``X``."""
    family = _family_of(spec)
    eval_theta = np.asarray(eval_theta, dtype=float)
    eta_eval = X @ eval_theta
    curv = safe_curvature(family, eta_eval)
    mean, var, m4 = spec.conditional_moments(X)
    fit = family.mean(X @ minimizer)
    nu = var / curv
    kappa = m4 / curv**2
    beta = (fit - mean) ** 2 / curv
    dhat = (fit - family.mean(eta_eval)) ** 2 / curv
    return nu, kappa, beta, dhat


def glm_moments_mc(spec, eval_theta, trials: int, rng: np.random.Generator,
                   minimizer=None) -> GlmMoments:
    """Moment ratios at ``eval_theta``: closed form given ``x``, Monte Carlo over ``x``."""
    if isinstance(spec, MixtureSpec):
        raise PreconditionError("moment oracle supports linear and GLM specs only")
    if trials < 100:
        raise PreconditionError("glm_moments_mc needs trials >= 100")
    if minimizer is None:
        minimizer = population_minimizer(spec, rng)
    X = spec.draw_design(trials, rng)
    nu, kappa, beta, dhat = conditional_ratios(spec, X, eval_theta, np.asarray(minimizer, float))
    return GlmMoments(*_mean_se(nu), *_mean_se(kappa), *_mean_se(beta),
                      *_mean_se(dhat**2), *_mean_se(dhat), trials=trials)


# ---------------------------------------------------------------------------
# (de)serialization of specs


def _cov_from(d: dict, dim: int) -> np.ndarray:
    if "covariance" in d:
        return np.asarray(d["covariance"], dtype=float)
    if "diag" in d:
        return np.diag(np.asarray(d["diag"], dtype=float))
    return np.eye(dim)


def spec_from_dict(d: dict) -> ModelSpec:
    """Build a spec from a config block; see README for the schema."""
    kind = d.get("kind", "linear")
    if kind == "mixture":
        return MixtureSpec(tuple((c["weight"], spec_from_dict(c["spec"]))
                                 for c in d["components"]))
    theta = np.asarray(d["theta"], dtype=float)
    cov = _cov_from(d, theta.size)
    if kind == "linear":
        return LinearModelSpec(theta, cov, float(d.get("noise_sigma", 1.0)),
                               d.get("noise_family", "gaussian"), d.get("dof"))
    if kind == "glm":
        mis = d.get("misspec")
        misspec = None
        if mis:
            w = mis.get("shift_direction")
            misspec = Misspecification(float(mis.get("label_scale", 1.0)),
                                       float(mis.get("mean_shift", 0.0)),
                                       None if w is None else np.asarray(w, float))
        return GlmSpec(theta, cov, get_family(d.get("family", "gaussian")), misspec)
    raise ValueError(f"unknown spec kind {kind!r}")


def spec_to_dict(spec: ModelSpec) -> dict:
    if isinstance(spec, MixtureSpec):
        return {"kind": "mixture",
                "components": [{"weight": w, "spec": spec_to_dict(s)} for w, s in spec.components]}
    out = {"theta": spec.theta.tolist(), "covariance": spec.covariance.tolist()}
    if isinstance(spec, LinearModelSpec):
        out.update(kind="linear", noise_sigma=spec.noise_sigma,
                   noise_family=spec.noise_family)
        if spec.dof is not None:
            out["dof"] = spec.dof
        return out
    out.update(kind="glm", family=spec.family.name)
    if spec.misspec is not None:
        m = spec.misspec
        out["misspec"] = {"label_scale": m.label_scale, "mean_shift": m.mean_shift}
        if m.shift_direction is not None:
            out["misspec"]["shift_direction"] = np.asarray(m.shift_direction).tolist()
    return out

