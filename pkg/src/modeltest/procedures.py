"""Model-discrimination tests: which of two samples was generated by ``theta_star``.

Every test returns a ``TestOutcome`` whose two debiased statistics are
compared with the literal ``>=``: H1 is declared iff ``stat_left >= stat_right``,
so exact ties go to H1.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import linalg, mestim, models
from .errors import DegenerateEstimateError, DimensionError, PreconditionError
from .linalg import TolLike
from .models import GlmMoments, Sample


class Decision(str, enum.Enum):
    H0 = "H0"
    H1 = "H1"

    @property
    def index(self) -> int:
        return 0 if self is Decision.H0 else 1

    @classmethod
    def coerce(cls, value) -> "Decision":
        if isinstance(value, cls):
            return value
        if value in (0, 1) and not isinstance(value, str):
            return cls.H1 if value else cls.H0
        return cls(str(value))


@dataclass(frozen=True)
class TestOutcome:
    decision: Decision
    stat_left: float
    stat_right: float
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @classmethod
    def compare(cls, left: float, right: float, **diagnostics) -> "TestOutcome":
        dec = Decision.H1 if left >= right else Decision.H0
        return cls(dec, float(left), float(right),
                   {k: float(v) for k, v in diagnostics.items()})

    @property
    def decision_index(self) -> int:
        return self.decision.index

    def to_dict(self) -> dict:
        return {"decision": self.decision.value, "stat_left": self.stat_left,
                "stat_right": self.stat_right, "diagnostics": dict(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TestOutcome":
        return cls(Decision(d["decision"]), float(d["stat_left"]), float(d["stat_right"]),
                   {k: float(v) for k, v in d.get("diagnostics", {}).items()})


def _theta(theta, *samples: Sample) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    for s in samples:
        if s.d != theta.size:
            raise DimensionError(f"sample has d={s.d} but theta has length {theta.size}")
    return theta


# ---------------------------------------------------------------------------
# linear-model tests


def _projected(s: Sample, theta, tol) -> tuple[float, int]:
    basis = linalg.column_basis(s.design, tol, s.svd)
    coef = basis.T @ s.residuals(theta)
    return float(coef @ coef), basis.shape[1]


def test_lin(s0: Sample, s1: Sample, theta_star, tol: TolLike = None) -> TestOutcome:
    """Projected residual norms debiased by the design ranks."""
    theta = _theta(theta_star, s0, s1)
    p0, r0 = _projected(s0, theta, tol)
    p1, r1 = _projected(s1, theta, tol)
    return TestOutcome.compare(p0 - r0, p1 - r1, proj_left=p0, proj_right=p1,
                               rank_left=r0, rank_right=r1)


def test_val(s0: Sample, s1: Sample, theta_star,
             optimal_risks: Optional[Sequence[float]] = None) -> TestOutcome:
    """Residual sums of squares against ``n_k`` (or against ``n_k L_k(theta_k)``).

    ``optimal_risks`` are population risks under the unhalved squared loss.
    """
    theta = _theta(theta_star, s0, s1)
    rss0 = float(np.sum(s0.residuals(theta) ** 2))
    rss1 = float(np.sum(s1.residuals(theta) ** 2))
    risks = (1.0, 1.0) if optimal_risks is None else tuple(map(float, optimal_risks))
    if len(risks) != 2:
        raise PreconditionError("optimal_risks must be a pair")
    return TestOutcome.compare(rss0 - s0.n * risks[0], rss1 - s1.n * risks[1],
                               rss_left=rss0, rss_right=rss1)


def test_grad(s0: Sample, s1: Sample, theta_star) -> TestOutcome:
    """Empirical gradient norms debiased by ``Tr(Sigma_hat)`` (unit noise)."""
    theta = _theta(theta_star, s0, s1)
    out = []
    for s in (s0, s1):
        g = s.design.T @ s.residuals(theta)
        out.append((float(g @ g) / s.n, float(np.sum(s.design**2)) / s.n))
    return TestOutcome.compare(out[0][0] - out[0][1], out[1][0] - out[1][1],
                               grad_sq_left=out[0][0], grad_sq_right=out[1][0],
                               trace_left=out[0][1], trace_right=out[1][1])


def _swap_statistic(s0: Sample, s1: Sample, theta, theta_bar) -> tuple[float, float]:
    lhs = float(np.sum(s0.residuals(theta) ** 2) + np.sum(s1.residuals(theta_bar) ** 2))
    rhs = float(np.sum(s0.residuals(theta_bar) ** 2) + np.sum(s1.residuals(theta) ** 2))
    return lhs, rhs


def test_oracle_lr(s0: Sample, s1: Sample, theta_star, theta_bar) -> TestOutcome:
    """Likelihood-ratio test with the complementary model ``theta_bar`` known."""
    theta = _theta(theta_star, s0, s1)
    theta_bar = _theta(theta_bar, s0)
    return TestOutcome.compare(*_swap_statistic(s0, s1, theta, theta_bar))


def test_plug(s0: Sample, s1: Sample, theta_star, tol: TolLike = None) -> TestOutcome:
    """Oracle LR test with ``theta_bar`` replaced by ``theta0_hat + theta1_hat - theta_star``."""
    theta = _theta(theta_star, s0, s1)
    t0 = linalg.least_squares_minnorm(s0.design, s0.labels, tol, s0.svd)
    t1 = linalg.least_squares_minnorm(s1.design, s1.labels, tol, s1.svd)
    theta_bar = t0 + t1 - theta
    lhs, rhs = _swap_statistic(s0, s1, theta, theta_bar)
    return TestOutcome.compare(lhs, rhs,
                               plugin_dist=float(np.linalg.norm(theta_bar - theta)))


# ---------------------------------------------------------------------------
# variance-adaptive tests


@dataclass(frozen=True)
class VarianceEstimate:
    sigma2_hat: float
    mode: str  # "residual" or "resample"
    dof: int


def estimate_sigma2(sample: Sample, theta_star, tol: TolLike = None,
                    mode: str = "auto") -> VarianceEstimate:
    """Noise variance from the residual complement or from resampled labels.

    ``mode="auto"`` picks the residual estimate when ``n >= 2r`` and the
    resampling estimate otherwise; either can be forced.
    """
    if mode not in ("auto", "residual", "resample"):
        raise ValueError(f"unknown mode {mode!r}")
    theta = _theta(theta_star, sample)
    basis = linalg.column_basis(sample.design, tol, sample.svd)
    r = basis.shape[1]
    n = sample.n
    if mode == "auto":
        mode = "residual" if n >= 2 * r else "resample"
    if mode == "residual":
        if n <= r:
            raise DegenerateEstimateError("residual mode has zero degrees of freedom")
        u = sample.residuals(theta)
        c = basis.T @ u
        est = VarianceEstimate(float(max(u @ u - c @ c, 0.0)) / (n - r), "residual", n - r)
    else:
        if sample.resampled_labels is None:
            raise PreconditionError(
                "n < 2*rank: variance estimation needs resampled labels (conditional resampling)")
        if r == 0:
            raise DegenerateEstimateError("resample mode needs a nonzero design")
        c = basis.T @ (sample.labels - sample.resampled_labels)
        est = VarianceEstimate(float(c @ c) / (2.0 * r), "resample", r)
    if not (est.sigma2_hat > 0 and math.isfinite(est.sigma2_hat)):
        raise DegenerateEstimateError(f"estimated noise variance is {est.sigma2_hat} ({est.mode} mode)")
    return est


def test_lin_var(s0: Sample, s1: Sample, theta_star, sigma2_0: float, sigma2_1: float,
                 tol: TolLike = None) -> TestOutcome:
    if not (sigma2_0 > 0 and sigma2_1 > 0):
        raise PreconditionError("noise variances must be positive")
    theta = _theta(theta_star, s0, s1)
    p0, r0 = _projected(s0, theta, tol)
    p1, r1 = _projected(s1, theta, tol)
    return TestOutcome.compare(p0 / sigma2_0 - r0, p1 / sigma2_1 - r1,
                               proj_left=p0, proj_right=p1, rank_left=r0, rank_right=r1,
                               sigma2_left=sigma2_0, sigma2_right=sigma2_1)


def test_lin_var_plus(s0: Sample, s1: Sample, theta_star, tol: TolLike = None) -> TestOutcome:
    v0 = estimate_sigma2(s0, theta_star, tol)
    v1 = estimate_sigma2(s1, theta_star, tol)
    out = test_lin_var(s0, s1, theta_star, v0.sigma2_hat, v1.sigma2_hat, tol)
    out.diagnostics.update(resample_left=float(v0.mode == "resample"),
                           resample_right=float(v1.mode == "resample"))
    return out


# ---------------------------------------------------------------------------
# general M-estimation tests


def test_asymp(loss: mestim.LossModel, s0: Sample, s1: Sample, theta_star,
               trace0: Optional[float] = None, trace1: Optional[float] = None,
               tol: TolLike = None) -> TestOutcome:
    """Newton decrements debiased by ``Tr J_k``; missing traces default to Hessian ranks."""
    theta = _theta(theta_star, s0, s1)
    d0 = mestim.decrement(loss, s0, theta, tol)
    d1 = mestim.decrement(loss, s1, theta, tol)
    t0 = d0.rank if trace0 is None else float(trace0)
    t1 = d1.rank if trace1 is None else float(trace1)
    return TestOutcome.compare(d0.value - t0, d1.value - t1,
                               decrement_left=d0.value, decrement_right=d1.value,
                               trace_left=t0, trace_right=t1,
                               annihilated_left=d0.annihilated, annihilated_right=d1.annihilated)


def _pooled_quadratic(loss, a: Sample, b: Sample, theta, v, tol) -> float:
    """``||H^{+/2} v||^2`` with ``H`` the empirical Hessian of the concatenated copies."""
    X = np.vstack([a.design, b.design])
    Y = np.concatenate([a.labels, b.labels])
    if isinstance(loss, mestim.GlmLoss):
        root = np.sqrt(models.safe_curvature(loss.family, X @ theta))
        Xl = X * root[:, None]
        svd = linalg.thin_svd(Xl)
        _, s, Vt = svd
        r = linalg.design_rank(Xl, tol, svd)
        c = Vt[:r] @ v
        # H = Xl^T Xl / N, so H^+ has eigenvalues N / s^2
        return float(X.shape[0] * np.sum(c**2 / s[:r] ** 2))
    H = loss.mean_hessian(theta, X, Y)
    return float(v @ linalg.pinv_psd(H, tol) @ v)


def estimate_trace(loss: mestim.LossModel, sample_a: Sample, sample_b: Sample, theta_star,
                   tol: TolLike = None) -> float:
    """``(n/2) ||H^{+/2} (grad_a - grad_b)||^2`` with the Hessian pooled over both copies."""
    if sample_a.n != sample_b.n:
        raise PreconditionError("trace estimate needs two copies of equal size")
    theta = _theta(theta_star, sample_a, sample_b)
    v = mestim.emp_grad(loss, sample_a, theta) - mestim.emp_grad(loss, sample_b, theta)
    return 0.5 * sample_a.n * _pooled_quadratic(loss, sample_a, sample_b, theta, v, tol)


def split_halves(sample: Sample) -> tuple[Sample, Sample, int]:
    """First and second halves; an odd trailing row is dropped. Returns the drop count."""
    h = sample.n // 2
    return sample.rows(slice(0, h)), sample.rows(slice(h, 2 * h)), sample.n - 2 * h


def test_asymp_plus(loss: mestim.LossModel, s0: Sample, s1: Sample, theta_star,
                    tol: TolLike = None) -> TestOutcome:
    if s0.n < 4 or s1.n < 4:
        raise PreconditionError("adaptive trace estimation needs at least 4 rows per sample")
    traces, dropped = [], []
    for s in (s0, s1):
        a, b, k = split_halves(s)
        traces.append(estimate_trace(loss, a, b, theta_star, tol))
        dropped.append(k)
    out = test_asymp(loss, s0, s1, theta_star, traces[0], traces[1], tol)
    out.diagnostics.update(dropped_left=dropped[0], dropped_right=dropped[1])
    return out


# ---------------------------------------------------------------------------
# GLM tests


@dataclass(frozen=True)
class GlmTheoryConstants:
    C_paper: float = 640_000.0
    error_target: float = 0.4

    def __post_init__(self):
        if not self.C_paper > 0:
            raise ValueError("C_paper must be positive")


def _local_sq(family, s: Sample, theta) -> float:
    rho, _ = models.local_residuals(family, s, theta)
    return float(rho @ rho)


def test_glm(family, s0: Sample, s1: Sample, theta_star, nu0: float, nu1: float) -> TestOutcome:
    """Local residual sums of squares against ``n_k nu_k(theta_star)``."""
    family = models.get_family(family)
    theta = _theta(theta_star, s0, s1)
    q0, q1 = _local_sq(family, s0, theta), _local_sq(family, s1, theta)
    return TestOutcome.compare(q0 - s0.n * nu0, q1 - s1.n * nu1,
                               local_sq_left=q0, local_sq_right=q1, nu_left=nu0, nu_right=nu1,
                               unequal_sizes=float(s0.n != s1.n))


def estimate_nu(family, sample: Sample, theta_star) -> float:
    """``(1/2n) sum (y - y_tilde)^2 / a''(x^T theta_star)``."""
    if sample.resampled_labels is None:
        raise PreconditionError("estimating nu needs resampled labels (conditional resampling)")
    family = models.get_family(family)
    theta = _theta(theta_star, sample)
    curv = models.safe_curvature(family, sample.design @ theta)
    diff = sample.labels - sample.resampled_labels
    return float(np.sum(diff**2 / curv) / (2.0 * sample.n))


def test_glm_plus(family, s0: Sample, s1: Sample, theta_star) -> TestOutcome:
    nu0 = estimate_nu(family, s0, theta_star)
    nu1 = estimate_nu(family, s1, theta_star)
    return test_glm(family, s0, s1, theta_star, nu0, nu1)


def block_size_from(kappa0: float, kappa1: float, e_delta_sq1: float, delta1: float,
                    consts: GlmTheoryConstants = GlmTheoryConstants()) -> int:
    if not delta1 > 0:
        raise PreconditionError("delta1 must be positive")
    worst = max(kappa0, kappa1, 4.0 * e_delta_sq1)
    return int(math.ceil(2.0 * consts.C_paper * worst / delta1**2))


def block_size_glm(moments0: GlmMoments, moments1: GlmMoments, delta1: float,
                   consts: GlmTheoryConstants = GlmTheoryConstants()) -> int:
    """Sample size per block at which one GLM test errs with probability at most 2/5.

    ``moments0``/``moments1`` are evaluated at ``theta0`` under the first and
    second law respectively.
    """
    return block_size_from(moments0.kappa, moments1.kappa, moments1.e_delta_sq, delta1, consts)


def majority_vote(decisions: Iterable) -> Decision:
    decisions = [Decision.coerce(d) for d in decisions]
    if not decisions:
        raise PreconditionError("majority vote over an empty list")
    ones = sum(d is Decision.H1 for d in decisions)
    return Decision.H1 if ones >= len(decisions) / 2 else Decision.H0


def _blocks(n: int, b: int) -> list[slice]:
    m = math.ceil(n / b)
    return [slice(i, min(i + m, n)) for i in range(0, n, m)]


def run_voting_test(family, s0: Sample, s1: Sample, theta_star, blocks: int,
                    nu: Optional[Sequence[float]] = None) -> TestOutcome:
    """Majority vote over contiguous blocks of size ``ceil(n/b)``.

    With ``nu=None`` each block runs the adaptive test on resampled labels.
    Blocks shorter than 2 rows are dropped.
    """
    if blocks < 1:
        raise PreconditionError("need at least one block")
    if s0.n < blocks or s1.n < blocks:
        raise PreconditionError("more blocks than observations")
    pairs = [(a, b) for a, b in zip(_blocks(s0.n, blocks), _blocks(s1.n, blocks))
             if a.stop - a.start >= 2 and b.stop - b.start >= 2]
    if not pairs:
        raise PreconditionError("no block of size >= 2")
    votes = []
    for a, b in pairs:
        p0, p1 = s0.rows(a), s1.rows(b)
        if nu is None:
            out = test_glm_plus(family, p0, p1, theta_star)
        else:
            out = test_glm(family, p0, p1, theta_star, nu[0], nu[1])
        votes.append(out.decision)
    ones = sum(v is Decision.H1 for v in votes)
    return TestOutcome.compare(ones, len(votes) / 2, blocks_used=len(votes),
                               blocks_dropped=max(len(_blocks(s0.n, blocks)),
                                                  len(_blocks(s1.n, blocks))) - len(votes))
