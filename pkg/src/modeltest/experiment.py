"""Monte-Carlo harness comparing the linear-model tests on synthetic instances.

Each (grid point, trial, hypothesis) triple owns a counter-based substream
``SeedSequence(seed, spawn_key=(g, t, h, j))`` for sample ``j``, so results do
not depend on evaluation order or on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import mestim, models, procedures as P
from .errors import PreconditionError
from .models import LinearModelSpec, Sample

DEFAULT_GRID = tuple(float(2**k) for k in range(9))  # 1 .. 256
DEFAULT_TESTS = ("lin", "val", "grad", "plug")
GRAD_N_CAP = 4096


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class Scenario:
    """Shared design covariance and a separation direction ``v`` with ``v^T Sigma v = 1``.

    ``theta0 = 0`` and ``theta1 = sqrt(Delta) v``.
    """

    covariance_diag: np.ndarray
    direction: np.ndarray

    @property
    def d(self) -> int:
        return self.covariance_diag.size

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.covariance_diag))

    def thetas(self, delta: float) -> tuple[np.ndarray, np.ndarray]:
        if delta < 0:
            raise PreconditionError("separation must be nonnegative")
        return np.zeros(self.d), math.sqrt(delta) * self.direction

    def specs(self, delta: float) -> tuple[LinearModelSpec, LinearModelSpec]:
        cov = np.diag(self.covariance_diag)
        t0, t1 = self.thetas(delta)
        return LinearModelSpec(t0, cov), LinearModelSpec(t1, cov)


def figure1_spec(r: int, kappa: float) -> Scenario:
    """``d = 2r``, ``Sigma = diag(1 x r/2, kappa x r/2, 0 x r)``, separation along ``e1``."""
    if r < 2 or r % 2:
        raise PreconditionError("rank r must be a positive even integer")
    if not kappa > 0:
        raise PreconditionError("kappa must be positive")
    h = r // 2
    diag = np.concatenate([np.ones(h), np.full(h, float(kappa)), np.zeros(r)])
    e1 = np.zeros(2 * r)
    e1[0] = 1.0
    return Scenario(diag, e1)


def grad_spec(r_hat: int, kappa: float) -> Scenario:
    """``Sigma = diag(1 x (r-1), 1/kappa, 0 x r)``, separation along the smallest eigendirection."""
    diag = np.concatenate([np.ones(r_hat - 1), [1.0 / kappa], np.zeros(r_hat)])
    v = np.zeros(2 * r_hat)
    v[r_hat - 1] = math.sqrt(kappa)
    return Scenario(diag, v)


# ---------------------------------------------------------------------------
# tests available to the harness


TestFn = Callable[[Sample, Sample, np.ndarray, np.ndarray], P.TestOutcome]


def _asymp(s0, s1, theta, _bar):
    return P.test_asymp(mestim.SquaredLoss(s0.d), s0, s1, theta)


def _asymp_plus(s0, s1, theta, _bar):
    return P.test_asymp_plus(mestim.SquaredLoss(s0.d), s0, s1, theta)


TESTS: dict[str, TestFn] = {
    "lin": lambda s0, s1, t, _: P.test_lin(s0, s1, t),
    "val": lambda s0, s1, t, _: P.test_val(s0, s1, t),
    "grad": lambda s0, s1, t, _: P.test_grad(s0, s1, t),
    "plug": lambda s0, s1, t, _: P.test_plug(s0, s1, t),
    "oracle": lambda s0, s1, t, bar: P.test_oracle_lr(s0, s1, t, bar),
    "lin_var_plus": lambda s0, s1, t, _: P.test_lin_var_plus(s0, s1, t),
    "asymp": _asymp,
    "asymp_plus": _asymp_plus,
}
NEEDS_RESAMPLE = {"lin_var_plus"}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 64
    rank_r: int = 8
    condition_kappa: float = 2.0
    d: Optional[int] = None
    n_delta_grid: tuple = DEFAULT_GRID
    trials: int = 2000
    seed: int = 0
    tests: tuple = DEFAULT_TESTS
    hypothesis: str = "H0"
    scenario: str = "figure1"
    mirror: bool = False

    def __post_init__(self):
        object.__setattr__(self, "n_delta_grid", tuple(float(v) for v in self.n_delta_grid))
        object.__setattr__(self, "tests", tuple(self.tests))
        if self.d is None:
            object.__setattr__(self, "d", 2 * self.rank_r)
        if self.n < 1:
            raise PreconditionError("n must be >= 1")
        if self.trials < 1:
            raise PreconditionError("trials must be >= 1")
        if not self.tests:
            raise PreconditionError("no tests selected")
        unknown = [t for t in self.tests if t not in TESTS]
        if unknown:
            raise PreconditionError(f"unknown test identifiers {unknown}; known: {sorted(TESTS)}")
        if self.scenario not in ("figure1", "grad"):
            raise PreconditionError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "figure1" and self.rank_r % 2:
            raise PreconditionError("rank_r must be even")
        if self.rank_r < 1 or self.d != 2 * self.rank_r:
            raise PreconditionError("d must equal 2 * rank_r")
        if not self.condition_kappa >= 1 and self.scenario == "figure1":
            raise PreconditionError("condition_kappa must be >= 1")
        grid = np.array(self.n_delta_grid)
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise PreconditionError("n_delta_grid must be positive and strictly increasing")
        if self.hypothesis not in ("H0", "H1", "both"):
            raise PreconditionError("hypothesis must be H0, H1 or both")
        if not 0 <= self.seed < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")

    def scenario_spec(self) -> Scenario:
        if self.scenario == "grad":
            return grad_spec(self.rank_r, self.condition_kappa)
        return figure1_spec(self.rank_r, self.condition_kappa)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_delta_grid"] = list(self.n_delta_grid)
        out["tests"] = list(self.tests)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise PreconditionError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})


def grad_suboptimality_config(r_hat: int, kappa: Optional[float] = None,
                              n_cap: int = GRAD_N_CAP, **overrides) -> ExperimentConfig:
    """Ill-conditioned instance where the gradient-norm test lags behind.

    ``kappa = sqrt(r_hat)`` and ``n = 40 r_hat^{3/2}`` unless capped.
    """
    if r_hat < 16:
        raise PreconditionError("the gradient-suboptimality instance needs r_hat >= 16")
    kappa = math.sqrt(r_hat) if kappa is None else float(kappa)
    n = int(math.ceil(40 * r_hat**1.5))
    if n > n_cap:
        warnings.warn(f"sample size {n} capped at {n_cap}", RuntimeWarning, stacklevel=2)
        n = n_cap
    base = dict(n=n, rank_r=r_hat, condition_kappa=kappa, scenario="grad",
                tests=("lin", "val", "grad"))
    base.update(overrides)
    return ExperimentConfig(**base)


PRESETS = {f"fig1-r{r}-k{k}": dict(rank_r=r, condition_kappa=float(k))
           for r in (8, 32, 64) for k in (2, 16, 128)}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name == "grad-r16":
        return grad_suboptimality_config(16, **overrides)
    if name not in PRESETS:
        raise PreconditionError(f"unknown preset {name!r}; known: {sorted(PRESETS) + ['grad-r16']}")
    return ExperimentConfig(**{**PRESETS[name], **overrides})


def preset_names() -> list[str]:
    return sorted(PRESETS) + ["grad-r16"]


def theory_envelope(n: int, delta: float, r_bar: float, C: float = 1.0, c: float = 0.125) -> float:
    """Shape of the type-I bound ``C exp(-c n Delta min{1, n Delta / r_bar})``."""
    if not (C > 0 and c > 0 and r_bar > 0):
        raise PreconditionError("C, c and r_bar must be positive")
    nd = n * delta
    return C * math.exp(-c * nd * min(1.0, nd / r_bar))


# ---------------------------------------------------------------------------
# running


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _draw(spec: LinearModelSpec, n: int, rng, resample: bool) -> Sample:
    X = rng.standard_normal((n, spec.d)) * np.sqrt(np.diag(spec.covariance))
    y = spec.draw_labels(X, rng)
    yr = spec.draw_labels(X, rng) if resample else None
    return Sample(X, y, yr)


def _run_block(cfg: ExperimentConfig, g: int, h: int, t0: int, t1: int) -> np.ndarray:
    """Decisions (0/1) of shape (n_tests, t1 - t0) for grid point ``g`` under hypothesis ``h``."""
    scen = cfg.scenario_spec()
    delta = cfg.n_delta_grid[g] / cfg.n
    spec0, spec1 = scen.specs(delta)
    if cfg.mirror:
        spec0, spec1 = spec1, spec0
    theta_star = (spec0, spec1)[h].theta
    theta_bar = spec0.theta + spec1.theta - theta_star
    resample = any(t in NEEDS_RESAMPLE for t in cfg.tests)
    fns = [TESTS[t] for t in cfg.tests]
    # mirrored runs reuse the streams of the opposite hypothesis with samples exchanged
    hk = 1 - h if cfg.mirror else h
    j0, j1 = (1, 0) if cfg.mirror else (0, 1)
    out = np.empty((len(fns), t1 - t0), dtype=np.int8)
    for i, t in enumerate(range(t0, t1)):
        s0 = _draw(spec0, cfg.n, substream(cfg.seed, g, t, hk, j0), resample)
        s1 = _draw(spec1, cfg.n, substream(cfg.seed, g, t, hk, j1), resample)
        for k, fn in enumerate(fns):
            out[k, i] = fn(s0, s1, theta_star, theta_bar).decision_index
    return out


def _run_block_packed(args):
    cfg_dict, g, h, t0, t1 = args
    return _run_block(ExperimentConfig.from_dict(cfg_dict), g, h, t0, t1)


@dataclass
class ErrorCurve:
    """Error frequencies per test and grid point, plus the raw per-trial decisions.

    ``decisions[test]`` has shape (grid, total trials); under ``both`` the H0
    trials come first. ``truth`` holds the correct decision per column.
    """

    config: ExperimentConfig
    decisions: dict
    truth: np.ndarray
    metadata: dict = field(default_factory=dict)

    def errors(self, test: str) -> np.ndarray:
        return (self.decisions[test] != self.truth[None, :]).mean(axis=1)

    def stderr(self, test: str) -> np.ndarray:
        p = self.errors(test)
        return np.sqrt(p * (1.0 - p) / self.truth.size)

    def point(self, test: str, n_delta: float) -> tuple[float, float]:
        g = self.config.n_delta_grid.index(float(n_delta))
        return float(self.errors(test)[g]), float(self.stderr(test)[g])

    def rows(self):
        for test in self.config.tests:
            err, se = self.errors(test), self.stderr(test)
            for g, nd in enumerate(self.config.n_delta_grid):
                yield test, nd, float(err[g]), float(se[g])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test", "n_delta", "error", "stderr"])
        for test, nd, e, s in self.rows():
            w.writerow([test, repr(nd), repr(e), repr(s)])
        return buf.getvalue()

    def decision_log(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["grid_idx", "trial_idx", "test", "decision", "correct"])
        for g in range(len(self.config.n_delta_grid)):
            for t in range(self.truth.size):
                for test in self.config.tests:
                    dec = int(self.decisions[test][g, t])
                    w.writerow([g, t, test, f"H{dec}", int(dec == self.truth[t])])
        return buf.getvalue()

    def metadata_json(self) -> str:
        return json.dumps(self.metadata, indent=2, sort_keys=True)


def run_monte_carlo(config: ExperimentConfig, workers: int = 1) -> ErrorCurve:
    hyps = {"H0": (0,), "H1": (1,), "both": (0, 1)}[config.hypothesis]
    G, T = len(config.n_delta_grid), config.trials
    jobs = [(g, h) for g in range(G) for h in hyps]
    if workers and workers > 1:
        chunk = max(1, math.ceil(T / workers))
        tasks = [(config.to_dict(), g, h, t, min(t + chunk, T))
                 for g, h in jobs for t in range(0, T, chunk)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_block_packed, tasks))
        blocks, it = {}, iter(parts)
        for g, h in jobs:
            blocks[g, h] = np.concatenate(
                [next(it) for _ in range(0, T, chunk)], axis=1)
    else:
        blocks = {(g, h): _run_block(config, g, h, 0, T) for g, h in jobs}

    decisions = {}
    for k, test in enumerate(config.tests):
        decisions[test] = np.stack(
            [np.concatenate([blocks[g, h][k] for h in hyps]) for g in range(G)])
    # in mirrored runs the hypothesis labels keep their meaning for the swapped pair
    truth = np.concatenate([np.full(T, h, dtype=np.int8) for h in hyps])
    curve = ErrorCurve(config, decisions, truth)
    curve.metadata = _metadata(config)
    return curve


def _metadata(cfg: ExperimentConfig) -> dict:
    scen = cfg.scenario_spec()
    r = scen.rank
    r_bar = min(cfg.n, r)  # both samples share the design law
    return {
        "config": cfg.to_dict(),
        "d": cfg.d,
        "rank": r,
        "r_bar": r_bar,
        "covariance_diag": scen.covariance_diag.tolist(),
        "envelope": [theory_envelope(cfg.n, nd / cfg.n, r_bar) for nd in cfg.n_delta_grid],
        "columns": ["test", "n_delta", "error", "stderr"],
    }


def gnuplot_script(csv_name: str, tests: Sequence[str]) -> str:
    plots = ", ".join(
        f"'< grep ^{t}, {csv_name}' using 2:3:4 with yerrorlines title '{t}'" for t in tests)
    return "\n".join([
        "set datafile separator ','",
        "set logscale xy",
        "set xlabel 'n Delta'",
        "set ylabel 'error frequency'",
        f"plot {plots}",
        "",
    ])


# ---------------------------------------------------------------------------
# GLM sample-size guarantee


@dataclass(frozen=True, eq=False)
class GlmPairSetup:
    """Well-specified logistic pair with isotropic design.

    ``theta0 = base * e2`` and ``theta1 = theta0 + step * e1``; ``block`` is the
    per-test sample size from the moment condition and ``nu[h]`` holds the
    oracle relative label variances of both laws at ``theta_h``.
    """

    spec0: models.GlmSpec
    spec1: models.GlmSpec
    block: int
    delta1: float
    moments0: models.GlmMoments
    moments1: models.GlmMoments
    nu: tuple

    @property
    def thetas(self):
        return self.spec0.theta, self.spec1.theta


def glm_guarantee_setup(base: float = 0.5, step: float = 0.5, C: float = 1.0,
                        mc_trials: int = 400_000, seed: int = 0,
                        d: Optional[int] = None) -> GlmPairSetup:
    """Moments are computed on the two informative coordinates, which is exact
    for an isotropic design; ``d`` defaults to the block size so that each
    block sits at the edge of the small-sample regime ``m <= rank``."""
    fam = models.get_family("logistic")
    t0, t1 = np.array([0.0, base]), np.array([step, base])
    r0, r1 = models.GlmSpec(t0, np.eye(2), fam), models.GlmSpec(t1, np.eye(2), fam)
    rng = substream(seed, 0)
    m0 = models.glm_moments_mc(r0, t0, mc_trials, rng, minimizer=t0)
    m1 = models.glm_moments_mc(r1, t0, mc_trials, rng, minimizer=t1)
    block = P.block_size_glm(m0, m1, m1.delta, P.GlmTheoryConstants(C_paper=C))
    nu = tuple((models.glm_moments_mc(r0, t, mc_trials, rng, minimizer=t0).nu,
                models.glm_moments_mc(r1, t, mc_trials, rng, minimizer=t1).nu) for t in (t0, t1))
    d = block if d is None else int(d)
    if d < 2:
        raise PreconditionError("dimension must be at least 2")
    full = [np.concatenate([t, np.zeros(d - 2)]) for t in (t0, t1)]
    specs = [models.GlmSpec(t, np.eye(d), fam) for t in full]
    return GlmPairSetup(specs[0], specs[1], block, m1.delta, m0, m1, nu)


def run_glm_pair(setup: GlmPairSetup, trials: int, seed: int = 0, blocks: int = 1,
                 adaptive: bool = False) -> tuple[float, float]:
    """Type-I and type-II error frequencies of the (voting) GLM test.

    Each sample has ``blocks * setup.block`` rows, so with ``blocks > 1`` every
    vote is cast on a block of the guaranteed size.
    """
    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    fam = setup.spec0.family
    n = blocks * setup.block
    errs = []
    for h, theta in enumerate(setup.thetas):
        wrong = 0
        for t in range(trials):
            samples = []
            for j, spec in enumerate((setup.spec0, setup.spec1)):
                rng = substream(seed, h, t, j)
                s = models.sample_glm(spec, n, rng)
                if adaptive:
                    s = models.resample_labels(spec, s, rng)
                samples.append(s)
            nu = None if adaptive else setup.nu[h]
            if blocks == 1 and not adaptive:
                out = P.test_glm(fam, samples[0], samples[1], theta, *nu)
            else:
                out = P.run_voting_test(fam, samples[0], samples[1], theta, blocks, nu)
            wrong += out.decision_index != h
        errs.append(wrong / trials)
    return errs[0], errs[1]
