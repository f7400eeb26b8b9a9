"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure
or a failed non-disclosure audit. Machine-readable output goes to stdout,
everything else to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiment as E
from . import mestim, models, procedures as P, protocol as proto
from .errors import DimensionError, PreconditionError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_mapping(path) -> dict:
    """Read a TOML or JSON config file into a dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def _seed(args, fallback: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("MD_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MD_SEED must be an integer, got {env!r}") from None
    return int(fallback)


# ---------------------------------------------------------------------------
# simulate


def _experiment_config(args) -> E.ExperimentConfig:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("give exactly one of --preset or --config")
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.tests is not None:
        overrides["tests"] = tuple(t for t in args.tests.split(",") if t)
    if args.hypothesis is not None:
        overrides["hypothesis"] = args.hypothesis
    if args.preset:
        base = E.preset(args.preset).to_dict()
        name = args.preset
    else:
        base = load_mapping(args.config)
        base = base.get("experiment", base)
        name = Path(args.config).stem
    base = {**base, **overrides}
    base["seed"] = _seed(args, base.get("seed", 0))
    return E.ExperimentConfig.from_dict(base), name


def cmd_simulate(args) -> int:
    cfg, name = _experiment_config(args)
    _log(f"running {name}: r={cfg.rank_r} kappa={cfg.condition_kappa} n={cfg.n} "
         f"T={cfg.trials} tests={','.join(cfg.tests)}")
    curve = E.run_monte_carlo(cfg, workers=args.workers or 1)
    csv_text = curve.to_csv()
    if not args.output_dir:
        sys.stdout.write(csv_text)
        return EXIT_OK
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"csv": out / f"{name}.csv", "metadata": out / f"{name}.meta.json"}
    files["csv"].write_text(csv_text)
    files["metadata"].write_text(curve.metadata_json() + "\n")
    if args.log_decisions:
        files["decisions"] = out / f"{name}.decisions.csv"
        files["decisions"].write_text(curve.decision_log())
    if args.gnuplot:
        files["gnuplot"] = out / f"{name}.gp"
        files["gnuplot"].write_text(E.gnuplot_script(files["csv"].name, cfg.tests))
    print(json.dumps({k: str(v) for k, v in files.items()}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# test


def _pair(cfg: dict, key: str) -> Optional[tuple]:
    v = cfg.get(key)
    if v is None:
        return None
    if len(v) != 2:
        raise ConfigError(f"{key} must be a pair")
    return float(v[0]), float(v[1])


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")


def run_test_from_config(cfg: dict, base_dir: Path) -> P.TestOutcome:
    _require(cfg, "test", "sample0", "sample1", "theta_star")
    s0 = models.Sample.from_csv(base_dir / cfg["sample0"])
    s1 = models.Sample.from_csv(base_dir / cfg["sample1"])
    theta = np.asarray(cfg["theta_star"], dtype=float)
    if s0.d != s1.d or theta.size != s0.d:
        raise DimensionError(f"dimensions disagree: samples {s0.d}/{s1.d}, theta_star {theta.size}")
    name = cfg["test"]
    family = cfg.get("family", "gaussian")
    nu = _pair(cfg, "nu")
    if name == "lin":
        return P.test_lin(s0, s1, theta)
    if name == "val":
        return P.test_val(s0, s1, theta, _pair(cfg, "optimal_risks"))
    if name == "grad":
        return P.test_grad(s0, s1, theta)
    if name == "plug":
        return P.test_plug(s0, s1, theta)
    if name == "oracle":
        _require(cfg, "theta_bar")
        return P.test_oracle_lr(s0, s1, theta, cfg["theta_bar"])
    if name == "lin_var":
        _require(cfg, "sigma2")
        return P.test_lin_var(s0, s1, theta, *_pair(cfg, "sigma2"))
    if name == "lin_var_plus":
        return P.test_lin_var_plus(s0, s1, theta)
    if name in ("asymp", "asymp_plus"):
        loss = mestim.loss_for(cfg.get("loss", "squared"), s0.d)
        if name == "asymp_plus":
            return P.test_asymp_plus(loss, s0, s1, theta)
        tr = _pair(cfg, "traces") or (None, None)
        return P.test_asymp(loss, s0, s1, theta, *tr)
    if name in ("glm", "glm_plus", "voting"):
        adaptive = name == "glm_plus" or (name == "voting" and nu is None)
        if (name == "glm" and nu is None) or (
                adaptive and (s0.resampled_labels is None or s1.resampled_labels is None)):
            raise ConfigError(
                f"test {name} needs either oracle nu values or resampled labels on both samples "
                "(conditional label resampling)")
        if name == "glm":
            return P.test_glm(family, s0, s1, theta, *nu)
        if name == "glm_plus":
            return P.test_glm_plus(family, s0, s1, theta)
        return P.run_voting_test(family, s0, s1, theta, int(cfg.get("blocks", 1)), nu)
    raise ConfigError(f"unknown test {name!r}")


def cmd_test(args) -> int:
    cfg = load_mapping(args.config) if args.config else {}
    for key in ("test", "sample0", "sample1"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.theta_star is not None:
        cfg["theta_star"] = [float(v) for v in args.theta_star.split(",")]
    base_dir = Path(args.config).parent if args.config else Path(".")
    out = run_test_from_config(cfg, base_dir)
    print(out.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# protocol


def _learner_loss(cfg: dict, d: int):
    return mestim.loss_for(cfg.get("loss", "squared"), d)


def cmd_protocol(args) -> int:
    cfg = load_mapping(args.config)
    seed = _seed(args, cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    kind = cfg.get("kind", "deletion")
    leak = cfg.get("inject_violation")
    summary = {"seed": seed}
    if kind == "deletion":
        _require(cfg, "base", "deletion_set", "delta", "sizes")
        base = models.spec_from_dict(cfg["base"])
        res = proto.deletion_scenario(
            base, models.spec_from_dict(cfg["deletion_set"]), float(cfg["delta"]),
            bool(cfg.get("complied", True)), cfg["sizes"], rng,
            score_fn=cfg.get("score_fn", "projected_residual"),
            loss=_learner_loss(cfg, base.d) if "loss" in cfg else None, leak=leak)
        decision, transcript = res.decision, res.transcript
        summary.update(ground_truth=res.ground_truth, correct=res.correct)
    elif kind == "oracles":
        _require(cfg, "oracles", "sizes", "theta_star")
        oracles = [models.spec_from_dict(o) for o in cfg["oracles"]]
        theta = np.asarray(cfg["theta_star"], dtype=float)
        learner = proto.LearnerState(theta, _learner_loss(cfg, theta.size),
                                     cfg.get("score_fn", "projected_residual"),
                                     nu=cfg.get("nu"), leak=leak)
        decision, transcript = proto.run_protocol(learner, oracles, cfg["sizes"], rng)
    else:
        raise ConfigError(f"unknown protocol kind {kind!r}")
    report = proto.audit_nondisclosure(transcript)
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.config).stem
    (out / f"{stem}.transcript.jsonl").write_text(transcript.to_jsonl())
    (out / f"{stem}.audit.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    summary.update(decision=decision, audit_ok=report.ok,
                   transcript=str(out / f"{stem}.transcript.jsonl"))
    print(json.dumps(summary, sort_keys=True))
    if not report.ok:
        _log(f"non-disclosure audit failed: {len(report.violations)} violation(s)")
        for v in report.violations:
            _log(f"  seq {v['seq']} {v['kind']}: {v['reason']}")
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# moments


def cmd_moments(args) -> int:
    cfg = load_mapping(args.config)
    seed = _seed(args, cfg.get("seed", 0))
    trials = int(args.trials or cfg.get("trials", 100_000))
    rng = np.random.default_rng(seed)
    consts = P.GlmTheoryConstants(C_paper=args.C if args.C is not None
                                  else float(cfg.get("C", P.GlmTheoryConstants.C_paper)))
    if "spec0" in cfg and "spec1" in cfg:
        spec0, spec1 = models.spec_from_dict(cfg["spec0"]), models.spec_from_dict(cfg["spec1"])
        theta0 = models.population_minimizer(spec0, rng)
        m0 = models.glm_moments_mc(spec0, theta0, trials, rng)
        m1 = models.glm_moments_mc(spec1, theta0, trials, rng)
        out = {"moments0": m0.to_dict(), "moments1": m1.to_dict()}
    else:
        _require(cfg, "spec")
        spec = models.spec_from_dict(cfg["spec"])
        eval_theta = cfg.get("eval_theta", spec.theta.tolist())
        m0 = m1 = models.glm_moments_mc(spec, eval_theta, trials, rng)
        out = {"moments": m0.to_dict()}
    delta1 = args.delta1 if args.delta1 is not None else cfg.get("delta1", m1.delta)
    out.update(delta1=float(delta1), C=consts.C_paper,
               block_size=P.block_size_glm(m0, m1, float(delta1), consts))
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modeltest", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte-Carlo error curves")
    s.add_argument("--preset", choices=E.preset_names())
    s.add_argument("--config")
    s.add_argument("--output-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--trials", type=int)
    s.add_argument("--tests", help="comma-separated test identifiers")
    s.add_argument("--hypothesis", choices=("H0", "H1", "both"))
    s.add_argument("--log-decisions", action="store_true")
    s.add_argument("--gnuplot", action="store_true")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("test", help="run one test on two sample CSV files")
    t.add_argument("--config")
    t.add_argument("--test")
    t.add_argument("--sample0")
    t.add_argument("--sample1")
    t.add_argument("--theta-star", help="comma-separated vector")
    t.set_defaults(func=cmd_test)

    r = sub.add_parser("protocol", help="simulate the testing protocol")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_protocol)

    m = sub.add_parser("moments", help="GLM moment oracle and block size")
    m.add_argument("--config", required=True)
    m.add_argument("--delta1", type=float)
    m.add_argument("--C", type=float)
    m.add_argument("--trials", type=int)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_moments)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, PreconditionError, DimensionError, KeyError, TypeError,
            ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, OSError) as exc:
        _log(f"runtime error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
