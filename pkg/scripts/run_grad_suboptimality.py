"""Lin, Val and Grad on the ill-conditioned instance where Grad lags behind."""
import argparse
from pathlib import Path

from modeltest import experiment as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--r-hat", type=int, nargs="+", default=[16, 25])
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/grad")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r_hat in args.r_hat:
        cfg = E.grad_suboptimality_config(
            r_hat, trials=args.trials, seed=args.seed,
            n_delta_grid=(4.0, 8.0, 16.0, 32.0, 64.0, 128.0))
        curve = E.run_monte_carlo(cfg, workers=args.workers)
        (out / f"grad-r{r_hat}.csv").write_text(curve.to_csv())
        (out / f"grad-r{r_hat}.meta.json").write_text(curve.metadata_json() + "\n")
        print(f"r_hat={r_hat} n={cfg.n} kappa={cfg.condition_kappa:g}")
        print("  nD    " + " ".join(f"{nd:>7g}" for nd in cfg.n_delta_grid))
        for test in cfg.tests:
            print(f"  {test:5s} " + " ".join(f"{e:7.4f}" for e in curve.errors(test)))


if __name__ == "__main__":
    main()
