"""Type-I/II errors of the GLM test at the moment-based block size, with and without voting."""
import argparse

from modeltest import experiment as E


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--C", type=float, default=1.0)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--blocks", type=int, nargs="+", default=[1, 3, 9])
    ap.add_argument("--adaptive", action="store_true", help="estimate nu from resampled labels")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    setup = E.glm_guarantee_setup(C=args.C, seed=args.seed)
    print(f"block size m={setup.block}, Delta1={setup.delta1:.4f}, nu={setup.nu}")
    for b in args.blocks:
        e0, e1 = E.run_glm_pair(setup, args.trials, seed=args.seed + b, blocks=b,
                                adaptive=args.adaptive)
        print(f"  b={b}: type-I {e0:.4f}  type-II {e1:.4f}")


if __name__ == "__main__":
    main()
