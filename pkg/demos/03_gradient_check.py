"""Central-difference validation of every differentiable block.

Each named block builds a scalar loss from a small randomized instance,
then compares analytic gradients against (f(x+h) - f(x-h)) / 2h on a
subsample of coordinates. A bitwise-determinism precheck guards against
comparing two different functions. The two composite rows at the end
differentiate the full stage-1 and stage-2 training losses.
"""

import time

from udcfer.checks import run_gradcheck


def main():
    t0 = time.time()
    report = run_gradcheck(seed=0)
    elapsed = time.time() - t0
    print(f"{'block':<14s} {'params':>7s} {'coords':>7s} {'max rel err':>12s}")
    worst = 0.0
    for row in report:
        print(f"{row['block']:<14s} {row['params']:>7d} {row['coords']:>7d} "
              f"{row['max_rel_err']:>12.3e}")
        worst = max(worst, row["max_rel_err"])
    verdict = "PASS" if worst < 1e-4 else "FAIL"
    print(f"\nworst {worst:.3e} against tolerance 1e-4 -> {verdict} "
          f"({elapsed:.1f}s)")
    print("\nwhy central differences: the O(h^2) truncation error meets the")
    print("f64 rounding error near h = 1e-5 for O(1) losses, so agreement to")
    print("1e-4 relative error localizes any analytic-gradient bug to the")
    print("specific block and parameter reported above.")


if __name__ == "__main__":
    main()
