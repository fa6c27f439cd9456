"""Run every optimizer on one suite target and tabulate the outcome.

    python demos/compare_methods.py [suite-name] [iterations]

MO keeps the annular source fixed; AM alternates source and mask phases;
FD, NMN and CG step the mask along a bilevel hypergradient.
"""

import sys
import warnings

from litho_smo.harness import ExperimentSpec, run_experiment


def main(name="t_junction", iters="60"):
    warnings.simplefilter("ignore", RuntimeWarning)
    print(f"{'method':6} {'iters':>5} {'initial':>12} {'final':>12} {'L2 nm^2':>8} {'PVB nm^2':>9} {'EPE':>4} {'s':>6}")
    for method in ("MO", "AM", "FD", "NMN", "CG"):
        spec = ExperimentSpec(f"suite:{name}", method, optimizer_overrides={"max_outer_iters": iters})
        res = run_experiment(spec)
        s = res.summary
        print(
            f"{method:6} {s['iters']:5d} {res.report.initial_loss.total:12.5g} {s['final_loss']:12.5g} "
            f"{s['l2_nm2']:8g} {s['pvb_nm2']:9g} {s['epe_count']:4d} {res.timing['total_s']:6.1f}"
        )


if __name__ == "__main__":
    main(*sys.argv[1:])
