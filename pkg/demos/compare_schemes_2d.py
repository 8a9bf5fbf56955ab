"""Compare batching schemes on the 2-D Branin level-set problem.

Runs every scheme once at a reduced budget and prints the terminal error
rate, design size and wall time.  Full-budget comparisons live in the
acceptance suite; this is a quick look at the trade-off.

    python3 demos/compare_schemes_2d.py [N_T]
"""

import sys

from adbatch.benchmarks import get_problem
from adbatch.schemes import SCHEMES, RunSettings, run_scheme

N_T = int(sys.argv[1]) if len(sys.argv) > 1 else 600

problem = get_problem("branin2d-gauss")
print(f"{'scheme':8s} {'ER':>7s} {'k_T':>5s} {'seconds':>8s}")
for scheme in SCHEMES:
    settings = RunSettings(**dict(problem.defaults, scheme=scheme, N_T=N_T, M=200))
    record = run_scheme(problem, settings, seed=11)
    s = record.summary
    print(f"{scheme:8s} {s['ER']:7.4f} {s['k_T']:5d} {s['wall_seconds_nondet']:8.1f}")

# Fixed batching grows the design linearly in the budget, so its GP fits
# dominate the wall time; the adaptive schemes keep k_T a fraction of that.
