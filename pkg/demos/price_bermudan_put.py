"""Price the 2-D Bermudan basket put with a sequentially designed policy.

Each exercise date's timing value is learned backwards in time with one
scheme, then the policy is valued on fresh forward paths and compared
with the European lower bound.

    python3 demos/price_bermudan_put.py [scheme] [N_T]
"""

import sys
import time

from adbatch.optstop import PUT2D, canonical_settings, european_value, fit_policy, policy_value

scheme = sys.argv[1] if len(sys.argv) > 1 else "ddsa"
N_T = int(sys.argv[2]) if len(sys.argv) > 2 else 1000

params, payoff = PUT2D["params"], PUT2D["payoff"]
settings = canonical_settings(PUT2D, scheme=scheme, N_T=N_T)

t0 = time.perf_counter()
policy = fit_policy(params, payoff, settings, seed=0)
fit_seconds = time.perf_counter() - t0

value, se = policy_value(policy, 100_000, seed=1)
euro, euro_se = european_value(params, payoff, 100_000, seed=2)
k_T = [rec.summary["k_T"] for rec in policy.records if rec is not None]

print(f"scheme {scheme}, N_T {N_T} per date, {len(k_T)} fitted dates in {fit_seconds:.0f} s")
print(f"design sizes per date: {k_T}")
print(f"Bermudan value {value:.4f} (SE {se:.4f})")
print(f"European value {euro:.4f} (SE {euro_se:.4f})")
