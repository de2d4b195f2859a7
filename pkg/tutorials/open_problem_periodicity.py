"""Stroboscopic snapshots of the noisy cubic oscillator, at a laptop-friendly size.

The acceptance suite runs the full 8192-path version; this script uses
512 paths and a coarser step so it finishes in under a minute.
"""

import math

from levinson import SdeConfig, builtin, ensemble_snapshots, periodicity_report
from levinson.stats import periodic_profile

sys = builtin("open-problem-v4")
T = sys.period

cfg = SdeConfig(h=T / 512, n_periods=12, burn_in_periods=8, ensemble_size=512, seed=42)
laws = ensemble_snapshots(sys, cfg)
rep = periodicity_report(laws, n_perm=199, seed=1)
print(rep.summary())

# within-period profile: eight phases in two consecutive periods, same paths
times = tuple(k * T + j * T / 8 for k in (10, 11) for j in range(8))
cfg = SdeConfig(h=T / 512, n_periods=12, snapshot_times=times, ensemble_size=512, seed=42)
laws = ensemble_snapshots(sys, cfg)
prof = periodic_profile(laws[:8], laws[8:], T)
for row in prof.rows:
    print(f"phase {row['phase'] / math.pi:5.3f} pi  mean z = {row['mean_z']}")
print("max |z| of mean differences:", prof.max_abs_z("mean"))
