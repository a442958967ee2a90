"""Build the baseline and improved detectors, compare their size, run a small forward pass."""
from fractions import Fraction

import numpy as np

from cayolo.net_graph import (NetConfig, build_model, ca_overhead, count_kinds, describe, forward, mac_count,
                              param_count)

for name, cfg in [("baseline", NetConfig.baseline()), ("+attention", NetConfig.ca_only()),
                  ("improved", NetConfig.improved())]:
    m = build_model(cfg, init_weights=False)
    total, _ = param_count(m)
    print(f"{name:<11} {total:>12,} params  {total / 1e6:6.2f}M")
print("attention blocks alone:", f"{ca_overhead(NetConfig()):,}")

# which rows does the improved layout add?
base = {r.name for r in describe(build_model(NetConfig.baseline(), init_weights=False))}
rows = describe(build_model(NetConfig.improved(), init_weights=False))
for r in rows:
    if r.name not in base:
        print(f"  + {r.name:<24} {r.kind:<22} {r.params:>10,}")
print(count_kinds(rows))

# an eighth-width copy is small enough for a quick numpy forward pass
small = NetConfig.improved(width_multiplier=Fraction(1, 8))
m = build_model(small, seed=42)
out = forward(m, np.random.default_rng(1).uniform(0, 1, (1, 3, 416, 416)))
for stride, fmap in out.by_stride().items():
    print(f"stride {stride:>2}: {fmap.shape}")
print(f"MACs at 1/8 width: {mac_count(m) / 1e9:.3f} G")
