"""Walk through one coordinate attention block on a small feature map."""
import numpy as np

from cayolo.coord_attention import ca_backward, ca_forward, ca_param_count, directional_pool, init_ca_params

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 32, 12, 16))

# the two directional averages: one value per row, one per column
qh, qw = directional_pool(x)
print("row pool", qh.shape, "column pool", qw.shape)

p = init_ca_params(32, reduction=8, rng=rng)
print("hidden width", p.hidden, "parameters", ca_param_count(32, 8))

y, cache = ca_forward(x, p)
print("gates", cache.gh.shape, cache.gw.shape)
print("gate range", float(min(cache.gh.min(), cache.gw.min())), float(max(cache.gh.max(), cache.gw.max())))

# each channel gets a rank-one mask: y / x = gh (column vector) * gw (row vector)
ratio = y[0, 0] / x[0, 0]
print("mask rank of channel 0:", np.linalg.matrix_rank(ratio, tol=1e-10))

# backward pass for a unit upstream gradient
grads = ca_backward(cache, np.ones_like(y))
print("d_input", grads.d_input.shape)
for name, g in grads.d_params.items():
    print(f"  {name:<10} {str(g.shape):<16} |g|max {np.abs(g).max():.3e}")
