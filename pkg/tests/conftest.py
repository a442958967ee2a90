import numpy as np
import pytest

from cayolo.coord_attention import ca_forward, init_ca_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv2d_loops(x, weight, bias=None, stride=1, pad=0):
    """Six nested loops; independent of the vectorised kernel."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else bias[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy, xx = i * stride + u - pad, j * stride + v - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += x[b, ch, yy, xx] * weight[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out


def random_ca_params(channels, reduction, rng):
    """Attention params with every learnable array and BN stats perturbed."""
    p = init_ca_params(channels, reduction, rng)
    p = p.with_arrays({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.arrays().items()})
    m = p.hidden
    bn = type(p.bn)(p.bn.gamma, p.bn.beta, 0.2 * rng.standard_normal(m),
                    rng.uniform(0.5, 2.0, m), 1e-5)
    return type(p)(p.f1, bn, p.fh, p.fw, p.reduction)


def finite_difference_grads(x, params, dy, step=1e-5):
    """Central differences of L = <dy, ca_forward(x)> w.r.t. x and every learnable array."""
    def loss(xx, pp):
        return float(np.sum(ca_forward(xx, pp)[0] * dy))

    dx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = step
        dx[idx] = (loss(x + e, params) - loss(x - e, params)) / (2 * step)
    grads = {}
    for key, arr in params.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            e = np.zeros_like(arr)
            e[idx] = step
            g[idx] = (loss(x, params.with_arrays({key: arr + e}))
                      - loss(x, params.with_arrays({key: arr - e}))) / (2 * step)
        grads[key] = g
    return dx, grads


def max_relative_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def ap_envelope_oracle(flags, num_gt):
    """Each true positive adds 1/num_gt times the best precision at or after its rank."""
    flags = list(flags)
    if num_gt == 0:
        return 0.0
    precisions = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        precisions.append(tp / k)
    total = 0.0
    for k, f in enumerate(flags):
        if f:
            total += max(precisions[k:]) / num_gt
    return total
