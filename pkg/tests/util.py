"""Shared test helpers: a random block generator and an independent
finite-difference oracle that goes through the expanded evaluation."""

import numpy as np

from orepa import layers as L
from orepa.dynamics import ParamSet
from orepa.squeeze import BlockGraph, Branch, build_branch, expanded_forward
from orepa.tensor import ConvGeometry, Tensor


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def _random_layer(rng, w_in, w_out, ks):
    if w_in == w_out:
        kind = rng.choice(["conv", "gconv", "identity1x1", "scaling", "avgpool",
                           "freqfilter", "depthwise", "pointwise"])
    else:
        kind = rng.choice(["conv", "pointwise"])
    k = int(rng.choice(ks))
    if kind == "conv":
        return L.conv(w_in, w_out, k)
    if kind == "gconv":
        g = int(rng.choice(_divisors(w_in)))
        if w_out % g:
            g = 1
        return L.conv(w_in, w_out, k, groups=g)
    if kind == "identity1x1":
        return L.identity_1x1(w_in)
    if kind == "scaling":
        return L.scaling(w_in, value=float(rng.uniform(0.3, 1.2)))
    if kind == "avgpool":
        return L.avg_pool(w_in, k)
    if kind == "freqfilter":
        return L.freq_filter(w_in, k)
    if kind == "depthwise":
        return L.depthwise(w_in, k)
    return L.pointwise(w_in, w_out)


def make_random_block(seed, max_branches=6, max_depth=3, max_ch=8, ks=(1, 3, 5),
                      dtype="f64", with_scaling=True, stride=(1, 1)):
    rng = np.random.default_rng(seed)
    in_ch = int(rng.integers(1, max_ch + 1))
    out_ch = int(rng.integers(1, max_ch + 1))
    n_branches = int(rng.integers(1, max_branches + 1))
    branches = []
    for bi in range(n_branches):
        depth = int(rng.integers(1, max_depth + 1))
        widths = [in_ch] + [int(rng.integers(1, max_ch + 1)) for _ in range(depth - 1)] + [out_ch]
        specs = [_random_layer(rng, widths[i], widths[i + 1], ks) for i in range(depth)]
        scaling = None
        if with_scaling and rng.random() < 0.8:
            scaling = rng.uniform(0.3, 1.2, size=out_ch)
        branches.append(build_branch(specs, rng, dtype=dtype, scaling=scaling,
                                     name=f"b{bi}"))
    return BlockGraph(branches=branches, post_add_norm=True,
                      output_geometry=ConvGeometry(stride=stride))


def fd_grads_via_expanded(block, x, upstream, eps=1e-6):
    """Central differences of <upstream, expanded_forward(block, x)>.

    Deliberately routed through the expanded evaluation so it shares no
    code path with the squeezed-route analytics it is used to check.
    """
    ps = ParamSet(block)
    base = ps.get_flat()
    up = upstream.data
    out = np.zeros_like(base)

    def loss():
        return float(np.sum(up * expanded_forward(block, x).data))

    for i in range(base.size):
        probe = base.copy()
        probe[i] = base[i] + eps
        ps.set_flat(probe)
        hi = loss()
        probe[i] = base[i] - eps
        ps.set_flat(probe)
        lo = loss()
        out[i] = (hi - lo) / (2 * eps)
    ps.set_flat(base)
    return out


def rand_input(rng, block, hw=(8, 8), batch=2, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=(batch, block.in_ch) + tuple(hw)),
                  dtype=block.dtype)
