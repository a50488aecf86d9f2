import json

import numpy as np
import pytest

from orepa import layers as L
from orepa.blocks import build_preset
from orepa.squeeze import (BlockGraph, Branch, MergeError, apply_branch_scaling,
                           block_forward_squeezed, build_branch, cost_report,
                           expanded_forward, merge_parallel, merge_sequential,
                           squeeze_block)
from orepa.tensor import ConvGeometry, KernelTensor, Tensor, conv2d_direct

from oracles import merge_kernels_loop
from util import make_random_block, rand_input


def merge_sequential_alt(w1, w2):
    """Second form of the inter-weight convolution: iterate over the first
    kernel's taps instead of the second's. Test-only alternative."""
    c1, c0, k1h, k1w = w1.shape
    c2 = w2.out_channels
    keh, kew = k1h + w2.kh - 1, k1w + w2.kw - 1
    out = np.zeros((c2, c0, keh, kew), dtype=w1.data.dtype)
    for i in range(k1h):
        for j in range(k1w):
            out[:, :, i:i + w2.kh, j:j + w2.kw] += np.einsum(
                "cp,qcab->qpab", w1.data[:, :, i, j], w2.data, optimize=True)
    return KernelTensor(out, groups=1)


def test_1x1_merge_is_matmul():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, size=(4, 3, 1, 1))
    b = rng.uniform(-1, 1, size=(2, 4, 1, 1))
    merged = merge_sequential(KernelTensor(a), KernelTensor(b))
    want = b[:, :, 0, 0] @ a[:, :, 0, 0]
    np.testing.assert_allclose(merged.data[:, :, 0, 0], want, atol=1e-15)


def test_identity_absorption():
    rng = np.random.default_rng(1)
    ident = L.materialize(L.identity_1x1(3), 0)
    k = KernelTensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
    merged = merge_sequential(ident, k)
    assert merged.shape == k.shape
    np.testing.assert_array_equal(merged.data, k.data)


def test_three_all_ones_kernels():
    ones = KernelTensor(np.ones((1, 1, 3, 3)))
    merged = merge_sequential(merge_sequential(ones, ones), ones)
    assert merged.shape == (1, 1, 7, 7)
    # oracle-derived tap values: the pairwise loop-nest merge gives the
    # same 7x7 kernel, integer-exact
    want = merge_kernels_loop(merge_kernels_loop(ones.data, ones.data), ones.data)
    np.testing.assert_array_equal(merged.data, want)
    assert merged.data[0, 0, 3, 3] == 49.0
    for i, j in ((0, 0), (0, 6), (6, 0), (6, 6)):
        assert merged.data[0, 0, i, j] == 1.0
    # cross-check conv-of-conv on a random input's interior
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-1, 1, size=(1, 1, 16, 16)))
    seq = conv2d_direct(conv2d_direct(conv2d_direct(x, ones), ones), ones)
    direct = conv2d_direct(x, merged)
    np.testing.assert_allclose(seq.data, direct.data, atol=1e-10)


@pytest.mark.parametrize("seed", range(8))
def test_merge_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    c0, c1, c2 = (int(v) for v in rng.integers(1, 5, size=3))
    k1 = int(rng.choice([1, 2, 3]))
    k2 = int(rng.choice([1, 2, 3]))
    w1 = KernelTensor(rng.uniform(-1, 1, size=(c1, c0, k1, k1)))
    w2 = KernelTensor(rng.uniform(-1, 1, size=(c2, c1, k2, k2)))
    merged = merge_sequential(w1, w2)
    want = merge_kernels_loop(w1.data, w2.data)
    np.testing.assert_allclose(merged.data, want, rtol=1e-12, atol=1e-13)
    alt = merge_sequential_alt(w1, w2)
    np.testing.assert_allclose(merged.data, alt.data, rtol=1e-12, atol=1e-13)


def test_merge_composition_equals_conv_of_conv():
    rng = np.random.default_rng(3)
    w1 = KernelTensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    w2 = KernelTensor(rng.uniform(-1, 1, size=(4, 3, 5, 5)))
    merged = merge_sequential(w1, w2)
    assert merged.shape == (4, 2, 7, 7)
    x = Tensor(rng.uniform(-1, 1, size=(2, 2, 14, 14)))
    seq = conv2d_direct(conv2d_direct(x, w1), w2)
    direct = conv2d_direct(x, merged)
    np.testing.assert_allclose(seq.data, direct.data, atol=1e-12)


def test_merge_associativity():
    rng = np.random.default_rng(4)
    w1 = KernelTensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    w2 = KernelTensor(rng.uniform(-1, 1, size=(4, 3, 1, 1)))
    w3 = KernelTensor(rng.uniform(-1, 1, size=(2, 4, 5, 5)))
    left = merge_sequential(merge_sequential(w1, w2), w3)
    right = merge_sequential(w1, merge_sequential(w2, w3))
    assert np.max(np.abs(left.data - right.data)) <= 1e-12


def test_merge_channel_mismatch():
    w1 = KernelTensor(np.ones((2, 2, 1, 1)))
    w2 = KernelTensor(np.ones((2, 3, 1, 1)))
    with pytest.raises(MergeError):
        merge_sequential(w1, w2)


def test_merge_rejects_grouped():
    w1 = KernelTensor(np.ones((2, 1, 1, 1)), groups=2)
    w2 = KernelTensor(np.ones((2, 2, 1, 1)))
    with pytest.raises(MergeError):
        merge_sequential(w1, w2)


def test_parallel_zero_identity_and_commutativity():
    rng = np.random.default_rng(5)
    k = KernelTensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
    zero = KernelTensor(np.zeros((2, 3, 3, 3)))
    np.testing.assert_array_equal(merge_parallel([k, zero]).data, k.data)
    other = KernelTensor(rng.uniform(-1, 1, size=(2, 3, 1, 1)))
    ab = merge_parallel([k, other]).data
    ba = merge_parallel([other, k]).data
    np.testing.assert_array_equal(ab, ba)


def test_parallel_center_alignment():
    rng = np.random.default_rng(6)
    k = rng.uniform(-1, 1, size=(1, 1, 3, 3))
    w = 0.7
    merged = merge_parallel([KernelTensor(np.full((1, 1, 1, 1), w)), KernelTensor(k)])
    want = k.copy()
    want[0, 0, 1, 1] += w
    np.testing.assert_array_equal(merged.data, want)

    center_one = np.zeros((1, 1, 3, 3))
    center_one[0, 0, 1, 1] = 1.0
    merged = merge_parallel([KernelTensor(np.full((1, 1, 1, 1), 2.0)),
                             KernelTensor(center_one)])
    assert merged.data[0, 0, 1, 1] == 3.0


def test_parallel_rejects_even_extent():
    with pytest.raises(MergeError):
        merge_parallel([KernelTensor(np.ones((1, 1, 2, 2)))])


def test_even_branch_rejected_by_both_routes():
    rng = np.random.default_rng(0)
    even = build_branch([L.conv(1, 1, 2)], rng)
    odd = build_branch([L.conv(1, 1, 3)], rng)
    block = BlockGraph(branches=[even, odd])
    x = Tensor(rng.uniform(-1, 1, size=(1, 1, 6, 6)))
    with pytest.raises(MergeError):
        squeeze_block(block)
    with pytest.raises(MergeError):
        expanded_forward(block, x)
    # a lone even-extent branch is fine: no center alignment involved
    single = BlockGraph(branches=[build_branch([L.conv(1, 1, 2)], rng)])
    direct = block_forward_squeezed(single, x)
    expanded = expanded_forward(single, x)
    np.testing.assert_allclose(direct.data, expanded.data, atol=1e-12)


def test_parallel_rejects_channel_mismatch():
    with pytest.raises(MergeError):
        merge_parallel([KernelTensor(np.ones((1, 1, 3, 3))),
                        KernelTensor(np.ones((2, 1, 3, 3)))])


def test_branch_scaling_examples():
    rng = np.random.default_rng(7)
    k = KernelTensor(rng.uniform(-1, 1, size=(2, 3, 3, 3)))
    np.testing.assert_array_equal(apply_branch_scaling(k, np.ones(2)).data, k.data)
    zeroed = apply_branch_scaling(k, np.array([0.0, 1.0]))
    assert np.all(zeroed.data[0] == 0.0)
    np.testing.assert_array_equal(zeroed.data[1], k.data[1])

    gamma = rng.uniform(-1, 1, size=2)
    scale_kernel = KernelTensor(np.diag(gamma)[:, :, None, None])
    via_merge = merge_sequential(k, scale_kernel)
    np.testing.assert_array_equal(apply_branch_scaling(k, gamma).data, via_merge.data)


def test_single_branch_squeeze_returns_conv_weight():
    rng = np.random.default_rng(8)
    branch = build_branch([L.conv(2, 3, 3)], rng, scaling=np.ones(3))
    block = BlockGraph(branches=[branch])
    res = squeeze_block(block)
    np.testing.assert_array_equal(res.kernel.data, branch.weights[0].data)


def test_deep_stem_squeezes_to_7x7():
    block = build_preset("deepstem", 3, 16, 3, seed=0)
    res = squeeze_block(block)
    assert res.effective_k == (7, 7)
    assert res.kernel.shape == (16, 3, 7, 7)


def test_effective_kernel_size_law():
    for seed in range(20):
        block = make_random_block(seed)
        res = squeeze_block(block)
        want_h = max(1 + sum(w.kh - 1 for w in b.weights) for b in block.branches)
        want_w = max(1 + sum(w.kw - 1 for w in b.weights) for b in block.branches)
        assert res.effective_k == (want_h, want_w)


def test_distributivity_over_branches():
    block = make_random_block(42, max_branches=4)
    if len(block.branches) < 2:
        block = make_random_block(7, max_branches=4)
    full = squeeze_block(block).kernel
    sub_kernels = [squeeze_block(BlockGraph(branches=[b])).kernel for b in block.branches]
    via_parts = merge_parallel(sub_kernels) if len(sub_kernels) > 1 else sub_kernels[0]
    np.testing.assert_array_equal(full.data, via_parts.data)


@pytest.mark.parametrize("preset,kwargs", [
    ("orepa3x3", {"in_ch": 3, "out_ch": 4, "k": 3}),
    ("orepa3x3", {"in_ch": 4, "out_ch": 4, "k": 5}),
    ("orepa1x1", {"in_ch": 3, "out_ch": 5, "k": 1}),
    ("deepstem", {"in_ch": 3, "out_ch": 8, "k": 3}),
    ("orepavgg", {"in_ch": 4, "out_ch": 4, "k": 3}),
    ("dbb", {"in_ch": 2, "out_ch": 6, "k": 3}),
])
def test_preset_squeeze_forward_equivalence(preset, kwargs):
    block = build_preset(preset, seed=31, **kwargs)
    rng = np.random.default_rng(17)
    x = rand_input(rng, block, hw=(16, 16), batch=2)
    direct = conv2d_direct(x, squeeze_block(block).kernel, block.eval_geometry())
    expanded = expanded_forward(block, x)
    assert np.max(np.abs(direct.data - expanded.data)) <= 1e-10


def test_random_blocks_equivalence_f64():
    rng = np.random.default_rng(100)
    for seed in range(40):
        block = make_random_block(seed + 1000)
        x = rand_input(rng, block, hw=(10, 11), batch=2)
        direct = block_forward_squeezed(block, x)
        expanded = expanded_forward(block, x)
        assert np.max(np.abs(direct.data - expanded.data)) <= 1e-9, f"seed {seed}"


def test_random_blocks_equivalence_f32():
    rng = np.random.default_rng(200)
    for seed in range(10):
        block = make_random_block(seed + 5000, dtype="f32")
        x = rand_input(rng, block, hw=(10, 10), batch=2)
        direct = block_forward_squeezed(block, x)
        expanded = expanded_forward(block, x)
        assert np.max(np.abs(direct.data - expanded.data)) <= 1e-3, f"seed {seed}"


def test_strided_block_equivalence():
    rng = np.random.default_rng(300)
    block = make_random_block(77, stride=(2, 2))
    x = rand_input(rng, block, hw=(11, 9), batch=2)
    direct = block_forward_squeezed(block, x)
    expanded = expanded_forward(block, x)
    assert direct.shape == expanded.shape
    assert np.max(np.abs(direct.data - expanded.data)) <= 1e-9


def test_expanded_identity_branch_is_input():
    branch = build_branch([L.identity_1x1(3)], np.random.default_rng(0))
    block = BlockGraph(branches=[branch])
    rng = np.random.default_rng(9)
    x = rand_input(rng, block, hw=(5, 5), batch=1)
    y = expanded_forward(block, x)
    np.testing.assert_array_equal(y.data, x.data)


def test_expanded_two_identical_branches_doubles():
    rng = np.random.default_rng(10)
    spec = L.conv(2, 2, 3)
    w = L.materialize(spec, 3)
    b1 = Branch(layers=[spec], weights=[w], scaling=np.ones(2))
    b2 = Branch(layers=[spec], weights=[w], scaling=np.ones(2))
    single = BlockGraph(branches=[b1])
    double = BlockGraph(branches=[Branch(layers=[spec], weights=[w], scaling=np.ones(2)),
                                  b2])
    x = rand_input(rng, single, hw=(6, 6), batch=1)
    y1 = expanded_forward(single, x)
    y2 = expanded_forward(double, x)
    np.testing.assert_allclose(y2.data, 2 * y1.data, atol=1e-12)


def test_cost_single_conv_offline_equals_online():
    branch = build_branch([L.conv(4, 4, 3)], np.random.default_rng(0))
    block = BlockGraph(branches=[branch])
    costs = cost_report(block, (16, 16), 8)
    assert costs["offline"]["buffer_elems"] == 0
    assert costs["online"]["buffer_elems"] == 0
    assert costs["offline"]["mults"] == costs["online"]["mults"]


def test_cost_1x1_then_3x3_worked_example():
    # 1x1 -> 3x3 branch at H = W = 56, B = 32, C = 64
    rng = np.random.default_rng(0)
    branch = build_branch([L.conv(64, 64, 1), L.conv(64, 64, 3)], rng)
    block = BlockGraph(branches=[branch])
    costs = cost_report(block, (56, 56), 32)
    assert costs["offline"]["buffer_elems"] == 32 * 64 * 56 * 56
    assert costs["online"]["buffer_elems"] == 64 * 64 * 3 * 3
    ratio = costs["offline"]["buffer_elems"] / costs["online"]["buffer_elems"]
    assert ratio > 100


def test_cost_orepa_preset_buffer_reduction():
    block = build_preset("orepa3x3", 64, 64, 3, seed=0)
    costs = cost_report(block, (56, 56), 32)
    assert costs["online"]["buffer_elems"] <= 0.10 * costs["offline"]["buffer_elems"]


def test_trace_records_shapes_and_mults():
    block = build_preset("deepstem", 3, 4, 3, seed=0)
    res = squeeze_block(block)
    lines = res.trace_json_lines().strip().splitlines()
    assert len(lines) == len(res.trace)
    first = json.loads(lines[0])
    assert set(first) == {"step", "op", "shapes", "mults"}
    assert set(first["shapes"]) == {"inputs", "output"}
    merges = [json.loads(l) for l in lines if json.loads(l)["op"] == "merge_sequential"]
    assert len(merges) == 2
    assert merges[0]["shapes"]["output"][-2:] == [5, 5]
    assert merges[1]["shapes"]["output"][-2:] == [7, 7]
