"""Collapse a linear multi-branch block into one end-to-end kernel.

Sequential layers merge by inter-weight convolution: the composed kernel
has extent K1 + K2 - 1 and tap (m, n) sums w2[.., a, b] * w1[.., m-a, n-b]
over the second kernel's taps. Parallel branches merge by center-aligned
zero embedding and tap-wise summation, which requires odd extents.

Evaluation convention (load-bearing for exact equality): the input is
zero-padded once by (K_e - 1) / 2 per side, where K_e is the block's
effective kernel extent, and every internal convolution is then VALID
(no further padding). Per-layer padding of intermediates would discard
receptive-field mass at the borders and break equality there. Stride is
excluded from the merge algebra and applied only to the final output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import LayerSpec, as_dense, materialize
from .tensor import (ConvGeometry, KernelTensor, ShapeError, Tensor,
                     conv2d_direct, pad_spatial, scale_by_channel, sum_over)


class MergeError(ValueError):
    """A kernel merge violates the dense/odd/channel-chaining rules."""


@dataclass
class Branch:
    """One sequence of layers plus an optional trailing channel scaling."""

    layers: list
    weights: list
    scaling: np.ndarray = None
    scaling_trainable: bool = True
    name: str = ""
    had_norm: bool = False

    def __post_init__(self):
        if len(self.layers) != len(self.weights) or not self.layers:
            raise ShapeError("branch", "one weight per layer, at least one layer", len(self.layers))
        for i in range(1, len(self.weights)):
            if self.weights[i].in_channels != self.weights[i - 1].out_channels:
                raise ShapeError(f"branch layer {i} in_channels",
                                 self.weights[i - 1].out_channels,
                                 self.weights[i].in_channels)
        if self.scaling is not None:
            self.scaling = np.asarray(self.scaling, dtype=self.weights[-1].data.dtype)
            if self.scaling.shape != (self.out_ch,):
                raise ShapeError("scaling", (self.out_ch,), self.scaling.shape)

    @property
    def in_ch(self):
        return self.weights[0].in_channels

    @property
    def out_ch(self):
        return self.weights[-1].out_channels

    @property
    def effective_k(self):
        kh = 1 + sum(w.kh - 1 for w in self.weights)
        kw = 1 + sum(w.kw - 1 for w in self.weights)
        return kh, kw


@dataclass
class BlockGraph:
    """Parallel branches, a post-addition norm marker, and output geometry.

    Only the geometry's stride is honored when evaluating the block; the
    padding used for block evaluation is pinned to (K_e - 1) / 2 per side
    by the single-outer-padding convention above.
    """

    branches: list
    post_add_norm: bool = False
    output_geometry: ConvGeometry = field(default_factory=ConvGeometry)

    def __post_init__(self):
        if not self.branches:
            raise ShapeError("branches", ">= 1", 0)
        first = self.branches[0]
        for b in self.branches:
            if (b.in_ch, b.out_ch) != (first.in_ch, first.out_ch):
                raise ShapeError("branch channels", (first.in_ch, first.out_ch),
                                 (b.in_ch, b.out_ch))

    @property
    def in_ch(self):
        return self.branches[0].in_ch

    @property
    def out_ch(self):
        return self.branches[0].out_ch

    @property
    def dtype(self):
        return self.branches[0].weights[0].dtype

    @property
    def effective_k(self):
        ks = [b.effective_k for b in self.branches]
        return max(k[0] for k in ks), max(k[1] for k in ks)

    def eval_geometry(self):
        """Same-padded geometry at the block's effective extent plus its stride."""
        keh, kew = self.effective_k
        p_t, p_l = (keh - 1) // 2, (kew - 1) // 2
        return ConvGeometry(stride=self.output_geometry.stride,
                            padding=(p_t, keh - 1 - p_t, p_l, kew - 1 - p_l))


def build_branch(layer_specs, rng, dtype="f64", scaling=None, name="",
                 scaling_trainable=True, had_norm=False):
    """Materialize a branch's kernels in layer order from one generator."""
    weights = [materialize(spec, rng, dtype=dtype) for spec in layer_specs]
    return Branch(layers=list(layer_specs), weights=weights, scaling=scaling,
                  scaling_trainable=scaling_trainable, name=name, had_norm=had_norm)


@dataclass(frozen=True)
class TraceStep:
    op: str
    inputs: tuple
    output: tuple
    mults: int

    @property
    def buffer_elems(self):
        return int(np.prod(self.output))

    def to_dict(self, step):
        return {"step": step, "op": self.op,
                "shapes": {"inputs": [list(s) for s in self.inputs],
                           "output": list(self.output)},
                "mults": self.mults}


@dataclass
class SqueezeResult:
    kernel: KernelTensor
    effective_k: tuple
    trace: list

    def trace_json_lines(self):
        import json

        return "\n".join(json.dumps(s.to_dict(i), sort_keys=True)
                         for i, s in enumerate(self.trace))


def merge_sequential(w1, w2):
    """Compose two stacked dense kernels into one (w1 applied first)."""
    if w1.groups != 1 or w2.groups != 1:
        raise MergeError("sequential merge needs dense kernels; expand groups first")
    if w2.in_channels != w1.out_channels:
        raise MergeError(f"channel chain mismatch: w1 out {w1.out_channels}, "
                         f"w2 in {w2.in_channels}")
    c1, c0, k1h, k1w = w1.shape
    c2 = w2.out_channels
    keh, kew = k1h + w2.kh - 1, k1w + w2.kw - 1
    out = np.zeros((c2, c0, keh, kew), dtype=w1.data.dtype)
    for a in range(w2.kh):
        for b in range(w2.kw):
            out[:, :, a:a + k1h, b:b + k1w] += np.einsum(
                "qc,cpij->qpij", w2.data[:, :, a, b], w1.data, optimize=True)
    return KernelTensor(out, groups=1)


def merge_parallel(kernels):
    """Sum kernels with spatial centers aligned; extents must be odd."""
    kernels = list(kernels)
    first = kernels[0]
    for i, k in enumerate(kernels):
        if k.kh % 2 == 0 or k.kw % 2 == 0:
            raise MergeError(f"kernel {i} has even extent {k.kh}x{k.kw}; "
                             "center alignment is undefined")
        if (k.out_channels, k.in_channels, k.groups) != (
                first.out_channels, first.in_channels, first.groups):
            raise MergeError(f"kernel {i} channels/groups differ from kernel 0")
    keh = max(k.kh for k in kernels)
    kew = max(k.kw for k in kernels)
    out = np.zeros((first.out_channels, first.in_channels_per_group, keh, kew),
                   dtype=first.data.dtype)
    for k in kernels:
        oh, ow = (keh - k.kh) // 2, (kew - k.kw) // 2
        out[:, :, oh:oh + k.kh, ow:ow + k.kw] += k.data
    return KernelTensor(out, groups=first.groups)


def apply_branch_scaling(w, gamma):
    """Multiply output channel c of w by gamma[c]."""
    gamma = np.asarray(gamma, dtype=w.data.dtype)
    if gamma.shape != (w.out_channels,):
        raise ShapeError("gamma", (w.out_channels,), gamma.shape)
    return KernelTensor(w.data * gamma[:, None, None, None], groups=w.groups)


def _seq_merge_mults(w1, w2):
    # one multiply per (w2 tap) x (w1 element) pair in the scatter form
    return (w2.out_channels * w2.kh * w2.kw *
            w1.out_channels * w1.in_channels * w1.kh * w1.kw)


def squeeze_branch(branch, trace=None):
    """Left-fold a branch's layers into one dense kernel, then scale."""
    k = as_dense(branch.weights[0])
    if k is not branch.weights[0] and trace is not None:
        trace.append(TraceStep("as_dense", (branch.weights[0].shape,), k.shape, 0))
    for w in branch.weights[1:]:
        dense = as_dense(w)
        if dense is not w and trace is not None:
            trace.append(TraceStep("as_dense", (w.shape,), dense.shape, 0))
        merged = merge_sequential(k, dense)
        if trace is not None:
            trace.append(TraceStep("merge_sequential", (k.shape, dense.shape),
                                   merged.shape, _seq_merge_mults(k, dense)))
        k = merged
    if branch.scaling is not None:
        scaled = apply_branch_scaling(k, branch.scaling)
        if trace is not None:
            trace.append(TraceStep("scale", (k.shape, (len(branch.scaling),)),
                                   scaled.shape, int(np.prod(k.shape))))
        k = scaled
    return k


def squeeze_block(block):
    """Fold every branch, then merge branches center-aligned."""
    trace = []
    branch_kernels = [squeeze_branch(b, trace) for b in block.branches]
    if len(branch_kernels) == 1:
        kernel = branch_kernels[0]
    else:
        kernel = merge_parallel(branch_kernels)
        trace.append(TraceStep("merge_parallel",
                               tuple(k.shape for k in branch_kernels), kernel.shape, 0))
    return SqueezeResult(kernel=kernel, effective_k=(kernel.kh, kernel.kw), trace=trace)


def _center_crop(t, h, w):
    arr = t.data
    mh = (arr.shape[-2] - h) // 2
    mw = (arr.shape[-1] - w) // 2
    return Tensor(arr[..., mh:mh + h, mw:mw + w])


def check_center_alignable(block):
    """Multi-branch blocks need odd per-branch extents to align centers."""
    if len(block.branches) == 1:
        return
    for i, b in enumerate(block.branches):
        kb_h, kb_w = b.effective_k
        if kb_h % 2 == 0 or kb_w % 2 == 0:
            raise MergeError(f"branch {i} has even effective extent "
                             f"{kb_h}x{kb_w}; center alignment is undefined")


def expanded_forward(block, x):
    """Evaluate the block layer by layer under single outer padding.

    The post-addition norm is not applied; it sits outside the linear
    region the squeeze covers.
    """
    if x.channels != block.in_ch:
        raise ShapeError("channels", block.in_ch, x.channels)
    check_center_alignable(block)
    geom = block.eval_geometry()
    p_t, p_b, p_l, p_r = geom.padding
    xp = pad_spatial(x, p_t, p_b, p_l, p_r)
    keh, kew = block.effective_k
    h_out = xp.shape[-2] - keh + 1
    w_out = xp.shape[-1] - kew + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("spatial", f">= effective kernel {keh}x{kew}", xp.shape[-2:])
    valid = ConvGeometry()
    outs = []
    for branch in block.branches:
        a = xp
        for w in branch.weights:
            a = conv2d_direct(a, w, valid)
        if branch.scaling is not None:
            a = scale_by_channel(a, branch.scaling)
        outs.append(_center_crop(a, h_out, w_out))
    y = sum_over(outs)
    s_h, s_w = geom.stride
    if (s_h, s_w) != (1, 1):
        y = Tensor(y.data[..., ::s_h, ::s_w])
    return y


def block_forward_squeezed(block, x):
    """conv2d_direct with the squeezed kernel under the block's geometry."""
    return conv2d_direct(x, squeeze_block(block).kernel, block.eval_geometry())


def cost_report(block, feature_hw, batch):
    """Analytic buffers and multiply counts for both training routes.

    Offline counts every feature map produced while evaluating the
    expanded block (layer outputs and scaled branch outputs) except the
    block's final output, plus per-layer convolution multiplies at the
    full H x W resolution. Online counts the kernel-space buffers and
    multiplies recorded in the squeeze trace, plus the single output
    convolution. No wall clock is involved.
    """
    h, w = feature_hw
    s_h, s_w = block.output_geometry.stride
    h_out = (h - 1) // s_h + 1
    w_out = (w - 1) // s_w + 1

    off_buf = 0
    off_mults = 0
    for branch in block.branches:
        maps = []
        for spec, kern in zip(branch.layers, branch.weights):
            maps.append(batch * kern.out_channels * h * w)
            off_mults += (batch * h * w * kern.out_channels *
                          kern.in_channels_per_group * kern.kh * kern.kw)
        if branch.scaling is not None:
            maps.append(batch * branch.out_ch * h * w)
            off_mults += batch * branch.out_ch * h * w
        off_buf += sum(maps)
    if len(block.branches) == 1:
        # the single branch's last map is the block output, not an extra buffer
        last = block.branches[0]
        off_buf -= batch * last.out_ch * h * w

    result = squeeze_block(block)
    on_buf = sum(step.buffer_elems for step in result.trace)
    on_mults = sum(step.mults for step in result.trace)
    keh, kew = result.effective_k
    on_mults += batch * h_out * w_out * block.out_ch * block.in_ch * keh * kew

    return {
        "offline": {"buffer_elems": int(off_buf), "mults": int(off_mults)},
        "online": {"buffer_elems": int(on_buf), "mults": int(on_mults)},
    }
