"""Multi-branch linear convolution blocks squeezed into single kernels."""

from .tensor import (ConvGeometry, KernelTensor, ShapeError, Tensor, add,
                     conv2d_direct, pad_spatial, same_padding,
                     scale_by_channel, sum_over)
from .layers import InitRule, LayerSpec, as_dense, materialize
from .squeeze import (BlockGraph, Branch, MergeError, SqueezeResult,
                      apply_branch_scaling, block_forward_squeezed,
                      build_branch, cost_report, expanded_forward,
                      merge_parallel, merge_sequential, squeeze_block,
                      squeeze_branch)
from .blocks import PRESETS, SCALING_INIT, build_preset, linearize
from .dynamics import (DynamicsReport, OptimizerConfig, ParamSet, SgdState,
                       backward_through_expanded, backward_through_squeeze,
                       branch_similarity, channel_norm_profile,
                       finite_difference_grads, gradcheck_block,
                       probe_branchwise_gamma, probe_conv_scale_update,
                       probe_multilayer_lemma, probe_shared_gamma,
                       project_onto, sgd_step, train_toy)
from .okt import read_okt, write_okt

__version__ = "0.1.0"

__all__ = [
    "BlockGraph", "Branch", "ConvGeometry", "DynamicsReport", "InitRule",
    "KernelTensor", "LayerSpec", "MergeError", "OptimizerConfig", "PRESETS",
    "ParamSet", "SCALING_INIT", "SgdState", "ShapeError", "SqueezeResult",
    "Tensor", "add", "apply_branch_scaling", "as_dense",
    "backward_through_expanded", "backward_through_squeeze",
    "block_forward_squeezed", "branch_similarity", "build_branch",
    "build_preset", "channel_norm_profile", "conv2d_direct", "cost_report",
    "expanded_forward", "finite_difference_grads", "gradcheck_block",
    "linearize", "materialize", "merge_parallel", "merge_sequential",
    "pad_spatial", "probe_branchwise_gamma", "probe_conv_scale_update",
    "probe_multilayer_lemma", "probe_shared_gamma", "project_onto",
    "read_okt", "same_padding", "scale_by_channel", "sgd_step",
    "squeeze_block", "squeeze_branch", "sum_over", "train_toy", "write_okt",
]
