"""Load block-spec JSON files into BlockGraphs, and checkpoint round-trips.

Spec files validate against the published schema (schemas/blockspec-1.json,
also shipped inside the package); unknown keys are rejected. One seed in
the file drives all initialization through numpy's default PCG64 stream,
consumed branch by branch, layer by layer.
"""

from __future__ import annotations

import json
from importlib import resources

import jsonschema
import numpy as np

from . import layers as L
from .blocks import build_preset
from .squeeze import BlockGraph, Branch, build_branch
from .tensor import ConvGeometry, KernelTensor


class SpecError(ValueError):
    """The spec file is malformed or fails schema validation."""


def load_schema():
    with resources.files("orepa.schemas").joinpath("blockspec-1.json").open("rb") as fh:
        return json.load(fh)


def validate_spec(doc):
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        raise SpecError(f"spec validation failed: {exc.message}") from exc


def _layer_from_obj(obj, in_ch, default_k):
    kind = obj["kind"]
    k = obj.get("k", default_k if kind in ("conv", "avgpool", "freqfilter", "depthwise") else 1)
    out_ch = obj.get("out_ch")
    init = None
    if "init" in obj or "theta" in obj or "value" in obj or "symmetric" in obj:
        init = L.InitRule(obj.get("init", "kaiming_uniform"),
                          theta=obj.get("theta", L.DEFAULT_THETA),
                          value=obj.get("value", 1.0),
                          symmetric=obj.get("symmetric", False))
    kwargs = {"init": init} if init is not None else {}
    trainable = obj.get("trainable")
    if kind == "conv":
        spec = L.LayerSpec("conv", in_ch, out_ch if out_ch else in_ch, k=k,
                           groups=obj.get("groups", 1), trainable=trainable, **kwargs)
    elif kind == "identity1x1":
        spec = L.LayerSpec("identity1x1", in_ch, out_ch if out_ch else in_ch,
                           groups=obj.get("groups", 1), trainable=trainable, **kwargs)
    elif kind == "scaling":
        spec = L.LayerSpec("scaling", in_ch, in_ch, trainable=trainable, **kwargs)
    elif kind == "avgpool":
        spec = L.LayerSpec("avgpool", in_ch, in_ch, k=k, trainable=trainable, **kwargs)
    elif kind == "freqfilter":
        spec = L.LayerSpec("freqfilter", in_ch, in_ch, k=k, trainable=trainable, **kwargs)
    elif kind == "depthwise":
        e = obj.get("expansion", 1)
        spec = L.LayerSpec("depthwise", in_ch, in_ch * e, k=k, expansion=e,
                           trainable=trainable, **kwargs)
    else:  # pointwise
        spec = L.LayerSpec("pointwise", in_ch, out_ch if out_ch else in_ch,
                           trainable=trainable, **kwargs)
    return spec


def block_from_spec(doc):
    """Validate a parsed spec document and build its BlockGraph.

    dtype defaults to f64; f32 is opt-in via the spec file.
    """
    validate_spec(doc)
    dtype = doc.get("dtype", "f64")
    seed = doc["seed"]
    if "preset" in doc:
        opts = doc.get("options", {})
        return build_preset(doc["preset"], doc["in_ch"], doc["out_ch"], k=doc["k"],
                            dtype=dtype, seed=seed,
                            stride=tuple(opts.get("stride", (1, 1))),
                            expansion=opts.get("expansion"),
                            internal_ch=opts.get("internal_ch"),
                            frozen_scaling=opts.get("frozen_scaling", False))
    rng = np.random.default_rng(seed)
    scaling_init = doc.get("scaling_init")
    branches = []
    for bi, layer_objs in enumerate(doc["branches"]):
        specs = []
        width = doc["in_ch"]
        for obj in layer_objs:
            spec = _layer_from_obj(obj, width, doc["k"])
            specs.append(spec)
            width = spec.out_ch
        if width != doc["out_ch"]:
            raise SpecError(f"branch {bi} ends at {width} channels, "
                            f"block out_ch is {doc['out_ch']}")
        scaling = None
        if scaling_init is not None:
            if len(scaling_init) != len(doc["branches"]):
                raise SpecError("scaling_init length must equal branch count")
            scaling = np.full(doc["out_ch"], float(scaling_init[bi]))
        branches.append(build_branch(specs, rng, dtype=dtype, scaling=scaling,
                                     name=f"branch{bi}"))
    return BlockGraph(branches=branches,
                      post_add_norm=doc.get("post_add_norm", False),
                      output_geometry=ConvGeometry(stride=tuple(doc.get("stride", (1, 1)))))


def load_spec(path):
    """Read, validate and build; returns (document, BlockGraph)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    return doc, block_from_spec(doc)


CKPT_FORMAT = "orepa-ckpt-1"


def save_checkpoint(path, doc, block):
    """Persist a block's current weights next to the spec that built it."""
    payload = {
        "format": CKPT_FORMAT,
        "blockspec": doc,
        "branches": [
            {
                "name": b.name,
                "scaling": None if b.scaling is None else b.scaling.tolist(),
                "layers": [{"shape": list(w.shape), "groups": w.groups,
                            "data": w.data.ravel().tolist()}
                           for w in b.weights],
            }
            for b in block.branches
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    """Rebuild a block from a checkpoint; returns (document, BlockGraph)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CKPT_FORMAT:
        raise SpecError(f"not a checkpoint: {path}")
    doc = payload["blockspec"]
    block = block_from_spec(doc)
    dtype = doc.get("dtype", "f64")
    for branch, saved in zip(block.branches, payload["branches"]):
        for li, layer in enumerate(saved["layers"]):
            arr = np.asarray(layer["data"]).reshape(layer["shape"])
            branch.weights[li] = KernelTensor(arr, groups=layer["groups"], dtype=dtype)
        if saved["scaling"] is not None:
            branch.scaling = np.asarray(saved["scaling"],
                                        dtype=branch.weights[-1].data.dtype)
    return doc, block
