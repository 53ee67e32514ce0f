"""Stacked pre-norm residual model around the budgeted spectral layer.

Pipeline: embedding (table lookup for token inputs, linear map for
real-valued inputs) -> depth x [u + layer(norm(u))] -> final norm ->
linear readout (per timestep, or mean-pooled over time for sequence
classification heads).

Parameters live in plain dataclasses of numpy arrays.  ``flatten_params``
fixes the declaration order used by the optimizer, the gradient set, and
the checkpoint container ("ESSM" magic, versioned, canonical-JSON config,
raw little-endian tensors, CRC32).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import SpectralBasis
from .config import ModelConfig
from .errors import ArtifactError, StructuralError
from .layer import GateParams, LayerCache, LayerParams, layer_forward
from .storage import Reader, Writer, atomic_write_bytes, crc32

__all__ = [
    "BlockParams",
    "ModelParams",
    "ModelCache",
    "checkpoint_bytes",
    "flatten_params",
    "init_model_params",
    "layer_norm_forward",
    "load_checkpoint",
    "model_forward",
    "param_order",
    "rms_norm_forward",
    "save_checkpoint",
]

CHECKPOINT_MAGIC = b"ESSM"
CHECKPOINT_VERSION = 1

#: LayerNorm variance stabilizer (fixed, documented here; distinct from the
#: gate's rescale eps which lives in config).
NORM_EPS = 1e-5


@dataclass
class BlockParams:
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    layer: LayerParams


@dataclass
class ModelParams:
    """All learnable tensors, embedding through readout."""

    embed_table: Optional[np.ndarray]  # (vocab, width) for token input
    embed_w: Optional[np.ndarray]  # (width, in_dim) for real input
    embed_b: Optional[np.ndarray]  # (width,)
    blocks: list[BlockParams]
    final_gain: np.ndarray
    final_bias: np.ndarray
    readout_w: np.ndarray  # (out_dim, width)
    readout_b: np.ndarray  # (out_dim,)


def param_order(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration order of (name, shape) for every parameter tensor."""
    d, dg, cap = config.width, config.gate_hidden, config.capacity
    out: list[tuple[str, tuple[int, ...]]] = []
    if config.input_kind == "tokens":
        out.append(("embed.table", (config.vocab_size, d)))
    else:
        out.append(("embed.w", (d, config.in_dim)))
        out.append(("embed.b", (d,)))
    for i in range(config.depth):
        out.append((f"block{i}.norm.gain", (d,)))
        out.append((f"block{i}.norm.bias", (d,)))
        out.append((f"block{i}.mixing", (cap, d, d)))
        out.append((f"block{i}.skip", (d, d)))
        out.append((f"block{i}.gate.w_in", (dg, d)))
        out.append((f"block{i}.gate.b_in", (dg,)))
        out.append((f"block{i}.gate.w_out", (cap, dg)))
        out.append((f"block{i}.gate.b_out", (cap,)))
    out.append(("final.gain", (d,)))
    out.append(("final.bias", (d,)))
    out.append(("readout.w", (config.out_dim, d)))
    out.append(("readout.b", (config.out_dim,)))
    return out


def flatten_params(params: ModelParams, config: ModelConfig) -> list[tuple[str, np.ndarray]]:
    """(name, array) pairs in declaration order; arrays are live references."""
    out: list[tuple[str, np.ndarray]] = []
    if config.input_kind == "tokens":
        out.append(("embed.table", params.embed_table))
    else:
        out.append(("embed.w", params.embed_w))
        out.append(("embed.b", params.embed_b))
    for i, block in enumerate(params.blocks):
        out.append((f"block{i}.norm.gain", block.norm_gain))
        out.append((f"block{i}.norm.bias", block.norm_bias))
        out.append((f"block{i}.mixing", block.layer.mixing))
        out.append((f"block{i}.skip", block.layer.skip))
        out.append((f"block{i}.gate.w_in", block.layer.gate.w_in))
        out.append((f"block{i}.gate.b_in", block.layer.gate.b_in))
        out.append((f"block{i}.gate.w_out", block.layer.gate.w_out))
        out.append((f"block{i}.gate.b_out", block.layer.gate.b_out))
    out.append(("final.gain", params.final_gain))
    out.append(("final.bias", params.final_bias))
    out.append(("readout.w", params.readout_w))
    out.append(("readout.b", params.readout_b))
    expected = param_order(config)
    got = [(name, arr.shape) for name, arr in out]
    if got != expected:
        raise StructuralError(
            f"parameter structure does not match config: {got} vs {expected}"
        )
    return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std), resampling draws beyond 2 standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_model_params(config: ModelConfig) -> ModelParams:
    """Deterministic initialization from config.seed.

    Mixing matrices ~ N(0, 1/(width*capacity)) so the summed spectral
    branch matches the skip branch's scale; skip starts at zero; the gate
    uses truncated-normal fan-in weights with zero output bias so initial
    mixture weights are near-uniform (no channel starvation under budget
    dropout); embedding/readout are truncated-normal fan-in.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    d, dg, cap = config.width, config.gate_hidden, config.capacity
    dtype = np.dtype(config.precision)

    def cast(x):
        return np.ascontiguousarray(x, dtype=dtype)

    embed_table = embed_w = embed_b = None
    if config.input_kind == "tokens":
        embed_table = cast(_truncated_normal(rng, (config.vocab_size, d), 1.0 / np.sqrt(d)))
    else:
        embed_w = cast(_truncated_normal(rng, (d, config.in_dim), 1.0 / np.sqrt(config.in_dim)))
        embed_b = cast(np.zeros(d))
    blocks = []
    mixing_std = float(np.sqrt(1.0 / (d * cap)))
    for _ in range(config.depth):
        mixing = cast(rng.normal(0.0, mixing_std, size=(cap, d, d)))
        skip = cast(np.zeros((d, d)))
        gate = GateParams(
            w_in=cast(_truncated_normal(rng, (dg, d), 1.0 / np.sqrt(d))),
            b_in=cast(np.zeros(dg)),
            w_out=cast(_truncated_normal(rng, (cap, dg), 1.0 / np.sqrt(dg))),
            b_out=cast(np.zeros(cap)),
            eps=config.gate_eps,
        )
        blocks.append(
            BlockParams(
                norm_gain=cast(np.ones(d)),
                norm_bias=cast(np.zeros(d)),
                layer=LayerParams(mixing=mixing, skip=skip, gate=gate),
            )
        )
    return ModelParams(
        embed_table=embed_table,
        embed_w=embed_w,
        embed_b=embed_b,
        blocks=blocks,
        final_gain=cast(np.ones(d)),
        final_bias=cast(np.zeros(d)),
        readout_w=cast(_truncated_normal(rng, (config.out_dim, d), 1.0 / np.sqrt(d))),
        readout_b=cast(np.zeros(config.out_dim)),
    )


# ---------------------------------------------------------------------------
# normalization layers
# ---------------------------------------------------------------------------


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Per-timestep LayerNorm over channels with learned affine."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = centered * inv_std
    return xhat * gain + bias, {"kind": "layernorm", "xhat": xhat, "inv_std": inv_std, "gain": gain}


def rms_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Per-timestep RMS normalization (no mean subtraction) with affine."""
    ms = np.mean(x * x, axis=-1, keepdims=True)
    inv_rms = 1.0 / np.sqrt(ms + NORM_EPS)
    return x * inv_rms * gain + bias, {"kind": "rmsnorm", "x": x, "inv_rms": inv_rms, "gain": gain}


def norm_forward(kind: str, x, gain, bias):
    if kind == "layernorm":
        return layer_norm_forward(x, gain, bias)
    if kind == "rmsnorm":
        return rms_norm_forward(x, gain, bias)
    raise StructuralError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# full model forward
# ---------------------------------------------------------------------------


@dataclass
class ModelCache:
    """Everything the analytic backward pass needs, embedding to head."""

    config: ModelConfig
    budget: int
    inputs: np.ndarray
    embedded: np.ndarray  # (B, L, d)
    block_inputs: list[np.ndarray]
    norm_caches: list[dict]
    layer_caches: list[LayerCache]
    final_input: np.ndarray
    final_cache: dict
    features: np.ndarray  # (B, L, d) post final norm
    squeeze: bool
    params: ModelParams = field(repr=False)
    basis: SpectralBasis = field(repr=False)
    flops: int = 0


def model_forward(
    inputs,
    params: ModelParams,
    config: ModelConfig,
    basis: SpectralBasis,
    budget: int,
    gate_enabled: bool | None = None,
    truncation: str | None = None,
    _allow_k1: bool = False,
) -> tuple[np.ndarray, ModelCache]:
    """Forward pass at a runtime budget; returns (outputs, cache).

    Token tasks take integer arrays (L,) or (B, L); real-valued tasks take
    (L, in_dim) or (B, L, in_dim).  Output is (B, L, out_dim) for per-step
    heads or (B, out_dim) for mean-pool heads (leading axis dropped when a
    single sequence was passed).
    """
    gate_enabled = config.gate_enabled if gate_enabled is None else gate_enabled
    truncation = config.truncation_mode if truncation is None else truncation
    inputs = np.asarray(inputs)
    if basis.seq_len != config.seq_len or basis.capacity != config.capacity:
        raise StructuralError(
            f"basis (seq_len={basis.seq_len}, capacity={basis.capacity}) does "
            f"not match config (seq_len={config.seq_len}, capacity={config.capacity})"
        )

    if config.input_kind == "tokens":
        if not np.issubdtype(inputs.dtype, np.integer):
            raise StructuralError("token inputs must be integers")
        squeeze = inputs.ndim == 1
        if squeeze:
            inputs = inputs[None]
        if inputs.ndim != 2 or inputs.shape[1] != config.seq_len:
            raise StructuralError(
                f"token input must be (L,) or (B, L) with L={config.seq_len}, "
                f"got {inputs.shape}"
            )
        if inputs.size and (inputs.min() < 0 or inputs.max() >= config.vocab_size):
            raise StructuralError(
                f"token id outside vocabulary [0, {config.vocab_size})"
            )
        x = params.embed_table[inputs]
    else:
        squeeze = inputs.ndim == 2
        if squeeze:
            inputs = inputs[None]
        if inputs.ndim != 3 or inputs.shape[1:] != (config.seq_len, config.in_dim):
            raise StructuralError(
                f"real input must be (L, {config.in_dim}) or (B, L, "
                f"{config.in_dim}) with L={config.seq_len}, got {inputs.shape}"
            )
        x = inputs @ params.embed_w.T + params.embed_b

    embedded = x
    block_inputs: list[np.ndarray] = []
    norm_caches: list[dict] = []
    layer_caches: list[LayerCache] = []
    flops = 0
    for block in params.blocks:
        block_inputs.append(x)
        normed, ncache = norm_forward(config.norm_kind, x, block.norm_gain, block.norm_bias)
        y, lcache = layer_forward(
            normed, block.layer, basis, budget,
            gate_enabled=gate_enabled, truncation=truncation, _allow_k1=_allow_k1,
        )
        flops += lcache.flops
        norm_caches.append(ncache)
        layer_caches.append(lcache)
        x = x + y

    final_input = x
    features, final_cache = norm_forward(
        config.norm_kind, x, params.final_gain, params.final_bias
    )
    if config.head == "per-step":
        out = features @ params.readout_w.T + params.readout_b
    else:  # mean-pool
        pooled = features.mean(axis=1)
        out = pooled @ params.readout_w.T + params.readout_b

    cache = ModelCache(
        config=config,
        budget=budget,
        inputs=inputs,
        embedded=embedded,
        block_inputs=block_inputs,
        norm_caches=norm_caches,
        layer_caches=layer_caches,
        final_input=final_input,
        final_cache=final_cache,
        features=features,
        squeeze=squeeze,
        params=params,
        basis=basis,
        flops=flops,
    )
    return (out[0] if squeeze else out), cache


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    """Serialize to the "ESSM" container (no optimizer state)."""
    w = Writer(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    w.json_block(config.to_dict())
    for _, arr in flatten_params(params, config):
        w.array(arr, config.precision)
    return w.finish()


def save_checkpoint(path: str | os.PathLike, params: ModelParams, config: ModelConfig) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, config))


def checkpoint_span(data: bytes, what: str = "checkpoint") -> tuple[int, ModelConfig]:
    """Parse the header of an "ESSM" blob; returns (total container byte
    length including trailing CRC, config).  Trailing data beyond the span
    (e.g. appended optimizer state) is the caller's business."""
    import json
    import struct

    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ArtifactError(f"{what}: not an ESSM checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(
            f"{what}: unsupported checkpoint version {version} "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    (json_len,) = struct.unpack("<I", data[8:12])
    if 12 + json_len > len(data):
        raise ArtifactError(f"{what}: truncated config block")
    try:
        cfg_doc = json.loads(data[12 : 12 + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{what}: corrupt config JSON: {exc}") from exc
    config = ModelConfig.from_dict(cfg_doc, where=f"{what}.config")
    itemsize = np.dtype(config.precision).itemsize
    tensor_bytes = sum(
        int(np.prod(shape, dtype=np.int64)) * itemsize
        for _, shape in param_order(config)
    )
    span = 12 + json_len + tensor_bytes + 4
    if span > len(data):
        raise ArtifactError(f"{what}: truncated tensor payload")
    return span, config


def params_from_checkpoint(data: bytes, what: str = "checkpoint") -> tuple[ModelParams, ModelConfig]:
    """Decode one "ESSM" container (exact span) into params + config."""
    span, config = checkpoint_span(data, what)
    r = Reader(data[:span], CHECKPOINT_MAGIC, what=what)
    r.expect_version(CHECKPOINT_VERSION)
    r.json_block()
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_order(config):
        arrays[name] = r.array(shape, config.precision)
    r.expect_end()

    def gate_for(i: int) -> GateParams:
        return GateParams(
            w_in=arrays[f"block{i}.gate.w_in"],
            b_in=arrays[f"block{i}.gate.b_in"],
            w_out=arrays[f"block{i}.gate.w_out"],
            b_out=arrays[f"block{i}.gate.b_out"],
            eps=config.gate_eps,
        )

    blocks = [
        BlockParams(
            norm_gain=arrays[f"block{i}.norm.gain"],
            norm_bias=arrays[f"block{i}.norm.bias"],
            layer=LayerParams(
                mixing=arrays[f"block{i}.mixing"],
                skip=arrays[f"block{i}.skip"],
                gate=gate_for(i),
            ),
        )
        for i in range(config.depth)
    ]
    params = ModelParams(
        embed_table=arrays.get("embed.table"),
        embed_w=arrays.get("embed.w"),
        embed_b=arrays.get("embed.b"),
        blocks=blocks,
        final_gain=arrays["final.gain"],
        final_bias=arrays["final.bias"],
        readout_w=arrays["readout.w"],
        readout_b=arrays["readout.b"],
    )
    return params, config


def load_checkpoint(
    path: str | os.PathLike,
    basis: SpectralBasis | None = None,
) -> tuple[ModelParams, ModelConfig]:
    """Load params + config; optionally validate compatibility with a basis.

    Ignores any appended optimizer block (see training.load_train_checkpoint
    for that).  A basis whose (seq_len, capacity) disagree with the stored
    config raises ArtifactError.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    params, config = params_from_checkpoint(data, what=f"checkpoint {os.fspath(path)!r}")
    if basis is not None and (
        basis.seq_len != config.seq_len or basis.capacity != config.capacity
    ):
        raise ArtifactError(
            f"checkpoint expects basis (seq_len={config.seq_len}, "
            f"capacity={config.capacity}) but got (seq_len={basis.seq_len}, "
            f"capacity={basis.capacity})"
        )
    return params, config


def params_fingerprint(params: ModelParams, config: ModelConfig) -> int:
    """CRC32 over all parameter bytes (order-stable); sweeps use it to prove
    they never mutate a checkpoint."""
    acc = 0
    for _, arr in flatten_params(params, config):
        acc = crc32(np.ascontiguousarray(arr).tobytes() + acc.to_bytes(4, "little"))
    return acc
