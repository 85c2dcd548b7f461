"""The tokenizer network.

Pipeline: patchify + linear embedding, learnable query rows appended, a
pre-norm transformer encoder, dual-level vector quantization of the query
outputs, a masked transformer decoder that reconstructs the input from the
quantized queries alone, and a linear head that predicts the following
samples. Forward, losses, and gradients are implemented directly on numpy
arrays; gradients honor the straight-through estimator and the
stop-gradient split of the quantization objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, FormatError
from .preprocess import Segment, SegmentPair, patchify, unpatchify
from .quantizer import (
    Codebook,
    DvqResult,
    UsageStats,
    dvq_quantize,
    vq_loss,
    vq_loss_grads,
)
from .tokens import TokenSequence

CHECKPOINT_MAGIC = b"BEAT"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class BeatConfig:
    """Architecture and loss hyperparameters."""

    context_len: int = 500
    n_leads: int = 12
    patch_frame: int = 10
    embed_dim: int = 64
    n_queries: int = 25
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    codebook_size1: int = 256
    codebook_size2: int = 256
    levels: int = 2
    pred_len: int = 250
    beta: float = 0.25
    lambda_recon: float = 1.0
    lambda_pred: float = 0.5
    lambda_vq: float = 1.0
    pred_from_quantized: bool = True

    def __post_init__(self):
        for name in (
            "context_len", "n_leads", "patch_frame", "embed_dim", "n_queries",
            "enc_layers", "dec_layers", "heads", "ffn_mult",
            "codebook_size1", "codebook_size2", "pred_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.context_len % self.patch_frame != 0:
            raise ConfigError(
                f"context_len {self.context_len} is not divisible by patch_frame {self.patch_frame}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )
        if self.levels not in (1, 2):
            raise ConfigError(f"levels must be 1 or 2, got {self.levels}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")

    @property
    def n_patches(self) -> int:
        return self.context_len // self.patch_frame

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return self.levels * self.n_queries


_BLOCK_SUFFIXES = ("ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "b1", "w2", "b2")


def _array_names(config: BeatConfig) -> list[str]:
    names = ["patch_w", "patch_b", "queries", "mask_token", "pos_table"]
    for i in range(config.enc_layers):
        names += [f"enc{i}_{s}" for s in _BLOCK_SUFFIXES]
    for i in range(config.dec_layers):
        names += [f"dec{i}_{s}" for s in _BLOCK_SUFFIXES]
    names += ["recon_w", "recon_b", "pred_w", "pred_b", "codebook1", "codebook2"]
    return names


class BeatParams:
    """All model arrays, keyed by name. ``pos_table`` is the only non-learned
    array; everything else receives gradients."""

    def __init__(self, config: BeatConfig, arrays: dict[str, np.ndarray]):
        expected = _array_names(config)
        missing = [n for n in expected if n not in arrays]
        if missing:
            raise ValueError(f"missing arrays: {missing}")
        extra = [n for n in arrays if n not in expected]
        if extra:
            raise ValueError(f"unexpected arrays: {extra}")
        self.config = config
        self.arrays = {n: np.asarray(arrays[n], dtype=np.float64) for n in expected}
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"array {name!r} contains non-finite values")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.arrays:
            raise KeyError(name)
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def learnable_names(self) -> list[str]:
        return [n for n in self.arrays if n != "pos_table"]

    def codebooks(self) -> tuple[Codebook, Optional[Codebook]]:
        c1 = Codebook(self.arrays["codebook1"], level=1)
        if self.config.levels == 1:
            return c1, None
        return c1, Codebook(self.arrays["codebook2"], level=2)

    def copy(self) -> "BeatParams":
        return BeatParams(self.config, {n: a.copy() for n, a in self.arrays.items()})


@dataclass
class ActivationCache:
    """Intermediate arrays of one forward pass."""

    e: np.ndarray                      # (t, c) patch embeddings, before positions
    h_in: np.ndarray                   # (t+m, c) encoder input
    h_latent: np.ndarray               # (t+m, c) encoder output
    h_latent_q: np.ndarray             # (m, c) query rows of h_latent
    quantized: Optional[np.ndarray]    # (m, c) quantized queries
    dvq_results: Optional[list[DvqResult]]
    h_out: Optional[np.ndarray]        # (t+m, c) decoder output
    h_out_recon: Optional[np.ndarray]  # (t, c) patch rows of h_out
    reconstruction: Optional[np.ndarray]  # (T, C)
    prediction: Optional[np.ndarray]      # (P, C)


@dataclass
class LossBundle:
    l_recon: float
    l_pred: float
    l_vq: float
    l_total: float


@dataclass
class FrozenQuant:
    """Quantization state pinned at a reference point.

    Holds the index assignments plus the values that the stop-gradient and
    straight-through rules treat as constants. With a FrozenQuant the loss is
    a smooth function of the parameters whose exact gradient equals the
    estimator used in :func:`backward`, which is what finite-difference
    checking needs.
    """

    core_idx: np.ndarray               # (m,) int
    residual_idx: Optional[np.ndarray]  # (m,) int or None
    st_offset: np.ndarray              # (m, c) quantized - pre_quant at reference
    sg_h1: np.ndarray                  # (m, c)
    sg_q1: np.ndarray                  # (m, c)
    sg_h2: Optional[np.ndarray]
    sg_q2: Optional[np.ndarray]


# ---------------------------------------------------------------------------
# initialization


def _sinusoid_table(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(dim)[None, :].astype(np.float64)
    angles = positions / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


def init_model(config: BeatConfig, seed: int = 0) -> BeatParams:
    """Seeded parameter initialization.

    Linear weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero, norm
    scales one, queries and mask token ~ N(0, 0.02^2). Codebooks get small
    normal placeholders; the trainer replaces them by k-means on encoder
    outputs after a warm-up pass.
    """
    rng = np.random.default_rng(seed)
    cfg = config

    def linear(fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    arrays: dict[str, np.ndarray] = {}
    patch_width = cfg.patch_frame * cfg.n_leads
    arrays["patch_w"] = linear(patch_width, cfg.embed_dim)
    arrays["patch_b"] = np.zeros(cfg.embed_dim)
    arrays["queries"] = rng.normal(0.0, INIT_STD, size=(cfg.n_queries, cfg.embed_dim))
    arrays["mask_token"] = rng.normal(0.0, INIT_STD, size=cfg.embed_dim)
    arrays["pos_table"] = _sinusoid_table(cfg.n_patches, cfg.embed_dim)

    ffn_dim = cfg.ffn_mult * cfg.embed_dim
    for prefix, n_layers in (("enc", cfg.enc_layers), ("dec", cfg.dec_layers)):
        for i in range(n_layers):
            arrays[f"{prefix}{i}_ln1"] = np.ones(cfg.embed_dim)
            arrays[f"{prefix}{i}_wq"] = linear(cfg.embed_dim, cfg.embed_dim)
            arrays[f"{prefix}{i}_wk"] = linear(cfg.embed_dim, cfg.embed_dim)
            arrays[f"{prefix}{i}_wv"] = linear(cfg.embed_dim, cfg.embed_dim)
            arrays[f"{prefix}{i}_wo"] = linear(cfg.embed_dim, cfg.embed_dim)
            arrays[f"{prefix}{i}_ln2"] = np.ones(cfg.embed_dim)
            arrays[f"{prefix}{i}_w1"] = linear(cfg.embed_dim, ffn_dim)
            arrays[f"{prefix}{i}_b1"] = np.zeros(ffn_dim)
            arrays[f"{prefix}{i}_w2"] = linear(ffn_dim, cfg.embed_dim)
            arrays[f"{prefix}{i}_b2"] = np.zeros(cfg.embed_dim)

    arrays["recon_w"] = linear(cfg.embed_dim, patch_width)
    arrays["recon_b"] = np.zeros(patch_width)
    arrays["pred_w"] = linear(cfg.n_queries * cfg.embed_dim, cfg.pred_len * cfg.n_leads)
    arrays["pred_b"] = np.zeros(cfg.pred_len * cfg.n_leads)
    arrays["codebook1"] = rng.normal(0.0, INIT_STD, size=(cfg.codebook_size1, cfg.embed_dim))
    arrays["codebook2"] = rng.normal(0.0, INIT_STD, size=(cfg.codebook_size2, cfg.embed_dim))
    return BeatParams(cfg, arrays)


# ---------------------------------------------------------------------------
# layer primitives (forward + backward)


def _layer_norm_fwd(x: np.ndarray, scale: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * scale, (xhat, inv_std)


def _layer_norm_bwd(d_out: np.ndarray, scale: np.ndarray, cache):
    xhat, inv_std = cache
    d_scale = np.sum(d_out * xhat, axis=0)
    d_xhat = d_out * scale
    mean_d = d_xhat.mean(axis=-1, keepdims=True)
    mean_dx = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = inv_std * (d_xhat - mean_d - xhat * mean_dx)
    return d_x, d_scale


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u / np.sqrt(2.0)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return cdf + u * pdf


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, c = x.shape
    return x.reshape(s, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, s, d = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * d)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_fwd(x: np.ndarray, p: dict, heads: int, bias: Optional[np.ndarray]):
    q = _split_heads(x @ p["wq"], heads)
    k = _split_heads(x @ p["wk"], heads)
    v = _split_heads(x @ p["wv"], heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale
    if bias is not None:
        scores = scores + bias
    attn = _softmax(scores)
    ctx = attn @ v
    merged = _merge_heads(ctx)
    out = merged @ p["wo"]
    return out, {"x": x, "q": q, "k": k, "v": v, "attn": attn, "merged": merged}


def _attention_bwd(d_out: np.ndarray, p: dict, heads: int, cache):
    x, q, k, v, attn, merged = (
        cache["x"], cache["q"], cache["k"], cache["v"], cache["attn"], cache["merged"],
    )
    scale = 1.0 / np.sqrt(q.shape[-1])
    grads = {}
    grads["wo"] = merged.T @ d_out
    d_merged = d_out @ p["wo"].T
    d_ctx = _split_heads(d_merged, heads)
    d_attn = d_ctx @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_ctx
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.transpose(0, 2, 1) @ q) * scale
    d_q2, d_k2, d_v2 = _merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)
    grads["wq"] = x.T @ d_q2
    grads["wk"] = x.T @ d_k2
    grads["wv"] = x.T @ d_v2
    d_x = d_q2 @ p["wq"].T + d_k2 @ p["wk"].T + d_v2 @ p["wv"].T
    return d_x, grads


def _block_fwd(x: np.ndarray, p: dict, heads: int, bias: Optional[np.ndarray]):
    normed1, ln1_cache = _layer_norm_fwd(x, p["ln1"])
    attn_out, attn_cache = _attention_fwd(normed1, p, heads, bias)
    h1 = x + attn_out
    normed2, ln2_cache = _layer_norm_fwd(h1, p["ln2"])
    pre_act = normed2 @ p["w1"] + p["b1"]
    act = _gelu(pre_act)
    ffn_out = act @ p["w2"] + p["b2"]
    out = h1 + ffn_out
    cache = {
        "ln1": ln1_cache, "attn": attn_cache, "ln2": ln2_cache,
        "normed2": normed2, "pre_act": pre_act, "act": act,
    }
    return out, cache


def _block_bwd(d_out: np.ndarray, p: dict, heads: int, cache):
    grads = {}
    d_ffn_out = d_out
    grads["b2"] = d_ffn_out.sum(axis=0)
    grads["w2"] = cache["act"].T @ d_ffn_out
    d_act = d_ffn_out @ p["w2"].T
    d_pre = d_act * _gelu_grad(cache["pre_act"])
    grads["b1"] = d_pre.sum(axis=0)
    grads["w1"] = cache["normed2"].T @ d_pre
    d_normed2 = d_pre @ p["w1"].T
    d_h1_from_ln, grads["ln2"] = _layer_norm_bwd(d_normed2, p["ln2"], cache["ln2"])
    d_h1 = d_out + d_h1_from_ln
    d_attn_out = d_h1
    d_normed1, attn_grads = _attention_bwd(d_attn_out, p, heads, cache["attn"])
    grads.update(attn_grads)
    d_x_from_ln, grads["ln1"] = _layer_norm_bwd(d_normed1, p["ln1"], cache["ln1"])
    d_x = d_h1 + d_x_from_ln
    return d_x, grads


def _layer_params(params: BeatParams, prefix: str, i: int) -> dict:
    return {s: params[f"{prefix}{i}_{s}"] for s in _BLOCK_SUFFIXES}


def _stack_fwd(params: BeatParams, prefix: str, n_layers: int, x: np.ndarray,
               bias: Optional[np.ndarray]):
    caches = []
    for i in range(n_layers):
        x, cache = _block_fwd(x, _layer_params(params, prefix, i), params.config.heads, bias)
        caches.append(cache)
    return x, caches


def _stack_bwd(params: BeatParams, prefix: str, n_layers: int, d_out: np.ndarray,
               caches, grads: dict):
    for i in reversed(range(n_layers)):
        d_out, layer_grads = _block_bwd(
            d_out, _layer_params(params, prefix, i), params.config.heads, caches[i]
        )
        for suffix, g in layer_grads.items():
            grads[f"{prefix}{i}_{suffix}"] += g
    return d_out


def _decoder_bias(t: int, m: int) -> np.ndarray:
    """Additive attention bias: keys in the masked span [0, t) are invisible
    to every position except the masked position itself; query slots are
    visible to everyone."""
    s = t + m
    bias = np.zeros((s, s))
    bias[:, :t] = -np.inf
    idx = np.arange(t)
    bias[idx, idx] = 0.0
    return bias


# ---------------------------------------------------------------------------
# model-level forward pieces


def _check_segment(config: BeatConfig, samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    expected = (config.context_len, config.n_leads)
    if samples.shape != expected:
        raise ValueError(f"segment shape {samples.shape} does not match model {expected}")
    return samples


def _encode_arrays(params: BeatParams, samples: np.ndarray):
    cfg = params.config
    patches = patchify(samples, cfg.patch_frame)
    e = patches @ params["patch_w"] + params["patch_b"]
    h_in = np.concatenate([e + params["pos_table"], params["queries"]], axis=0)
    h_latent, caches = _stack_fwd(params, "enc", cfg.enc_layers, h_in, bias=None)
    return {"patches": patches, "e": e, "h_in": h_in, "h_latent": h_latent, "caches": caches}


def encode(params: BeatParams, segment: Segment) -> ActivationCache:
    """Run the encoder and return activations through the query outputs."""
    samples = _check_segment(params.config, segment.samples)
    enc = _encode_arrays(params, samples)
    t = params.config.n_patches
    return ActivationCache(
        e=enc["e"],
        h_in=enc["h_in"],
        h_latent=enc["h_latent"],
        h_latent_q=enc["h_latent"][t:],
        quantized=None,
        dvq_results=None,
        h_out=None,
        h_out_recon=None,
        reconstruction=None,
        prediction=None,
    )


def _decode_arrays(params: BeatParams, quantized: np.ndarray):
    cfg = params.config
    t = cfg.n_patches
    masked = np.tile(params["mask_token"], (t, 1)) + params["pos_table"]
    d_in = np.concatenate([masked, quantized], axis=0)
    bias = _decoder_bias(t, cfg.n_queries)
    h_out, caches = _stack_fwd(params, "dec", cfg.dec_layers, d_in, bias=bias)
    recon_latent = h_out[:t]
    patch_hat = recon_latent @ params["recon_w"] + params["recon_b"]
    recon = unpatchify(patch_hat, cfg.patch_frame)
    return {
        "d_in": d_in, "h_out": h_out, "recon_latent": recon_latent,
        "patch_hat": patch_hat, "recon": recon, "caches": caches,
    }


def decode_recon(params: BeatParams, quantized_queries: np.ndarray) -> np.ndarray:
    """Reconstruct a (T, C) signal from quantized (or raw) query vectors.

    The decoder input carries no trace of the original signal: the masked
    span is a learned token plus positions, and the attention bias keeps
    those slots invisible to each other. Equal query vectors therefore give
    bit-identical reconstructions.
    """
    cfg = params.config
    quantized_queries = np.asarray(quantized_queries, dtype=np.float64)
    if quantized_queries.shape != (cfg.n_queries, cfg.embed_dim):
        raise ValueError(
            f"quantized queries have shape {quantized_queries.shape},"
            f" expected {(cfg.n_queries, cfg.embed_dim)}"
        )
    return _decode_arrays(params, quantized_queries)["recon"]


def predict_future(params: BeatParams, quantized_queries: np.ndarray) -> np.ndarray:
    """Linear head from the flattened query block to the (P, C) continuation."""
    cfg = params.config
    quantized_queries = np.asarray(quantized_queries, dtype=np.float64)
    if quantized_queries.shape != (cfg.n_queries, cfg.embed_dim):
        raise ValueError(
            f"quantized queries have shape {quantized_queries.shape},"
            f" expected {(cfg.n_queries, cfg.embed_dim)}"
        )
    flat = quantized_queries.reshape(-1)
    out = flat @ params["pred_w"] + params["pred_b"]
    return out.reshape(cfg.pred_len, cfg.n_leads)


def _quantize_queries(
    params: BeatParams,
    h_latent_q: np.ndarray,
    stats: Optional[UsageStats] = None,
    frozen: Optional[FrozenQuant] = None,
):
    """Quantize each query row. With ``frozen`` the indices and the
    stop-gradient reference values come from the frozen state instead of a
    fresh argmin, and the decoder-side values follow the straight-through
    surrogate pre_quant + (quantized_ref - pre_quant_ref)."""
    cfg = params.config
    c1, c2 = params.codebooks()
    results: list[DvqResult] = []
    if frozen is None:
        for i in range(cfg.n_queries):
            results.append(dvq_quantize(c1, c2, h_latent_q[i], stats))
        quantized = np.stack([r.quantized for r in results])
        st_values = quantized
    else:
        for i in range(cfg.n_queries):
            idx1 = int(frozen.core_idx[i])
            q1 = c1.entries[idx1].copy()
            if c2 is None:
                results.append(DvqResult(idx1, None, q1, None, q1.copy(), h_latent_q[i].copy()))
            else:
                idx2 = int(frozen.residual_idx[i])
                q2 = c2.entries[idx2].copy()
                results.append(
                    DvqResult(idx1, idx2, q1, q2, q1 + q2, h_latent_q[i].copy())
                )
            if stats is not None:
                stats.record(0, idx1)
                if c2 is not None:
                    stats.record(1, int(frozen.residual_idx[i]))
        quantized = np.stack([r.quantized for r in results])
        st_values = h_latent_q + frozen.st_offset
    return quantized, st_values, results


def _frozen_vq_terms(results: list[DvqResult], frozen: FrozenQuant, beta: float) -> float:
    """Quantization loss with stop-gradient arguments pinned to the frozen
    reference values, so the surrogate is smooth in the live parameters."""
    total = 0.0
    for i, r in enumerate(results):
        total += float(np.sum((frozen.sg_h1[i] - r.q1) ** 2))
        total += beta * float(np.sum((r.pre_quant - frozen.sg_q1[i]) ** 2))
        if r.q2 is not None:
            h2_live = r.pre_quant - frozen.sg_q1[i]
            total += float(np.sum((frozen.sg_h2[i] - r.q2) ** 2))
            total += beta * float(np.sum((h2_live - frozen.sg_q2[i]) ** 2))
    return total


def frozen_from_results(results: list[DvqResult]) -> FrozenQuant:
    """Capture the quantization state of a forward pass for use as the
    stop-gradient/straight-through reference point."""
    core_idx = np.array([r.core_index for r in results], dtype=np.int64)
    two_level = results[0].q2 is not None
    residual_idx = (
        np.array([r.residual_index for r in results], dtype=np.int64) if two_level else None
    )
    pre = np.stack([r.pre_quant for r in results])
    quant = np.stack([r.quantized for r in results])
    q1 = np.stack([r.q1 for r in results])
    return FrozenQuant(
        core_idx=core_idx,
        residual_idx=residual_idx,
        st_offset=quant - pre,
        sg_h1=pre.copy(),
        sg_q1=q1.copy(),
        sg_h2=(pre - q1) if two_level else None,
        sg_q2=np.stack([r.q2 for r in results]) if two_level else None,
    )


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def _forward_full(
    params: BeatParams,
    pair: SegmentPair,
    stats: Optional[UsageStats] = None,
    frozen: Optional[FrozenQuant] = None,
):
    cfg = params.config
    samples = _check_segment(cfg, pair.context.samples)
    future = np.asarray(pair.future, dtype=np.float64)
    if future.shape != (cfg.pred_len, cfg.n_leads):
        raise ValueError(
            f"future shape {future.shape} does not match model"
            f" {(cfg.pred_len, cfg.n_leads)}"
        )

    enc = _encode_arrays(params, samples)
    t = cfg.n_patches
    h_latent_q = enc["h_latent"][t:]
    quantized, st_values, results = _quantize_queries(params, h_latent_q, stats, frozen)

    dec = _decode_arrays(params, st_values)
    pred_input = st_values if cfg.pred_from_quantized else h_latent_q
    pred_flat = pred_input.reshape(-1) @ params["pred_w"] + params["pred_b"]
    prediction = pred_flat.reshape(cfg.pred_len, cfg.n_leads)

    l_recon = _mse(dec["recon"], samples)
    l_pred = _mse(prediction, future)
    if frozen is None:
        vq_sum = vq_loss(results, cfg.beta)
    else:
        vq_sum = _frozen_vq_terms(results, frozen, cfg.beta)
    l_vq = vq_sum / (cfg.n_queries * cfg.levels)
    l_total = cfg.lambda_recon * l_recon + cfg.lambda_pred * l_pred + cfg.lambda_vq * l_vq

    for name, value in (
        ("h_latent", enc["h_latent"]), ("quantized", quantized),
        ("reconstruction", dec["recon"]), ("prediction", prediction),
    ):
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values in tensor {name!r}")
    for name, value in (("l_recon", l_recon), ("l_pred", l_pred), ("l_vq", l_vq)):
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {name!r}")

    bundle = LossBundle(l_recon=l_recon, l_pred=l_pred, l_vq=l_vq, l_total=l_total)
    state = {
        "samples": samples, "future": future, "enc": enc, "dec": dec,
        "h_latent_q": h_latent_q, "quantized": quantized, "st_values": st_values,
        "results": results, "prediction": prediction, "bundle": bundle,
        "frozen": frozen,
    }
    return state


def _cache_from_state(cfg: BeatConfig, state: dict) -> ActivationCache:
    t = cfg.n_patches
    return ActivationCache(
        e=state["enc"]["e"],
        h_in=state["enc"]["h_in"],
        h_latent=state["enc"]["h_latent"],
        h_latent_q=state["h_latent_q"],
        quantized=state["quantized"],
        dvq_results=state["results"],
        h_out=state["dec"]["h_out"],
        h_out_recon=state["dec"]["h_out"][:t],
        reconstruction=state["dec"]["recon"],
        prediction=state["prediction"],
    )


def forward_losses(
    params: BeatParams,
    pair: SegmentPair,
    stats: Optional[UsageStats] = None,
    frozen: Optional[FrozenQuant] = None,
) -> tuple[LossBundle, ActivationCache]:
    """Losses for one context/future pair.

    l_recon and l_pred are mean squared errors; l_vq is the quantization
    objective averaged over queries and levels; l_total is their weighted
    sum. ``frozen`` evaluates the smooth surrogate at a pinned quantization
    state (used by gradient checking).
    """
    state = _forward_full(params, pair, stats=stats, frozen=frozen)
    return state["bundle"], _cache_from_state(params.config, state)


def backward(
    params: BeatParams,
    pair: SegmentPair,
    frozen: Optional[FrozenQuant] = None,
) -> dict[str, np.ndarray]:
    """Gradient of l_total for every learnable array.

    Gradient routing: reconstruction and prediction gradients reach the
    encoder through the straight-through identity; the quantization loss
    sends its codebook term to the selected entries only and its commitment
    term to the encoder outputs only.
    """
    cfg = params.config
    state = _forward_full(params, pair, frozen=frozen)
    grads = {n: np.zeros_like(params[n]) for n in params.learnable_names()}
    t = cfg.n_patches
    m = cfg.n_queries

    # reconstruction head and decoder
    samples = state["samples"]
    dec = state["dec"]
    n_recon = samples.size
    d_recon = cfg.lambda_recon * 2.0 * (dec["recon"] - samples) / n_recon
    d_patch_hat = patchify(d_recon, cfg.patch_frame)
    grads["recon_w"] += dec["recon_latent"].T @ d_patch_hat
    grads["recon_b"] += d_patch_hat.sum(axis=0)
    d_recon_latent = d_patch_hat @ params["recon_w"].T

    d_h_out = np.zeros_like(dec["h_out"])
    d_h_out[:t] = d_recon_latent
    d_d_in = _stack_bwd(params, "dec", cfg.dec_layers, d_h_out, dec["caches"], grads)
    grads["mask_token"] += d_d_in[:t].sum(axis=0)
    d_st = d_d_in[t:].copy()  # gradient to the decoder's query inputs

    # prediction head
    future = state["future"]
    prediction = state["prediction"]
    d_pred = cfg.lambda_pred * 2.0 * (prediction - future) / future.size
    d_pred_flat = d_pred.reshape(-1)
    pred_input = state["st_values"] if cfg.pred_from_quantized else state["h_latent_q"]
    grads["pred_w"] += np.outer(pred_input.reshape(-1), d_pred_flat)
    grads["pred_b"] += d_pred_flat
    d_pred_input = (params["pred_w"] @ d_pred_flat).reshape(m, cfg.embed_dim)

    # straight-through: decoder-side gradients pass to the encoder unchanged;
    # the prediction head routes identically whether it reads quantized or raw
    # queries (identity in both cases)
    d_h_latent_q = d_st + d_pred_input

    # quantization loss: codebook terms to entries, commitment to encoder
    vq_scale = cfg.lambda_vq / (m * cfg.levels)
    d_pre, d_c1, d_c2 = vq_loss_grads(
        state["results"], cfg.beta, cfg.codebook_size1, cfg.codebook_size2, scale=vq_scale
    )
    d_h_latent_q += d_pre
    grads["codebook1"] += d_c1
    grads["codebook2"] += d_c2

    # encoder
    enc = state["enc"]
    d_h_latent = np.zeros_like(enc["h_latent"])
    d_h_latent[t:] = d_h_latent_q
    d_h_in = _stack_bwd(params, "enc", cfg.enc_layers, d_h_latent, enc["caches"], grads)
    d_e = d_h_in[:t]
    grads["queries"] += d_h_in[t:]
    grads["patch_w"] += enc["patches"].T @ d_e
    grads["patch_b"] += d_e.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# tokenization


def tokenize(params: BeatParams, segment: Segment) -> TokenSequence:
    """Encode, quantize, and emit the code sequence: query 0 core, query 0
    residual, query 1 core, ... Deterministic given the parameters."""
    cache = encode(params, segment)
    c1, c2 = params.codebooks()
    codes: list[tuple[int, int]] = []
    for i in range(params.config.n_queries):
        result = dvq_quantize(c1, c2, cache.h_latent_q[i])
        codes.append((1, result.core_index))
        if result.residual_index is not None:
            codes.append((2, result.residual_index))
    return TokenSequence(codes=codes)


def dequantize_tokens(params: BeatParams, tokens: TokenSequence) -> np.ndarray:
    """Look up codebook entries and rebuild the (m, c) quantized query block."""
    cfg = params.config
    expected = cfg.n_tokens
    if len(tokens.codes) != expected:
        raise ValueError(
            f"token sequence has {len(tokens.codes)} codes, model expects {expected}"
            f" ({cfg.levels} levels x {cfg.n_queries} queries)"
        )
    quantized = np.empty((cfg.n_queries, cfg.embed_dim))
    for pos, (level, index) in enumerate(tokens.codes):
        query = pos // cfg.levels
        expected_level = 1 + pos % cfg.levels
        if level != expected_level:
            raise ValueError(
                f"code {pos} has level {level}, expected {expected_level}"
                f" for a {cfg.levels}-level model"
            )
        book = params["codebook1"] if level == 1 else params["codebook2"]
        if not 0 <= index < book.shape[0]:
            raise ValueError(f"code {pos} index {index} out of range for level {level}")
        if level == 1:
            quantized[query] = book[index]
        else:
            quantized[query] = quantized[query] + book[index]
    return quantized


def decode_tokens(params: BeatParams, tokens: TokenSequence) -> np.ndarray:
    """Reconstruction from codes alone; matches the in-forward reconstruction
    bit-for-bit for the same codes."""
    return decode_recon(params, dequantize_tokens(params, tokens))


# ---------------------------------------------------------------------------
# checkpoint container


def _config_items(config: BeatConfig) -> list[tuple[str, str]]:
    items = []
    for f in dataclass_fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value)
        items.append((f.name, text))
    return sorted(items)


def _parse_config_items(items: dict[str, str]) -> BeatConfig:
    kwargs = {}
    known = {f.name: f.type for f in dataclass_fields(BeatConfig)}
    for key, text in items.items():
        if key not in known:
            raise FormatError(f"unknown config key {key!r} in checkpoint")
        if text in ("true", "false"):
            kwargs[key] = text == "true"
        elif "." in text or "e" in text or "E" in text:
            kwargs[key] = float(text)
        else:
            kwargs[key] = int(text)
    return BeatConfig(**kwargs)


def save_checkpoint(params: BeatParams, path) -> None:
    """Write the "BEAT" container: magic, version, length-prefixed config
    key/value pairs, then named arrays as little-endian float32."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        items = _config_items(cfg)
        fh.write(struct.pack("<I", len(items)))
        for key, value in items:
            kb, vb = key.encode("utf-8"), value.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)) + kb)
            fh.write(struct.pack("<I", len(vb)) + vb)
        names = sorted(params.arrays)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(params.arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos},"
                f" file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> BeatParams:
    """Read a "BEAT" container back into parameters (values at float32
    precision, exactly as stored)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint: bad magic {raw[:4]!r}")
    r = _Reader(raw)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )
    n_items = r.u32()
    items = {}
    for _ in range(n_items):
        key = r.text()
        items[key] = r.text()
    config = _parse_config_items(items)

    n_arrays = r.u32()
    arrays = {}
    for _ in range(n_arrays):
        name = r.text()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4")
        arrays[name] = data.reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise FormatError(f"trailing bytes after arrays (offset {r.pos} of {len(raw)})")

    missing = [n for n in _array_names(config) if n not in arrays]
    if missing:
        raise FormatError(f"checkpoint missing array {missing[0]!r}")
    return BeatParams(config, arrays)
