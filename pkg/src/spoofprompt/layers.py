"""Neural layers for the dual encoder: linear, layer norm, attention, blocks.

All layers accept an optional leading batch dimension (inputs shaped
``[n, width]`` or ``[batch, n, width]``) and are differentiable through the
tape in :mod:`spoofprompt.tensor`.  The transformer block uses the pre-norm
residual layout; the text encoder runs it with a causal mask, the image
encoder without.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DegenerateInputError, DimensionError, ParameterError
from .tensor import Rng, Tensor, _accumulate, _node, as_tensor, concat, matmul, reshape, take_range, transpose

__all__ = [
    "linear",
    "layer_norm",
    "softmax",
    "gelu",
    "cosine_similarity",
    "l2_normalize",
    "cosine_matrix",
    "multi_head_attention",
    "transformer_block",
    "AttentionParams",
    "BlockParams",
    "init_attention_params",
    "init_block_params",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear(x, weight, bias=None) -> Tensor:
    """y = x @ weight.T + bias with weight shaped [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {weight.data.shape}")
    if x.data.shape[-1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear input width {x.data.shape[-1]} != weight input width {weight.data.shape[1]}"
        )
    y = matmul(x, transpose(weight))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError(f"linear bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
        y = y + bias
    return y


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1(+eps), then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({d},)")

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x, temperature: float = 1.0, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Max-shifted stable softmax of x/temperature along one axis.

    ``mask`` is a boolean array broadcastable to x (True = position allowed);
    disallowed positions get probability exactly 0 without ever materializing
    an infinite logit, which keeps the all-finite invariant intact.
    """
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    if mask is not None:
        mask_arr = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        zmax = np.max(np.where(mask_arr, z, -np.inf), axis=axis, keepdims=True)
        if not np.all(np.isfinite(zmax)):
            raise DegenerateInputError("softmax row with no allowed positions")
        e = np.exp(z - zmax) * mask_arr
    else:
        e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    total = e.sum(axis=axis, keepdims=True)
    y = e / total

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner) / temperature)

    return _node(y, (x,), bw, "softmax")


def gelu(x) -> Tensor:
    """Exact-erf GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf))

    return _node(out, (x,), bw, "gelu")


def _norms(data: np.ndarray) -> np.ndarray:
    return np.sqrt((data * data).sum(axis=-1, keepdims=True))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of same-shaped tensors along the last axis (shape drops it)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"cosine_similarity shapes differ: {a.data.shape} vs {b.data.shape}")
    na, nb = _norms(a.data), _norms(b.data)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine_similarity of a zero vector")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)

    def bw(g):
        gg = np.expand_dims(g, -1)
        _accumulate(a, gg * (b.data / (na * nb) - cos * a.data / (na * na)))
        _accumulate(b, gg * (a.data / (na * nb) - cos * b.data / (nb * nb)))

    return _node(cos[..., 0], (a, b), bw, "cosine_similarity")


def l2_normalize(x) -> Tensor:
    """x / ||x|| along the last axis."""
    x = as_tensor(x)
    n = _norms(x.data)
    if np.any(n == 0.0):
        raise DegenerateInputError("l2_normalize of a zero vector")
    y = x.data / n

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - y * inner) / n)

    return _node(y, (x,), bw, "l2_normalize")


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities: [n, d] x [m, d] -> [n, m]."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# -- attention and transformer block -----------------------------------------------


@dataclass
class AttentionParams:
    qkv_weight: Tensor  # [3*width, width]
    qkv_bias: Tensor    # [3*width]
    out_weight: Tensor  # [width, width]
    out_bias: Tensor    # [width]


@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attention: AttentionParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp_in_weight: Tensor   # [hidden, width]
    mlp_in_bias: Tensor
    mlp_out_weight: Tensor  # [width, hidden]
    mlp_out_bias: Tensor


def init_attention_params(width: int, rng: Rng, std: float | None = None) -> AttentionParams:
    """Weight matrices at fan-in scale unless an explicit std is given."""
    w_std = width ** -0.5 if std is None else std
    return AttentionParams(
        qkv_weight=Tensor(rng.truncated_normal((3 * width, width), std=w_std)),
        qkv_bias=Tensor(np.zeros(3 * width)),
        out_weight=Tensor(rng.truncated_normal((width, width), std=w_std)),
        out_bias=Tensor(np.zeros(width)),
    )


def init_block_params(width: int, rng: Rng, mlp_ratio: float = 4.0, std: float | None = None) -> BlockParams:
    hidden = int(round(width * mlp_ratio))
    return BlockParams(
        norm1_gamma=Tensor(np.ones(width)),
        norm1_beta=Tensor(np.zeros(width)),
        attention=init_attention_params(width, rng, std),
        norm2_gamma=Tensor(np.ones(width)),
        norm2_beta=Tensor(np.zeros(width)),
        mlp_in_weight=Tensor(rng.truncated_normal((hidden, width), std=width ** -0.5 if std is None else std)),
        mlp_in_bias=Tensor(np.zeros(hidden)),
        mlp_out_weight=Tensor(rng.truncated_normal((width, hidden), std=hidden ** -0.5 if std is None else std)),
        mlp_out_bias=Tensor(np.zeros(width)),
    )


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(x, params: AttentionParams, heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over positions (axis -2).

    Accepts [n, width] or [batch, n, width].  With no mask and no positional
    signal the result is permutation-equivariant over positions.
    """
    x = as_tensor(x)
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"attention input must be 2-D or 3-D, got {x.data.shape}")
    width = x.data.shape[-1]
    if width % heads != 0:
        raise ConfigError(f"width {width} not divisible by heads {heads}")
    head_dim = width // heads
    n = x.data.shape[-2]
    batched = x.data.ndim == 3

    qkv = linear(x, params.qkv_weight, params.qkv_bias)
    q = take_range(qkv, -1, 0, width)
    k = take_range(qkv, -1, width, 2 * width)
    v = take_range(qkv, -1, 2 * width, 3 * width)

    if batched:
        bsz = x.data.shape[0]
        split = lambda t: transpose(reshape(t, (bsz, n, heads, head_dim)), (0, 2, 1, 3))
    else:
        split = lambda t: transpose(reshape(t, (n, heads, head_dim)), (1, 0, 2))
    q, k, v = split(q), split(k), split(v)

    scores = matmul(q, transpose(k, (0, 1, 3, 2) if batched else (0, 2, 1)))
    scores = mulc(scores, 1.0 / np.sqrt(head_dim))
    mask = _causal_mask(n) if causal else None
    weights = softmax(scores, mask=mask, axis=-1)
    mixed = matmul(weights, v)

    if batched:
        mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (bsz, n, width))
    else:
        mixed = reshape(transpose(mixed, (1, 0, 2)), (n, width))
    return linear(mixed, params.out_weight, params.out_bias)


def mulc(x, c: float) -> Tensor:
    """Multiply by a python constant (kept off the tape as a parent)."""
    x = as_tensor(x)

    def bw(g):
        _accumulate(x, g * c)

    return _node(x.data * c, (x,), bw, "mulc")


def transformer_block(x, params: BlockParams, heads: int, causal: bool = False) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.))."""
    x = as_tensor(x)
    h = x + multi_head_attention(layer_norm(x, params.norm1_gamma, params.norm1_beta), params.attention, heads, causal)
    z = layer_norm(h, params.norm2_gamma, params.norm2_beta)
    z = linear(gelu(linear(z, params.mlp_in_weight, params.mlp_in_bias)), params.mlp_out_weight, params.mlp_out_bias)
    return h + z
