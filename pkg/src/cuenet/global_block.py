"""Global token block: positional encoding, clip-wide attention, feed-forward.

Where local blocks mix tokens within a frame, the global block flattens all
frames into one token sequence and reduces it to a single clip vector:

1. a residual depthwise 3-d convolution over the spatial token volume gives
   tokens a position-dependent offset (class tokens pass through unchanged);
2. clip-wide attention pools the normalized sequence to one (1, d) vector.
   The pooled vector intentionally carries no residual from the sequence:
   there is no single token row to add it to;
3. a feed-forward unit refines the pooled vector with a residual.

The attention step is selectable between softmax self-attention (quadratic
in token count) and the two additive mechanisms (linear in token count);
see :mod:`cuenet.attention`.
"""

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention
from .blocks import (ATTENTION_EAA, ATTENTION_KINDS, ATTENTION_MEAA,
                     ATTENTION_SELF, FfnParams, LnParams)
from .errors import ConfigError, ParamError
from .instrument import stage
from .tensor import check_tensor, dwconv3d, gelu, layer_norm, matmul


@dataclass
class GlobalBlockParams:
    """Depthwise positional kernel, attention choice, and feed-forward."""

    dpe_kernel: np.ndarray            # (kt, kh, kw, d), odd extents
    ln_tokens: LnParams
    attn_kind: str
    gs: Optional[attention.MhsaParams]
    add: Optional[attention.AdditiveParams]
    ln_q: Optional[LnParams]          # modified additive kind only
    ln_ffn: LnParams
    ffn: FfnParams

    def __post_init__(self):
        if self.attn_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attn_kind!r}; "
                              f"expected one of {ATTENTION_KINDS}")


def dpe(field, kernel):
    """Residual depthwise positional encoding over the spatial volume.

    A zero kernel leaves the field untouched; class tokens always do.
    """
    check_tensor(kernel, rank=4, name="positional kernel")
    if any(extent % 2 == 0 for extent in kernel.shape[:3]):
        raise ParamError(f"positional kernel extents must be odd, got "
                         f"{kernel.shape[:3]}")
    out = field.data.copy()
    if field.spatial_tokens:
        conv = dwconv3d(field.spatial_volume(), kernel)
        out[:, 1:, :] += conv.reshape(field.frames, field.spatial_tokens,
                                      field.hidden)
    return field.with_data(out)


def row_ffn(x, p, ln, threads=1):
    """Pre-normalized residual feed-forward on a (rows, d) matrix."""
    normed = layer_norm(x, ln.gamma, ln.beta)
    hidden = gelu(matmul(normed, p.w1, threads=threads) + p.b1)
    return x + matmul(hidden, p.w2, threads=threads) + p.b2


def global_uniblock_forward(field, p, heads, threads=1, stage_prefix=None,
                            trace=None):
    """Reduce a token field to one (1, d) clip vector."""

    def unit_stage(name):
        if stage_prefix is None:
            return nullcontext()
        return stage(f"{stage_prefix}.{name}")

    with unit_stage("dpe"):
        field = dpe(field, p.dpe_kernel)
    if trace is not None:
        trace["global.dpe"] = field.data.shape
    with unit_stage("attn"):
        tokens = layer_norm(field.flat(), p.ln_tokens.gamma,
                            p.ln_tokens.beta)
        if trace is not None:
            trace["global.tokens"] = tokens.shape
        if p.attn_kind == ATTENTION_MEAA:
            q_normed = layer_norm(p.add.q, p.ln_q.gamma, p.ln_q.beta)
            pooled = attention.meaa(q_normed, tokens, p.add, threads=threads)
        elif p.attn_kind == ATTENTION_EAA:
            pooled = attention.eaa_original(tokens, p.add, threads=threads)
        elif p.attn_kind == ATTENTION_SELF:
            pooled = attention.pooled_mhsa(tokens, p.gs, heads,
                                           threads=threads)
        else:  # unreachable; kinds validated at construction
            raise ConfigError(f"unknown attention kind {p.attn_kind!r}")
    if trace is not None:
        trace["global.pooled"] = pooled.shape
    with unit_stage("ffn"):
        refined = row_ffn(pooled, p.ffn, p.ln_ffn, threads=threads)
    if trace is not None:
        trace["global.out"] = refined.shape
    return refined
