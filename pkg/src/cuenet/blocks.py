"""Local token blocks: temporal affinity, per-frame attention, feed-forward.

Tokens live in a :class:`TokenField` of shape (frames, tokens_per_frame,
hidden) where index 0 of every frame is that frame's class token and the
rest raster a spatial grid.  Each block applies three residual sub-units,
each preceded by its own layer normalization:

1. temporal affinity: a shared value projection, a depthwise temporal
   convolution over the spatial grid (class tokens pass through), and a
   fusing projection;
2. a per-frame token mixer, either softmax self-attention over the frame's
   tokens or one of the additive mechanisms in row-preserving form;
3. a two-layer feed-forward unit with an exact-erf GELU.

The temporal convolution is the only place information crosses frames in a
local block; the mixer never attends across frame boundaries.
"""

from contextlib import nullcontext
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention
from .errors import ConfigError, ShapeError
from .instrument import stage
from .tensor import check_tensor, dwconv3d, gelu, layer_norm, matmul

ATTENTION_SELF = "self_attention"
ATTENTION_MEAA = "meaa"
ATTENTION_EAA = "eaa_original"
ATTENTION_KINDS = (ATTENTION_SELF, ATTENTION_MEAA, ATTENTION_EAA)


@dataclass
class TokenField:
    """Per-frame token matrix with its spatial grid geometry.

    ``data`` has shape (frames, grid_h*grid_w + 1, hidden); ``grid`` is
    (grid_h, grid_w).  Token 0 of each frame is the class token.
    """

    data: np.ndarray
    grid: tuple

    def __post_init__(self):
        check_tensor(self.data, rank=3, name="token field")
        gh, gw = self.grid
        if gh < 0 or gw < 0:
            raise ShapeError(f"negative grid {self.grid}")
        if self.data.shape[1] != gh * gw + 1:
            raise ShapeError(f"token field has {self.data.shape[1]} tokens "
                             f"per frame; grid {self.grid} implies "
                             f"{gh * gw + 1}")

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def spatial_tokens(self):
        return self.grid[0] * self.grid[1]

    @property
    def hidden(self):
        return self.data.shape[2]

    def with_data(self, data):
        if data.shape != self.data.shape:
            raise ShapeError(f"replacement shape {data.shape} vs "
                             f"{self.data.shape}")
        return TokenField(data=data, grid=self.grid)

    def spatial_volume(self):
        """Spatial tokens as a (frames, grid_h, grid_w, hidden) volume."""
        gh, gw = self.grid
        return np.ascontiguousarray(
            self.data[:, 1:, :]).reshape(self.frames, gh, gw, self.hidden)

    def flat(self):
        """All tokens as one (frames*tokens_per_frame, hidden) matrix,
        frame-major."""
        return self.data.reshape(-1, self.hidden)


@dataclass
class LnParams:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class LtParams:
    """Temporal affinity unit: value map, per-channel temporal taps, fuse."""

    value: np.ndarray    # (d, d)
    kernel: np.ndarray   # (kt, 1, 1, d) depthwise taps
    fuse: np.ndarray     # (d, d)


@dataclass
class FfnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class LocalBlockParams:
    """One local block: three normalizations and their sub-units."""

    ln1: LnParams
    lt: LtParams
    ln2: LnParams
    attn_kind: str
    gs: Optional[attention.MhsaParams]
    add: Optional[attention.AdditiveParams]
    add_q_ln: Optional[LnParams]
    ln3: LnParams
    ffn: FfnParams

    def __post_init__(self):
        if self.attn_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attn_kind!r}; "
                              f"expected one of {ATTENTION_KINDS}")


def _normed(field, ln):
    return field.with_data(layer_norm(field.data, ln.gamma, ln.beta))


def lt_mhra(field, p):
    """Temporal affinity over an already-normalized field.

    Class tokens see the identity affinity; spatial tokens are mixed along
    time only, per channel, with shared taps.  Both are wrapped by the value
    and fusing projections.
    """
    d = field.hidden
    proj = matmul(field.flat(), p.value).reshape(field.data.shape)
    mixed = proj.copy()
    if field.spatial_tokens:
        gh, gw = field.grid
        volume = np.ascontiguousarray(proj[:, 1:, :]).reshape(
            field.frames, gh, gw, d)
        conv = dwconv3d(volume, p.kernel)
        mixed[:, 1:, :] = conv.reshape(field.frames, field.spatial_tokens, d)
    fused = matmul(mixed.reshape(-1, d), p.fuse).reshape(field.data.shape)
    return field.with_data(fused)


def gs_mhra(field, p, heads, threads=1):
    """Per-frame softmax self-attention over an already-normalized field."""
    out = np.empty_like(field.data)
    for t in range(field.frames):
        out[t] = attention.mhsa(field.data[t], p, heads, threads=threads)
    return field.with_data(out)


def additive_mixer(field, p, q_ln, kind, threads=1):
    """Per-frame additive attention in row-preserving form.

    For the modified kind the block-owned query is normalized once and
    shared across frames; the original kind derives its queries from the
    frame's own tokens.
    """
    out = np.empty_like(field.data)
    if kind == ATTENTION_MEAA:
        q_normed = layer_norm(p.q, q_ln.gamma, q_ln.beta)
        for t in range(field.frames):
            out[t] = attention.meaa_rows(q_normed, field.data[t], p,
                                         threads=threads)
    elif kind == ATTENTION_EAA:
        for t in range(field.frames):
            out[t] = attention.eaa_rows(field.data[t], p, threads=threads)
    else:
        raise ConfigError(f"additive mixer cannot run kind {kind!r}")
    return field.with_data(out)


def ffn(field, p, threads=1):
    """Position-wise feed-forward over an already-normalized field."""
    d = field.hidden
    flat = field.flat()
    hidden = gelu(matmul(flat, p.w1, threads=threads) + p.b1)
    out = matmul(hidden, p.w2, threads=threads) + p.b2
    return field.with_data(out.reshape(field.data.shape))


def local_uniblock_forward(field, p, heads, threads=1, stage_prefix=None):
    """Run one local block: three pre-normalized residual sub-units."""

    def unit_stage(name):
        if stage_prefix is None:
            return nullcontext()
        return stage(f"{stage_prefix}.{name}")

    with unit_stage("lt"):
        mixed = lt_mhra(_normed(field, p.ln1), p.lt)
        field = field.with_data(field.data + mixed.data)
    with unit_stage("attn"):
        normed = _normed(field, p.ln2)
        if p.attn_kind == ATTENTION_SELF:
            mixed = gs_mhra(normed, p.gs, heads, threads=threads)
        else:
            mixed = additive_mixer(normed, p.add, p.add_q_ln, p.attn_kind,
                                   threads=threads)
        field = field.with_data(field.data + mixed.data)
    with unit_stage("ffn"):
        lifted = ffn(_normed(field, p.ln3), p.ffn, threads=threads)
        field = field.with_data(field.data + lifted.data)
    return field
