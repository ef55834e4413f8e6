"""Patch tokenization and the projections that let one set of embedding
weights serve several patch sizes.

A patch embedding trained at one patch size is re-expressed over a larger
"underlying" patch size p_u by projecting through the pseudo-inverse of the
bilinear resize matrix between the two patch grids; instantiating weights at
any supported size is then a single cached matrix product, and instantiation
at the pretrained size reproduces the original weights to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    """The patch sizes a model supports.

    p_underlying is the size the shared flexible weights live at; it must be
    the largest supported size so that every per-size projection has full
    rank.
    """

    p_powerful: int
    p_weak: int
    extra_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.p_powerful < 1 or self.p_weak < 1:
            raise TokenizerError("patch sizes must be >= 1")
        if self.p_weak <= self.p_powerful:
            raise TokenizerError("p_weak must exceed p_powerful")
        if self.p_weak % self.p_powerful != 0:
            raise TokenizerError("p_weak must be a multiple of p_powerful")
        for p in self.extra_sizes:
            if p < 1:
                raise TokenizerError("patch sizes must be >= 1")

    @property
    def supported(self) -> tuple[int, ...]:
        return tuple(sorted({self.p_powerful, self.p_weak, *self.extra_sizes}))

    @property
    def p_underlying(self) -> int:
        return max(self.supported)

    def index(self, p: int) -> int:
        if p not in self.supported:
            raise TokenizerError(f"patch size {p} not in supported set {self.supported}")
        return self.supported.index(p)

    @property
    def token_ratio(self) -> int:
        """How many weak-size patches fit in one powerful sequence slot."""
        return (self.p_weak // self.p_powerful) ** 2


def _bilinear_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Row-stochastic bilinear resize matrix [dst_h*dst_w, src_h*src_w].

    Half-pixel pixel centers, edge-clamped (the convention shared by the
    usual image resizers when corners are not aligned).
    """
    sh, sw = src
    dh, dw = dst
    m = np.zeros((dh * dw, sh * sw))
    for i in range(dh):
        y = (i + 0.5) * sh / dh - 0.5
        y0 = int(np.floor(y))
        fy = y - y0
        ya, yb = min(max(y0, 0), sh - 1), min(max(y0 + 1, 0), sh - 1)
        for j in range(dw):
            x = (j + 0.5) * sw / dw - 0.5
            x0 = int(np.floor(x))
            fx = x - x0
            xa, xb = min(max(x0, 0), sw - 1), min(max(x0 + 1, 0), sw - 1)
            row = i * dw + j
            m[row, ya * sw + xa] += (1 - fy) * (1 - fx)
            m[row, ya * sw + xb] += (1 - fy) * fx
            m[row, yb * sw + xa] += fy * (1 - fx)
            m[row, yb * sw + xb] += fy * fx
    return m


@lru_cache(maxsize=None)
def build_resize_matrix(p_from: int, p_to: int) -> np.ndarray:
    """Bilinear resize of a p_from x p_from patch to p_to x p_to, as a
    [p_to^2, p_from^2] matrix acting on row-major flattened patches."""
    if p_from < 1 or p_to < 1:
        raise TokenizerError("patch sizes must be >= 1")
    out = _bilinear_matrix((p_from, p_from), (p_to, p_to))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def embed_projection(p: int, p_underlying: int) -> np.ndarray:
    """[p^2, p_u^2] projection taking underlying-size embedding rows to
    rows for patch size p: the pseudo-inverse of the p -> p_u upsampler."""
    if p > p_underlying:
        raise TokenizerError("patch size exceeds the underlying size")
    q = nm.pseudo_inverse(build_resize_matrix(p, p_underlying))
    q.setflags(write=False)
    return q


@lru_cache(maxsize=None)
def deembed_projection(p: int, p_underlying: int) -> np.ndarray:
    """[p_u^2, p^2] projection for the de-embedding side: the pseudo-inverse
    of the p_u -> p downsampler (flipped dimensions versus the embed side)."""
    if p > p_underlying:
        raise TokenizerError("patch size exceeds the underlying size")
    q = nm.pseudo_inverse(build_resize_matrix(p_underlying, p))
    q.setflags(write=False)
    return q


def _check_grid(h: int, w: int, p: int) -> tuple[int, int]:
    if h % p or w % p:
        raise TokenizerError(f"image {h}x{w} not divisible by patch size {p}")
    return h // p, w // p


def patchify(x, p: int) -> Tensor:
    """[..., c, h, w] image -> [..., N, p*p*c] tokens.

    Token layout is channel-major: within a token, all p*p pixels of channel
    0 (row-major) come first, then channel 1, and so on. Differentiable.
    """
    x = nm.as_tensor(x)
    if x.ndim < 3:
        raise TokenizerError("patchify expects [..., c, h, w]")
    *lead, c, h, w = x.shape
    gh, gw = _check_grid(h, w, p)
    t = nm.reshape(x, (*lead, c, gh, p, gw, p))
    nd = len(lead)
    # [..., c, gh, p, gw, p] -> [..., gh, gw, c, p, p]
    axes = tuple(range(nd)) + (nd + 1, nd + 3, nd, nd + 2, nd + 4)
    t = nm.transpose(t, axes)
    return nm.reshape(t, (*lead, gh * gw, c * p * p))


def unpatchify(tokens, p: int, h: int, w: int, c: int) -> Tensor:
    """Inverse of patchify: [..., N, p*p*c] -> [..., c, h, w]."""
    tokens = nm.as_tensor(tokens)
    gh, gw = _check_grid(h, w, p)
    *lead, n, width = tokens.shape
    if n != gh * gw or width != c * p * p:
        raise TokenizerError(
            f"token tensor {tokens.shape} does not match {gh * gw}x{c * p * p}"
        )
    t = nm.reshape(tokens, (*lead, gh, gw, c, p, p))
    nd = len(lead)
    # [..., gh, gw, c, p, p] -> [..., c, gh, p, gw, p]
    axes = tuple(range(nd)) + (nd + 2, nd, nd + 3, nd + 1, nd + 4)
    t = nm.transpose(t, axes)
    return nm.reshape(t, (*lead, c, h, w))


def _per_channel_project(q: np.ndarray, w, c: int, rows_in: int) -> Tensor:
    """Apply q to each channel block of rows of w [c*rows_in, d]."""
    w = nm.as_tensor(w)
    d = w.shape[-1]
    blocks = nm.reshape(w, (c, rows_in, d))
    out = nm.matmul(Tensor(q), blocks)  # broadcast over the channel axis
    return nm.reshape(out, (c * q.shape[0], d))


def instantiate_embed(w_flex, c_in: int, p: int, p_underlying: int) -> Tensor:
    """Materialize embedding weights for patch size p from the underlying
    weights w_flex [p_u^2*c_in, d]. The bias passes through unchanged."""
    if p == p_underlying:
        return nm.as_tensor(w_flex)
    q = embed_projection(p, p_underlying)
    return _per_channel_project(q, w_flex, c_in, p_underlying * p_underlying)


def flexify_embed(w_embed, c_in: int, p_pretrained: int, p_underlying: int) -> Tensor:
    """Lift pretrained embedding weights [p^2*c_in, d] to the underlying
    size so that instantiate_embed at p_pretrained reproduces them."""
    if p_pretrained == p_underlying:
        return nm.as_tensor(w_embed)
    q = embed_projection(p_pretrained, p_underlying)
    q_pinv = nm.pseudo_inverse(q)
    return _per_channel_project(q_pinv, w_embed, c_in, p_pretrained * p_pretrained)


def _per_channel_project_cols(w, q: np.ndarray, c: int, cols_in: int) -> Tensor:
    """Apply q on the right to each channel block of columns of w [d, c*cols_in]."""
    w = nm.as_tensor(w)
    d = w.shape[0]
    blocks = nm.reshape(w, (d, c, cols_in))
    blocks = nm.transpose(blocks, (1, 0, 2))  # [c, d, cols_in]
    out = nm.matmul(blocks, Tensor(q))  # [c, d, cols_out]
    out = nm.transpose(out, (1, 0, 2))
    return nm.reshape(out, (d, c * q.shape[1]))


def instantiate_deembed(w_flex, b_flex, c_out: int, p: int,
                        p_underlying: int) -> tuple[Tensor, Tensor]:
    """Materialize de-embedding weights [d, c_out*p^2] and bias [c_out*p^2]
    for patch size p; the bias is projected alongside the weights."""
    if p == p_underlying:
        return nm.as_tensor(w_flex), nm.as_tensor(b_flex)
    q = deembed_projection(p, p_underlying)  # [p_u^2, p^2]
    w = _per_channel_project_cols(w_flex, q, c_out, p_underlying * p_underlying)
    b2 = nm.reshape(nm.as_tensor(b_flex), (c_out, 1, p_underlying * p_underlying))
    b = nm.reshape(nm.matmul(b2, Tensor(q)), (c_out * p * p,))
    return w, b


def flexify_deembed(w_deembed, b_deembed, c_out: int, p_pretrained: int,
                    p_underlying: int) -> tuple[Tensor, Tensor]:
    """Lift pretrained de-embedding weights [d, c_out*p^2] and bias to the
    underlying size; instantiation at p_pretrained reproduces both."""
    if p_pretrained == p_underlying:
        return nm.as_tensor(w_deembed), nm.as_tensor(b_deembed)
    q = deembed_projection(p_pretrained, p_underlying)
    q_pinv = nm.pseudo_inverse(q)  # [p^2, p_u^2]
    w = _per_channel_project_cols(w_deembed, q_pinv, c_out, p_pretrained * p_pretrained)
    b2 = nm.reshape(nm.as_tensor(b_deembed), (c_out, 1, p_pretrained * p_pretrained))
    b = nm.reshape(nm.matmul(b2, Tensor(q_pinv)),
                   (c_out * p_underlying * p_underlying,))
    return w, b


# --------------------------------------------------------------------------
# positional information

_POS_BASE = 10000.0
_POS_SCALE = 128.0


def patch_centers(h: int, w: int, p: int) -> np.ndarray:
    """[N, 2] normalized (y, x) centers of the patch grid, row-major."""
    gh, gw = _check_grid(h, w, p)
    ys = (np.arange(gh) + 0.5) * p / h
    xs = (np.arange(gw) + 0.5) * p / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)


def positional_encoding_at(coords: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features [N, d] for normalized (y, x) coords in [0, 1].

    A pure function of the coordinates, so patches covering the same image
    location get the same encoding regardless of the patch size that
    produced the grid. d must be divisible by 4; the sin/cos pairing makes
    every row's norm exactly sqrt(d/2).
    """
    if d % 4:
        raise TokenizerError("encoding width must be divisible by 4")
    quarter = d // 4
    freqs = _POS_BASE ** (-np.arange(quarter) / quarter)
    ang_y = coords[:, :1] * _POS_SCALE * freqs
    ang_x = coords[:, 1:] * _POS_SCALE * freqs
    return np.concatenate(
        [np.sin(ang_y), np.cos(ang_y), np.sin(ang_x), np.cos(ang_x)], axis=1
    )


@lru_cache(maxsize=None)
def positional_encoding(h: int, w: int, p: int, d: int) -> np.ndarray:
    """Cached [N, d] sinusoidal encoding of the patch grid of (h, w, p)."""
    enc = positional_encoding_at(patch_centers(h, w, p), d)
    enc.setflags(write=False)
    return enc


@lru_cache(maxsize=None)
def pos_interp_matrix(h: int, w: int, p_from: int, p_to: int) -> np.ndarray:
    """[N_to, N_from] bilinear map between two patch grids of one image,
    used to evaluate a learned positional table at a new patch size."""
    out = _bilinear_matrix((h // p_from, w // p_from), (h // p_to, w // p_to))
    out.setflags(write=False)
    return out
