"""The denoiser: a pre-norm transformer over patch tokens with adaLN
conditioning, extended to run at several patch sizes.

Two flexification modes:
  shared - one set of weights; embed/de-embed live at the underlying patch
           size and are instantiated per size through the tokenizer
           projections; per-size norm parameters and patch-size embeddings.
  lora   - the pretrained weights stay frozen and bit-exact at the
           pretrained patch size; weaker sizes get their own embed/de-embed
           layers, norm parameters, patch-size embeddings and low-rank
           adapters on the attention and MLP linears.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import costmodel, numerics as nm, tokenizer as tok
from .costmodel import flop_scope
from .numerics import Tensor
from .tokenizer import PatchSpec


class BackboneError(ValueError):
    pass


LORA_SCALE = 1.0
_ADAPTED_LAYERS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


@dataclass(frozen=True)
class ModelConfig:
    h: int
    w: int
    c_in: int
    d_model: int
    n_layers: int
    n_heads: int
    patch: PatchSpec
    num_classes: int = 0
    cond_mode: str = "class"  # "class" | "cross"
    vocab_size: int = 0
    learn_variance: bool = False
    pos_mode: str = "sinusoidal"  # "sinusoidal" | "learned"
    lora_rank: int = 32
    label_drop: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise BackboneError("d_model must divide into heads")
        if self.d_model % 4:
            raise BackboneError("d_model must be divisible by 4")
        if self.cond_mode not in ("class", "cross"):
            raise BackboneError(f"unknown cond_mode {self.cond_mode!r}")
        if self.cond_mode == "class" and self.num_classes < 1:
            raise BackboneError("class conditioning needs num_classes >= 1")
        if self.cond_mode == "cross" and self.vocab_size < 1:
            raise BackboneError("cross conditioning needs vocab_size >= 1")
        if self.pos_mode not in ("sinusoidal", "learned"):
            raise BackboneError(f"unknown pos_mode {self.pos_mode!r}")
        for p in self.patch.supported:
            if self.h % p or self.w % p:
                raise BackboneError(f"image {self.h}x{self.w} not divisible by p={p}")

    @property
    def c_out(self) -> int:
        return 2 * self.c_in if self.learn_variance else self.c_in

    def n_tokens(self, p: int) -> int:
        return (self.h // p) * (self.w // p)

    @property
    def null_class(self) -> int:
        return self.num_classes


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]
    flex_mode: str | None = None  # None | "shared" | "lora"
    merged: bool = False
    frozen: frozenset = frozenset()

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def __call__(self, x, t, cond, p: int):
        return forward(self, x, t, cond, p)


def _param(rng, shape, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_model(cfg: ModelConfig, seed: int = 0, head_init: str = "zero") -> Model:
    """Fresh base model at the powerful patch size.

    head_init "zero" follows the usual recipe (adaLN projections and the
    de-embedding start at zero, so new blocks are identities and the initial
    prediction is zero); "random" fills them too, for tests that need a
    nontrivial function out of the box.
    """
    rng = nm.philox(seed, 0, nm.BRANCH_INIT)
    d = cfg.d_model
    p0 = cfg.patch.p_powerful
    params: dict[str, Tensor] = {}
    params["embed.w"] = _param(rng, (p0 * p0 * cfg.c_in, d))
    params["embed.b"] = _zeros((d,))
    if cfg.pos_mode == "learned":
        params["pos.table"] = _param(rng, (cfg.n_tokens(p0), d))
    params["tmlp.w1"] = _param(rng, (d, d))
    params["tmlp.b1"] = _zeros((d,))
    params["tmlp.w2"] = _param(rng, (d, d))
    params["tmlp.b2"] = _zeros((d,))
    if cfg.cond_mode == "class":
        params["cls.table"] = _param(rng, (cfg.num_classes + 1, d))
    else:
        params["vocab.table"] = _param(rng, (cfg.vocab_size, d))
    random_heads = head_init == "random"
    for i in range(cfg.n_layers):
        b = f"block{i}"
        for site in ("ln1", "ln2"):
            params[f"{b}.{site}.g"] = _ones((d,))
            params[f"{b}.{site}.b"] = _zeros((d,))
        for lin in ("q", "k", "v", "o"):
            params[f"{b}.attn.{lin}.w"] = _param(rng, (d, d))
            params[f"{b}.attn.{lin}.b"] = _zeros((d,))
        if cfg.cond_mode == "cross":
            params[f"{b}.lnc.g"] = _ones((d,))
            params[f"{b}.lnc.b"] = _zeros((d,))
            for lin in ("q", "k", "v"):
                params[f"{b}.cross.{lin}.w"] = _param(rng, (d, d))
                params[f"{b}.cross.{lin}.b"] = _zeros((d,))
            params[f"{b}.cross.o.w"] = (
                _param(rng, (d, d)) if random_heads else _zeros((d, d))
            )
            params[f"{b}.cross.o.b"] = _zeros((d,))
        params[f"{b}.ada.w"] = (
            _param(rng, (d, 6 * d)) if random_heads else _zeros((d, 6 * d))
        )
        params[f"{b}.ada.b"] = _zeros((6 * d,))
        params[f"{b}.mlp.fc1.w"] = _param(rng, (d, 4 * d))
        params[f"{b}.mlp.fc1.b"] = _zeros((4 * d,))
        params[f"{b}.mlp.fc2.w"] = _param(rng, (4 * d, d))
        params[f"{b}.mlp.fc2.b"] = _zeros((d,))
    params["final.ada.w"] = (
        _param(rng, (d, 2 * d)) if random_heads else _zeros((d, 2 * d))
    )
    params["final.ada.b"] = _zeros((2 * d,))
    params["final.ln.g"] = _ones((d,))
    params["final.ln.b"] = _zeros((d,))
    de = cfg.c_out * p0 * p0
    params["deembed.w"] = _param(rng, (d, de)) if random_heads else _zeros((d, de))
    params["deembed.b"] = _zeros((de,))
    return Model(cfg=cfg, params=params)


_LN_SITES = ("ln1", "ln2", "final.ln") + ("lnc",)


def _ln_site_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names.append(f"block{i}.ln1")
        names.append(f"block{i}.ln2")
        if cfg.cond_mode == "cross":
            names.append(f"block{i}.lnc")
    names.append("final.ln")
    return names


def flexify(model: Model, mode: str, seed: int = 0) -> Model:
    """Attach multi-patch-size machinery to a base model.

    Returns a new Model; the input is untouched. In "lora" mode every base
    parameter is frozen and the pretrained patch size runs the exact same
    ops as the base model.
    """
    if model.flex_mode is not None:
        raise BackboneError("model is already flexified")
    if mode not in ("shared", "lora"):
        raise BackboneError(f"unknown flexify mode {mode!r}")
    cfg = model.cfg
    spec = cfg.patch
    p0, pu = spec.p_powerful, spec.p_underlying
    params = dict(model.params)
    rng = nm.philox(seed, 0, nm.BRANCH_INIT)

    def trainable_copy(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=True)

    if mode == "shared":
        w_flex = tok.flexify_embed(params["embed.w"].detach(), cfg.c_in, p0, pu)
        params["flex.embed.w"] = Tensor(w_flex.data.copy(), requires_grad=True)
        params["flex.embed.b"] = trainable_copy(params["embed.b"])
        w_de, b_de = tok.flexify_deembed(
            params["deembed.w"].detach(), params["deembed.b"].detach(),
            cfg.c_out, p0, pu,
        )
        params["flex.deembed.w"] = Tensor(w_de.data.copy(), requires_grad=True)
        params["flex.deembed.b"] = Tensor(b_de.data.copy(), requires_grad=True)
        for key in ("embed.w", "embed.b", "deembed.w", "deembed.b"):
            del params[key]
        new_sizes = spec.supported
    else:
        new_sizes = tuple(p for p in spec.supported if p != p0)
        w_flex = tok.flexify_embed(params["embed.w"].detach(), cfg.c_in, p0, pu)
        w_de_flex, b_de_flex = tok.flexify_deembed(
            params["deembed.w"].detach(), params["deembed.b"].detach(),
            cfg.c_out, p0, pu,
        )
        for p in new_sizes:
            w_p = tok.instantiate_embed(w_flex, cfg.c_in, p, pu)
            params[f"embed_p{p}.w"] = Tensor(w_p.data.copy(), requires_grad=True)
            params[f"embed_p{p}.b"] = trainable_copy(params["embed.b"])
            w_dp, b_dp = tok.instantiate_deembed(w_de_flex, b_de_flex, cfg.c_out, p, pu)
            params[f"deembed_p{p}.w"] = Tensor(w_dp.data.copy(), requires_grad=True)
            params[f"deembed_p{p}.b"] = Tensor(b_dp.data.copy(), requires_grad=True)
            for i in range(cfg.n_layers):
                for layer in _ADAPTED_LAYERS:
                    d_in = cfg.d_model if layer != "mlp.fc2" else 4 * cfg.d_model
                    d_out = cfg.d_model if layer != "mlp.fc1" else 4 * cfg.d_model
                    params[f"lora.p{p}.block{i}.{layer}.down"] = _param(
                        rng, (d_in, cfg.lora_rank)
                    )
                    params[f"lora.p{p}.block{i}.{layer}.up"] = _zeros(
                        (cfg.lora_rank, d_out)
                    )

    for p in new_sizes:
        params[f"pemb.p{p}"] = _zeros((cfg.d_model,))
        for site in _ln_site_names(cfg):
            params[f"norms.p{p}.{site}.g"] = trainable_copy(params[f"{site}.g"])
            params[f"norms.p{p}.{site}.b"] = trainable_copy(params[f"{site}.b"])
    if mode == "shared":
        for site in _ln_site_names(cfg):
            del params[f"{site}.g"], params[f"{site}.b"]

    frozen = frozenset(model.params.keys()) if mode == "lora" else frozenset()
    return Model(cfg=cfg, params=params, flex_mode=mode, frozen=frozen)


def merge_loras(model: Model) -> Model:
    """Fold adapters into per-patch-size merged weights (W + scale*down@up).

    The unmerged adapters stay in the param dict; merged weights are used by
    the batched forward, saving the adapter matmuls."""
    if model.flex_mode != "lora":
        raise BackboneError("merge_loras needs a lora-mode model")
    params = dict(model.params)
    with nm.no_grad():
        for p in model.cfg.patch.supported:
            if p == model.cfg.patch.p_powerful:
                continue
            for i in range(model.cfg.n_layers):
                for layer in _ADAPTED_LAYERS:
                    base = params[f"block{i}.{layer}.w"].data
                    down = params[f"lora.p{p}.block{i}.{layer}.down"].data
                    up = params[f"lora.p{p}.block{i}.{layer}.up"].data
                    params[f"merged.p{p}.block{i}.{layer}.w"] = Tensor(
                        base + LORA_SCALE * (down @ up)
                    )
    return replace(model, params=params, merged=True)


# --------------------------------------------------------------------------
# parameter resolution per patch size


def _ln_params(model: Model, site: str, p: int) -> tuple[Tensor, Tensor]:
    if model.flex_mode == "shared" or (
        model.flex_mode == "lora" and p != model.cfg.patch.p_powerful
    ):
        return (
            model.params[f"norms.p{p}.{site}.g"],
            model.params[f"norms.p{p}.{site}.b"],
        )
    return model.params[f"{site}.g"], model.params[f"{site}.b"]


def _embed_weights(model: Model, p: int) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    if model.flex_mode == "shared":
        with flop_scope("embed-prep"):
            w = tok.instantiate_embed(
                model.params["flex.embed.w"], cfg.c_in, p, cfg.patch.p_underlying
            )
        return w, model.params["flex.embed.b"]
    if model.flex_mode == "lora" and p != cfg.patch.p_powerful:
        return model.params[f"embed_p{p}.w"], model.params[f"embed_p{p}.b"]
    if p != cfg.patch.p_powerful:
        raise BackboneError(f"base model only runs at p={cfg.patch.p_powerful}")
    return model.params["embed.w"], model.params["embed.b"]


def _deembed_weights(model: Model, p: int) -> tuple[Tensor, Tensor]:
    cfg = model.cfg
    if model.flex_mode == "shared":
        with flop_scope("embed-prep"):
            return tok.instantiate_deembed(
                model.params["flex.deembed.w"], model.params["flex.deembed.b"],
                cfg.c_out, p, cfg.patch.p_underlying,
            )
    if model.flex_mode == "lora" and p != cfg.patch.p_powerful:
        return model.params[f"deembed_p{p}.w"], model.params[f"deembed_p{p}.b"]
    if p != cfg.patch.p_powerful:
        raise BackboneError(f"base model only runs at p={cfg.patch.p_powerful}")
    return model.params["deembed.w"], model.params["deembed.b"]


def _positional(model: Model, p: int) -> Tensor:
    cfg = model.cfg
    if cfg.pos_mode == "sinusoidal":
        return Tensor(tok.positional_encoding(cfg.h, cfg.w, p, cfg.d_model))
    table = model.params["pos.table"]
    p0 = cfg.patch.p_powerful
    if p == p0:
        return table
    with flop_scope("embed-prep"):
        m = tok.pos_interp_matrix(cfg.h, cfg.w, p0, p)
        return nm.matmul(Tensor(m), table)


def _adapter_sizes(model: Model, p: int) -> list[tuple[int, np.ndarray | None]]:
    """Adapter patch sizes active for a plain (unpacked) forward at p."""
    if (
        model.flex_mode == "lora"
        and p != model.cfg.patch.p_powerful
        and not model.merged
    ):
        return [(p, None)]
    return []


# --------------------------------------------------------------------------
# forward


def timestep_embedding(t: np.ndarray, d: int) -> np.ndarray:
    """Standard sinusoidal embedding of integer timesteps, [B, d]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs
    emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
    if d % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


def _cond_vector(model: Model, t, cond) -> tuple[Tensor, Tensor | None]:
    """Per-image conditioning vector [B, d] and cross-attention context."""
    cfg = model.cfg
    t = np.atleast_1d(np.asarray(t))
    with flop_scope("cond"):
        h = Tensor(timestep_embedding(t, cfg.d_model))
        h = nm.add(nm.matmul(h, model.params["tmlp.w1"]), model.params["tmlp.b1"])
        h = nm.silu(h)
        h = nm.add(nm.matmul(h, model.params["tmlp.w2"]), model.params["tmlp.b2"])
    ctx = None
    if cfg.cond_mode == "class":
        if cond is None:
            labels = np.full(t.shape[0], cfg.null_class, dtype=np.int64)
        else:
            labels = np.atleast_1d(np.asarray(cond, dtype=np.int64))
        if labels.max() > cfg.null_class or labels.min() < 0:
            raise BackboneError("class label out of range")
        h = nm.add(h, nm.embedding_lookup(model.params["cls.table"], labels))
    else:
        if cond is None:
            raise BackboneError("cross conditioning needs token ids")
        ids = np.atleast_2d(np.asarray(cond, dtype=np.int64))
        ctx = nm.embedding_lookup(model.params["vocab.table"], ids)
    return h, ctx


def _adapted_linear(model: Model, name: str, x: Tensor, scope: str,
                    adapters, merged_p: int | None) -> Tensor:
    w = model.params[f"{name}.w"]
    if merged_p is not None:
        merged_name = f"merged.p{merged_p}.{name}.w"
        if merged_name in model.params:
            w = model.params[merged_name]
    with flop_scope(scope):
        y = nm.matmul(x, w)
    y = nm.add(y, model.params[f"{name}.b"])
    for p_adapt, mask in adapters:
        down = model.params.get(f"lora.p{p_adapt}.{name}.down")
        if down is None:
            continue
        up = model.params[f"lora.p{p_adapt}.{name}.up"]
        xm = x if mask is None else nm.mul(x, mask)
        with flop_scope("lora-overhead"):
            z = nm.matmul(nm.matmul(xm, down), up)
        y = nm.add(y, nm.mul(z, LORA_SCALE))
    return y


def _heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    dh = d // n_heads
    nd = len(lead)
    x = nm.reshape(x, (*lead, n, n_heads, dh))
    return nm.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _unheads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    nd = len(lead)
    x = nm.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return nm.reshape(x, (*lead, n, heads * dh))


def _modulate(x: Tensor, shift, scale) -> Tensor:
    return nm.add(nm.mul(x, nm.add(scale, 1.0)), shift)


def _block(model: Model, i: int, x: Tensor, ln1, ln2, mod6, adapters,
           bias, merged_p, ctx=None, ctx_ln=None) -> Tensor:
    cfg = model.cfg
    s1, sc1, g1, s2, sc2, g2 = mod6
    name = f"block{i}"

    h = _modulate(nm.layer_norm(x, ln1[0], ln1[1]), s1, sc1)
    q = _heads(_adapted_linear(model, f"{name}.attn.q", h, "attention-linears",
                               adapters, merged_p), cfg.n_heads)
    k = _heads(_adapted_linear(model, f"{name}.attn.k", h, "attention-linears",
                               adapters, merged_p), cfg.n_heads)
    v = _heads(_adapted_linear(model, f"{name}.attn.v", h, "attention-linears",
                               adapters, merged_p), cfg.n_heads)
    with flop_scope("attention-matmuls"):
        att = nm.softmax_attention(q, k, v, bias=bias)
    att = _adapted_linear(model, f"{name}.attn.o", _unheads(att),
                          "attention-linears", adapters, merged_p)
    x = nm.add(x, nm.mul(g1, att))

    if ctx is not None:
        hc = nm.layer_norm(x, ctx_ln[0], ctx_ln[1])
        with flop_scope("cross"):
            qc = _heads(nm.add(nm.matmul(hc, model.params[f"{name}.cross.q.w"]),
                               model.params[f"{name}.cross.q.b"]), cfg.n_heads)
            kc = _heads(nm.add(nm.matmul(ctx, model.params[f"{name}.cross.k.w"]),
                               model.params[f"{name}.cross.k.b"]), cfg.n_heads)
            vc = _heads(nm.add(nm.matmul(ctx, model.params[f"{name}.cross.v.w"]),
                               model.params[f"{name}.cross.v.b"]), cfg.n_heads)
            cc = nm.softmax_attention(qc, kc, vc)
            cc = nm.add(nm.matmul(_unheads(cc), model.params[f"{name}.cross.o.w"]),
                        model.params[f"{name}.cross.o.b"])
        x = nm.add(x, cc)

    h2 = _modulate(nm.layer_norm(x, ln2[0], ln2[1]), s2, sc2)
    m = _adapted_linear(model, f"{name}.mlp.fc1", h2, "mlp", adapters, merged_p)
    m = nm.gelu(m)
    m = _adapted_linear(model, f"{name}.mlp.fc2", m, "mlp", adapters, merged_p)
    return nm.add(x, nm.mul(g2, m))


def _mod6(model: Model, i: int, cvs: Tensor) -> list[Tensor]:
    """Six [B, 1, d] modulation tensors for block i from silu'd cond [B, d]."""
    cfg = model.cfg
    with flop_scope("cond"):
        mod = nm.add(nm.matmul(cvs, model.params[f"block{i}.ada.w"]),
                     model.params[f"block{i}.ada.b"])
    mod = nm.reshape(mod, (mod.shape[0], 6, 1, cfg.d_model))
    return [mod[:, j] for j in range(6)]


def forward(model: Model, x, t, cond, p: int,
            tap_sink: dict | None = None) -> tuple[Tensor, Tensor | None]:
    """Denoiser forward at patch size p.

    x: [B, c_in, h, w] (a single [c_in, h, w] image is auto-batched),
    t: int or [B] timesteps, cond: labels [B] / token ids [B, M] / None.
    tap_sink, when given, collects post-block token activations under
    keys "block{i}". Returns (eps [B, c_in, h, w], variance or None).
    """
    cfg = model.cfg
    x = nm.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = nm.reshape(x, (1, *x.shape))
    if x.ndim != 4 or x.shape[1] != cfg.c_in or x.shape[2] != cfg.h or x.shape[3] != cfg.w:
        raise BackboneError(f"bad input shape {x.shape}")
    bsz = x.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (bsz,))

    w_e, b_e = _embed_weights(model, p)
    tokens = tok.patchify(x, p)
    with flop_scope("embed"):
        tokens = nm.matmul(tokens, w_e)
    tokens = nm.add(tokens, b_e)
    tokens = nm.add(tokens, _positional(model, p))
    pemb = model.params.get(f"pemb.p{p}")
    if pemb is not None:
        tokens = nm.add(tokens, pemb)

    cv, ctx = _cond_vector(model, t, cond)
    cvs = nm.silu(cv)
    adapters = _adapter_sizes(model, p)
    merged_p = p if model.merged else None

    for i in range(cfg.n_layers):
        mod6 = _mod6(model, i, cvs)
        ln1 = _ln_params(model, f"block{i}.ln1", p)
        ln2 = _ln_params(model, f"block{i}.ln2", p)
        ctx_ln = (
            _ln_params(model, f"block{i}.lnc", p) if ctx is not None else None
        )
        tokens = _block(model, i, tokens, ln1, ln2, mod6, adapters,
                        None, merged_p, ctx=ctx, ctx_ln=ctx_ln)
        if tap_sink is not None:
            tap_sink[f"block{i}"] = tokens.data.copy()

    with flop_scope("cond"):
        fmod = nm.add(nm.matmul(cvs, model.params["final.ada.w"]),
                      model.params["final.ada.b"])
    fmod = nm.reshape(fmod, (bsz, 2, 1, cfg.d_model))
    fg, fb = _ln_params(model, "final.ln", p)
    tokens = _modulate(nm.layer_norm(tokens, fg, fb), fmod[:, 0], fmod[:, 1])

    w_d, b_d = _deembed_weights(model, p)
    with flop_scope("de-embed"):
        out = nm.matmul(tokens, w_d)
    out = nm.add(out, b_d)
    imgs = tok.unpatchify(out, p, cfg.h, cfg.w, cfg.c_out)

    if cfg.learn_variance:
        eps = imgs[:, : cfg.c_in]
        var = imgs[:, cfg.c_in :]
    else:
        eps, var = imgs, None
    if squeeze:
        eps = nm.reshape(eps, eps.shape[1:])
        var = nm.reshape(var, var.shape[1:]) if var is not None else None
    return eps, var


def predict(model: Model, x: np.ndarray, t: int, cond, p: int):
    """Inference helper: single image in, plain arrays out, no taping."""
    with nm.no_grad():
        eps, var = forward(model, x, t, cond, p)
    return eps.data, None if var is None else var.data


# --------------------------------------------------------------------------
# packed execution


def forward_packed(model: Model, items, t: int, layout) -> list:
    """Run several single-image forwards as packed batches.

    items: list of (x [c,h,w], cond, p); layout: a costmodel.PackLayout whose
    request indices refer to items and whose lengths equal each item's token
    count. All items share the timestep t. Returns [(eps, var|None)] arrays
    in item order. Class conditioning only; adapters always run unmerged.
    """
    cfg = model.cfg
    if cfg.cond_mode != "class":
        raise BackboneError("packed execution supports class conditioning only")
    d = cfg.d_model
    results: list = [None] * len(items)

    with nm.no_grad():
        toks, mods, lns, ps = [], [], [], []
        for x, cond, p in items:
            x = nm.as_tensor(x)
            tokens = tok.patchify(nm.reshape(x, (1, *x.shape)), p)
            w_e, b_e = _embed_weights(model, p)
            tokens = nm.add(nm.add(nm.matmul(tokens, w_e), b_e), _positional(model, p))
            pemb = model.params.get(f"pemb.p{p}")
            if pemb is not None:
                tokens = nm.add(tokens, pemb)
            toks.append(tokens.data[0])
            cv, _ = _cond_vector(model, np.array([t]), None if cond is None else [cond])
            cvs = nm.silu(cv)
            per_block = []
            for i in range(cfg.n_layers):
                mod = nm.add(nm.matmul(cvs, model.params[f"block{i}.ada.w"]),
                             model.params[f"block{i}.ada.b"])
                per_block.append(mod.data[0])
            fmod = nm.add(nm.matmul(cvs, model.params["final.ada.w"]),
                          model.params["final.ada.b"])
            per_block.append(fmod.data[0])
            mods.append(per_block)
            sites = {}
            for site in _ln_site_names(cfg):
                g, b = _ln_params(model, site, p)
                sites[site] = (g.data, b.data)
            lns.append(sites)
            ps.append(p)

        for b_idx in range(layout.launches):
            rows = layout.batches[b_idx]
            cap = layout.row_length(b_idx)
            nrows = len(rows)
            tokbuf = np.zeros((nrows, cap, d))
            bias = np.full((nrows, 1, cap, cap), nm.MASK_BIAS)
            ln_bufs = {
                site: (np.ones((nrows, cap, d)), np.zeros((nrows, cap, d)))
                for site in _ln_site_names(cfg)
            }
            mod_bufs = [np.zeros((nrows, cap, 6 * d)) for _ in range(cfg.n_layers)]
            fmod_buf = np.zeros((nrows, cap, 2 * d))
            masks: dict[int, np.ndarray] = {}
            spans = []  # (item_idx, row, start, n)
            for r, row in enumerate(rows):
                start = 0
                for item_idx, ln in row:
                    if ln != toks[item_idx].shape[0]:
                        raise BackboneError("layout length does not match tokens")
                    sl = slice(start, start + ln)
                    tokbuf[r, sl] = toks[item_idx]
                    bias[r, 0, sl, sl] = 0.0
                    for site in ln_bufs:
                        g, bb = lns[item_idx][site]
                        ln_bufs[site][0][r, sl] = g
                        ln_bufs[site][1][r, sl] = bb
                    for i in range(cfg.n_layers):
                        mod_bufs[i][r, sl] = mods[item_idx][i]
                    fmod_buf[r, sl] = mods[item_idx][cfg.n_layers]
                    p_i = ps[item_idx]
                    # merged weights are row-global, so packing always takes
                    # the unmerged adapter path regardless of model.merged
                    if model.flex_mode == "lora" and p_i != cfg.patch.p_powerful:
                        masks.setdefault(p_i, np.zeros((nrows, cap, 1)))
                        masks[p_i][r, sl] = 1.0
                    spans.append((item_idx, r, start, ln))
                    start += ln

            xb = Tensor(tokbuf)
            adapters = [(p_i, Tensor(m)) for p_i, m in masks.items()]
            for i in range(cfg.n_layers):
                mod = Tensor(mod_bufs[i].reshape(nrows, cap, 6, d))
                mod6 = [mod[:, :, j] for j in range(6)]
                ln1 = tuple(Tensor(a) for a in ln_bufs[f"block{i}.ln1"])
                ln2 = tuple(Tensor(a) for a in ln_bufs[f"block{i}.ln2"])
                xb = _block(model, i, xb, ln1, ln2, mod6, adapters, bias, None)
            fmod = Tensor(fmod_buf.reshape(nrows, cap, 2, d))
            fg, fb = (Tensor(a) for a in ln_bufs["final.ln"])
            xb = _modulate(nm.layer_norm(xb, fg, fb), fmod[:, :, 0], fmod[:, :, 1])

            for item_idx, r, start, n in spans:
                p_i = ps[item_idx]
                w_d, b_d = _deembed_weights(model, p_i)
                seg = xb[r, start : start + n]
                out = nm.add(nm.matmul(seg, w_d), b_d)
                img = tok.unpatchify(out, p_i, cfg.h, cfg.w, cfg.c_out).data
                if cfg.learn_variance:
                    results[item_idx] = (img[: cfg.c_in], img[cfg.c_in :])
                else:
                    results[item_idx] = (img, None)
    return results


def count_parameters(model: Model) -> dict:
    """Added-vs-backbone parameter accounting for flexified models."""
    base_names = {
        k for k in model.params
        if not k.startswith(("flex.", "norms.", "pemb.", "lora.", "merged.",
                             "embed_p", "deembed_p"))
    }
    base = {k: v for k, v in model.params.items() if k in base_names}
    added = {k: v for k, v in model.params.items()
             if k not in base_names and not k.startswith("merged.")}
    return costmodel.parameter_accounting(base, added)
