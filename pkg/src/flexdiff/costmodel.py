"""Compute accounting: analytic FLOPs formulas, an instrumented matmul
counter that must agree with them exactly, and batch-packing layouts for
mixed-patch-size inference.

Convention: one multiply plus one add each count, so a linear mapping N
tokens from d_in to d_out costs 2*N*d_in*d_out FLOPs. All counts are exact
integers.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class PackingError(ValueError):
    """Raised when a packing strategy cannot realize a request set."""


# --------------------------------------------------------------------------
# instrumented counting (fed by numerics.matmul)

_counter: dict[str, int] | None = None
_scope: str = "other"


def record_matmul(shape_a, shape_b) -> None:
    global _counter
    c = _counter
    if c is None:
        return
    m, k = int(shape_a[-2]), int(shape_a[-1])
    n = int(shape_b[-1])
    batch = 1
    for d in np.broadcast_shapes(tuple(shape_a[:-2]), tuple(shape_b[:-2])):
        batch *= int(d)
    c[_scope] = c.get(_scope, 0) + 2 * batch * m * k * n


@contextmanager
def flop_scope(label: str):
    """Attribute matmul FLOPs inside the block to `label`."""
    global _scope
    prev = _scope
    _scope = label
    try:
        yield
    finally:
        _scope = prev


@contextmanager
def instrument():
    """Collect per-component matmul FLOPs; yields the live counter dict."""
    global _counter
    prev = _counter
    counter: dict[str, int] = {}
    _counter = counter
    try:
        yield counter
    finally:
        _counter = prev


# --------------------------------------------------------------------------
# analytic model


@dataclass
class FlopsReport:
    """Exact per-component FLOPs for one forward pass (batch of one)."""

    components: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def token_path_total(self) -> int:
        """Total excluding the patch-size-independent conditioning pathway."""
        return sum(v for k, v in self.components.items() if k != "cond")

    def __getitem__(self, key: str) -> int:
        return self.components.get(key, 0)


def linear_flops(n: int, d_in: int, d_out: int) -> int:
    return 2 * n * d_in * d_out


def block_flops(n: int, d: int) -> dict[str, int]:
    """One transformer block on n tokens of width d (token path only)."""
    return {
        "attention-linears": 8 * n * d * d,   # q,k,v and the output projection
        "attention-matmuls": 4 * n * n * d,   # scores and the value mix
        "mlp": 16 * n * d * d,                # d -> 4d -> d
    }


def lora_block_flops(n: int, d: int, rank: int) -> int:
    """Unmerged adapter overhead per block: 2n(d_in*r + r*d_out) per layer,
    over q,k,v,out (d->d) and the two MLP linears (d->4d, 4d->d)."""
    qkvo = 4 * 2 * n * (d * rank + rank * d)
    fc1 = 2 * n * (d * rank + rank * 4 * d)
    fc2 = 2 * n * (4 * d * rank + rank * d)
    return qkvo + fc1 + fc2


def flops_per_step(cfg, p: int, lora_unmerged: bool = False,
                   n_cond_tokens: int = 0, shared: bool = False) -> FlopsReport:
    """FLOPs of one denoising forward at patch size p, batch of one.

    cfg needs: h, w, c_in, c_out, d_model, n_layers, lora_rank, cond_mode,
    and (for shared / learned-positional models) patch and pos_mode.
    The conditioning pathway (timestep MLP, adaLN projections, final
    modulation) is reported under "cond" and excluded from patch-size
    ratio arithmetic, being per-image and patch independent. "embed-prep"
    counts weight/positional instantiation matmuls, which a production
    runner would cache per plan; plan totals exclude them.
    """
    n = (cfg.h // p) * (cfg.w // p)
    d = cfg.d_model
    comps = {
        "embed": linear_flops(n, p * p * cfg.c_in, d),
        "attention-linears": 0,
        "attention-matmuls": 0,
        "mlp": 0,
        "de-embed": linear_flops(n, d, cfg.c_out * p * p),
    }
    for part, val in block_flops(n, d).items():
        comps[part] = cfg.n_layers * val
    prep = 0
    if shared:
        pu = cfg.patch.p_underlying
        if p != pu:
            prep += 2 * cfg.c_in * p * p * pu * pu * d          # embed weights
            prep += 2 * cfg.c_out * d * pu * pu * p * p         # de-embed weights
            prep += 2 * cfg.c_out * pu * pu * p * p             # de-embed bias
    if getattr(cfg, "pos_mode", "sinusoidal") == "learned" and p != cfg.patch.p_powerful:
        n0 = (cfg.h // cfg.patch.p_powerful) * (cfg.w // cfg.patch.p_powerful)
        prep += 2 * n * n0 * d
    if prep:
        comps["embed-prep"] = prep
    if getattr(cfg, "cond_mode", "class") == "cross":
        m = n_cond_tokens
        comps["cross"] = cfg.n_layers * (
            linear_flops(n, d, d)          # queries
            + 2 * linear_flops(m, d, d)    # keys and values on cond tokens
            + 4 * n * m * d                # scores and value mix
            + linear_flops(n, d, d)        # output projection
        )
    if lora_unmerged:
        comps["lora-overhead"] = cfg.n_layers * lora_block_flops(n, d, cfg.lora_rank)
    comps["cond"] = (
        4 * d * d                      # timestep MLP, two d->d layers
        + cfg.n_layers * 12 * d * d    # adaLN projections d -> 6d
        + 4 * d * d                    # final-layer modulation d -> 2d
    )
    return FlopsReport(comps)


def lora_merge_delta(cfg, p: int) -> int:
    """Exact FLOPs saved per forward by merging adapters into base weights."""
    n = (cfg.h // p) * (cfg.w // p)
    return cfg.n_layers * lora_block_flops(n, cfg.d_model, cfg.lora_rank)


def plan_fraction(t_total: int, t_weak: int, step_ratio: float) -> float:
    """Compute fraction of an inference plan versus all-powerful sampling,
    given the per-step weak/powerful cost ratio."""
    if not 0 <= t_weak <= t_total:
        raise ValueError("t_weak out of range")
    return (t_weak * step_ratio + (t_total - t_weak)) / t_total


def plan_flops(cfg, plan, lora_unmerged: bool = False,
               ffn_only: bool = False) -> dict:
    """Total FLOPs of an inference plan, both guidance branches included.

    ffn_only drops the attention-matmul terms (the d^2-dominated view in
    which the weak/powerful per-step ratio is exactly the token ratio).
    """

    def step_cost(p: int) -> int:
        rep = flops_per_step(cfg, p, lora_unmerged=lora_unmerged)
        # instantiation work is cacheable per plan, so it is not a step cost
        total = rep.token_path_total() - rep["embed-prep"]
        if ffn_only:
            total -= rep["attention-matmuls"]
        return total

    total = 0
    branches = 0
    for entry in plan.entries:
        total += step_cost(entry.p_cond)
        branches += 1
        if entry.p_uncond is not None:
            total += step_cost(entry.p_uncond)
            branches += 1
    per_powerful = step_cost(plan.p_powerful)
    baseline = branches * per_powerful
    return {
        "total": total,
        "baseline": baseline,
        "fraction": total / baseline if baseline else float("nan"),
    }


# --------------------------------------------------------------------------
# packing

STRATEGIES = (1, 2, 3, 4)


@dataclass
class PackLayout:
    """A realized batch layout for a set of sequence-length requests.

    batches: one entry per launch; each batch is a list of rows; each row is
    a list of (request_index, length) segments. Rows of a batch are padded
    to that batch's max row total.
    """

    strategy: int
    batches: list[list[list[tuple[int, int]]]]

    @property
    def launches(self) -> int:
        return len(self.batches)

    def row_length(self, batch_idx: int) -> int:
        return max(sum(ln for _, ln in row) for row in self.batches[batch_idx])

    def padding(self) -> int:
        pad = 0
        for b in range(len(self.batches)):
            cap = self.row_length(b)
            for row in self.batches[b]:
                pad += cap - sum(ln for _, ln in row)
        return pad


def _expand(requests: list[tuple[int, int]]) -> list[int]:
    lengths = []
    for length, count in requests:
        if length <= 0 or count < 0:
            raise PackingError("lengths must be positive, counts non-negative")
        lengths.extend([length] * count)
    if not lengths:
        raise PackingError("empty request set")
    return lengths


def pack(requests: list[tuple[int, int]], strategy: int) -> PackLayout:
    """Lay out (sequence length, count) requests under one of four strategies.

    1: one row per sequence, all rows padded to the longest length, one batch.
    2: one homogeneous batch per distinct length, no padding.
    3: greedy first-fit-decreasing packing of whole sequences into rows of
       the longest length, mixed lengths allowed per row, one batch.
    4: full-length sequences keep their own rows; shorter sequences are
       grouped ratio-many per row (ratio = longest/length). Requires at
       least ratio-many sequences of each shorter length.
    """
    lengths = _expand(requests)
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    cap = lengths[order[0]]

    if strategy == 1:
        rows = [[(i, lengths[i])] for i in order]
        return PackLayout(1, [rows])

    if strategy == 2:
        batches = []
        for length in sorted(set(lengths), reverse=True):
            batches.append([[(i, lengths[i])] for i in order if lengths[i] == length])
        return PackLayout(2, batches)

    if strategy == 3:
        rows: list[list[tuple[int, int]]] = []
        fill: list[int] = []
        for i in order:
            ln = lengths[i]
            for r, used in enumerate(fill):
                if used + ln <= cap:
                    rows[r].append((i, ln))
                    fill[r] += ln
                    break
            else:
                rows.append([(i, ln)])
                fill.append(ln)
        return PackLayout(3, [rows])

    if strategy == 4:
        rows = []
        for length in sorted(set(lengths), reverse=True):
            idxs = [i for i in order if lengths[i] == length]
            ratio = cap // length
            if length < cap and len(idxs) < ratio:
                raise PackingError(
                    f"strategy 4 needs at least {ratio} sequences of length "
                    f"{length}, got {len(idxs)}"
                )
            for start in range(0, len(idxs), ratio):
                rows.append([(i, length) for i in idxs[start : start + ratio]])
        return PackLayout(4, [rows])

    raise PackingError(f"unknown strategy {strategy}")


def layout_flops(cfg, layout: PackLayout, embed_dims: dict[int, tuple[int, int]]) -> int:
    """Exact FLOPs to execute a layout.

    Embedding/de-embedding runs on real tokens only (padding is appended in
    token space); block linears run dense over padded rows and attention over
    the padded row length. embed_dims maps a sequence length to its
    (p*p*c_in, c_out*p*p) embedding widths.
    """
    d = cfg.d_model
    total = 0
    for b in range(layout.launches):
        cap = layout.row_length(b)
        for row in layout.batches[b]:
            for _, ln in row:
                e_in, e_out = embed_dims[ln]
                total += linear_flops(ln, e_in, d) + linear_flops(ln, d, e_out)
            for part, val in block_flops(cap, d).items():
                total += cfg.n_layers * val
    return total


def latency_proxy(cfg, layout: PackLayout, embed_dims: dict[int, tuple[int, int]],
                  launch_cost: float | None = None, flop_weight: float = 1.0) -> float:
    """Dispatch-overhead-aware cost: launch_cost*launches + flop_weight*FLOPs.

    The default launch cost is half the block FLOPs of one longest-row
    forward; at desk scale per-launch overhead genuinely rivals the matmul
    work of small models.
    """
    if launch_cost is None:
        cap = max(layout.row_length(b) for b in range(layout.launches))
        launch_cost = 0.5 * cfg.n_layers * sum(block_flops(cap, cfg.d_model).values())
    return launch_cost * layout.launches + flop_weight * layout_flops(cfg, layout, embed_dims)


def choose_strategy(cfg, requests: list[tuple[int, int]],
                    embed_dims: dict[int, tuple[int, int]]) -> int:
    """Pick the feasible strategy with the lowest latency proxy."""
    best = None
    for s in STRATEGIES:
        try:
            layout = pack(requests, s)
        except PackingError:
            continue
        cost = latency_proxy(cfg, layout, embed_dims)
        if best is None or cost < best[0] or (cost == best[0] and s < best[1]):
            best = (cost, s)
    if best is None:
        raise PackingError("no feasible strategy")
    return best[1]


def parameter_accounting(base_params: dict, added_params: dict) -> dict:
    """Report added-parameter counts by category and the fraction of the
    backbone they represent."""

    def count(d):
        return int(sum(np.prod(v.shape) for v in d.values()))

    def count_where(d, pred):
        return int(sum(np.prod(v.shape) for k, v in d.items() if pred(k)))

    backbone = count_where(base_params, lambda k: k.startswith("block"))
    added = count(added_params)
    by_cat = {
        "adapters": count_where(added_params, lambda k: k.startswith("lora.")),
        "embed-deembed": count_where(
            added_params, lambda k: k.startswith(("flex.", "embed_p", "deembed_p"))
        ),
        "norms": count_where(added_params, lambda k: k.startswith("norms.")),
        "patch-size-embeddings": count_where(added_params, lambda k: k.startswith("pemb")),
    }
    return {
        "backbone": backbone,
        "added": added,
        "by_category": by_cat,
        "fraction": added / backbone if backbone else float("nan"),
    }
