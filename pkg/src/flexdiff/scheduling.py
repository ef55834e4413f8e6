"""Inference plans over patch sizes and mixed-size classifier-free guidance.

A plan assigns each denoising step a patch size for the conditional branch
and, when guidance is on, one for the guidance branch. The cheap-first
style runs the large (weak) patch size for the early steps and switches to
the small (powerful) one for the final stretch; guidance branches may
switch later than conditional ones, in which case the weak conditional
prediction itself serves as the guidance direction under a rescaled scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone, costmodel, diffusion
from . import numerics as nm
from .tokenizer import PatchSpec


class SchedulerError(ValueError):
    """Raised for inconsistent plans or guidance configurations."""


DEFAULT_SCALE_RATIO = 2.5


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales for equal-size (s1) and mixed-size (s2) steps.

    When built from a single base scale, s2 follows the rescaling rule
    (1 - s1) / (1 - s2) = ratio, which keeps the effective push of a
    weak-conditional guidance direction comparable to a true
    unconditional one."""

    s1: float
    s2: float
    ratio: float = DEFAULT_SCALE_RATIO

    @classmethod
    def from_scale(cls, s_cfg: float, ratio: float = DEFAULT_SCALE_RATIO,
                   s2: float | None = None) -> "GuidanceConfig":
        if ratio == 0:
            raise SchedulerError("scale ratio must be nonzero")
        if s2 is None:
            s2 = 1.0 - (1.0 - s_cfg) / ratio
        return cls(s1=float(s_cfg), s2=float(s2), ratio=float(ratio))


@dataclass(frozen=True)
class PlanEntry:
    t: int
    p_cond: int
    p_uncond: int | None
    s_eff: float | None


@dataclass(frozen=True)
class InferencePlan:
    """Per-step patch-size assignments, ordered t = T..1 (sampling order)."""

    entries: tuple[PlanEntry, ...]
    p_powerful: int
    p_weak: int
    guidance: GuidanceConfig | None

    @property
    def t_steps(self) -> int:
        return len(self.entries)

    @property
    def t_weak(self) -> int:
        return sum(1 for e in self.entries if e.p_cond == self.p_weak)

    @property
    def t_powerful(self) -> int:
        return sum(1 for e in self.entries if e.p_cond == self.p_powerful)

    def entry_at(self, t: int) -> PlanEntry:
        e = self.entries[self.t_steps - t]
        if e.t != t:
            raise SchedulerError("plan entries out of order")
        return e


def make_plan(patch: PatchSpec, t_total: int, t_weak: int,
              style: str = "weak_first",
              guidance: GuidanceConfig | None = None,
              guidance_steps: tuple[int, int] | None = None) -> InferencePlan:
    """Build a two-size plan.

    t_weak steps run at patch.p_weak and the rest at patch.p_powerful;
    weak_first places the powerful steps at the end of sampling (small t),
    weak_last at the start. guidance_steps = (x, y) puts the guidance
    branch on the powerful size for y of the steps where the conditional
    branch is powerful (x must equal t_total - t_weak and x >= y, so the
    conditional branch is never the weaker of the two).
    """
    if style not in ("weak_first", "weak_last"):
        raise SchedulerError(f"unknown plan style {style!r}")
    if not 0 <= t_weak <= t_total:
        raise SchedulerError("t_weak outside [0, t_total]")
    t_powerful = t_total - t_weak

    if (guidance is None) != (guidance_steps is None):
        raise SchedulerError("guidance scales and steps must come together")
    if guidance_steps is not None:
        x, y = guidance_steps
        if x != t_powerful:
            raise SchedulerError(
                f"guidance x={x} must match the conditional powerful count "
                f"{t_powerful}"
            )
        if not 0 <= y <= x:
            raise SchedulerError("guidance y must lie in [0, x]")

    def powerful_at(t: int, n_powerful: int) -> bool:
        if style == "weak_first":
            return t <= n_powerful
        return t > t_total - n_powerful

    entries = []
    for t in range(t_total, 0, -1):
        p_c = patch.p_powerful if powerful_at(t, t_powerful) else patch.p_weak
        p_u = None
        s = None
        if guidance is not None:
            x, y = guidance_steps
            p_u = patch.p_powerful if powerful_at(t, y) else patch.p_weak
            if p_c > p_u:
                raise SchedulerError("conditional branch weaker than guidance")
            s = guidance.s1 if p_c == p_u else guidance.s2
        entries.append(PlanEntry(t, p_c, p_u, s))
    return InferencePlan(tuple(entries), patch.p_powerful, patch.p_weak, guidance)


def plan_from_sizes(patch: PatchSpec, cond_sizes, uncond_sizes=None,
                    guidance: GuidanceConfig | None = None) -> InferencePlan:
    """Custom plan from explicit per-step size lists (sampling order)."""
    cond_sizes = list(cond_sizes)
    t_total = len(cond_sizes)
    if uncond_sizes is not None and len(uncond_sizes) != t_total:
        raise SchedulerError("branch size lists differ in length")
    if (uncond_sizes is None) != (guidance is None):
        raise SchedulerError("guidance scales and sizes must come together")
    entries = []
    for i, t in enumerate(range(t_total, 0, -1)):
        p_c = int(cond_sizes[i])
        if p_c not in patch.supported:
            raise SchedulerError(f"unsupported patch size {p_c}")
        p_u = None
        s = None
        if uncond_sizes is not None:
            p_u = int(uncond_sizes[i])
            if p_u not in patch.supported:
                raise SchedulerError(f"unsupported patch size {p_u}")
            if p_c > p_u:
                raise SchedulerError("conditional branch weaker than guidance")
            s = guidance.s1 if p_c == p_u else guidance.s2
        entries.append(PlanEntry(t, p_c, p_u, s))
    return InferencePlan(tuple(entries), patch.p_powerful, patch.p_weak, guidance)


# --------------------------------------------------------------------------
# plan text form: "weak:180,powerful:70;guidance=70/70;cfg=4.0"


def serialize_plan(plan: InferencePlan) -> str:
    segments = []
    for e in plan.entries:
        name = "powerful" if e.p_cond == plan.p_powerful else "weak"
        if segments and segments[-1][0] == name:
            segments[-1][1] += 1
        else:
            segments.append([name, 1])
    # canonical form always names both sizes for two-size plans
    if len(segments) == 1:
        only = segments[0][0]
        other = "weak" if only == "powerful" else "powerful"
        segments.insert(0 if other == "weak" else 1, [other, 0])
    text = ",".join(f"{name}:{count}" for name, count in segments)
    if plan.guidance is not None:
        y = sum(1 for e in plan.entries if e.p_uncond == plan.p_powerful)
        x = plan.t_powerful
        tail = [e for e in plan.entries if e.p_uncond == plan.p_powerful]
        if tail and [e.t for e in tail] != list(range(y, 0, -1)):
            raise SchedulerError("guidance branch is not a trailing block")
        text += f";guidance={x}/{y};cfg={plan.guidance.s1:g}"
    return text


def parse_plan(text: str, patch: PatchSpec,
               ratio: float = DEFAULT_SCALE_RATIO) -> InferencePlan:
    parts = [p.strip() for p in text.strip().split(";") if p.strip()]
    if not parts:
        raise SchedulerError("empty plan string")
    sizes = {"weak": patch.p_weak, "powerful": patch.p_powerful}
    cond: list[int] = []
    for seg in parts[0].split(","):
        name, _, count = seg.partition(":")
        name = name.strip()
        if name not in sizes:
            raise SchedulerError(f"unknown segment name {name!r}")
        try:
            n = int(count)
        except ValueError:
            raise SchedulerError(f"bad segment count {count!r}") from None
        if n < 0:
            raise SchedulerError("segment counts must be non-negative")
        cond.extend([sizes[name]] * n)

    guidance_xy = None
    s_cfg = None
    for part in parts[1:]:
        key, _, val = part.partition("=")
        key = key.strip()
        if key == "guidance":
            x_s, _, y_s = val.partition("/")
            try:
                guidance_xy = (int(x_s), int(y_s))
            except ValueError:
                raise SchedulerError(f"bad guidance spec {val!r}") from None
        elif key == "cfg":
            try:
                s_cfg = float(val)
            except ValueError:
                raise SchedulerError(f"bad cfg scale {val!r}") from None
        else:
            raise SchedulerError(f"unknown plan field {key!r}")
    if (guidance_xy is None) != (s_cfg is None):
        raise SchedulerError("guidance and cfg must be given together")

    t_total = len(cond)
    t_weak = sum(1 for p in cond if p == patch.p_weak)
    expected = make_plan(patch, t_total, t_weak, style="weak_first")
    if [e.p_cond for e in expected.entries] != cond:
        raise SchedulerError("plan text must be weak-first")
    if guidance_xy is None:
        return expected
    return make_plan(patch, t_total, t_weak, style="weak_first",
                     guidance=GuidanceConfig.from_scale(s_cfg, ratio=ratio),
                     guidance_steps=guidance_xy)


# --------------------------------------------------------------------------
# guidance combination and plan execution


def cfg_combine(eps_cond, eps_guidance, cfg: GuidanceConfig,
                p_cond: int, p_uncond: int):
    """Affine guidance push from the guidance branch toward the conditional.

    Equal patch sizes use s1 (classic unconditional guidance); a more
    powerful conditional against a weak-conditional guidance branch uses
    s2. A conditional branch weaker than the guidance branch is refused.
    """
    if p_cond > p_uncond:
        raise SchedulerError("conditional branch weaker than guidance")
    s = cfg.s1 if p_cond == p_uncond else cfg.s2
    return eps_guidance + s * (eps_cond - eps_guidance)


def nfe_pair(model, x, t: int, cond, entry: PlanEntry,
             cfg: GuidanceConfig | None, packing: int | None = None):
    """Execute one plan entry: one or two forwards, combined prediction.

    Mixed-size entries run the same conditioning on both sizes and treat
    the weak prediction as the guidance direction. Returns (eps, v) arrays;
    the variance head comes from the conditional branch. packing selects a
    batch layout strategy for the two branches (None runs them separately,
    which matches strategy 2)."""
    if entry.p_uncond is None:
        return backbone.predict(model, x, t, cond, entry.p_cond)
    if cfg is None:
        raise SchedulerError("guided plan entry needs guidance scales")
    mixed = entry.p_cond != entry.p_uncond
    guid_cond = cond if mixed else None

    if packing is None:
        eps_c, v_c = backbone.predict(model, x, t, cond, entry.p_cond)
        eps_g, _ = backbone.predict(model, x, t, guid_cond, entry.p_uncond)
    else:
        n_c = model.cfg.n_tokens(entry.p_cond)
        n_g = model.cfg.n_tokens(entry.p_uncond)
        layout = costmodel.pack([(n_c, 1), (n_g, 1)], packing)
        items = [(x, cond, entry.p_cond), (x, guid_cond, entry.p_uncond)]
        (eps_c, v_c), (eps_g, _) = backbone.forward_packed(model, items, t, layout)
    eps = cfg_combine(eps_c, eps_g, cfg, entry.p_cond, entry.p_uncond)
    return eps, v_c


def make_denoiser(model, plan: InferencePlan, cond, packing: int | None = None):
    """denoise(x, t) closure executing the plan's entry for step t."""

    def denoise(x, t):
        return nfe_pair(model, x, t, cond, plan.entry_at(t), plan.guidance, packing)

    return denoise


def sample_with_plan(model, schedule: diffusion.NoiseSchedule,
                     plan: InferencePlan, cond, seed: int,
                     method: str = "ancestral", packing: int | None = None,
                     hook=None) -> np.ndarray:
    """Sample one image following a plan's per-step patch sizes."""
    if plan.t_steps != schedule.t_steps:
        raise SchedulerError(
            f"plan has {plan.t_steps} steps, schedule {schedule.t_steps}"
        )
    shape = (model.cfg.c_in, model.cfg.h, model.cfg.w)
    denoise = make_denoiser(model, plan, cond, packing)
    with nm.no_grad():
        return schedule.sample_loop(denoise, shape, seed, method=method, hook=hook)
