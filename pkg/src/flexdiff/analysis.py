"""Diagnostic experiments at desk scale: spectral filtering of single
denoising steps, weak-vs-powerful prediction divergence over timesteps,
per-layer activation drift across successive steps, and plain image
metrics (L2, windowed SSIM, pairwise diversity).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backbone, diffusion, scheduling
from . import numerics as nm


class AnalysisError(ValueError):
    """Raised for invalid filter specs, steps, or tap names."""


# --------------------------------------------------------------------------
# spectral band filters


@lru_cache(maxsize=None)
def _radial_mask(h: int, w: int, cutoff: float) -> np.ndarray:
    """Boolean DFT mask keeping frequencies with radius <= cutoff*Nyquist.
    Corner frequencies beyond the Nyquist disk belong to the high band."""
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = r <= cutoff * 0.5 + 1e-12
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True)
class BandFilter:
    """Radial low/high-pass on the 2-D DFT; "all" is a true identity."""

    kind: str
    cutoff: float = 1.0

    def __post_init__(self):
        if self.kind not in ("low", "high", "all"):
            raise AnalysisError(f"unknown filter kind {self.kind!r}")
        if not 0.0 < self.cutoff <= 1.0:
            raise AnalysisError("cutoff must lie in (0, 1]")

    def mask(self, h: int, w: int) -> np.ndarray:
        low = _radial_mask(h, w, self.cutoff)
        if self.kind == "low":
            return low.astype(np.float64)
        if self.kind == "high":
            return (~low).astype(np.float64)
        return np.ones((h, w))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Filter the trailing two axes. The low and high bands of one
        cutoff use complementary masks, so they partition the spectrum."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "all":
            return x.copy()
        if x.ndim < 2:
            raise AnalysisError("need at least 2-d input")
        m = self.mask(x.shape[-2], x.shape[-1])
        return np.fft.ifft2(np.fft.fft2(x) * m).real


# --------------------------------------------------------------------------
# filtered single-step generation


def filtered_step_generate(model, schedule: diffusion.NoiseSchedule,
                           plan: scheduling.InferencePlan, cond, seed: int,
                           step_to_filter: int, filt: BandFilter) -> dict:
    """Generate twice with one RNG stream: untouched, and with the chosen
    step's noise estimate band-filtered. Per-step noise is keyed by (seed,
    t), so the intervention cannot shift later randomness."""
    if not 1 <= step_to_filter <= schedule.t_steps:
        raise AnalysisError(f"step {step_to_filter} outside [1, {schedule.t_steps}]")
    base = scheduling.make_denoiser(model, plan, cond)

    def filtered(x, t):
        eps, v = base(x, t)
        if t == step_to_filter:
            eps = filt.apply(eps)
        return eps, v

    shape = (model.cfg.c_in, model.cfg.h, model.cfg.w)
    with nm.no_grad():
        ref = schedule.sample_loop(base, shape, seed)
        alt = schedule.sample_loop(filtered, shape, seed)
    return {
        "reference": ref,
        "filtered": alt,
        "l2": float(np.linalg.norm(alt - ref)),
        "ssim": ssim(ref, alt),
    }


# --------------------------------------------------------------------------
# weak-vs-powerful divergence


@dataclass
class DivergenceCurve:
    ts: np.ndarray
    values: np.ndarray
    n_probes: int


def divergence_curve(model, schedule: diffusion.NoiseSchedule, probes,
                     ts, cond=None, seed: int = 0,
                     p_weak: int | None = None,
                     p_powerful: int | None = None) -> DivergenceCurve:
    """Mean per-image L2 between the weak and powerful noise estimates on
    noised probe images, for each probed t."""
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 4:
        raise AnalysisError("probes must be [n, c, h, w]")
    p_w = model.cfg.patch.p_weak if p_weak is None else p_weak
    p_p = model.cfg.patch.p_powerful if p_powerful is None else p_powerful
    ts = np.asarray(sorted(int(t) for t in ts))
    values = np.zeros(ts.shape[0])
    for k, t in enumerate(ts):
        noise = nm.philox(seed, int(t), nm.BRANCH_DATA).standard_normal(probes.shape)
        x_t = schedule.q_sample(probes, int(t), noise)
        eps_w, _ = backbone.predict(model, x_t, int(t), cond, p_w)
        eps_p, _ = backbone.predict(model, x_t, int(t), cond, p_p)
        d = (eps_w - eps_p).reshape(probes.shape[0], -1)
        values[k] = float(np.mean(np.linalg.norm(d, axis=1)))
    return DivergenceCurve(ts, values, probes.shape[0])


def spearman_rank_corr(a, b) -> float:
    """Spearman rank correlation (no tie correction beyond averaging)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise AnalysisError("need two equally sized vectors of length >= 2")

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(v.size, dtype=np.float64)
        # average ranks of exact ties to keep the statistic well defined
        for val in np.unique(v):
            m = v == val
            if m.sum() > 1:
                r[m] = r[m].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0.0:
        raise AnalysisError("constant input has no rank correlation")
    return float(np.sum(ra * rb) / denom)


# --------------------------------------------------------------------------
# activation drift over successive steps


def record_trajectory(model, schedule: diffusion.NoiseSchedule, p: int,
                      cond, seed: int) -> list[tuple[int, np.ndarray]]:
    """(t, x_t) inputs of every denoising step of a single-size run."""
    snaps: list[tuple[int, np.ndarray]] = []

    def denoise(x, t):
        snaps.append((t, x.copy()))
        return backbone.predict(model, x, t, cond, p)

    shape = (model.cfg.c_in, model.cfg.h, model.cfg.w)
    with nm.no_grad():
        schedule.sample_loop(denoise, shape, seed)
    return snaps


def activation_distance(model, snapshots, cond, p: int,
                        taps: list[str]) -> tuple[list[str], np.ndarray]:
    """Per-layer mean L2 between token activations of successive steps.

    snapshots: list of (t, x_t) in execution order. Returns the tap names
    and a [len(taps), len(snapshots)-1] matrix."""
    valid = {f"block{i}" for i in range(model.cfg.n_layers)}
    for name in taps:
        if name not in valid:
            raise AnalysisError(f"unknown tap {name!r}")
    if len(snapshots) < 2:
        raise AnalysisError("need at least two snapshots")
    acts: list[dict[str, np.ndarray]] = []
    with nm.no_grad():
        for t, x in snapshots:
            sink: dict[str, np.ndarray] = {}
            backbone.forward(model, x, t, cond, p, tap_sink=sink)
            acts.append({k: sink[k] for k in taps})
    out = np.zeros((len(taps), len(snapshots) - 1))
    for j, name in enumerate(taps):
        for k in range(len(snapshots) - 1):
            d = acts[k + 1][name] - acts[k][name]
            # mean over tokens of the per-token activation distance
            out[j, k] = float(np.mean(np.linalg.norm(d, axis=-1)))
    return list(taps), out


# --------------------------------------------------------------------------
# image metrics

_SSIM_WINDOW = 8
_SSIM_RANGE = 2.0  # pixel values live in [-1, 1]
_SSIM_C1 = (0.01 * _SSIM_RANGE) ** 2
_SSIM_C2 = (0.03 * _SSIM_RANGE) ** 2


def _windows(x: np.ndarray) -> np.ndarray:
    """Split trailing [h, w] into non-overlapping 8x8 tiles: [..., k, 64]."""
    *lead, h, w = x.shape
    s = _SSIM_WINDOW
    if h % s or w % s:
        raise AnalysisError(f"image sides must be multiples of {s}")
    x = x.reshape(*lead, h // s, s, w // s, s)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, (h // s) * (w // s), s * s)


def ssim(a, b) -> float:
    """Mean single-scale SSIM over non-overlapping 8x8 uniform windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AnalysisError("shape mismatch")
    wa, wb = _windows(a), _windows(b)
    mu_a = wa.mean(axis=-1)
    mu_b = wb.mean(axis=-1)
    var_a = wa.var(axis=-1)
    var_b = wb.var(axis=-1)
    cov = ((wa - mu_a[..., None]) * (wb - mu_b[..., None])).mean(axis=-1)
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def diversity_report(samples) -> dict:
    """Mean pairwise L2 and SSIM over a batch of same-condition samples."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise AnalysisError("need at least two samples")
    l2s, ssims = [], []
    for i in range(n):
        for j in range(i + 1, n):
            l2s.append(float(np.linalg.norm(samples[i] - samples[j])))
            ssims.append(ssim(samples[i], samples[j]))
    return {
        "n": n,
        "pairs": len(l2s),
        "mean_l2": float(np.mean(l2s)),
        "mean_ssim": float(np.mean(ssims)),
    }


# --------------------------------------------------------------------------
# report emission


def curve_to_csv(curve: DivergenceCurve) -> str:
    lines = ["t,divergence"]
    lines += [f"{int(t)},{v:.12g}" for t, v in zip(curve.ts, curve.values)]
    return "\n".join(lines) + "\n"


def matrix_to_csv(row_names: list[str], matrix: np.ndarray) -> str:
    matrix = np.asarray(matrix)
    lines = ["name," + ",".join(str(i) for i in range(matrix.shape[1]))]
    for name, row in zip(row_names, matrix):
        lines.append(name + "," + ",".join(f"{v:.12g}" for v in row))
    return "\n".join(lines) + "\n"
