"""Fine-tuning regimes for flexible-patch-size denoisers.

Shared mode trains all sizes with the denoising objective at a random
patch size per batch, optionally adding a bootstrapped distribution
matching penalty that simulates inference: corrupt, denoise a few steps
weak-then-powerful, and push the arrived-at samples toward the forward
marginal at the same level. LoRA mode distills the frozen powerful
prediction into the adapter-equipped weak sizes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import backbone, costmodel, diffusion
from . import numerics as nm
from .numerics import Tensor


class TrainingError(ValueError):
    """Raised for invalid training configuration or broken freeze contracts."""


# --------------------------------------------------------------------------
# losses


def eps_mse_loss(model, schedule: diffusion.NoiseSchedule, x0, t, cond,
                 p: int, noise) -> Tensor:
    """Denoising MSE at patch size p: per-image sum of squared error on the
    noise estimate, averaged over the batch."""
    x_t = schedule.q_sample(np.asarray(x0), t, noise)
    eps_hat, _ = backbone.forward(model, x_t, t, cond, p)
    d = eps_hat - noise
    per_image = nm.tsum(nm.reshape(d * d, (d.shape[0], -1)), axis=1)
    return nm.tmean(per_image)


def distill_loss(powerful_pred, weak_pred) -> Tensor:
    """Batch mean of the per-image L2 norm (not squared) of the prediction
    gap. The powerful branch is detached: it is the teacher."""
    teacher = nm.stop_gradient(powerful_pred)
    weak = nm.as_tensor(weak_pred)
    if weak.shape != teacher.shape:
        raise TrainingError("prediction shapes differ")
    d = weak - teacher
    norms = nm.sqrt(nm.tsum(nm.reshape(d * d, (d.shape[0], -1)), axis=1))
    return nm.tmean(norms)


# --------------------------------------------------------------------------
# maximum mean discrepancy


def _sq_dists(x, y):
    """Pairwise squared distances; taped when either input is taped."""
    x, y = nm.as_tensor(x), nm.as_tensor(y)
    x2 = nm.reshape(nm.tsum(x * x, axis=1), (x.shape[0], 1))
    y2 = nm.reshape(nm.tsum(y * y, axis=1), (1, y.shape[0]))
    cross = nm.matmul(x, nm.transpose(y, (1, 0)))
    return x2 + y2 - 2.0 * cross


def median_bandwidths(x, y, factors=(0.5, 1.0, 2.0)) -> tuple[float, ...]:
    """RBF bandwidths: median pairwise squared distance of the pooled set,
    scaled by the given factors. Bandwidth selection carries no gradient."""
    pooled = np.concatenate(
        [np.asarray(getattr(x, "data", x)), np.asarray(getattr(y, "data", y))]
    )
    with nm.no_grad():
        d2 = _sq_dists(pooled, pooled).data
    off = d2[~np.eye(d2.shape[0], dtype=bool)]
    med = float(np.median(off)) if off.size else 0.0
    if med <= 0.0:
        med = 1.0
    return tuple(f * med for f in factors)


def _kernel(d2, bandwidths):
    k = None
    for bw in bandwidths:
        term = nm.exp(d2 * (-1.0 / bw))
        k = term if k is None else k + term
    return k * (1.0 / len(bandwidths))


def mmd2(x, y, bandwidths, unbiased: bool = True):
    """Squared MMD between two flattened sample sets under an RBF-mixture
    kernel. The unbiased U-statistic drops the diagonal self-similarities
    and needs at least two points per set; the biased V-statistic keeps
    them (and is exactly 0 when the sets coincide point for point)."""
    x, y = nm.as_tensor(x), nm.as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise TrainingError("mmd2 expects [n, dim] sets of equal dim")
    n, m = x.shape[0], y.shape[0]
    kxx = _kernel(_sq_dists(x, x), bandwidths)
    kyy = _kernel(_sq_dists(y, y), bandwidths)
    kxy = _kernel(_sq_dists(x, y), bandwidths)
    if not unbiased:
        return (nm.tsum(kxx) * (1.0 / (n * n))
                + nm.tsum(kyy) * (1.0 / (m * m))
                - nm.tsum(kxy) * (2.0 / (n * m)))
    if n < 2 or m < 2:
        raise TrainingError("unbiased mmd2 needs at least 2 points per set")
    off_x = 1.0 - np.eye(n)
    off_y = 1.0 - np.eye(m)
    return (nm.tsum(kxx * off_x) * (1.0 / (n * (n - 1)))
            + nm.tsum(kyy * off_y) * (1.0 / (m * (m - 1)))
            - nm.tsum(kxy) * (2.0 / (n * m)))


def mmd2_jackknife(x, y, bandwidths) -> tuple[float, float]:
    """Unbiased MMD^2 and its delete-one jackknife standard error (paired
    deletion, so the sets must be equally sized)."""
    x = np.asarray(getattr(x, "data", x))
    y = np.asarray(getattr(y, "data", y))
    n = x.shape[0]
    if y.shape[0] != n:
        raise TrainingError("jackknife needs equally sized sets")
    if n < 3:
        raise TrainingError("jackknife needs at least 3 points")
    with nm.no_grad():
        kxx = _kernel(_sq_dists(x, x), bandwidths).data
        kyy = _kernel(_sq_dists(y, y), bandwidths).data
        kxy = _kernel(_sq_dists(x, y), bandwidths).data

    sxx = kxx.sum() - np.trace(kxx)
    syy = kyy.sum() - np.trace(kyy)
    sxy = kxy.sum()
    theta = sxx / (n * (n - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (n * n)

    rx = kxx.sum(axis=1) - np.diag(kxx)
    ry = kyy.sum(axis=1) - np.diag(kyy)
    rxy_row = kxy.sum(axis=1)
    rxy_col = kxy.sum(axis=0)
    k = n - 1
    sxx_i = sxx - 2.0 * rx
    syy_i = syy - 2.0 * ry
    sxy_i = sxy - rxy_row - rxy_col + np.diag(kxy)
    theta_i = sxx_i / (k * (k - 1)) + syy_i / (k * (k - 1)) - 2.0 * sxy_i / (k * k)
    se = float(np.sqrt((n - 1) / n * np.sum((theta_i - theta_i.mean()) ** 2)))
    return float(theta), se


# --------------------------------------------------------------------------
# bootstrapped distribution matching


@dataclass(frozen=True)
class BootstrapSchedule:
    """Patch sizes (ascending) and per-size step counts for the simulated
    inference chain. The chain runs from high to low t and visits the
    largest patch size first, so the smallest (most powerful) size takes
    the final steps, mirroring the cheap-first inference plan."""

    patch_sizes: tuple[int, ...]
    steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.patch_sizes) != len(self.steps) or not self.patch_sizes:
            raise TrainingError("sizes and step counts must align, non-empty")
        if list(self.patch_sizes) != sorted(set(self.patch_sizes)):
            raise TrainingError("patch sizes must be strictly ascending")
        if any(s < 0 for s in self.steps) or sum(self.steps) < 1:
            raise TrainingError("need a positive total step count")

    @property
    def total_steps(self) -> int:
        return sum(self.steps)

    def size_at(self, t_end: int, t: int) -> int:
        """Patch size applied to the step x_t -> x_{t-1}. Size i covers
        t in (t_end + sum(steps[:i]), t_end + sum(steps[:i+1])], putting
        the smallest size directly above t_end."""
        offset = t - t_end
        if not 1 <= offset <= self.total_steps:
            raise TrainingError(f"step {t} outside chain above {t_end}")
        cum = 0
        for p, s in zip(self.patch_sizes, self.steps):
            cum += s
            if offset <= cum:
                return p
        raise AssertionError("unreachable")

    def visit_order(self, t_end: int) -> list[tuple[int, int]]:
        """(t, patch size) pairs in execution (descending t) order."""
        start = t_end + self.total_steps
        return [(t, self.size_at(t_end, t)) for t in range(start, t_end, -1)]


def draw_t_end(t_steps: int, chain_len: int, rng) -> int:
    """Comparison level for the bootstrap loss, biased toward small t
    (where accumulated inference error concentrates): ceil(T * u^2)."""
    if chain_len >= t_steps:
        raise TrainingError("chain longer than the schedule")
    u = rng.random()
    t_end = int(np.ceil(t_steps * u * u))
    t_end = max(t_end, 1)
    return min(t_end, t_steps - chain_len)


def bootstrap_mmd_loss(model, schedule: diffusion.NoiseSchedule, x0, x0_tilde,
                       cond, boot: BootstrapSchedule, rng,
                       t_end: int | None = None,
                       bandwidths=None) -> Tensor:
    """Simulated-inference distribution matching.

    Both image sets are corrupted: the target directly to level t_end, the
    prediction set to t_end + total chain steps, then denoised down the
    chain (largest patch first). Only the final step carries gradients;
    everything earlier is detached to bound memory. Returns the unbiased
    MMD^2 between predictions and targets at level t_end.
    """
    x0 = np.asarray(x0)
    x0_tilde = np.asarray(x0_tilde)
    if t_end is None:
        t_end = draw_t_end(schedule.t_steps, boot.total_steps, rng)
    t_start = t_end + boot.total_steps
    if t_start <= t_end:
        raise TrainingError("chain start must exceed the comparison level")
    if t_start > schedule.t_steps:
        raise TrainingError(
            f"chain [{t_end}, {t_start}] exceeds schedule length {schedule.t_steps}"
        )

    target = schedule.q_sample(x0, t_end, rng.standard_normal(x0.shape))
    x = schedule.q_sample(x0_tilde, t_start, rng.standard_normal(x0_tilde.shape))

    for t, p in boot.visit_order(t_end):
        noise = rng.standard_normal(x0_tilde.shape) if t > 1 else None
        if t > t_end + 1:
            eps, v = backbone.predict(model, x, t, cond, p)
            x = schedule.p_sample_step(x, t, eps, v=v, noise=noise)
        else:
            eps, v = backbone.forward(model, x, t, cond, p)
            x = schedule.p_sample_step(nm.as_tensor(x), t, eps, v=v, noise=noise)

    pred = nm.reshape(x, (x.shape[0], -1))
    target = target.reshape(target.shape[0], -1)
    if bandwidths is None:
        bandwidths = median_bandwidths(pred, target)
    return mmd2(pred, target, bandwidths, unbiased=True)


# --------------------------------------------------------------------------
# optimizer and EMA


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict, with global
    gradient-norm clipping applied before the update."""

    def __init__(self, params: dict[str, Tensor], lr: float = 8e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-2, clip_norm: float | None = 0.02):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def global_grad_norm(self) -> float:
        # summed in sorted-name order so the reduction does not depend on
        # dict construction order (fresh model vs one restored from disk)
        total = 0.0
        for k in sorted(self.params):
            g = self.params[k].grad
            if g is not None:
                total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        self.step_count += 1
        gn = self.global_grad_norm()
        scale = 1.0
        if self.clip_norm is not None and gn > self.clip_norm:
            scale = self.clip_norm / gn
        for k, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.m[k], self.v[k] = nm.adam_step(
                p.data, p.grad * scale, self.m[k], self.v[k], self.step_count,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )
        return gn


class EMA:
    """Exponential moving average shadow of a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], rate: float = 0.9999):
        if not 0.0 <= rate <= 1.0:
            raise TrainingError("ema rate must lie in [0, 1]")
        self.rate = rate
        self.shadow = {k: v.data.copy() for k, v in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        r = self.rate
        for k, v in params.items():
            self.shadow[k] = r * self.shadow[k] + (1.0 - r) * v.data

    def checksum(self) -> int:
        crc = 0
        for k in sorted(self.shadow):
            crc = zlib.crc32(self.shadow[k].tobytes(), crc)
        return crc


def params_checksum(params: dict[str, Tensor], names=None) -> int:
    crc = 0
    for k in sorted(names if names is not None else params):
        crc = zlib.crc32(np.ascontiguousarray(params[k].data).tobytes(), crc)
    return crc


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    steps: int
    batch_size: int
    lr: float = 8e-4
    weight_decay: float = 1e-2
    clip_norm: float = 0.02
    ema_rate: float = 0.9999
    seed: int = 0
    label_drop: float = 0.1
    mmd_weight: float = 0.0
    mmd_every: int = 1
    bootstrap: BootstrapSchedule | None = None
    log_every: int = 10


@dataclass
class TrainResult:
    model: object
    ema: EMA
    metrics: list[str] = field(default_factory=list)
    total_flops: int = 0
    start_step: int = 0
    optimizer: AdamW | None = None


def _format_metrics(step, parts: dict[str, float], flops: int, ema_crc: int) -> str:
    terms = " ".join(f"{k}={v:.6g}" for k, v in parts.items())
    return f"step={step} {terms} flops={flops} ema_crc={ema_crc:08x}"


def _dropped_labels(labels: np.ndarray, null_class: int, drop: float, rng):
    if drop <= 0.0:
        return labels
    mask = rng.random(labels.shape[0]) < drop
    out = labels.copy()
    out[mask] = null_class
    return out

def _analytic_step_flops(model, p: int, batch: int) -> int:
    rep = costmodel.flops_per_step(
        model.cfg, p,
        lora_unmerged=(model.flex_mode == "lora" and p != model.cfg.patch.p_powerful),
        shared=(model.flex_mode == "shared"),
    )
    return batch * rep.total


def train_shared(model, data, schedule: diffusion.NoiseSchedule,
                 cfg: TrainConfig, sink=None, start_step: int = 0,
                 optimizer: AdamW | None = None,
                 ema: EMA | None = None, start_flops: int = 0) -> TrainResult:
    """Denoising training with a uniformly random patch size per batch and
    an optional bootstrapped MMD term. Works on base models too (their only
    available size is the pretraining one), which covers pretraining."""
    if model.flex_mode == "lora":
        raise TrainingError("use train_lora for adapter models")
    if cfg.mmd_weight and cfg.bootstrap is None:
        raise TrainingError("mmd_weight needs a bootstrap schedule")
    sizes = (model.cfg.patch.supported if model.flex_mode == "shared"
             else (model.cfg.patch.p_powerful,))
    trainable = model.trainable()
    opt = optimizer or AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay,
                             clip_norm=cfg.clip_norm)
    ema = ema or EMA(trainable, rate=cfg.ema_rate)
    metrics: list[str] = []
    total_flops = start_flops

    for step in range(start_step + 1, start_step + cfg.steps + 1):
        rng = nm.philox(cfg.seed, step, nm.BRANCH_TRAIN)
        x0, labels = data.sample_batch(rng, cfg.batch_size)
        labels = _dropped_labels(labels, model.cfg.null_class, cfg.label_drop, rng)
        p = int(sizes[rng.integers(len(sizes))])
        t = rng.integers(1, schedule.t_steps + 1, size=cfg.batch_size)
        noise = rng.standard_normal(x0.shape)

        loss = eps_mse_loss(model, schedule, x0, t, labels, p, noise)
        parts = {"loss": 0.0, "eps": float(loss.data)}
        step_flops = _analytic_step_flops(model, p, cfg.batch_size)
        if cfg.mmd_weight and step % cfg.mmd_every == 0:
            half = cfg.batch_size // 2
            if half < 2:
                raise TrainingError("bootstrap needs batch size >= 4")
            mmd = bootstrap_mmd_loss(
                model, schedule, x0[:half], x0[half : 2 * half],
                labels[half : 2 * half], cfg.bootstrap, rng,
            )
            loss = loss + cfg.mmd_weight * mmd
            parts["mmd"] = float(mmd.data)
            # chain forwards: the final taped step costs forward+backward,
            # counted once here as forward only (backward excluded by the
            # same convention as the main loss)
            step_flops += sum(
                _analytic_step_flops(model, p_i, half)
                for _, p_i in cfg.bootstrap.visit_order(0)
            )
        parts["loss"] = float(loss.data)

        opt.zero_grad()
        loss.backward()
        parts["gnorm"] = opt.step()
        ema.update(trainable)
        total_flops += step_flops
        if sink is not None or step % cfg.log_every == 0 or step == start_step + cfg.steps:
            line = _format_metrics(step, parts, total_flops, ema.checksum())
            metrics.append(line)
            if sink is not None:
                sink(line)
    return TrainResult(model, ema, metrics, total_flops,
                       start_step + cfg.steps, opt)


def train_lora(model, data, schedule: diffusion.NoiseSchedule,
               cfg: TrainConfig, sink=None, start_step: int = 0,
               optimizer: AdamW | None = None,
               ema: EMA | None = None, start_flops: int = 0) -> TrainResult:
    """Distill the frozen powerful prediction into the weak sizes. Only
    adapter/new-size parameters train; the base weights are checksummed
    before and after to enforce the freeze."""
    if model.flex_mode != "lora":
        raise TrainingError("train_lora needs a lora-mode model")
    weak_sizes = [p for p in model.cfg.patch.supported
                  if p != model.cfg.patch.p_powerful]
    if not weak_sizes:
        raise TrainingError("no weak sizes to train")
    trainable = model.trainable()
    frozen_before = params_checksum(model.params, model.frozen)
    opt = optimizer or AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay,
                             clip_norm=cfg.clip_norm)
    ema = ema or EMA(trainable, rate=cfg.ema_rate)
    metrics: list[str] = []
    total_flops = start_flops
    p_pow = model.cfg.patch.p_powerful

    for step in range(start_step + 1, start_step + cfg.steps + 1):
        rng = nm.philox(cfg.seed, step, nm.BRANCH_TRAIN)
        x0, labels = data.sample_batch(rng, cfg.batch_size)
        labels = _dropped_labels(labels, model.cfg.null_class, cfg.label_drop, rng)
        p = int(weak_sizes[rng.integers(len(weak_sizes))])
        t = rng.integers(1, schedule.t_steps + 1, size=cfg.batch_size)
        noise = rng.standard_normal(x0.shape)
        x_t = schedule.q_sample(x0, t, noise)

        with nm.no_grad():
            teacher, _ = backbone.forward(model, x_t, t, labels, p_pow)
        student, _ = backbone.forward(model, x_t, t, labels, p)
        loss = distill_loss(teacher, student)

        opt.zero_grad()
        loss.backward()
        gnorm = opt.step()
        ema.update(trainable)
        total_flops += _analytic_step_flops(model, p_pow, cfg.batch_size)
        total_flops += _analytic_step_flops(model, p, cfg.batch_size)
        parts = {"loss": float(loss.data), "gnorm": gnorm}
        if sink is not None or step % cfg.log_every == 0 or step == start_step + cfg.steps:
            line = _format_metrics(step, parts, total_flops, ema.checksum())
            metrics.append(line)
            if sink is not None:
                sink(line)

    if params_checksum(model.params, model.frozen) != frozen_before:
        raise TrainingError("frozen parameters changed during lora training")
    return TrainResult(model, ema, metrics, total_flops,
                       start_step + cfg.steps, opt)
