"""Release gates. One test per criterion; each prints a PASS line with the
measured margin so `pytest -v -s` reads as a checklist.

The headline large-scale image-quality numbers need pretrained
multi-billion-parameter checkpoints and external metric networks, so the
gates here are exact properties plus desk-scale trend reproduction on a
~0.5M-parameter model.
"""

import time

import numpy as np
import pytest

import flexdiff.costmodel as cm
import flexdiff.numerics as nm
from flexdiff import analysis, backbone, scheduling
from flexdiff.backbone import ModelConfig, count_parameters, flexify, init_model, merge_loras
from flexdiff.datasets import InMemoryDataset
from flexdiff.diffusion import NoiseSchedule
from flexdiff.tokenizer import PatchSpec
from flexdiff.training import (
    AdamW,
    TrainConfig,
    eps_mse_loss,
    median_bandwidths,
    mmd2,
    mmd2_jackknife,
    train_lora,
    train_shared,
)

from test_backbone import perturbed_lora
from test_costmodel import assert_instrumented_matches
from test_training import mmd2_brute


def _rand_inputs(rng, cfg, n, t_max):
    x = rng.standard_normal((n, cfg.c_in, cfg.h, cfg.w))
    t = rng.integers(1, t_max + 1, size=n)
    cond = rng.integers(0, cfg.num_classes, size=n)
    return x, t, cond


class TestC01SharedPreservation:
    def test_flexified_forward_matches_base(self, base_model, shared_model,
                                            schedule, rng):
        x, t, cond = _rand_inputs(rng, base_model.cfg, 100, schedule.t_steps)
        worst = 0.0
        with nm.no_grad():
            for i in range(100):
                a, va = backbone.predict(base_model, x[i], int(t[i]),
                                         int(cond[i]), 2)
                b, vb = backbone.predict(shared_model, x[i], int(t[i]),
                                         int(cond[i]), 2)
                worst = max(worst, float(np.max(np.abs(a - b))),
                            float(np.max(np.abs(va - vb))))
        assert worst < 1e-9
        print(f"criterion 1 shared preservation: PASS (max abs {worst:.3g} < 1e-9)")


class TestC02LoraExactness:
    def test_sampling_bit_identical_for_ten_seeds(self, base_model, lora_model,
                                                  schedule):
        plan = scheduling.parse_plan(f"weak:0,powerful:{schedule.t_steps}",
                                     base_model.cfg.patch)
        for seed in range(10):
            a = scheduling.sample_with_plan(base_model, schedule, plan, 1, seed)
            b = scheduling.sample_with_plan(lora_model, schedule, plan, 1, seed)
            assert np.array_equal(a, b), f"seed {seed} diverged"
        print("criterion 2 adapter exactness: PASS (10 seeds bit-identical)")


class TestC03MergeEquivalence:
    def test_outputs_and_flops_delta(self, lora_model, schedule, rng):
        active = perturbed_lora(lora_model)
        merged = merge_loras(active)
        cfg = lora_model.cfg
        x, t, cond = _rand_inputs(rng, cfg, 100, schedule.t_steps)
        worst = 0.0
        with nm.no_grad():
            for i in range(100):
                a, _ = backbone.predict(active, x[i], int(t[i]), int(cond[i]), 4)
                b, _ = backbone.predict(merged, x[i], int(t[i]), int(cond[i]), 4)
                worst = max(worst, float(np.max(np.abs(a - b))))
        assert worst <= 1e-9

        unmerged_cost = cm.flops_per_step(cfg, 4, lora_unmerged=True).total
        merged_cost = cm.flops_per_step(cfg, 4).total
        expect = 36 * cfg.n_tokens(4) * cfg.d_model * cfg.lora_rank * cfg.n_layers
        assert unmerged_cost - merged_cost == expect
        print(f"criterion 3 merge equivalence: PASS (max abs {worst:.3g}, "
              f"flops delta {unmerged_cost - merged_cost} exact)")


class TestC04FlopsModel:
    def test_analytic_equals_instrumented(self, tiny_cfg, base_model,
                                          shared_model, lora_model,
                                          merged_model, rng):
        big_cfg = ModelConfig(h=16, w=16, c_in=3, d_model=32, n_layers=3,
                              n_heads=4, patch=tiny_cfg.patch, num_classes=5,
                              learn_variance=True, lora_rank=4)
        big = init_model(big_cfg, seed=5, head_init="random")
        big_shared = flexify(big, "shared", seed=6)
        pos_cfg = ModelConfig(h=8, w=8, c_in=1, d_model=16, n_layers=2,
                              n_heads=2, patch=tiny_cfg.patch, num_classes=3,
                              pos_mode="learned")
        pos = init_model(pos_cfg, seed=7, head_init="random")
        seq_cfg = ModelConfig(h=8, w=8, c_in=1, d_model=16, n_layers=2,
                              n_heads=2, patch=tiny_cfg.patch,
                              cond_mode="cross", vocab_size=11)
        seq = init_model(seq_cfg, seed=8, head_init="random")

        runs = [
            (base_model, 2, {}),
            (shared_model, 2, {"shared": True}),
            (shared_model, 4, {"shared": True}),
            (lora_model, 2, {}),
            (lora_model, 4, {"lora_unmerged": True}),
            (merged_model, 4, {}),
            (merged_model, 2, {}),
            (pos, 2, {}),
            (seq, 2, {"cond": [1, 4, 9], "n_cond_tokens": 3}),
            (big, 2, {}),
            (big_shared, 4, {"shared": True}),
            (big_shared, 2, {"shared": True}),
            (init_model(tiny_cfg, seed=9), 2, {}),
        ]
        for model, p, kw in runs:
            assert_instrumented_matches(model, p, rng, **kw)

        for cfg in (tiny_cfg, big_cfg):
            w = cm.flops_per_step(cfg, 4).token_path_total()
            p = cm.flops_per_step(cfg, 2).token_path_total()
            assert 1 / 16 <= w / p <= 1 / 4

        assert cm.plan_fraction(250, 180, 0.25) == 0.46
        print(f"criterion 4 compute model: PASS ({len(runs)} configs "
              "integer-exact, ratio in [1/16, 1/4], 0.46 plan fraction)")


class TestC05PackingEquivalence:
    def test_all_strategies_match_separate_forwards(self, shared_model, rng):
        cfg = shared_model.cfg
        items = [(rng.standard_normal((1, 8, 8)), i % 3, 4) for i in range(4)]
        items.append((rng.standard_normal((1, 8, 8)), 2, 2))
        requests = [(4, 4), (16, 1)]
        worst = 0.0
        with nm.no_grad():
            separate = [backbone.predict(shared_model, x, 7, c, p)
                        for x, c, p in items]
            for s in cm.STRATEGIES:
                layout = cm.pack(requests, s)
                packed = backbone.forward_packed(shared_model, items, 7, layout)
                for (eps_s, v_s), (eps_p, v_p) in zip(separate, packed):
                    worst = max(worst, float(np.max(np.abs(eps_s - eps_p))),
                                float(np.max(np.abs(v_s - v_p))))
        assert worst < 1e-9

        dims = {cfg.n_tokens(p): (p * p * cfg.c_in, cfg.c_out * p * p)
                for p in cfg.patch.supported}
        gen = np.random.default_rng(17)
        for _ in range(20):
            reqs = [(int(n), int(gen.integers(1, 9)))
                    for n in gen.choice([4, 16], size=gen.integers(1, 3),
                                        replace=False)]
            costs = {}
            for s in cm.STRATEGIES:
                try:
                    costs[s] = cm.layout_flops(cfg, cm.pack(reqs, s), dims)
                except cm.PackingError:
                    continue
            assert costs[2] == min(costs.values())

        with pytest.raises(cm.PackingError):
            cm.pack([(4, 2), (16, 1)], 4)
        print(f"criterion 5 packing: PASS (max abs {worst:.3g} < 1e-9, "
              "homogeneous batching is flop-minimal, grouping gate enforced)")


class TestC06SamplerStatistics:
    def test_gaussian_oracle_chain(self):
        mu0, var0 = 0.4, 0.7
        schedule = NoiseSchedule.linear(1000)

        # exact reverse kernel: closed-form eps plus the matching variance,
        # expressed through the same head interpolation the model would use
        ab, abp = schedule.alpha_bar, schedule.alpha_bar_prev
        true_var = schedule.betas * (abp * var0 + 1.0 - abp) / (ab * var0 + 1.0 - ab)
        v_head = (2.0 * (np.log(true_var) - schedule.posterior_log_var)
                  / (np.log(schedule.betas) - schedule.posterior_log_var) - 1.0)
        assert np.all(np.abs(v_head[1:]) <= 1.0)

        def denoise(x, t):
            eps = schedule.gaussian_oracle_eps(x, t, mu0, var0)
            return eps, (np.full_like(x, v_head[t - 1]) if t > 1 else None)

        n = 10_000
        seed = 13
        shape = (1, 100, 100)
        m_t, v_t = schedule.gaussian_marginal(schedule.t_steps, mu0, var0)
        x_init = m_t + np.sqrt(v_t) * nm.philox(seed, 0, nm.BRANCH_INIT
                                                ).standard_normal(shape)
        x0 = schedule.sample_loop(denoise, shape, seed=seed, x_init=x_init)

        se = np.sqrt(var0 / n)
        mean_err = abs(float(x0.mean()) - mu0)
        var_rel = abs(float(x0.var()) - var0) / var0
        assert mean_err < 3 * se
        assert var_rel < 0.03
        print(f"criterion 6 sampler statistics: PASS (mean off {mean_err:.2g} "
              f"< 3 SE {3 * se:.2g}, var off {var_rel:.2%} < 3%)")


class TestC07MmdEstimator:
    def test_brute_force_detection_and_null(self):
        gen = np.random.default_rng(31)
        x = gen.standard_normal((64, 3))
        y = gen.standard_normal((33, 3)) + 0.3
        bw = (0.6, 1.4)
        worst = max(
            abs(float(mmd2(x, y, bw, unbiased=u).data) - mmd2_brute(x, y, bw, u))
            for u in (True, False)
        )
        assert worst < 1e-12

        a = gen.normal(0.0, 1.0, size=(500, 1))
        b = gen.normal(1.0, 1.0, size=(500, 1))
        theta, se = mmd2_jackknife(a, b, median_bandwidths(a, b))
        sig = theta / se
        assert sig > 5.0

        c = gen.normal(0.0, 1.0, size=(500, 1))
        d = gen.normal(0.0, 1.0, size=(500, 1))
        theta0, se0 = mmd2_jackknife(c, d, median_bandwidths(c, d))
        assert abs(theta0) < 3 * se0
        print(f"criterion 7 two-sample statistic: PASS (brute force {worst:.2g}"
              f" < 1e-12, shift at {sig:.1f} sigma, null at "
              f"{abs(theta0) / se0:.2f} SE)")


class TestC08GradientSuite:
    """Central finite differences over every trainable tensor of the tiny
    geometry, through the plain, weight-sharing, and adapter paths."""

    def _participating(self, model, p):
        """Trainable tensors that sit in the graph for patch size p. Each
        size owns its norm set and patch embeds; the projection affines
        only feed the weak sizes."""
        params = dict(model.trainable())
        other = [q for q in model.cfg.patch.supported if q != p]
        out = {}
        for n, v in params.items():
            if any(n.startswith(f"norms.p{q}.") or n == f"pemb.p{q}"
                   or n.startswith(f"embed_p{q}.")
                   or n.startswith(f"deembed_p{q}.") for q in other):
                continue
            if model.flex_mode == "shared":
                if f"norms.p{p}.{n}" in params:
                    continue
                if p == model.cfg.patch.p_powerful and n.startswith("flex."):
                    continue
            out[n] = v
        return out

    def _check(self, model, p, schedule, rng, seed):
        x0 = rng.standard_normal((2, 1, 8, 8))
        noise = rng.standard_normal((2, 1, 8, 8))
        t = np.array([7, 31])
        cond = np.array([0, 2])

        def loss():
            return eps_mse_loss(model, schedule, x0, t, cond, p, noise)

        params = self._participating(model, p)
        worst = nm.finite_difference_gradient_check(
            loss, list(params.values()), rtol=1e-3, max_entries=2,
            rng=np.random.default_rng(seed))
        return set(params), worst

    def test_all_groups(self, base_model, shared_model, lora_model, schedule,
                        rng):
        active = perturbed_lora(lora_model)
        checked = set()
        worst = 0.0
        for model, p, seed in ((base_model, 2, 0), (shared_model, 4, 1),
                               (shared_model, 2, 2), (active, 4, 3)):
            names, w = self._check(model, p, schedule, rng, seed)
            checked |= names
            worst = max(worst, w)

        # every parameter family must have been exercised, including the
        # patchify embeds, the projection affines, per-size norms, and the
        # adapters on the weak path
        families = ("embed.", "deembed.", "block", "tmlp.", "cls.", "final.",
                    "flex.", "norms.p2", "norms.p4", "pemb.p", "lora.",
                    "embed_p4", "deembed_p4")
        for fam in families:
            assert any(n.startswith(fam) for n in checked), fam
        assert worst < 1e-3
        print(f"criterion 8 gradient suite: PASS ({len(checked)} tensors, "
              f"worst rel err {worst:.2g} < 1e-3)")


# ---------------------------------------------------------------------------
# criterion 9: desk-scale trend reproduction


TOY_T = 100
TOY_SEEDS = list(range(32))
TOY_LABEL = 1
TOY_DISTILL = 150


def toy_dataset(n=384, seed=0):
    """Three shape classes at a fixed center with per-sample amplitude
    jitter. The amplitude is a genuinely free low-frequency attribute, so
    early denoising steps have a real decision to commit to; a fixed
    pattern plus pixel noise would let the chain contract onto one image
    and erase every trend this gate measures."""
    gen = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:16, 0:16]
    dy, dx = yy - 8, xx - 8
    masks = [dy * dy + dx * dx <= 9,
             np.maximum(np.abs(dy), np.abs(dx)) <= 3,
             ((np.abs(dy) <= 1) & (np.abs(dx) <= 4))
             | ((np.abs(dx) <= 1) & (np.abs(dy) <= 4))]
    imgs = np.zeros((n, 1, 16, 16))
    labels = (np.arange(n) % 3).astype(np.int64)
    for i in range(n):
        img = np.full((16, 16), -1.0)
        img[masks[labels[i]]] = -1.0 + 2.0 * float(gen.uniform(0.7, 1.0))
        img += gen.normal(0.0, 0.05, (16, 16))
        imgs[i, 0] = np.clip(img, -1.0, 1.0)
    return InMemoryDataset(imgs, labels)


class Toy:
    def __init__(self):
        t0 = time.time()
        patch = PatchSpec(p_powerful=2, p_weak=4)
        cfg = ModelConfig(h=16, w=16, c_in=1, d_model=96, n_layers=3,
                          n_heads=6, patch=patch, num_classes=3,
                          learn_variance=True, lora_rank=16)
        self.data = toy_dataset()
        self.schedule = NoiseSchedule.linear(TOY_T)
        self.base = init_model(cfg, seed=0)
        n_params = sum(int(np.prod(p.shape)) for p in self.base.params.values())
        assert 3e5 < n_params < 8e5  # the gate is sized for ~0.5M

        train_shared(self.base, self.data, self.schedule,
                     TrainConfig(steps=2000, batch_size=16, seed=0,
                                 log_every=500))
        # a short distillation leaves the weak mode honestly imperfect at
        # small t, which is exactly the regime the plan-ordering gate probes
        self.flexed = flexify(self.base, "lora", seed=1)
        train_lora(self.flexed, self.data, self.schedule,
                   TrainConfig(steps=TOY_DISTILL, batch_size=16, seed=0,
                               log_every=100))

        patch_ = cfg.patch
        self.baseline_plan = scheduling.parse_plan(
            f"weak:0,powerful:{TOY_T}", patch_)
        self.baselines = {
            s: scheduling.sample_with_plan(self.base, self.schedule,
                                           self.baseline_plan, TOY_LABEL, s)
            for s in TOY_SEEDS
        }
        self.build_seconds = time.time() - t0


@pytest.fixture(scope="module")
def toy():
    return Toy()


class TestC09TrendReproduction:
    def test_a_divergence_falls_with_noise_level(self, toy):
        probes = toy.data.images[:8]
        labels = toy.data.labels[:8]
        ts = [5, 15, 25, 35, 45, 55, 65, 75, 85, 95]
        curve = analysis.divergence_curve(toy.flexed, toy.schedule, probes,
                                          ts, cond=labels, seed=3)
        rho = analysis.spearman_rank_corr(curve.ts, curve.values)
        assert rho <= -0.5
        print(f"criterion 9a divergence trend: PASS (spearman {rho:.3f} <= -0.5)")

    def test_b_weak_first_within_baseline_spread(self, toy):
        patch = toy.base.cfg.patch
        t_weak = int(0.4 * TOY_T)
        weak_first = scheduling.parse_plan(
            f"weak:{t_weak},powerful:{TOY_T - t_weak}", patch)
        weak_last = scheduling.plan_from_sizes(
            patch, [2] * (TOY_T - t_weak) + [4] * t_weak)

        d_first, d_last = [], []
        for s in TOY_SEEDS:
            wf = scheduling.sample_with_plan(toy.flexed, toy.schedule,
                                             weak_first, TOY_LABEL, s)
            wl = scheduling.sample_with_plan(toy.flexed, toy.schedule,
                                             weak_last, TOY_LABEL, s)
            d_first.append(float(np.linalg.norm(wf - toy.baselines[s])))
            d_last.append(float(np.linalg.norm(wl - toy.baselines[s])))

        spread = [float(np.linalg.norm(toy.baselines[a] - toy.baselines[b]))
                  for i, a in enumerate(TOY_SEEDS) for b in TOY_SEEDS[i + 1:]]
        p50 = float(np.percentile(spread, 50))
        # per sample: every early-weak run sits inside the baseline's own
        # seed-to-seed cloud, every late-weak run of equal budget outside it
        assert max(d_first) < p50
        assert min(d_last) > p50
        print(f"criterion 9b plan ordering: PASS (weak-first max "
              f"{max(d_first):.3f} < spread p50 {p50:.3f} < weak-last min "
              f"{min(d_last):.3f})")

    def test_c_band_removal_timing(self, toy):
        t_small, t_large = 10, 70
        l2 = {}
        for band in ("high", "low"):
            for t in (t_small, t_large):
                vals = []
                for s in TOY_SEEDS:
                    out = analysis.filtered_step_generate(
                        toy.base, toy.schedule, toy.baseline_plan, TOY_LABEL,
                        seed=s, step_to_filter=t,
                        filt=analysis.BandFilter(band, 0.5))
                    vals.append(out["l2"])
                l2[band, t] = np.asarray(vals)

        # paired per seed: dropping the low band costs more while coarse
        # content is being decided, dropping the high band costs more once
        # only detail is left to fix
        hi = l2["high", t_large] - l2["high", t_small]
        lo = l2["low", t_small] - l2["low", t_large]
        assert np.median(hi) > 0.0
        assert np.median(lo) > 0.0
        print(f"criterion 9c band timing: PASS (paired medians: high-pass "
              f"+{np.median(hi):.3f} toward large t, low-pass "
              f"+{np.median(lo):.3f} toward small t; {len(TOY_SEEDS)} seeds)")


class TestC10Reproducibility:
    def test_manifest_replay_bit_identical(self, tmp_path, capsys):
        from flexdiff.cli import main
        from flexdiff.manifest import read_manifest

        data_dir = tmp_path / "data"
        assert main(["dataset", "generate", "--classes", "3", "--count", "24",
                     "--size", "8", "--seed", "4",
                     "--out", str(data_dir)]) == 0
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            "[model]\nh = 8\nw = 8\nc_in = 1\nd_model = 16\nn_layers = 2\n"
            "n_heads = 2\nnum_classes = 3\nlearn_variance = true\n"
            "lora_rank = 2\np_powerful = 2\np_weak = 4\n"
            "[train]\nsteps = 3\nbatch_size = 4\nlog_every = 1\n"
            "[diffusion]\nt_steps = 50\n")
        train_dir = tmp_path / "train"
        assert main(["train", "--config", str(cfg), "--data",
                     str(data_dir / "data.fxdt"), "--quiet",
                     "--out", str(train_dir)]) == 0
        lora_dir = tmp_path / "lora"
        assert main(["flexify", "--ckpt", str(train_dir / "checkpoint.fxck"),
                     "--mode", "lora", "--config", str(cfg), "--data",
                     str(data_dir / "data.fxdt"), "--set", "train.steps=2",
                     "--quiet", "--out", str(lora_dir)]) == 0
        sample_dir = tmp_path / "sample"
        assert main(["sample", "--ckpt", str(lora_dir / "checkpoint.fxck"),
                     "--plan", "weak:10,powerful:15", "--count", "2",
                     "--seed", "6", "--out", str(sample_dir)]) == 0

        n_checked = 0
        for src in (data_dir, sample_dir):
            redo = tmp_path / (src.name + "_redo")
            assert main(["replay", "--manifest-dir", str(src),
                         "--out", str(redo)]) == 0
            for name in read_manifest(src).artifacts:
                assert (src / name).read_bytes() == (redo / name).read_bytes()
                n_checked += 1
        capsys.readouterr()
        print(f"criterion 10 replay: PASS ({n_checked} artifacts bit-identical)")

    def test_resume_matches_uninterrupted_loss_trace(self, shared_model,
                                                     schedule, rng):
        import copy

        data = InMemoryDataset(rng.uniform(-1, 1, (12, 1, 8, 8)),
                               rng.integers(0, 3, 12))
        tcfg = lambda n: TrainConfig(steps=n, batch_size=4, seed=5,
                                     ema_rate=0.99, log_every=1)

        full = train_shared(copy.deepcopy(shared_model), data, schedule,
                            tcfg(6))
        model = copy.deepcopy(shared_model)
        head = train_shared(model, data, schedule, tcfg(3))
        tail = train_shared(model, data, schedule, tcfg(3),
                            start_step=head.start_step,
                            optimizer=head.optimizer, ema=head.ema,
                            start_flops=head.total_flops)

        def losses(lines):
            return [float(tok.split("=")[1]) for line in lines
                    for tok in line.split() if tok.startswith("loss=")]

        got = losses(head.metrics + tail.metrics)
        want = losses(full.metrics)
        worst = max(abs(a - b) for a, b in zip(got, want))
        assert len(got) == len(want) == 6
        assert worst <= 1e-12
        print(f"criterion 10 resume: PASS (loss trace gap {worst:.2g} <= 1e-12)")
