"""Command-line surface.

Subcommands: train, flexify, sample, flops, pack-plan,
analyze {filter-step, divergence, activation-distance, diversity},
dataset {generate, inspect}, replay.

Config precedence is flags > config file > built-in defaults; unknown
keys are hard errors. Every run that owns an output directory takes a
lockfile there and leaves a manifest sufficient to replay it. Exit
codes: 0 ok, 2 config/usage error, 3 data/integrity error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import analysis, backbone, checkpoint, costmodel, datasets, diffusion
from . import images as imgio
from . import manifest as mf
from . import scheduling, training
from .analysis import AnalysisError
from .backbone import BackboneError
from .checkpoint import CheckpointError
from .config import ConfigError, config_hash, load_config_file, resolve
from .costmodel import PackingError
from .datasets import DataError
from .diffusion import DiffusionError
from .images import ImageError
from .manifest import ManifestError, RunManifest
from .scheduling import SchedulerError
from .tokenizer import TokenizerError
from .training import TrainingError

TRAIN_SCHEMA: dict[str, tuple[str, object]] = {
    "train.steps": ("int", 200),
    "train.batch_size": ("int", 16),
    "train.lr": ("float", 8e-4),
    "train.weight_decay": ("float", 1e-2),
    "train.clip_norm": ("float", 0.02),
    "train.ema_rate": ("float", 0.9999),
    "train.seed": ("int", 0),
    "train.label_drop": ("float", 0.1),
    "train.mmd_weight": ("float", 0.0),
    "train.mmd_every": ("int", 1),
    "train.bootstrap_steps": ("ints", ()),
    "train.log_every": ("int", 10),
    "diffusion.t_steps": ("int", 1000),
}


# --------------------------------------------------------------------------
# shared plumbing


def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, eq, val = pair.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"--set wants key=value, got {pair!r}")
        out[key.strip()] = val.strip()
    return out


def _resolve(schema, config_path, set_pairs) -> dict:
    file_values = load_config_file(config_path) if config_path else {}
    # --set pairs are raw strings like file values; they win by overwrite
    file_values.update(_parse_sets(set_pairs))
    return resolve(schema, file_values)


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _schema_ignoring_model() -> dict:
    """Model geometry comes from a checkpoint; [model] keys in a reused
    config file are accepted and ignored rather than rejected."""
    dummies = {"int": 0, "float": 0.0, "str": "", "bool": False, "ints": ()}
    ignored = {k: (t, dummies[t]) for k, (t, _) in checkpoint.MODEL_SCHEMA.items()}
    return {**ignored, **TRAIN_SCHEMA}


def _load_model(path, use_ema: bool = False):
    ckpt = checkpoint.load_checkpoint(path)
    model = ckpt.model
    if use_ema:
        if not ckpt.ema:
            raise CheckpointError("checkpoint has no EMA section")
        for k, arr in ckpt.ema.items():
            if k not in model.params:
                raise CheckpointError(f"EMA tensor {k!r} has no parameter")
            model.params[k].data = arr.copy()
    return ckpt, model


def _labels_for(args_labels: str | None, count: int, num_classes: int):
    """Per-sample class labels; 'none' means unconditional."""
    if args_labels == "none":
        return [None] * count
    if args_labels:
        pool = [int(v) for v in args_labels.split(",")]
    elif num_classes > 0:
        pool = list(range(num_classes))
    else:
        return [None] * count
    return [pool[i % len(pool)] for i in range(count)]


def _build_plan(args, patch) -> scheduling.InferencePlan:
    text = args.plan or f"weak:0,powerful:{args.steps}"
    plan = scheduling.parse_plan(text, patch, ratio=args.cfg_ratio)
    if args.cfg_scale is None:
        return plan
    if plan.guidance is not None:
        raise SchedulerError("plan text already carries cfg; drop --cfg-scale")
    if args.guidance_steps:
        x_s, _, y_s = args.guidance_steps.partition("/")
        gx, gy = int(x_s), int(y_s)
    else:
        gx = gy = plan.t_powerful
    return scheduling.make_plan(
        patch, plan.t_steps, plan.t_weak,
        guidance=scheduling.GuidanceConfig.from_scale(args.cfg_scale,
                                                      ratio=args.cfg_ratio),
        guidance_steps=(gx, gy),
    )


def _packing_arg(value: str | None, model, plan) -> int | None:
    if value is None or value == "none":
        return None
    if value != "auto":
        return int(value)
    sizes = {(e.p_cond, e.p_uncond) for e in plan.entries if e.p_uncond is not None}
    mixed = [s for s in sizes if s[0] != s[1]]
    if not mixed:
        return None
    p_c, p_u = mixed[0]
    cfg = model.cfg
    requests = [(cfg.n_tokens(p_c), 1), (cfg.n_tokens(p_u), 1)]
    dims = _embed_dims(cfg)
    return costmodel.choose_strategy(cfg, requests, dims)


def _embed_dims(cfg) -> dict[int, tuple[int, int]]:
    return {
        cfg.n_tokens(p): (p * p * cfg.c_in, cfg.c_out * p * p)
        for p in cfg.patch.supported
    }


def _metrics_csv(lines: list[str]) -> str:
    rows = []
    cols: list[str] = []
    for line in lines:
        row = dict(tok.split("=", 1) for tok in line.split())
        for k in row:
            if k not in cols:
                cols.append(k)
        rows.append(row)
    out = [",".join(cols)]
    out += [",".join(row.get(k, "") for k in cols) for row in rows]
    return "\n".join(out) + "\n"


def _write_text(out_dir: str, name: str, text: str, m: RunManifest) -> None:
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        f.write(text)
    m.add_artifact(path)


class _OutDir:
    """Creates the directory, holds the lock, writes the manifest on exit."""

    def __init__(self, path: str, m: RunManifest):
        self.path = str(path)
        self.manifest = m

    def __enter__(self) -> "_OutDir":
        os.makedirs(self.path, exist_ok=True)
        self.lock = mf.acquire_lock(self.path)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            if exc_type is None:
                mf.write_manifest(self.path, self.manifest)
        finally:
            mf.release_lock(self.lock)


def _save_model_checkpoint(out_dir: str, model, result, seed: int,
                           opt: training.AdamW, m: RunManifest) -> None:
    data = checkpoint.CheckpointData(
        model=model,
        ema=result.ema.shadow,
        opt_m=opt.m,
        opt_v=opt.v,
        state={"step": result.start_step, "seed": seed,
               "flops": result.total_flops},
    )
    path = os.path.join(out_dir, "checkpoint.fxck")
    checkpoint.save_checkpoint(path, data)
    m.add_artifact(path)


# --------------------------------------------------------------------------
# train / flexify


def _train_config(values: dict, patch_sizes=None) -> training.TrainConfig:
    boot = None
    if values["train.mmd_weight"] > 0.0:
        steps = tuple(values["train.bootstrap_steps"])
        if not steps:
            raise ConfigError("train.mmd_weight needs train.bootstrap_steps")
        if patch_sizes is None or len(steps) != len(patch_sizes):
            raise ConfigError(
                "train.bootstrap_steps needs one entry per supported patch size"
            )
        boot = training.BootstrapSchedule(patch_sizes=tuple(patch_sizes),
                                          steps=steps)
    return training.TrainConfig(
        steps=values["train.steps"],
        batch_size=values["train.batch_size"],
        lr=values["train.lr"],
        weight_decay=values["train.weight_decay"],
        clip_norm=values["train.clip_norm"],
        ema_rate=values["train.ema_rate"],
        seed=values["train.seed"],
        label_drop=values["train.label_drop"],
        mmd_weight=values["train.mmd_weight"],
        mmd_every=values["train.mmd_every"],
        bootstrap=boot,
        log_every=values["train.log_every"],
    )


def cmd_train(args) -> int:
    schema = (_schema_ignoring_model() if args.resume
              else {**checkpoint.MODEL_SCHEMA, **TRAIN_SCHEMA})
    values = _resolve(schema, args.config, args.set)
    if args.seed is not None:
        values["train.seed"] = args.seed
    if args.resume:
        ckpt = checkpoint.load_checkpoint(args.resume)
        model = ckpt.model
        state = ckpt.state or {}
        start = int(state.get("step", 0))
        # the stored seed wins: per-step RNG continuity needs it
        values["train.seed"] = int(state.get("seed", values["train.seed"]))
    else:
        cfg, flex_mode, _ = checkpoint.model_config_from_values(values)
        if flex_mode is not None:
            raise ConfigError("train starts from a base model; use flexify")
        model = backbone.init_model(cfg, seed=values["train.seed"])
        ckpt, start = None, 0

    tcfg = _train_config(values, model.cfg.patch.supported)
    remaining = tcfg.steps - start
    if remaining <= 0:
        raise ConfigError(f"train.steps={tcfg.steps} already reached ({start})")
    tcfg.steps = remaining

    data = datasets.InMemoryDataset.from_file(args.data)
    schedule = diffusion.NoiseSchedule.linear(values["diffusion.t_steps"])

    opt = ema = None
    if args.resume:
        trainable = model.trainable()
        opt = training.AdamW(trainable, lr=tcfg.lr,
                             weight_decay=tcfg.weight_decay,
                             clip_norm=tcfg.clip_norm)
        if set(ckpt.opt_m or {}) != set(trainable):
            raise CheckpointError("optimizer state does not match trainables")
        opt.m, opt.v = dict(ckpt.opt_m), dict(ckpt.opt_v)
        opt.step_count = start
        ema = training.EMA(trainable, rate=tcfg.ema_rate)
        if set(ckpt.ema or {}) != set(trainable):
            raise CheckpointError("EMA state does not match trainables")
        ema.shadow = {k: v.copy() for k, v in ckpt.ema.items()}

    m = RunManifest(command="train", argv=list(args.argv),
                    seed=tcfg.seed, config_hash=config_hash(values))
    with _OutDir(args.out, m):
        trainer = training.train_lora if model.flex_mode == "lora" else training.train_shared
        start_flops = int((ckpt.state or {}).get("flops", 0)) if args.resume else 0
        result = trainer(model, data, schedule, tcfg, sink=_stdout_sink(args),
                         start_step=start, optimizer=opt, ema=ema,
                         start_flops=start_flops)
        _save_model_checkpoint(args.out, model, result, tcfg.seed,
                               result.optimizer, m)
        _write_text(args.out, "metrics.csv", _metrics_csv(result.metrics), m)
        m.extra["steps"] = str(result.start_step)
        m.extra["train_flops"] = str(result.total_flops)
    return 0


def _stdout_sink(args):
    if getattr(args, "quiet", False):
        return None
    return lambda line: print(line)


def cmd_flexify(args) -> int:
    ckpt, model = _load_model(args.ckpt)
    values = _resolve(_schema_ignoring_model(), args.config, args.set)
    if args.seed is not None:
        values["train.seed"] = args.seed
    flexed = backbone.flexify(model, args.mode, seed=values["train.seed"])

    tcfg = _train_config(values, flexed.cfg.patch.supported)
    if args.no_train:
        tcfg.steps = 0

    m = RunManifest(command="flexify", argv=list(args.argv), seed=tcfg.seed,
                    config_hash=config_hash(values))
    with _OutDir(args.out, m):
        if tcfg.steps > 0:
            if not args.data:
                raise ConfigError("flexify training needs --data")
            data = datasets.InMemoryDataset.from_file(args.data)
            schedule = diffusion.NoiseSchedule.linear(values["diffusion.t_steps"])
            trainer = (training.train_lora if args.mode == "lora"
                       else training.train_shared)
            result = trainer(flexed, data, schedule, tcfg,
                             sink=_stdout_sink(args))
            if args.merge:
                flexed = backbone.merge_loras(flexed)
                result.model = flexed
            _save_model_checkpoint(args.out, flexed, result, tcfg.seed,
                                   result.optimizer, m)
            _write_text(args.out, "metrics.csv", _metrics_csv(result.metrics), m)
        else:
            if args.merge:
                flexed = backbone.merge_loras(flexed)
            trainable = flexed.trainable()
            data = checkpoint.CheckpointData(
                model=flexed,
                ema={k: v.data.copy() for k, v in trainable.items()},
                state={"step": 0, "seed": tcfg.seed},
            )
            path = os.path.join(args.out, "checkpoint.fxck")
            checkpoint.save_checkpoint(path, data)
            m.add_artifact(path)
        counts = costmodel.parameter_accounting(
            {k: v for k, v in model.params.items()},
            {k: v for k, v in flexed.params.items() if k not in model.params},
        )
        m.extra.update({k: str(v) for k, v in counts.items()
                        if not isinstance(v, dict)})
    return 0


# --------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    ckpt, model = _load_model(args.ckpt, use_ema=args.ema)
    cfg = model.cfg
    plan = _build_plan(args, cfg.patch)
    packing = _packing_arg(args.packing, model, plan)
    schedule = diffusion.NoiseSchedule.linear(plan.t_steps)
    labels = _labels_for(args.labels, args.count, cfg.num_classes)

    m = RunManifest(command="sample", argv=list(args.argv), seed=args.seed,
                    config_hash=_hash_text(
                        checkpoint.config_to_text(cfg, model.flex_mode,
                                                  model.merged)),
                    plan=scheduling.serialize_plan(plan))
    with _OutDir(args.out, m):
        samples = np.zeros((args.count, cfg.c_in, cfg.h, cfg.w))
        for i in range(args.count):
            cond = None if labels[i] is None else labels[i]
            samples[i] = scheduling.sample_with_plan(
                model, schedule, plan, cond, args.seed + i,
                method=args.method, packing=packing)
            if cfg.c_in in (1, 3):
                ext = "pgm" if cfg.c_in == 1 else "ppm"
                path = os.path.join(args.out, f"sample_{i:03d}.{ext}")
                imgio.write_image(path, samples[i])
                m.add_artifact(path)
        label_arr = (None if labels[0] is None
                     else np.asarray(labels, dtype=np.uint32))
        fxdt = os.path.join(args.out, "samples.fxdt")
        datasets.write_fxdt(fxdt, imgio.quantize(samples), label_arr)
        m.add_artifact(fxdt)
        if cfg.c_in in (1, 3):
            grid = os.path.join(args.out, "grid." + ("pgm" if cfg.c_in == 1 else "ppm"))
            imgio.write_grid(grid, samples)
            m.add_artifact(grid)

        report = _flops_report_text(cfg, plan,
                                    lora_unmerged=(model.flex_mode == "lora"
                                                   and not model.merged),
                                    shared=(model.flex_mode == "shared"))
        _write_text(args.out, "report.txt", report, m)
        m.flops = costmodel.plan_flops(
            cfg, plan, lora_unmerged=(model.flex_mode == "lora"
                                      and not model.merged))["total"]
    return 0


# --------------------------------------------------------------------------
# flops / pack-plan


def _model_cfg_from_args(args):
    if args.ckpt:
        _, model = _load_model(args.ckpt)
        return model.cfg, model.flex_mode, model.merged
    if not args.config and not args.set:
        raise ConfigError("need --config or --ckpt to shape the model")
    # full training config files reuse fine; only [model] matters here
    schema = {**checkpoint.MODEL_SCHEMA, **TRAIN_SCHEMA}
    values = _resolve(schema, args.config, args.set)
    return checkpoint.model_config_from_values(values)


def _ffn_step(rep: costmodel.FlopsReport) -> int:
    return rep["attention-linears"] + rep["mlp"]


def _flops_report_text(cfg, plan=None, lora_unmerged: bool = False,
                       shared: bool = False) -> str:
    lines = []
    for p in cfg.patch.supported:
        rep = costmodel.flops_per_step(cfg, p, lora_unmerged=lora_unmerged,
                                       shared=shared)
        for part in sorted(rep.components):
            lines.append(f"step.p{p}.{part} = {rep.components[part]}")
        lines.append(f"step.p{p}.total = {rep.total}")
    p_pow, p_weak = cfg.patch.p_powerful, cfg.patch.p_weak
    rep_w = costmodel.flops_per_step(cfg, p_weak)
    rep_p = costmodel.flops_per_step(cfg, p_pow)
    lines.append(f"ratio.token_path = {rep_w.token_path_total() / rep_p.token_path_total():.6g}")
    ffn_ratio = _ffn_step(rep_w) / _ffn_step(rep_p)
    lines.append(f"ratio.ffn = {ffn_ratio:.6g}")
    if plan is not None:
        totals = costmodel.plan_flops(cfg, plan, lora_unmerged=lora_unmerged)
        lines.append(f"plan.text = {scheduling.serialize_plan(plan)}")
        lines.append(f"plan.total = {totals['total']}")
        lines.append(f"plan.baseline = {totals['baseline']}")
        lines.append(f"plan.fraction = {totals['fraction']:.6g}")
        frac_ffn = costmodel.plan_fraction(plan.t_steps, plan.t_weak, ffn_ratio)
        lines.append(f"plan.fraction_ffn = {frac_ffn:.6g}")
    return "\n".join(lines) + "\n"


def _human_table(cfg) -> str:
    parts = ["embed", "attention-linears", "attention-matmuls", "mlp",
             "de-embed", "cond"]
    rows = [["component"] + [f"p={p}" for p in cfg.patch.supported]]
    reps = {p: costmodel.flops_per_step(cfg, p) for p in cfg.patch.supported}
    for part in parts:
        rows.append([part] + [str(reps[p][part]) for p in cfg.patch.supported])
    rows.append(["total"] + [str(reps[p].total) for p in cfg.patch.supported])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows
    ) + "\n"


def cmd_flops(args) -> int:
    cfg, flex_mode, merged = _model_cfg_from_args(args)
    plan = None
    if args.plan:
        plan = _build_plan(args, cfg.patch)
    report = _flops_report_text(cfg, plan,
                                lora_unmerged=(flex_mode == "lora" and not merged),
                                shared=(flex_mode == "shared"))
    print(report, end="")
    print()
    print(_human_table(cfg), end="")
    m = RunManifest(command="flops", argv=list(args.argv),
                    plan=scheduling.serialize_plan(plan) if plan else "")
    if args.out:
        with _OutDir(args.out, m):
            _write_text(args.out, "report.txt", report, m)
    else:
        print("\n# manifest")
        print(m.to_text(), end="")
    return 0


def _parse_requests(text: str, cfg) -> list[tuple[int, int]]:
    names = {"weak": cfg.patch.p_weak, "powerful": cfg.patch.p_powerful}
    names.update({f"p{p}": p for p in cfg.patch.supported})
    requests = []
    for seg in text.split(","):
        name, _, count = seg.partition(":")
        name = name.strip()
        if name not in names:
            raise PackingError(f"unknown request size {name!r}")
        requests.append((cfg.n_tokens(names[name]), int(count)))
    return requests


def cmd_pack_plan(args) -> int:
    cfg, _, _ = _model_cfg_from_args(args)
    requests = _parse_requests(args.requests, cfg)
    dims = _embed_dims(cfg)
    lines = []
    strategies = (costmodel.STRATEGIES if args.packing in (None, "auto")
                  else (int(args.packing),))
    best = None
    for s in strategies:
        try:
            layout = costmodel.pack(requests, s)
        except PackingError as e:
            lines.append(f"strategy.{s}.feasible = false  # {e}")
            continue
        fl = costmodel.layout_flops(cfg, layout, dims)
        lat = costmodel.latency_proxy(cfg, layout, dims)
        lines.append(f"strategy.{s}.launches = {layout.launches}")
        lines.append(f"strategy.{s}.padding = {layout.padding()}")
        lines.append(f"strategy.{s}.flops = {fl}")
        lines.append(f"strategy.{s}.latency = {lat:.6g}")
        if best is None or lat < best[0]:
            best = (lat, s)
    if best is not None and args.packing in (None, "auto"):
        lines.append(f"chosen = {best[1]}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    m = RunManifest(command="pack-plan", argv=list(args.argv))
    if args.out:
        with _OutDir(args.out, m):
            _write_text(args.out, "report.txt", text, m)
    else:
        print("\n# manifest")
        print(m.to_text(), end="")
    return 0


# --------------------------------------------------------------------------
# analyze


def cmd_analyze_filter_step(args) -> int:
    _, model = _load_model(args.ckpt, use_ema=args.ema)
    cfg = model.cfg
    plan = _build_plan(args, cfg.patch)
    schedule = diffusion.NoiseSchedule.linear(plan.t_steps)
    filt = analysis.BandFilter(args.band, args.cutoff)
    cond = None if args.label is None else args.label

    m = RunManifest(command="analyze filter-step", argv=list(args.argv),
                    seed=args.seed, plan=scheduling.serialize_plan(plan))
    with _OutDir(args.out, m):
        out = analysis.filtered_step_generate(model, schedule, plan, cond,
                                              args.seed, args.step, filt)
        if cfg.c_in in (1, 3):
            ext = "pgm" if cfg.c_in == 1 else "ppm"
            for name in ("reference", "filtered"):
                path = os.path.join(args.out, f"{name}.{ext}")
                imgio.write_image(path, out[name])
                m.add_artifact(path)
        report = (f"step = {args.step}\nband = {args.band}\n"
                  f"cutoff = {args.cutoff:g}\nl2 = {out['l2']:.17g}\n"
                  f"ssim = {out['ssim']:.17g}\n")
        _write_text(args.out, "report.txt", report, m)
        print(report, end="")
    return 0


def cmd_analyze_divergence(args) -> int:
    _, model = _load_model(args.ckpt, use_ema=args.ema)
    imgs, labels, _ = datasets.load_fxdt(args.data)
    n = min(args.count, imgs.shape[0])
    probes, cond = imgs[:n], (labels[:n] if labels is not None else None)
    if args.ts:
        ts = [int(v) for v in args.ts.split(",")]
    else:
        ts = sorted(set(np.linspace(1, args.steps, 8).round().astype(int)))
    schedule = diffusion.NoiseSchedule.linear(args.steps)

    m = RunManifest(command="analyze divergence", argv=list(args.argv),
                    seed=args.seed)
    with _OutDir(args.out, m):
        curve = analysis.divergence_curve(model, schedule, probes, ts,
                                          cond=cond, seed=args.seed)
        rho = analysis.spearman_rank_corr(curve.ts, curve.values)
        _write_text(args.out, "curve.csv", analysis.curve_to_csv(curve), m)
        report = f"spearman = {rho:.17g}\nprobes = {curve.n_probes}\n"
        _write_text(args.out, "report.txt", report, m)
        print(report, end="")
    return 0


def cmd_analyze_activation_distance(args) -> int:
    _, model = _load_model(args.ckpt, use_ema=args.ema)
    cfg = model.cfg
    p = cfg.patch.p_weak if args.patch == "weak" else cfg.patch.p_powerful
    schedule = diffusion.NoiseSchedule.linear(args.steps)
    cond = None if args.label is None else args.label
    taps = ([f"block{i}" for i in range(cfg.n_layers)]
            if args.taps == "all" else args.taps.split(","))

    m = RunManifest(command="analyze activation-distance",
                    argv=list(args.argv), seed=args.seed)
    with _OutDir(args.out, m):
        snaps = analysis.record_trajectory(model, schedule, p, cond, args.seed)
        names, mat = analysis.activation_distance(model, snaps, cond, p, taps)
        _write_text(args.out, "matrix.csv", analysis.matrix_to_csv(names, mat), m)
        print(f"taps = {len(names)}")
        print(f"steps = {mat.shape[1]}")
    return 0


def cmd_analyze_diversity(args) -> int:
    _, model = _load_model(args.ckpt, use_ema=args.ema)
    cfg = model.cfg
    plan = _build_plan(args, cfg.patch)
    schedule = diffusion.NoiseSchedule.linear(plan.t_steps)
    labels = _labels_for(args.labels, args.count, cfg.num_classes)

    m = RunManifest(command="analyze diversity", argv=list(args.argv),
                    seed=args.seed, plan=scheduling.serialize_plan(plan))
    with _OutDir(args.out, m):
        samples = np.zeros((args.count, cfg.c_in, cfg.h, cfg.w))
        for i in range(args.count):
            cond = None if labels[i] is None else labels[i]
            samples[i] = scheduling.sample_with_plan(
                model, schedule, plan, cond, args.seed + i)
        rep = analysis.diversity_report(samples)
        report = "".join(f"{k} = {v:.17g}\n" for k, v in sorted(rep.items()))
        _write_text(args.out, "report.txt", report, m)
        if cfg.c_in in (1, 3):
            grid = os.path.join(args.out,
                                "grid." + ("pgm" if cfg.c_in == 1 else "ppm"))
            imgio.write_grid(grid, samples)
            m.add_artifact(grid)
        print(report, end="")
    return 0


# --------------------------------------------------------------------------
# dataset


def cmd_dataset_generate(args) -> int:
    spec = datasets.SyntheticSpec(
        num_classes=args.classes, h=args.size, w=args.size, c=args.channels,
        count=args.count, family=args.family, seed=args.seed)
    m = RunManifest(command="dataset generate", argv=list(args.argv),
                    seed=args.seed)
    with _OutDir(args.out, m):
        imgs, labels, acc = datasets.generate(spec)
        path = os.path.join(args.out, "data.fxdt")
        datasets.write_fxdt(path, imgs, labels)
        m.add_artifact(path)
        m.extra["probe_accuracy"] = f"{acc:.6g}"
        m.extra["family"] = args.family
        print(f"count = {args.count}")
        print(f"probe_accuracy = {acc:.6g}")
    return 0


def cmd_dataset_inspect(args) -> int:
    with open(args.data, "rb") as f:
        header = datasets.read_fxdt_header(f)
    print(f"count = {header.count}")
    print(f"shape = {header.c}x{header.h}x{header.w}")
    print(f"labels = {'yes' if header.has_labels else 'no'}")
    imgs, labels, _ = datasets.load_fxdt(args.data)
    print(f"pixel_min = {imgs.min():.6g}")
    print(f"pixel_max = {imgs.max():.6g}")
    print(f"pixel_mean = {imgs.mean():.6g}")
    if labels is not None:
        counts = np.bincount(labels)
        print("class_counts = " + ",".join(str(int(v)) for v in counts))
    m = RunManifest(command="dataset inspect", argv=list(args.argv))
    if args.out:
        with _OutDir(args.out, m):
            pass
    return 0


# --------------------------------------------------------------------------
# replay


def cmd_replay(args) -> int:
    recorded = mf.read_manifest(args.manifest_dir)
    argv = list(recorded.argv)
    if "--out" not in argv:
        raise ManifestError("recorded argv has no --out to redirect")
    argv[argv.index("--out") + 1] = str(args.out)
    rc = main(argv)
    if rc != 0:
        return rc
    replayed = mf.read_manifest(args.out)
    bad = mf.compare_artifacts(recorded, replayed)
    if bad:
        for name in bad:
            print(f"mismatch: {name}")
        raise DataError(f"{len(bad)} artifact(s) differ from the manifest")
    print(f"replay ok: {len(replayed.artifacts)} artifact(s) match")
    return 0


# --------------------------------------------------------------------------
# argument wiring


def _add_common(p: argparse.ArgumentParser, ckpt: bool = False,
                plan: bool = False, out_required: bool = True) -> None:
    if ckpt:
        p.add_argument("--ckpt", required=True, help="FXCK checkpoint path")
        p.add_argument("--ema", action="store_true",
                       help="load the EMA weights instead of the raw ones")
    if plan:
        p.add_argument("--plan", default=None,
                       help='e.g. "weak:180,powerful:70;guidance=70/70;cfg=4.0"')
        p.add_argument("--steps", type=int, default=250,
                       help="sampling steps when --plan is omitted")
        p.add_argument("--cfg-scale", type=float, default=None)
        p.add_argument("--cfg-ratio", type=float,
                       default=scheduling.DEFAULT_SCALE_RATIO)
        p.add_argument("--guidance-steps", default=None, metavar="X/Y")
    p.add_argument("--seed", type=int, default=0 if ckpt or plan else None)
    if out_required:
        p.add_argument("--out", required=True, help="output directory")
    else:
        p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="flexdiff")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain or continue a model")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue")
    p.add_argument("--quiet", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flexify", help="extend a checkpoint to weak patch sizes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True, choices=("shared", "lora"))
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", default=None)
    p.add_argument("--merge", action="store_true",
                   help="also merge adapters into per-size weights")
    p.add_argument("--no-train", action="store_true")
    p.add_argument("--quiet", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_flexify)

    p = sub.add_parser("sample", help="generate images under a plan")
    _add_common(p, ckpt=True, plan=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--labels", default=None,
                   help='comma class list, or "none" for unconditional')
    p.add_argument("--packing", default=None,
                   help="1..4, auto, or none (separate branch forwards)")
    p.add_argument("--method", default="ancestral",
                   choices=("ancestral", "ddim"))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("flops", help="analytic compute report")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--ckpt", default=None)
    _add_common(p, plan=True, out_required=False)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("pack-plan", help="compare batch packing strategies")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--requests", required=True,
                   help='e.g. "weak:6,powerful:2"')
    p.add_argument("--packing", default=None, help="1..4 or auto")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pack_plan)

    pa = sub.add_parser("analyze", help="trained-model diagnostics")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("filter-step", help="band-filter one step's prediction")
    _add_common(p, ckpt=True, plan=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--band", required=True, choices=("low", "high", "all"))
    p.add_argument("--cutoff", type=float, default=0.5)
    p.add_argument("--label", type=int, default=None)
    p.set_defaults(func=cmd_analyze_filter_step)

    p = asub.add_parser("divergence", help="weak-vs-powerful prediction gap")
    _add_common(p, ckpt=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--ts", default=None, help="comma timestep list")
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_analyze_divergence)

    p = asub.add_parser("activation-distance",
                        help="per-layer drift across sampling steps")
    _add_common(p, ckpt=True)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--patch", default="powerful", choices=("weak", "powerful"))
    p.add_argument("--taps", default="all")
    p.add_argument("--label", type=int, default=None)
    p.set_defaults(func=cmd_analyze_activation_distance)

    p = asub.add_parser("diversity", help="pairwise sample spread")
    _add_common(p, ckpt=True, plan=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--labels", default=None)
    p.set_defaults(func=cmd_analyze_diversity)

    pd = sub.add_parser("dataset", help="synthetic data tooling")
    dsub = pd.add_subparsers(dest="dataset_cmd", required=True)

    p = dsub.add_parser("generate")
    p.add_argument("--family", default="gaussian-blobs",
                   choices=datasets.FAMILIES)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_generate)

    p = dsub.add_parser("inspect")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dataset_inspect)

    p = sub.add_parser("replay", help="re-run a manifest and verify artifacts")
    p.add_argument("--manifest-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    return root


_CONFIG_ERRORS = (ConfigError, SchedulerError, TrainingError, BackboneError,
                  DiffusionError, PackingError, TokenizerError, AnalysisError)
_DATA_ERRORS = (DataError, CheckpointError, ImageError, ManifestError,
                FileNotFoundError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
