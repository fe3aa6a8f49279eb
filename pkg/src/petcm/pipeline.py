"""Implementations behind the ``petcm`` subcommands.

Each ``cmd_*`` takes the effective flat config dict and an output directory,
writes its artifacts and appends one record to ``<out>/manifest.json``.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from .data_model import ImageGrid, PairedSlice, apply_norm, background_mask, denormalize, joint_range
from .denoiser import DenoiserConfig, param_checksum
from .io import (append_manifest, list_images, load_checkpoint, load_tensors, read_image,
                 read_json, save_checkpoint, save_tensors, write_image, write_json)
from .metrics import MetricReport, aggregate, evaluate_pair
from .patcher import sliding_window
from .phantom import PhantomSpec, make_raw_pairs, norm_params_for
from .plotting import montage_array, save_metric_bars, save_montage_png, write_pgm
from .sampler import SamplePlan, generate, parse_plan, sub_seed
from .schedule import KarrasSchedule, build_grid
from .trainer import TrainConfig, TrainState, fit

log = logging.getLogger(__name__)

DEFAULTS = {
    # data generation
    "n": 100, "fractions": [0.125, 0.25], "size": [64, 64], "counts_scale": 50.0,
    "n_ellipses": 3, "lesion_count": 2, "norm_scope": "pair",
    # schedule
    "eps": 0.001, "t_max": 100.0, "steps": 150, "rho": 7.0,
    # denoiser
    "levels": 3, "channels_per_level": [16, 32, 64], "window_size": 4, "attn_heads": 2,
    "embed_dim": 128, "embed_max_period": 1e6, "sigma_data": 0.5, "time_scale": 1000.0,
    "time_input": "log",
    # training
    "gamma": 0.5, "lr": 2e-5, "weight_decay": 1e-4, "ema_decay": 0.99, "epochs": 200,
    "batch": 8, "checkpoint_every": 10,
    # sampling
    "plans": ["2step"], "mc": 3, "use_ema": True, "patch": 64, "stride": 64, "pad_to": None,
    # evaluation / report
    "rel_threshold": 0.05, "n_montage": 4,
    # shared
    "seed": 0, "fraction": None,
    "data": None, "checkpoint": None, "pred": [], "ref": None, "low": None, "roi": None,
    "eval": None,
}

METRIC_FIELDS = ("nmae_pct", "psnr_db", "ms_ssim", "ncc", "suv_error_pct", "mask_fraction")
BASELINE = "low_dose"


def frac_dirname(fraction: float) -> str:
    return f"low_{fraction:g}"


def schedule_from(cfg) -> KarrasSchedule:
    return build_grid(cfg["eps"], cfg["t_max"], cfg["steps"], cfg["rho"])


def denoiser_config_from(cfg) -> DenoiserConfig:
    return DenoiserConfig(levels=cfg["levels"], channels_per_level=tuple(cfg["channels_per_level"]),
                          window_size=cfg["window_size"], attn_heads=cfg["attn_heads"],
                          embed_dim=cfg["embed_dim"], embed_max_period=cfg["embed_max_period"],
                          sigma_data=cfg["sigma_data"], eps=cfg["eps"], time_scale=cfg["time_scale"],
                          time_input=cfg["time_input"],
                          patch=cfg["patch"])


def train_config_from(cfg) -> TrainConfig:
    return TrainConfig(gamma=cfg["gamma"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                       ema_decay=cfg["ema_decay"], epochs=cfg["epochs"], batch=cfg["batch"],
                       seed=cfg["seed"])


def _f32(grid: ImageGrid) -> ImageGrid:
    # round through float32 so normalization matches what is stored on disk
    return grid.with_data(grid.data.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------- generate-data

def cmd_generate_data(cfg, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(size=tuple(cfg["size"]), n_ellipses=cfg["n_ellipses"],
                       lesion_count=cfg["lesion_count"], counts_scale=cfg["counts_scale"],
                       seed=cfg["seed"])
    fractions = [cfg["fraction"]] if cfg.get("fraction") else list(cfg["fractions"])
    raw = [(i, frac, _f32(full), _f32(low), roi)
           for i, frac, full, low, roi in make_raw_pairs(cfg["n"], fractions, spec)]
    params = norm_params_for([(f, l) for _, _, f, l, _ in raw], cfg["norm_scope"])
    dirs = {"full": out / "full", "roi": out / "roi"}
    for frac in fractions:
        dirs[frac_dirname(frac)] = out / frac_dirname(frac)
    for d in dirs.values():
        d.mkdir(exist_ok=True)
    for (i, frac, full, low, roi), p in zip(raw, params):
        name = f"{i:04d}"
        write_image(dirs["full"] / name, full)
        write_image(dirs[frac_dirname(frac)] / name, low.with_data(low.data, p))
        if roi is not None:
            write_image(dirs["roi"] / name, full.with_data(roi.astype(np.float64)), units="mask")
    record = {"command": "generate-data", "config": cfg, "seeds": {"phantom": cfg["seed"]},
              "phantom_spec": spec.to_dict(), "fractions": fractions,
              "n_pairs": len(raw), "outputs": {k: str(v) for k, v in dirs.items()}}
    append_manifest(out, record)
    return record


# ------------------------------------------------------------------------ train

def load_pairs(data_dir, fraction=None) -> List[PairedSlice]:
    data_dir = Path(data_dir)
    if not (data_dir / "full").is_dir():
        raise FileNotFoundError(f"no dataset at {data_dir} (missing full/)")
    low_dirs = sorted(data_dir.glob("low_*"))
    if fraction is not None:
        low_dirs = [data_dir / frac_dirname(float(fraction))]
    pairs = []
    for d in low_dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"missing {d}")
        frac = float(d.name[len("low_"):])
        for stem in list_images(d):
            low = read_image(stem)
            full = read_image(data_dir / "full" / stem.name)
            p = low.norm_params or joint_range((full, low))
            pairs.append(PairedSlice(apply_norm(full, p), apply_norm(low, p), frac))
    if not pairs:
        raise FileNotFoundError(f"no image pairs under {data_dir}")
    return pairs


def _save_state(out: Path, state: TrainState) -> Dict[str, str]:
    sums = {
        "student": save_checkpoint(out / "student", state.student, state.step, ema=False),
        "teacher": save_checkpoint(out / "teacher", state.teacher, state.step, ema=True),
    }
    save_tensors(out / "optim_m", state.exp_avg, {"step": state.step})
    save_tensors(out / "optim_v", state.exp_avg_sq, {"step": state.step})
    write_json(out / "state.json", {"epoch": state.epoch, "step": state.step,
                                    "history": state.history, "checksums": sums})
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "wall_seconds"])
        for rec in state.history:
            w.writerow([rec["epoch"], repr(rec["mean_loss"]), f"{rec['wall_seconds']:.3f}"])
    return sums


def _load_state(out: Path) -> TrainState:
    meta = read_json(out / "state.json")
    student, _ = load_checkpoint(out / "student")
    teacher, _ = load_checkpoint(out / "teacher")
    teacher.requires_grad_(False)
    m, _ = load_tensors(out / "optim_m")
    v, _ = load_tensors(out / "optim_v")
    return TrainState(student, teacher, m, v, step=meta["step"], epoch=meta["epoch"],
                      history=list(meta["history"]))


def cmd_train(cfg, out) -> dict:
    out = Path(out)
    if not cfg.get("data"):
        raise FileNotFoundError("train needs --data DIR")
    pairs = load_pairs(cfg["data"], cfg.get("fraction"))
    out.mkdir(parents=True, exist_ok=True)
    schedule = schedule_from(cfg)
    tcfg = train_config_from(cfg)
    resumed = (out / "state.json").exists()
    if resumed:
        state = _load_state(out)
        log.info("resuming from epoch %d", state.epoch)
    else:
        state = TrainState.create(denoiser_config_from(cfg), cfg["seed"])
        save_checkpoint(out / "init", state.student, 0, ema=False)

    every = max(1, int(cfg["checkpoint_every"]))

    def on_epoch(st):
        if st.epoch % every == 0 and st.epoch < tcfg.epochs:
            _save_state(out, st)

    fit(pairs, tcfg, schedule, state=state, on_epoch=on_epoch)
    sums = _save_state(out, state)
    record = {"command": "train", "config": cfg, "seeds": {"train": cfg["seed"]},
              "inputs": {"data": str(cfg["data"])}, "resumed": resumed, "n_pairs": len(pairs),
              "schedule": schedule.to_dict(), "epochs_done": state.epoch, "steps": state.step,
              "checkpoint_checksums": sums, "param_checksums": {
                  "student": param_checksum(state.student), "teacher": param_checksum(state.teacher)}}
    append_manifest(out, record)
    return record


# ----------------------------------------------------------------------- sample

def resolve_checkpoint(path, use_ema=True) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / ("teacher" if use_ema else "student")
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise FileNotFoundError(f"no checkpoint at {p}")
    return p


def synthesize(model, low: ImageGrid, plan: SamplePlan, schedule, patch=64, stride=64, target=None):
    """Normalized low-dose slice -> normalized synthetic slice via sliding windows."""
    def run(p, k):
        sub = SamplePlan(plan.indices, plan.mc_runs, sub_seed(plan.seed, k), plan.label)
        return generate(model, p.data, sub, schedule).double().numpy()

    out, layout = sliding_window(low, run, patch, stride, target)
    return out, layout


def _pick_fraction_dir(data_dir: Path, fraction):
    if fraction is not None:
        return data_dir / frac_dirname(float(fraction))
    dirs = sorted(data_dir.glob("low_*"))
    if not dirs:
        raise FileNotFoundError(f"no low_* directories in {data_dir}")
    return dirs[-1]


def cmd_sample(cfg, out) -> dict:
    out = Path(out)
    ckpt = resolve_checkpoint(cfg["checkpoint"] or "", cfg["use_ema"])
    model, meta = load_checkpoint(ckpt)
    if not cfg.get("data"):
        raise FileNotFoundError("sample needs --data DIR")
    cond_dir = Path(cfg["low"]) if cfg.get("low") else _pick_fraction_dir(Path(cfg["data"]), cfg.get("fraction"))
    stems = list_images(cond_dir)
    if not stems:
        raise FileNotFoundError(f"no condition images in {cond_dir}")
    schedule = schedule_from(cfg)
    out.mkdir(parents=True, exist_ok=True)
    target = tuple(cfg["pad_to"]) if cfg.get("pad_to") else None
    records = []
    for plan_text in cfg["plans"]:
        plan = parse_plan(plan_text, cfg["mc"], cfg["seed"])
        plan.validate(schedule)
        pdir = out / plan.label
        pdir.mkdir(exist_ok=True)
        per_image = []
        for i, stem in enumerate(stems):
            low = read_image(stem)
            params = low.norm_params or joint_range((low,))
            z = apply_norm(low, params)
            img_plan = SamplePlan(plan.indices, plan.mc_runs, sub_seed(plan.seed, i), plan.label)
            model.n_evals = 0
            t0 = time.perf_counter()
            syn, layout = synthesize(model, z, img_plan, schedule, cfg["patch"], cfg["stride"], target)
            seconds = time.perf_counter() - t0
            n_patches = len(layout.origins)
            res = denormalize(syn, params)
            write_image(pdir / stem.name, res.with_data(res.data, params))
            per_image.append({"name": stem.name, "seconds": seconds, "network_evals": model.n_evals,
                              "patches": n_patches, "evals_per_run": plan.n_evals,
                              "mc_runs": plan.mc_runs, "layout": layout.to_dict()})
        rec = {"command": "sample", "config": cfg, "plan": plan.to_dict(),
               "evals_per_run": plan.n_evals, "seeds": {"plan": cfg["seed"]},
               "checkpoint": str(ckpt), "checkpoint_sha256": meta["sha256"], "ema": meta["ema"],
               "inputs": {"condition": str(cond_dir)}, "images": per_image}
        append_manifest(pdir, rec)
        records.append(rec)
    summary = {"command": "sample", "config": cfg, "seeds": {"plan": cfg["seed"]},
               "checkpoint": str(ckpt), "checkpoint_sha256": meta["sha256"],
               "plans": [r["plan"] for r in records], "outputs": [r["plan"]["label"] for r in records]}
    append_manifest(out, summary)
    return summary


# --------------------------------------------------------------------- evaluate

def _fmt(v):
    return "" if v is None else repr(float(v))


def _match(pred_dir: Path, ref_dir: Path):
    preds = {s.name: s for s in list_images(pred_dir)}
    refs = {s.name: s for s in list_images(ref_dir)}
    missing = sorted(set(preds) ^ set(refs))
    if missing:
        warnings.warn(f"{pred_dir}: skipping unpaired files {missing}")
    return [(preds[n], refs[n]) for n in sorted(set(preds) & set(refs))]


def evaluate_dir(pred_dir, ref_dir, roi_dir=None, rel_threshold=0.05):
    """Per-slice reports for every filename present in both directories."""
    reports, names = [], []
    for ps, rs in _match(Path(pred_dir), Path(ref_dir)):
        pred, ref = read_image(ps), read_image(rs)
        roi = None
        if roi_dir is not None and (Path(roi_dir) / f"{rs.name}.f32").exists():
            roi = read_image(Path(roi_dir) / rs.name).data > 0.5
        reports.append(evaluate_pair(pred, ref, background_mask(ref, rel_threshold), roi))
        names.append(ps.name)
    return names, reports


def cmd_evaluate(cfg, out) -> dict:
    out = Path(out)
    data = Path(cfg["data"]) if cfg.get("data") else None
    ref_dir = Path(cfg["ref"]) if cfg.get("ref") else (data / "full" if data else None)
    if ref_dir is None or not ref_dir.is_dir():
        raise FileNotFoundError(f"reference directory not found: {ref_dir}")
    low_dir = Path(cfg["low"]) if cfg.get("low") else (_pick_fraction_dir(data, cfg.get("fraction")) if data else None)
    roi_dir = Path(cfg["roi"]) if cfg.get("roi") else (data / "roi" if data and (data / "roi").is_dir() else None)
    methods = []
    if low_dir is not None:
        methods.append((BASELINE, low_dir))
    for p in cfg.get("pred") or []:
        methods.append((Path(p).name, Path(p)))
    out.mkdir(parents=True, exist_ok=True)
    rows, summary, timing = [], {}, []
    for label, d in methods:
        names, reports = evaluate_dir(d, ref_dir, roi_dir, cfg["rel_threshold"])
        if not reports:
            warnings.warn(f"{d}: no images paired with {ref_dir}")
            continue
        agg = aggregate(reports, names)
        for name, rep in zip(names, reports):
            rows.append([label, name] + [_fmt(getattr(rep, f)) for f in METRIC_FIELDS])
        rows.append([label, "ALL"] + [_fmt(getattr(agg, f)) for f in METRIC_FIELDS])
        summary[label] = {f: getattr(agg, f) for f in METRIC_FIELDS}
        summary[label]["n_slices"] = len(reports)
        if label != BASELINE and (d / "manifest.json").exists():
            for run in read_json(d / "manifest.json")["runs"]:
                for img in run.get("images", []):
                    timing.append([label, img["name"], f"{img['seconds']:.6f}", img["network_evals"]])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "slice", *METRIC_FIELDS])
        w.writerows(rows)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "slice", "seconds", "network_evals"])
        w.writerows(timing)
    payload = {"methods": summary, "background_rel_threshold": cfg["rel_threshold"],
               "ref": str(ref_dir), "low": str(low_dir) if low_dir else None,
               "pred": {label: str(d) for label, d in methods}}
    write_json(out / "summary.json", payload)
    record = {"command": "evaluate", "config": cfg, "seeds": {},
              "inputs": payload["pred"], "outputs": ["metrics.csv", "summary.json", "timing.csv"]}
    append_manifest(out, record)
    return record


# ----------------------------------------------------------------------- report

def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_rows(rows) -> Dict[str, dict]:
    """Recompute per-method means from per-slice CSV rows."""
    per = {}
    for r in rows:
        if r["slice"] == "ALL":
            continue
        per.setdefault(r["method"], []).append(r)
    table = {}
    for method, rs in per.items():
        table[method] = {"n_slices": len(rs)}
        for f in METRIC_FIELDS:
            vals = [float(r[f]) for r in rs if r[f] != ""]
            table[method][f] = float(np.mean(vals)) if vals else None
    return table


def format_table(table: Dict[str, dict]) -> str:
    head = f"{'method':<16}{'n':>5}{'NMAE %':>10}{'PSNR dB':>10}{'MS-SSIM':>10}{'NCC':>9}{'SUV err %':>11}"
    lines = [head, "-" * len(head)]
    for m, r in table.items():
        suv = "-" if r["suv_error_pct"] is None else f"{r['suv_error_pct']:.3f}"
        lines.append(f"{m:<16}{r['n_slices']:>5}{r['nmae_pct']:>10.3f}{r['psnr_db']:>10.3f}"
                     f"{r['ms_ssim']:>10.4f}{r['ncc']:>9.4f}{suv:>11}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg, out) -> dict:
    out = Path(out)
    eval_dir = Path(cfg.get("eval") or out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = eval_dir / "metrics.csv"
    rows = read_metrics_csv(metrics_path) if metrics_path.exists() else []
    if not rows:
        warnings.warn(f"no evaluation rows found in {eval_dir}")
    table = summarize_rows(rows)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n_slices", *METRIC_FIELDS])
        for m, r in table.items():
            w.writerow([m, r["n_slices"]] + [_fmt(r[f]) for f in METRIC_FIELDS])
    (out / "report.txt").write_text(format_table(table))
    figures, missing = [], []
    summary_path = eval_dir / "summary.json"
    if table and summary_path.exists():
        info = read_json(summary_path)
        save_metric_bars(out / "metrics.png", table)
        figures.append("metrics.png")
        ref_dir, low_dir = Path(info["ref"]), Path(info["low"]) if info.get("low") else None
        for label, d in info["pred"].items():
            if label == BASELINE:
                continue
            names = [r["slice"] for r in rows if r["method"] == label and r["slice"] != "ALL"]
            for name in names[: int(cfg["n_montage"])]:
                try:
                    pred = read_image(Path(d) / name).data
                    full = read_image(ref_dir / name).data
                    low = read_image(low_dir / name).data if low_dir else np.zeros_like(full)
                except FileNotFoundError:
                    missing.append(f"{label}/{name}")
                    continue
                stem = f"montage_{label}_{name}"
                write_pgm(out / f"{stem}.pgm", montage_array(low, pred, full), vmax=full.max())
                save_montage_png(out / f"{stem}.png", low, pred, full, title=f"{label} {name}")
                figures += [f"{stem}.pgm", f"{stem}.png"]
    if missing:
        warnings.warn(f"missing slices: {missing}")
    record = {"command": "report", "config": cfg, "seeds": {}, "inputs": {"eval": str(eval_dir)},
              "outputs": ["report.csv", "report.txt", *figures], "missing": missing}
    append_manifest(out, record)
    return record
