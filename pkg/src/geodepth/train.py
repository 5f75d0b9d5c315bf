"""Training, evaluation, inference and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .data import SceneSample, load_depth, load_rgb, save_depth, write_pnm
from .errors import InputError, NumericError
from .geometry import back_project, load_camera
from .losses import LossTerms, Metrics, gt_pyramid, joint_loss, metrics
from .model import DepthCompletionNet, PreparedInput, Prediction
from .point_branch import sample_fixed
from .tensor_nn import Adam, lr_schedule

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "lr", "loss", "image_loss", "point_loss", *Metrics._fields]


@dataclass
class PreparedSample:
    sample: SceneSample
    inp: PreparedInput
    gt_levels: list
    gt_cloud: torch.Tensor | None


def prepare_sample(model: DepthCompletionNet, sample: SceneSample) -> PreparedSample:
    dt = model.dtype
    inp = model.prepare(sample.rgb, sample.raw_depth, sample.camera)
    gt = torch.as_tensor(sample.gt_depth, dtype=dt)
    cloud = None
    if model.point_branch is not None:
        gt_points = back_project(sample.gt_depth, sample.camera)
        if len(gt_points):
            cloud = torch.as_tensor(sample_fixed(gt_points, model.cfg.n_fixed).positions, dtype=dt)
    return PreparedSample(sample, inp, gt_pyramid(gt), cloud)


def compute_loss(model: DepthCompletionNet, ps: PreparedSample, cfg: TrainConfig) -> tuple[LossTerms, Prediction]:
    pred = model(ps.inp)
    terms = joint_loss(pred.stages, None, pred.point_outputs, ps.gt_cloud, cfg.lam, cfg.beta,
                       cfg.stage_weights, cfg.tau, gt_levels=ps.gt_levels)
    return terms, pred


def _flushing() -> bool:
    return (torch.tensor(1e-300, dtype=torch.float64) * 1e-10).item() == 0.0


@contextmanager
def _fast_math():
    # Zero-initialised heads drift through subnormal values; on CPU these
    # slow the backward pass by an order of magnitude without changing results.
    # The flag is process-wide, so the previous mode is restored on exit.
    before = _flushing()
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(before)


def make_model(cfg: TrainConfig, dtype=torch.float32) -> DepthCompletionNet:
    return DepthCompletionNet(cfg.model_config(), seed=cfg.seed).to(dtype)


def epoch_order(seed: int, epoch: int, n: int, steps: int | None) -> np.ndarray:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order if steps is None else np.resize(order, steps)


@dataclass
class TrainResult:
    model: DepthCompletionNet
    optimizer: Adam
    step_losses: list[float] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train(cfg: TrainConfig, samples: list[SceneSample], out_dir=None, resume: ckpt_io.Checkpoint | None = None,
          model: DepthCompletionNet | None = None, epochs: int | None = None) -> TrainResult:
    """Seeded Adam training loop, batch size 1.

    ``epochs`` overrides ``cfg.epochs`` as the index of the last epoch to run
    (exclusive). When ``resume`` is given, training continues at the epoch
    stored in the checkpoint.
    """
    if not samples:
        raise InputError("training needs at least one sample")
    with _fast_math():
        return _train(cfg, samples, out_dir, resume, model, epochs)


def _train(cfg, samples, out_dir, resume, model, epochs) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = model or make_model(cfg)
    opt = Adam(model.parameters())
    start = 0
    if resume is not None:
        if resume.config_hash and resume.config_hash != cfg.model_hash():
            warnings.warn("checkpoint was written with a different model configuration")
        ckpt_io.restore(resume, model, opt)
        start = resume.epoch
    prepared = [prepare_sample(model, s) for s in samples]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, opt)
    end = cfg.epochs if epochs is None else epochs

    model.train()
    for epoch in range(start, end):
        lr = lr_schedule(epoch, cfg.lr, cfg.milestones, cfg.lr_decay)
        sums = {"loss": 0.0, "image_loss": 0.0, "point_loss": 0.0}
        mets = []
        order = epoch_order(cfg.seed, epoch, len(prepared), cfg.steps_per_epoch)
        for i in order:
            ps = prepared[i]
            try:
                terms, pred = compute_loss(model, ps, cfg)
            except NumericError as exc:
                _dump_failure(out, ps.sample.id, epoch, None, str(exc))
                raise NumericError(f"sample {ps.sample.id!r} at epoch {epoch}: {exc}") from exc
            if not torch.isfinite(terms.total):
                _dump_failure(out, ps.sample.id, epoch, terms)
                raise NumericError(f"non-finite loss on sample {ps.sample.id!r} at epoch {epoch}")
            opt.zero_grad()
            terms.total.backward()
            opt.step(lr)
            value = terms.total.item()
            result.step_losses.append(value)
            sums["loss"] += value
            sums["image_loss"] += terms.image.item()
            sums["point_loss"] += terms.point.item()
            if ps.sample.mask.any():
                mets.append(metrics(pred.depth, ps.sample.gt_depth, ps.sample.mask))
        row = {"epoch": epoch, "lr": lr, **{k: v / len(order) for k, v in sums.items()}}
        row.update(_mean_metrics(mets))
        result.epoch_log.append(row)
        log.info("epoch %d lr %.2e loss %.5f", epoch, lr, row["loss"])
        if out is not None:
            _append_log(out / "train_log.csv", row, first=epoch == 0)
            ck = ckpt_io.capture(model, opt, epoch + 1, cfg.model_hash())
            result.checkpoint = ckpt_io.save_checkpoint(ck, out / "last.gaat")
    return result


def _mean_metrics(mets: list[Metrics]) -> dict:
    if not mets:
        return {k: float("nan") for k in Metrics._fields}
    arr = np.array(mets, dtype=np.float64)
    return dict(zip(Metrics._fields, arr.mean(axis=0).tolist()))


def _append_log(path: Path, row: dict, first: bool) -> None:
    mode = "w" if first or not path.exists() else "a"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if mode == "w":
            w.writeheader()
        w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})


def _dump_failure(out: Path | None, sample_id: str, epoch: int, terms: LossTerms | None, reason: str = "") -> None:
    info = {"sample_id": sample_id, "epoch": epoch, "reason": reason or "non-finite loss"}
    if terms is not None:
        info.update(image_loss=terms.image.item(), point_loss=terms.point.item())
    log.error("non-finite loss: %s", info)
    if out is not None:
        (out / "nan_dump.json").write_text(json.dumps(info, indent=2))


def load_model(cfg: TrainConfig, checkpoint_path) -> DepthCompletionNet:
    ck = ckpt_io.load_checkpoint(checkpoint_path)
    if ck.config_hash and ck.config_hash != cfg.model_hash():
        warnings.warn("checkpoint config hash differs from the requested configuration; using the flags")
    model = make_model(cfg)
    ckpt_io.restore(ck, model)
    return model


@torch.no_grad()
def evaluate(model: DepthCompletionNet, samples: list[SceneSample]) -> dict:
    """Mean masked metrics over ``samples``; samples with an empty mask are skipped."""
    model.eval()
    mets = []
    with _fast_math():
        for s in samples:
            if not s.mask.any():
                continue
            pred = model(model.prepare(s.rgb, s.raw_depth, s.camera))
            mets.append(metrics(pred.depth, s.gt_depth, s.mask))
    if not mets:
        raise InputError("no sample has a non-empty evaluation mask")
    row = _mean_metrics(mets)
    row["samples"] = len(mets)
    return row


@torch.no_grad()
def complete_files(model: DepthCompletionNet, rgb_path, depth_path, camera_path, out_dir) -> tuple[Path, Path]:
    """Run inference on files and write ``depth.pgm`` (16-bit mm) and ``confidence.pgm`` (8-bit)."""
    rgb = load_rgb(rgb_path)
    raw = load_depth(depth_path)
    cam = load_camera(camera_path)
    model.eval()
    pred = model(model.prepare(rgb, raw, cam))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dpath, cpath = out / "depth.pgm", out / "confidence.pgm"
    save_depth(dpath, pred.depth.double().numpy())
    conf = np.clip(np.rint(pred.confidence.double().numpy() * 255.0), 0, 255).astype(np.uint8)
    write_pnm(cpath, conf)
    return dpath, cpath


# ---------------------------------------------------------------------------
# ablation sweeps

GCMF_ROWS = [
    ("Baseline", {"use_point_branch": False, "gcmf": ()}),
    ("+3D", {"gcmf": ()}),
    ("GCMF_1/4", {"gcmf": ("1/4",)}),
    ("GCMF_1/2", {"gcmf": ("1/4", "1/2")}),
    ("Ours", {"gcmf": ("1/4", "1/2", "1/1")}),
]
STRATEGY_ROWS = [
    ("None", {"strategy": "none"}),
    ("KNN", {"strategy": "knn"}),
    ("Ball Query", {"strategy": "fixed_ball"}),
    ("ACA", {"strategy": "adaptive"}),
]
SWEEPS = {"gcmf": GCMF_ROWS, "strategy": STRATEGY_ROWS}


def ablate(cfg: TrainConfig, train_samples, eval_samples, kind: str, seeds=(0,), out_csv=None,
           cache: dict | None = None, labels=None) -> list[dict]:
    """Train and evaluate one model per sweep row and seed; returns CSV-ready rows.

    ``cache`` maps (model hash, seed) to results so configurations shared
    between sweeps are trained once. ``labels`` restricts the sweep to the
    named rows.
    """
    if kind not in SWEEPS:
        raise InputError(f"unknown sweep {kind!r}; choose from {sorted(SWEEPS)}")
    table = SWEEPS[kind]
    if labels is not None:
        unknown = set(labels) - {name for name, _ in table}
        if unknown:
            raise InputError(f"unknown {kind} rows {sorted(unknown)}")
        table = [row for row in table if row[0] in labels]
    rows = []
    for label, overrides in table:
        for seed in seeds:
            run = cfg.replace(seed=seed, **overrides)
            key = (run.model_hash(), seed)
            if cache is not None and key in cache:
                res = cache[key]
            else:
                model = train(run, train_samples).model
                res = evaluate(model, eval_samples)
                if cache is not None:
                    cache[key] = res
            rows.append({"sweep": kind, "config": label, "seed": seed, **res})
            log.info("%s %s seed %d rmse %.4f", kind, label, seed, res["rmse"])
    if out_csv is not None:
        write_rows(out_csv, rows)
    return rows


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
