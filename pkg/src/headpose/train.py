"""Siamese / single-network training, MAE evaluation, and timed prediction."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from headpose import __version__, data, losses, posenet
from headpose import preprocess as pp
from headpose.tensor import SgdConfig, sgd_step

log = logging.getLogger(__name__)

ANGLE_NAMES = posenet.OUTPUT_ORDER


@dataclass
class TrainConfig:
    batch_size: int = 64  # images per step; a Siamese step holds batch_size // 2 pairs
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_initial: float = 1e-1
    lr_final: float = 1e-3
    lr_stages: tuple[float, float, float] = (0.7, 0.2, 0.1)
    epochs: int = 50
    pairs_per_epoch: int = 1000  # baseline mode draws 2x this many single images
    seed: int = 0
    augment: bool = True
    siamese: bool = True
    pair_rule: str = "any_angle"
    pair_threshold: float = data.PAIR_THRESHOLD_DEG
    angle_range: tuple[float, float, float] = (90.0, 90.0, 90.0)
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    loss_reduction: str = "mean"  # "mean": gradient divided by images per step; "sum": raw
    dtype: str = "float32"
    single_thread: bool = True
    validate_every: int = 1
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.siamese and (self.batch_size < 2 or self.batch_size % 2):
            raise ValueError("Siamese batches hold pairs: batch_size must be even and >= 2")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.pair_rule not in data.PAIR_RULES:
            raise ValueError(f"pair_rule must be one of {data.PAIR_RULES}")
        if abs(sum(self.lr_stages) - 1.0) > 1e-9 or len(self.lr_stages) != 3:
            raise ValueError("lr_stages must be three fractions summing to 1")

    @property
    def range(self) -> pp.AngleRange:
        return pp.AngleRange(tuple(self.angle_range))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


# --------------------------------------------------------------------------
# flat key=value config files
# --------------------------------------------------------------------------

def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(type(default[0])(p) for p in text.replace(",", " ").split())
    return type(default)(text)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Overlay ``key = value`` lines on ``base``. Blank lines and ``#`` comments are skipped."""
    base = base or TrainConfig()
    values = base.to_dict()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        try:
            values[key] = _parse_value(val, defaults[key])
        except ValueError as exc:
            raise ValueError(f"config line {n}: {exc}") from None
    return TrainConfig.from_dict(values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, cfg: TrainConfig, **extra) -> Path:
    path = Path(out_dir) / "manifest.json"
    payload = {"config": cfg.to_dict(), "seed": cfg.seed, "code_version": __version__, **extra}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text())["config"])


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Three decade steps: lr_initial, then their geometric middle, then lr_final.

    Stage boundaries sit at the rounded cumulative ``lr_stages`` fractions of
    the run; whenever there are at least two epochs the last one is at
    lr_final.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    b1 = round(cfg.lr_stages[0] * cfg.epochs)
    b2 = round((cfg.lr_stages[0] + cfg.lr_stages[1]) * cfg.epochs)
    if cfg.epochs >= 2:
        b1, b2 = max(b1, 1), min(b2, cfg.epochs - 1)
        b1 = min(b1, b2)
    if epoch < b1:
        return cfg.lr_initial
    if epoch < b2:
        return math.sqrt(cfg.lr_initial * cfg.lr_final)
    return cfg.lr_final


# --------------------------------------------------------------------------
# one optimisation step
# --------------------------------------------------------------------------

@dataclass
class SiameseNet:
    """Two branches over one parameter set; a branch is the set itself, not a copy."""

    params: posenet.NetworkParams

    def branch(self, k: int) -> posenet.NetworkParams:
        if k not in (0, 1):
            raise IndexError(k)
        return self.params


def siamese_gradients(params, xa, ya, xb, yb, weights=(1.0, 1.0, 1.0), scale: float = 1.0):
    """Loss breakdown and parameter gradients for a batch of pairs.

    Both branches run as one stacked batch through the shared parameters, so
    backprop sums the two branches' contributions.
    """
    n = len(xa)
    out, cache = posenet.forward_training(params, np.concatenate([xa, xb]))
    br, d1, d2 = losses.combined_loss(out[:n], out[n:], ya, yb, weights)
    grads = posenet.backward(params, cache, np.concatenate([d1, d2]) * scale)
    return br, grads


def single_gradients(params, x, y, scale: float = 1.0):
    out, cache = posenet.forward_training(params, x)
    loss, d = losses.l2_loss(out, y)
    return loss, posenet.backward(params, cache, d * scale)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, msg, params, history):
        super().__init__(msg)
        self.params = params
        self.history = history


@dataclass
class EpochLog:
    epoch: int
    lr: float
    l_cnn_1: float
    l_cnn_2: float
    l_siam: float
    total: float
    val_mae: tuple[float, float, float] | None = None

    def line(self) -> str:
        s = (f"epoch={self.epoch} lr={self.lr:.6g} total={self.total:.6g} l_cnn_1={self.l_cnn_1:.6g} "
             f"l_cnn_2={self.l_cnn_2:.6g} l_siam={self.l_siam:.6g}")
        if self.val_mae is not None:
            s += " val_mae=" + ",".join(f"{v:.4f}" for v in self.val_mae)
        return s


class _Samples:
    """Training images with normalised labels; base patches cached, augmented ones built on demand."""

    def __init__(self, dataset: data.Dataset, cfg: TrainConfig):
        self.items = [(f, a, pp.crop_for(f, a)) for f, a in dataset.items()]
        self.labels = np.stack([pp.normalize_angles(a.angles, cfg.range) for _, a, _ in self.items])
        self.degrees = dataset.angles()
        self.augment = cfg.augment
        self.dtype = np.dtype(cfg.dtype)
        self.base = None if cfg.augment else np.stack([pp.standardize(pp.extract_patch(f, c))
                                                       for f, _, c in self.items]).astype(self.dtype)

    def __len__(self):
        return len(self.items)

    def patches(self, idx, rng):
        if self.base is not None:
            return self.base[idx]
        return np.stack([pp.random_variant(self.items[i][0], self.items[i][2], rng) for i in idx]).astype(self.dtype)


def train(cfg: TrainConfig, train_set: data.Dataset, val_set: data.Dataset | None = None,
          params: posenet.NetworkParams | None = None, log_path=None, checkpoint_path=None):
    """Train from ``cfg``; returns ``(params, history)``.

    Siamese mode draws ``pairs_per_epoch`` eligible pairs per epoch and steps
    on the summed branch + pair loss; baseline mode draws twice as many single
    images and steps on the per-image L2 loss.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    limiter = nullcontext()
    if cfg.single_thread:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)

    with limiter:
        return _train(cfg, train_set, val_set, params, log_path, checkpoint_path)


def _train(cfg, train_set, val_set, params, log_path, checkpoint_path):
    dtype = np.dtype(cfg.dtype)
    params = params if params is not None else posenet.build_network(cfg.seed, dtype=dtype)
    params = params.astype(dtype)
    pool = None
    if cfg.siamese:
        pool = data.eligible_pairs(train_set.angles(), cfg.pair_rule, cfg.pair_threshold)
        if len(pool) == 0:
            raise ValueError(f"pair pool empty under {cfg.pair_threshold:g}° rule")
    samples = _Samples(train_set, cfg)

    log_fh = open(log_path, "w") if log_path else None
    history: list[EpochLog] = []
    last_good = params.copy()
    first_loss = None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            sgd = SgdConfig(lr, cfg.momentum, cfg.weight_decay)
            rng = np.random.default_rng([cfg.seed, epoch])
            sums = np.zeros(4)
            units = 0
            if cfg.siamese:
                chosen = data.sample_pair_indices(pool, cfg.pairs_per_epoch, rng)
                per_step = cfg.batch_size // 2
                for s in range(0, len(chosen), per_step):
                    ia, ib = chosen[s:s + per_step, 0], chosen[s:s + per_step, 1]
                    xa, xb = samples.patches(ia, rng), samples.patches(ib, rng)
                    scale = 1.0 / (2 * len(ia)) if cfg.loss_reduction == "mean" else 1.0
                    br, grads = siamese_gradients(params, xa, samples.labels[ia], xb, samples.labels[ib],
                                                  cfg.loss_weights, scale)
                    _check_finite(br.total, epoch, params, history)
                    sgd_step(params, grads, sgd)
                    sums += (br.l_cnn_1, br.l_cnn_2, br.l_siam, br.total)
                    units += len(ia)
            else:
                chosen = rng.integers(len(samples), size=2 * cfg.pairs_per_epoch)
                for s in range(0, len(chosen), cfg.batch_size):
                    idx = chosen[s:s + cfg.batch_size]
                    scale = 1.0 / len(idx) if cfg.loss_reduction == "mean" else 1.0
                    loss, grads = single_gradients(params, samples.patches(idx, rng), samples.labels[idx], scale)
                    _check_finite(loss, epoch, params, history)
                    sgd_step(params, grads, sgd)
                    sums += (loss, 0.0, 0.0, loss)
                    units += len(idx)

            means = sums / max(units, 1)
            entry = EpochLog(epoch, lr, *(float(v) for v in means))
            if val_set is not None and len(val_set) and (epoch + 1) % cfg.validate_every == 0:
                entry.val_mae = evaluate(params, val_set, cfg.range).mae_degrees
            history.append(entry)
            log.info(entry.line())
            if log_fh:
                log_fh.write(entry.line() + "\n")
                log_fh.flush()

            if first_loss is None:
                first_loss = entry.total
            elif entry.total > cfg.divergence_factor * max(first_loss, 1e-12):
                raise TrainingDiverged(f"epoch {epoch}: loss {entry.total:.4g} exceeds "
                                       f"{cfg.divergence_factor:g}x initial {first_loss:.4g}", last_good, history)
            last_good = params.copy()
            if checkpoint_path:
                posenet.save_params(params, checkpoint_path)
    except TrainingDiverged as exc:
        exc.params = last_good
        if checkpoint_path:
            posenet.save_params(last_good, checkpoint_path)
        raise
    finally:
        if log_fh:
            log_fh.close()
    return params, history


def _check_finite(value, epoch, params, history):
    if not np.isfinite(value):
        raise TrainingDiverged(f"epoch {epoch}: non-finite loss", params, history)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

BIN_EDGES = np.arange(-90, 91, 10)


@dataclass
class EvalReport:
    mae_degrees: tuple[float, float, float]
    std_degrees: tuple[float, float, float]
    frame_ids: list[str]
    gt_degrees: np.ndarray  # (n, 3)
    pred_degrees: np.ndarray  # (n, 3)
    abs_err_degrees: np.ndarray  # (n, 3)
    angle_bins: dict = field(default_factory=dict)
    n_failed: int = 0

    @property
    def per_frame(self):
        return list(zip(self.frame_ids, self.gt_degrees, self.pred_degrees, self.abs_err_degrees))

    def summary(self) -> dict:
        return {
            "n_frames": len(self.frame_ids),
            "n_failed": self.n_failed,
            "mae_degrees": dict(zip(ANGLE_NAMES, self.mae_degrees)),
            "std_degrees": dict(zip(ANGLE_NAMES, self.std_degrees)),
            "angle_bins": self.angle_bins,
        }

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_id"] + [f"{k}_{n}" for k in ("gt", "pred", "abs_err") for n in ANGLE_NAMES])
            for fid, g, p, e in self.per_frame:
                w.writerow([fid, *(repr(float(v)) for v in (*g, *p, *e))])

    def export_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def report_from_predictions(frame_ids, gt_degrees, pred_degrees, n_failed: int = 0) -> EvalReport:
    """Mean absolute error per angle, its spread, and 10-degree ground-truth bins."""
    gt = np.asarray(gt_degrees, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred_degrees, dtype=np.float64).reshape(-1, 3)
    err = np.abs(pred - gt)
    if len(err):
        mae, std = err.mean(axis=0), err.std(axis=0)
    else:
        mae = std = np.full(3, np.nan)
    bins = {}
    for k, name in enumerate(ANGLE_NAMES):
        which = np.clip(np.digitize(gt[:, k], BIN_EDGES) - 1, 0, len(BIN_EDGES) - 2)
        rows = []
        for b in range(len(BIN_EDGES) - 1):
            sel = err[which == b, k]
            rows.append({"lo": int(BIN_EDGES[b]), "hi": int(BIN_EDGES[b + 1]), "count": int(sel.size),
                         "mean_abs_err": float(sel.mean()) if sel.size else None})
        bins[name] = rows
    return EvalReport(tuple(float(v) for v in mae), tuple(float(v) for v in std), list(frame_ids),
                      gt, pred, err, bins, n_failed)


def evaluate(params: posenet.NetworkParams, dataset: data.Dataset,
             angle_range: pp.AngleRange = pp.AngleRange(), chunk: int = 64) -> EvalReport:
    """Predict every frame from its annotated centre and compare in degrees.

    Frames whose patch cannot be built are skipped and counted in ``n_failed``.
    """
    ids, gts, patches, failed = [], [], [], 0
    for frame, ann in dataset.items():
        try:
            patches.append(pp.preprocess(frame, ann))
        except ValueError:
            failed += 1
            continue
        ids.append(ann.frame_id)
        gts.append(ann.angles)
    preds = []
    for s in range(0, len(patches), chunk):
        preds.append(posenet.forward(params, np.stack(patches[s:s + chunk])))
    pred_deg = pp.denormalize_angles(np.concatenate(preds), angle_range) if preds else np.zeros((0, 3))
    return report_from_predictions(ids, gts, pred_deg, failed)


@dataclass
class Prediction:
    angles_degrees: tuple[float, float, float] | None
    latency_s: float
    error: str | None = None


def predict(params, frame, annotation, angle_range: pp.AngleRange = pp.AngleRange()) -> Prediction:
    """Crop at the given centre, standardise, run the network, denormalise; timed end to end."""
    t0 = time.perf_counter()
    try:
        patch = pp.preprocess(frame, annotation)
    except ValueError as exc:
        return Prediction(None, time.perf_counter() - t0, str(exc))
    out = pp.denormalize_angles(posenet.forward(params, patch), angle_range)
    return Prediction(tuple(float(v) for v in out), time.perf_counter() - t0)
