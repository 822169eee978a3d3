"""Desk-scale experiment presets shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

from headpose import data
from headpose import train as T

# Training on the tiny synthetic sets saturates the tanh outputs at lr 0.1;
# 0.05 converges with the same batch size and schedule shape.
DESK_OVERFIT = T.TrainConfig(lr_initial=0.05, batch_size=64, pairs_per_epoch=128, epochs=60, augment=False,
                             validate_every=10 ** 9)

DESK_BENCHMARK = T.TrainConfig(lr_initial=0.05, batch_size=64, pairs_per_epoch=256, epochs=30, augment=True,
                               validate_every=10 ** 9)


def overfit_set(seed: int = 1, n_subjects: int = 4, frames_per_subject: int = 8) -> data.Dataset:
    """Small synthetic set whose last frame is a frontal (0, 0, 0) pose of subject 0."""
    ds = data.generate_dataset(None, n_subjects, frames_per_subject, seed=seed)
    anns = ds.annotations[:-1]
    frames = {a.frame_id: ds.frame(a.frame_id) for a in anns}
    frame, ann = data.synth_frame(seed, 0, frames_per_subject, (0.0, 0.0, 0.0))
    frames[ann.frame_id] = frame
    return data.Dataset(anns + [ann], frames)


def benchmark_sets(seed: int = 0, frames_per_subject: int = 200, n_train: int = 10, n_test: int = 2):
    """Subject-disjoint train/test synthetic sets."""
    train_set = data.generate_dataset(None, n_train, frames_per_subject, seed=seed)
    test_set = data.generate_dataset(None, n_test, frames_per_subject, seed=seed,
                                     cfg=data.SynthConfig(subjects_offset=n_train))
    return train_set, test_set


@dataclass
class ComparisonRow:
    name: str
    report: T.EvalReport
    seconds: float


def siamese_vs_baseline(train_set, test_set, cfg: T.TrainConfig = DESK_BENCHMARK) -> list[ComparisonRow]:
    """Train a single network and a Siamese pair with otherwise equal settings; evaluate both on test_set.

    The baseline sees 2 * pairs_per_epoch images per epoch, the same image count as the Siamese run.
    """
    rows = []
    for name, siamese in (("single", False), ("siamese", True)):
        run = dataclasses.replace(cfg, siamese=siamese)
        t0 = time.perf_counter()
        params, _ = T.train(run, train_set)
        rep = T.evaluate(params, test_set, run.range)
        rows.append(ComparisonRow(name, rep, time.perf_counter() - t0))
    return rows


def format_table(rows: list[ComparisonRow]) -> str:
    head = f"{'model':10s} {'pitch':>14s} {'roll':>14s} {'yaw':>14s} {'frames':>7s}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = [f"{m:6.2f} ± {s:5.2f}" for m, s in zip(r.report.mae_degrees, r.report.std_degrees)]
        lines.append(f"{r.name:10s} {cells[0]:>14s} {cells[1]:>14s} {cells[2]:>14s} {len(r.report.frame_ids):7d}")
    return "\n".join(lines)
