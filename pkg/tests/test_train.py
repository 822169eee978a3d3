import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from headpose import data, losses, posenet
from headpose import preprocess as pp
from headpose import train as T
from headpose.frames import Annotation, DepthFrame
from headpose.tensor import SgdConfig, sgd_step


@pytest.fixture(scope="module")
def tiny_set():
    return data.generate_dataset(None, 2, 6, seed=1)


def quick(**kw):
    base = dict(batch_size=4, epochs=2, pairs_per_epoch=4, augment=False, dtype="float64")
    base.update(kw)
    return T.TrainConfig(**base)


# ---------------------------------------------------------------- schedule

def test_lr_endpoints_default():
    cfg = T.TrainConfig()
    assert T.lr_at(0, cfg) == 1e-1
    assert T.lr_at(cfg.epochs - 1, cfg) == 1e-3
    assert T.lr_at(34, cfg) == 1e-1
    assert T.lr_at(35, cfg) == pytest.approx(1e-2)
    assert T.lr_at(45, cfg) == 1e-3


@given(st.integers(1, 400))
def test_lr_monotone_and_ends(epochs):
    cfg = T.TrainConfig(epochs=epochs)
    lrs = [T.lr_at(e, cfg) for e in range(epochs)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == 1e-1
    if epochs >= 2:
        assert lrs[-1] == 1e-3


def test_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        T.lr_at(50, T.TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=5)
    with pytest.raises(ValueError):
        T.TrainConfig(lr_initial=1e-3, lr_final=1e-2)
    with pytest.raises(ValueError):
        T.TrainConfig(pair_rule="nope")
    T.TrainConfig(batch_size=5, siamese=False)


# ---------------------------------------------------------------- config files

def test_config_text_round_trip():
    cfg = T.TrainConfig(lr_initial=0.05, epochs=7, augment=False, angle_range=(60.0, 50.0, 75.0))
    assert T.parse_config_text(T.format_config(cfg)) == cfg


def test_config_text_parsing_details():
    cfg = T.parse_config_text("# desk run\nepochs = 3   # short\n\naugment = off\nloss_weights = 1, 1, 0\n")
    assert (cfg.epochs, cfg.augment, cfg.loss_weights) == (3, False, (1.0, 1.0, 0.0))
    with pytest.raises(ValueError, match="line 2"):
        T.parse_config_text("epochs = 3\nlearning_rate = 0.1\n")
    with pytest.raises(ValueError, match="line 1"):
        T.parse_config_text("augment = maybe\n")


def test_manifest_round_trip(tmp_path):
    cfg = quick(seed=17)
    path = T.write_manifest(tmp_path, cfg, dataset="x")
    assert T.read_manifest(path) == cfg
    text = path.read_text()
    assert '"seed": 17' in text and '"code_version"' in text


# ---------------------------------------------------------------- steps and weight sharing

def test_branches_share_parameters():
    net = T.SiameseNet(posenet.build_network(0))
    a, b = net.branch(0), net.branch(1)
    a["conv1"].weights[0, 0, 0, 0] = 123.0
    assert b["conv1"].weights[0, 0, 0, 0] == 123.0
    assert a["fc3"].bias is b["fc3"].bias


def test_siamese_gradient_is_sum_of_branches():
    p = posenet.build_network(2, dtype=np.float64)
    rng = np.random.default_rng(0)
    xa, xb = rng.standard_normal((2, 2, 1, 64, 64))
    ya, yb = rng.uniform(-0.5, 0.5, (2, 2, 3))
    br, grads = T.siamese_gradients(p, xa, ya, xb, yb)
    fa, ca = posenet.forward_training(p, xa)
    fb, cb = posenet.forward_training(p, xb)
    ref, d1, d2 = losses.combined_loss(fa, fb, ya, yb)
    ga, gb = posenet.backward(p, ca, d1), posenet.backward(p, cb, d2)
    assert br.total == pytest.approx(ref.total, rel=1e-12)
    for (w, b), (wa, ba), (wb, bb) in zip(grads, ga, gb):
        np.testing.assert_allclose(w, wa + wb, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(b, ba + bb, rtol=1e-9, atol=1e-12)


def test_baseline_step_is_plain_l2(tiny_set):
    """Siamese off: one epoch equals hand-rolled L2 regression steps, bitwise in float64."""
    cfg = quick(siamese=False, epochs=1, pairs_per_epoch=3, batch_size=3, lr_initial=0.01, lr_final=0.01)
    trained, _ = T.train(cfg, tiny_set)

    p = posenet.build_network(cfg.seed, dtype=np.float64)
    items = list(tiny_set.items())
    x_all = np.stack([pp.standardize(pp.extract_patch(f, pp.crop_for(f, a))) for f, a in items])
    y_all = np.stack([pp.normalize_angles(a.angles) for _, a in items])
    idx = np.random.default_rng([cfg.seed, 0]).integers(len(items), size=6)
    with threadpool_limits(1):
        for s in (0, 3):
            sel = idx[s:s + 3]
            out, cache = posenet.forward_training(p, x_all[sel])
            _, d = losses.l2_loss(out, y_all[sel])
            sgd_step(p, posenet.backward(p, cache, d * (1.0 / 3)), SgdConfig(0.01, 0.9, 5e-4))
    for a, b in zip(trained.layers, p.layers):
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()


def test_zero_lr_leaves_params_unchanged(tiny_set):
    start = posenet.build_network(0, dtype=np.float64)
    for siamese in (True, False):
        cfg = quick(lr_initial=0.0, lr_final=0.0, epochs=3, siamese=siamese)
        out, _ = T.train(cfg, tiny_set, params=start.copy())
        for a, b in zip(out.layers, start.layers):
            assert a.weights.tobytes() == b.weights.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()


def test_log_total_is_sum_of_parts(tiny_set, tmp_path):
    _, hist = T.train(quick(epochs=3), tiny_set, val_set=tiny_set, log_path=tmp_path / "train.log")
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert len(lines) == 3
    for h, line in zip(hist, lines):
        assert h.total == pytest.approx(h.l_cnn_1 + h.l_cnn_2 + h.l_siam, rel=1e-12)
        fields = dict(kv.split("=") for kv in line.split())
        parts = sum(float(fields[k]) for k in ("l_cnn_1", "l_cnn_2", "l_siam"))
        assert float(fields["total"]) == pytest.approx(parts, rel=1e-5)
        assert "val_mae" in fields


def test_training_is_reproducible(tiny_set, tmp_path):
    cfg = quick(dtype="float32", augment=True)
    a, _ = T.train(cfg, tiny_set, checkpoint_path=tmp_path / "a.bin")
    b, _ = T.train(cfg, tiny_set, checkpoint_path=tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_empty_pair_pool_rejected():
    anns = [Annotation(f"s00_{i:05d}", 5, 5, 1000, (i, 0, 0)) for i in range(3)]
    frames = {a.frame_id: DepthFrame(np.full((10, 10), 900, np.uint16), data.SynthConfig().intrinsics, a.frame_id)
              for a in anns}
    with pytest.raises(ValueError, match="pair pool empty"):
        T.train(quick(), data.Dataset(anns, frames))


def test_non_finite_loss_aborts(tiny_set, tmp_path):
    p = posenet.build_network(0, dtype=np.float64)
    p["fc3"].weights[0, 0] = np.nan
    with pytest.raises(T.TrainingDiverged, match="non-finite"):
        T.train(quick(), tiny_set, params=p, checkpoint_path=tmp_path / "last.bin")
    assert (tmp_path / "last.bin").exists()


def test_divergence_guard_keeps_last_good(tiny_set):
    cfg = dataclasses.replace(quick(epochs=4), divergence_factor=1e-9)
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(cfg, tiny_set)
    assert len(err.value.history) == 2  # the offending epoch is logged, then training stops
    assert err.value.params.count() == 103329


# ---------------------------------------------------------------- evaluation

def test_oracle_stub_mae_zero():
    gt = np.random.default_rng(0).uniform(-60, 60, (20, 3))
    rep = T.report_from_predictions([str(i) for i in range(20)], gt, gt)
    assert rep.mae_degrees == (0.0, 0.0, 0.0)


def test_single_frame_mae():
    rep = T.report_from_predictions(["a"], [[0, 0, 0]], [[1, 2, 3]])
    assert rep.mae_degrees == (1.0, 2.0, 3.0)
    assert rep.std_degrees == (0.0, 0.0, 0.0)


def test_mae_recomputed_from_csv(tmp_path):
    rng = np.random.default_rng(3)
    gt = rng.uniform(-70, 70, (50, 3))
    pred = rng.uniform(-90, 90, (50, 3))
    rep = T.report_from_predictions([f"f{i}" for i in range(50)], gt, pred)
    rep.export_csv(tmp_path / "per_frame.csv")
    with open(tmp_path / "per_frame.csv") as fh:
        rows = list(csv.DictReader(fh))
    for k, name in enumerate(("pitch", "roll", "yaw")):
        errs = [abs(float(r[f"pred_{name}"]) - float(r[f"gt_{name}"])) for r in rows]
        assert sum(errs) / len(errs) == pytest.approx(rep.mae_degrees[k], rel=1e-12)


def test_angle_bins_account_for_every_frame(tmp_path):
    gt = np.array([[-90, 0, 5], [89.9, 0, 15], [0, 0, 15]], dtype=float)
    rep = T.report_from_predictions(["a", "b", "c"], gt, gt + 2)
    yaw = rep.angle_bins["yaw"]
    assert sum(b["count"] for b in yaw) == 3
    assert [b["count"] for b in yaw if b["lo"] == 10] == [2]
    assert rep.angle_bins["pitch"][0]["count"] == 1 and rep.angle_bins["pitch"][-1]["count"] == 1
    rep.export_json(tmp_path / "s.json")
    assert '"mae_degrees"' in (tmp_path / "s.json").read_text()


def test_evaluate_order_invariant(tiny_set):
    p = posenet.build_network(3)
    a = T.evaluate(p, tiny_set)
    rev = data.Dataset(list(reversed(tiny_set.annotations)), dict(tiny_set._frames))
    b = T.evaluate(p, rev)
    np.testing.assert_allclose(a.mae_degrees, b.mae_degrees, rtol=1e-6)
    pa = {f: pr for f, _, pr, _ in a.per_frame}
    for f, _, pr, _ in b.per_frame:
        np.testing.assert_allclose(pr, pa[f], rtol=1e-5, atol=1e-5)


def test_evaluate_counts_failures(tiny_set):
    bad = Annotation("s00_00000", 9999.0, 10.0, 1000.0, (0.0, 0.0, 0.0))
    ds = data.Dataset([bad] + tiny_set.annotations[1:], dict(tiny_set._frames))
    rep = T.evaluate(posenet.build_network(0), ds)
    assert rep.n_failed == 1 and len(rep.frame_ids) == len(tiny_set) - 1


def test_predict_deterministic_and_degenerate(tiny_set):
    p = posenet.build_network(1)
    frame, ann = next(tiny_set.items())
    a, b = T.predict(p, frame, ann), T.predict(p, frame, ann)
    assert a.angles_degrees == b.angles_degrees and a.error is None
    assert all(abs(v) < 90 for v in a.angles_degrees)
    assert a.latency_s > 0
    flat = DepthFrame(np.full_like(frame.depth, 3000), frame.intrinsics, "flat")
    r = T.predict(p, flat, ann)
    assert r.angles_degrees is None and "degenerate" in r.error
