import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdet import train as T
from vdet.data import Annotation, AugmentConfig, synth_dataset
from vdet.errors import NonFiniteLossError, ParameterError, ShapeError
from vdet.gradcheck import check_block
from vdet.model import ModelConfig, build_model
from vdet.tensor import Tensor, set_check_finite

CLASSES = ("Car", "Van", "Truck", "Tram")


def ann(box, cls=0):
    return Annotation(CLASSES[cls], 0.0, 0, tuple(float(v) for v in box), cls)


GRIDS_640 = [(80, 80), (40, 40), (20, 20)]


# ------------------------------------------------------------------ assignment


def test_small_box_goes_to_stride_8_centre_cell():
    tm = T.assign_targets([[ann((84, 84, 116, 116))]], GRIDS_640, (8, 16, 32), 4)
    s8 = tm.scales[0]
    assert s8.objectness[0, 0, 12, 12] == 1 and s8.objectness.sum() == 1
    assert tuple(s8.boxes[0, 0, 12, 12]) == (84, 84, 116, 116)
    assert s8.classes[0, 0, 12, 12].tolist() == [1, 0, 0, 0]
    assert tm.scales[1].objectness.sum() == 0 and tm.scales[2].objectness.sum() == 0


@pytest.mark.parametrize("side,scale", [(63.9, 0), (64, 1), (159.9, 1), (160, 2), (200, 2)])
def test_size_bands(side, scale):
    tm = T.assign_targets([[ann((10, 10, 10 + side, 10 + side))]], GRIDS_640, (8, 16, 32), 4)
    assert [int(s.objectness.sum()) for s in tm.scales] == [int(i == scale) for i in range(3)]


def test_collision_keeps_larger_box():
    small, big = ann((90, 90, 110, 110), 1), ann((88, 88, 112, 112), 2)
    tm = T.assign_targets([[small, big]], GRIDS_640, (8, 16, 32), 4)
    assert tm.dropped == 1 and tm.num_positive == 1
    assert tm.scales[0].classes[0, 0, 12, 12, 2] == 1
    same = T.assign_targets([[ann((84, 84, 116, 116)), ann((84, 84, 116, 116))]], GRIDS_640, (8, 16, 32), 4)
    assert same.dropped == 1 and same.num_positive == 1


def test_ignored_and_unknown_boxes_are_not_targets():
    dont = Annotation("DontCare", 0.0, 0, (0, 0, 20, 20), -1)
    occluded = Annotation("Car", 0.0, 3, (40, 40, 60, 60), 0)
    truncated = Annotation("Car", 0.9, 0, (100, 100, 120, 120), 0)
    tm = T.assign_targets([[dont, occluded, truncated]], GRIDS_640, (8, 16, 32), 4)
    assert tm.num_positive == 0 and tm.dropped == 0


def test_anchor_slots_share_the_centre_cell():
    tm = T.assign_targets([[ann((84, 84, 116, 116))]], GRIDS_640, (8, 16, 32), 4, anchors=3)
    assert tm.scales[0].objectness.shape == (1, 3, 80, 80)
    assert tm.scales[0].objectness[0, :, 12, 12].tolist() == [1, 1, 1]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 1000))
def test_every_positive_cell_holds_one_distinct_box(seed):
    ds = synth_dataset(4, 4, seed, 64)
    anns = [ds[i].annotations for i in range(4)]
    tm = T.assign_targets(anns, [(8, 8), (4, 4), (2, 2)], (8, 16, 32), 4)
    total = sum(len(a) for a in anns)
    assert tm.num_positive + tm.dropped == total
    for s in tm.scales:
        assert np.all(s.classes.sum(-1) == s.objectness)


# ------------------------------------------------------------------ loss


def _zero_raw(b, nc, grids=((8, 8), (4, 4), (2, 2)), dtype=np.float64):
    return [Tensor(np.zeros((b, 1, h, w, 5 + nc), dtype)) for h, w in grids]


def test_objectness_at_zero_logits_is_ln2():
    tm = T.assign_targets([[]], [(8, 8), (4, 4), (2, 2)], (8, 16, 32), 4)
    total, parts = T.detection_loss(_zero_raw(1, 4), tm)
    assert parts["obj"] == pytest.approx(math.log(2), abs=1e-12)
    assert parts["cls"] == 0.0 and parts["box"] == 0.0
    assert float(total.data) == pytest.approx(0.6931, abs=1e-4)


def _saturated(boxes_per_image, mag=12.0):
    """Raw predictions that decode exactly onto the assigned targets."""
    tm = T.assign_targets(boxes_per_image, [(8, 8), (4, 4), (2, 2)], (8, 16, 32), 4)
    raw = []
    for st_ in tm.scales:
        r = np.zeros(st_.objectness.shape + (9,))
        r[..., 4] = np.where(st_.objectness > 0, mag, -mag)
        r[..., 5:] = np.where(st_.classes > 0, mag, -mag)
        for b, a, gy, gx in zip(*st_.positives()):
            l, t, rr, bb = st_.boxes[b, a, gy, gx]
            s = st_.stride
            fx = ((l + rr) / 2 - gx * s) / s
            fy = ((t + bb) / 2 - gy * s) / s
            r[b, a, gy, gx, 0] = math.log(fx / (1 - fx))
            r[b, a, gy, gx, 1] = math.log(fy / (1 - fy))
            r[b, a, gy, gx, 2] = math.log((rr - l) / s)
            r[b, a, gy, gx, 3] = math.log((bb - t) / s)
        raw.append(Tensor(r))
    return raw, tm


def test_saturated_exact_predictions_drive_loss_to_zero():
    boxes = [[ann((3, 5, 27, 22), 1), ann((30, 30, 60, 62), 3)], [ann((10, 40, 30, 60), 0)]]
    raw, tm = _saturated(boxes, 12.0)
    total, parts = T.detection_loss(raw, tm)
    assert parts["box"] < 1e-12
    assert float(total.data) < 1e-3
    weaker, _ = T.detection_loss(_saturated(boxes, 6.0)[0], tm)
    assert float(weaker.data) > float(total.data)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    ds = synth_dataset(2, 4, seed, 64)
    tm = T.assign_targets([ds[i].annotations for i in range(2)], [(8, 8), (4, 4), (2, 2)], (8, 16, 32), 4)
    raw = [Tensor(rng.normal(0, 3, size=(2, 1, h, w, 9))) for h, w in [(8, 8), (4, 4), (2, 2)]]
    total, parts = T.detection_loss(raw, tm)
    assert float(total.data) >= 0 and all(v >= 0 for v in parts.values())


def test_loss_weights_combine_components():
    raw, tm = _saturated([[ann((3, 5, 27, 22), 1)]], 1.0)
    cfg = T.TrainConfig(lambda_obj=1.0, lambda_cls=0.5, lambda_box=5.0)
    total, p = T.detection_loss(raw, tm, cfg)
    assert float(total.data) == pytest.approx(p["obj"] + 0.5 * p["cls"] + 5.0 * p["box"], rel=1e-12)


def test_loss_shape_mismatch():
    tm = T.assign_targets([[]], [(8, 8), (4, 4), (2, 2)], (8, 16, 32), 4)
    with pytest.raises(ShapeError):
        T.detection_loss(_zero_raw(1, 4, ((4, 4), (4, 4), (2, 2))), tm)


def test_loss_gradient_matches_finite_differences():
    assert check_block("detection_loss", probes=20, seed=3) < 1e-4


# ------------------------------------------------------------------ Adam and schedule


def test_adam_first_step_scalar():
    p = Tensor(np.array([2.0]))
    state = T.AdamState.for_params([p])
    T.adam_step([p], [np.array([1.0])], state, 0.1)
    assert state.step == 1
    assert p.data[0] == pytest.approx(2.0 - 0.1, abs=1e-8)


def test_adam_zero_gradient_and_zero_lr_are_bitwise_noops(rng):
    p = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    before = p.data.copy()
    state = T.AdamState.for_params([p])
    T.adam_step([p], [np.zeros((3, 4), np.float32)], state, 0.1)
    assert p.data.tobytes() == before.tobytes()
    T.adam_step([p], [rng.normal(size=(3, 4)).astype(np.float32)], state, 0.0)
    assert p.data.tobytes() == before.tobytes() and state.step == 2


def test_adam_matches_reference_over_steps(rng):
    p = Tensor(rng.normal(size=5))
    ref = p.data.copy()
    m, v = np.zeros(5), np.zeros(5)
    state = T.AdamState.for_params([p])
    for t in range(1, 8):
        g = rng.normal(size=5)
        T.adam_step([p], [g], state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-14)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3))
    state = T.AdamState.for_params([p])
    with pytest.raises(ShapeError):
        T.adam_step([p], [np.zeros(4)], state, 0.1)
    with pytest.raises(ShapeError):
        T.adam_step([p, p], [np.zeros(3)], state, 0.1)


def test_cosine_schedule_points():
    assert T.cosine_lr(0, 150, 0.001, 1e-5) == 0.001
    assert abs(T.cosine_lr(150, 150, 0.001, 1e-5) - 1e-5) < 1e-12
    assert abs(T.cosine_lr(75, 150, 0.001, 1e-5) - (0.001 + 1e-5) / 2) < 1e-12
    with pytest.raises(ParameterError):
        T.cosine_lr(151, 150, 0.001, 1e-5)


def test_config_defaults_and_validation():
    cfg = T.TrainConfig()
    assert (cfg.batch_size, cfg.lr0, cfg.patience, cfg.epochs) == (32, 0.001, 10, 150)
    assert cfg.eta_min == pytest.approx(1e-5)
    assert (cfg.lambda_box, cfg.lambda_obj, cfg.lambda_cls) == (5.0, 1.0, 0.5)
    assert cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
    with pytest.raises(ParameterError):
        T.TrainConfig(epochs=5, patience=10)


# ------------------------------------------------------------------ early stopping


def test_early_stop_examples():
    assert not T.early_stop_check([0.1 * i for i in range(1, 20)])
    assert T.early_stop_check([0.5] * 11)
    assert not T.early_stop_check([0.5] * 10)
    assert not T.early_stop_check([0.5] * 10 + [0.6])
    assert T.early_stop_check([0.5] + [0.5 + 1e-7] * 10)
    with pytest.raises(ParameterError):
        T.early_stop_check([])


# ------------------------------------------------------------------ loop


def _tiny(width=0.25):
    return build_model(ModelConfig(class_names=CLASSES, width=width, input_size=64), rng_seed=0)


def test_frozen_run_stops_on_patience():
    train_set, val_set = synth_dataset(8, 4, 0), synth_dataset(4, 4, 1)
    cfg = T.TrainConfig(batch_size=8, lr0=0.0, eta_min=0.0, epochs=15, patience=10, augment=AugmentConfig.off(),
                        freeze_bn=True)
    model = _tiny()
    before = [a.copy() for a in model.copy_state()]
    model, hist = T.train(model, train_set, val_set, cfg, seed=0)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(before, model.copy_state()))
    assert len(hist) == 11 and hist.stopped_early
    assert len(set(hist.maps)) == 1
    assert all(r.lr == 0.0 for r in hist.records)


def test_running_statistics_move_unless_frozen():
    samples = [synth_dataset(4, 4, 0)[i] for i in range(4)]
    for freeze in (False, True):
        model = _tiny()
        before = [a.copy() for a in model.copy_state()]
        cfg = T.TrainConfig(lr0=0.0, eta_min=0.0, freeze_bn=freeze)
        params = model.parameters()
        T.train_step(model, samples, cfg, T.AdamState.for_params(params), 0.0, params)
        same = all(x.tobytes() == y.tobytes() for x, y in zip(before, model.copy_state()))
        assert same is freeze


def test_training_is_deterministic_and_loss_decreases(tmp_path):
    train_set, val_set = synth_dataset(64, 4, 0), synth_dataset(16, 4, 1)
    cfg = T.TrainConfig(batch_size=16, lr0=0.005, epochs=5, patience=5)
    a, ha = T.train(_tiny(0.5), train_set, val_set, cfg, seed=7, out_dir=tmp_path)
    b, hb = T.train(_tiny(0.5), train_set, val_set, cfg, seed=7)
    assert ha.to_tsv(with_time=False) == hb.to_tsv(with_time=False)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.copy_state(), b.copy_state()))
    losses = [r.loss for r in ha.records]
    assert all(x > y for x, y in zip(losses, losses[1:])), losses
    assert len(ha) <= cfg.epochs
    assert (tmp_path / "best.ckpt").exists()
    tsv = (tmp_path / "history.tsv").read_text().splitlines()
    assert tsv[0].split("\t") == ["epoch", "loss", "precision", "recall", "map50", "seconds"]
    assert len(tsv) == 6


def test_non_finite_loss_names_the_batch(monkeypatch):
    set_check_finite(False)

    def bad(raw, targets, config=None):
        return Tensor(np.array(np.nan)), {"obj": math.nan, "cls": 0.0, "box": 0.0}

    monkeypatch.setattr(T, "detection_loss", bad)
    cfg = T.TrainConfig(batch_size=4, epochs=2, patience=1, augment=AugmentConfig.off())
    with pytest.raises(NonFiniteLossError, match="batch 0"):
        T.train(_tiny(), synth_dataset(8, 4, 0), synth_dataset(2, 4, 1), cfg)


def test_train_rejects_empty_sets():
    from vdet.data import Dataset
    with pytest.raises(ParameterError):
        T.train(_tiny(), Dataset([]), synth_dataset(2, 4, 1), T.TrainConfig(epochs=1, patience=1))
