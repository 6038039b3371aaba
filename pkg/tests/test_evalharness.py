import hashlib

import numpy as np
import pytest
from scipy import stats

from mctueg.config import ABLATION_METHODS, METHOD_SWITCHES, config_for_method
from mctueg.evalharness import (
    EmptyTestSet,
    ProtocolReport,
    baseline_random_noise,
    efficacy,
    evaluate_target,
    mean_iou,
    run_protocol,
    score,
    train_target,
    transform_dataset,
)
from mctueg.metascheme import build_suite
from mctueg.models import NoiseBudget, build_generator, build_target
from mctueg.tasksuite import DatasetSplit, ImageDims, SplitData


def test_zero_generator_leaves_data_unchanged(small_suite):
    gen = build_generator(small_suite.dims, zero=True)
    out = transform_dataset(gen, small_suite, NoiseBudget())
    assert np.array_equal(out.train.images, small_suite.train.images)


def test_transform_respects_budget_and_keeps_test(small_suite):
    gen = build_generator(small_suite.dims, rng=np.random.default_rng(0), out_scale=30.0)
    before = small_suite.test.images.copy()
    out = transform_dataset(gen, small_suite, NoiseBudget())
    assert np.abs(out.train.images - small_suite.train.images).max() <= 8 / 255 + 1e-12
    assert out.test is small_suite.test
    assert np.array_equal(small_suite.test.images, before)
    assert out.train.labels is small_suite.train.labels


def test_transform_hash_stable(small_suite):
    digests = []
    for _ in range(2):
        gen = build_generator(small_suite.dims, rng=np.random.default_rng(5))
        out = transform_dataset(gen, small_suite, NoiseBudget())
        digests.append(hashlib.sha256(out.train.images.tobytes()).hexdigest())
    assert digests[0] == digests[1]


def test_random_noise_tiny_budget(small_suite):
    out = baseline_random_noise(small_suite, NoiseBudget(1e-15), np.random.default_rng(0))
    np.testing.assert_allclose(out.train.images, small_suite.train.images, atol=1e-14)


def test_random_noise_is_uniform():
    eps = 8 / 255
    x = np.full((1000, 1, 32, 32), 0.5)
    data = SplitData(x, {}, np.arange(1000))
    split = DatasetSplit(data, data, 0, ImageDims(1, 32, 32))
    noisy = baseline_random_noise(split, NoiseBudget(eps), np.random.default_rng(0)).train.images
    dev = (noisy - x).ravel()
    assert np.abs(dev).max() <= eps
    assert stats.kstest(dev, stats.uniform(loc=-eps, scale=2 * eps).cdf).pvalue > 0.01


def test_zero_epochs_is_initialization(small_suite):
    task = small_suite.task("shape")
    m = train_target(task, small_suite, epochs=0, rng=np.random.default_rng(2), hidden=8, channels=4)
    init = build_target(task, small_suite.dims, 8, np.random.default_rng(2), 4)
    assert m.params == init.params


def test_target_training_is_seeded(small_suite):
    task = small_suite.task("centroid")
    a = train_target(task, small_suite, 1, 0.1, np.random.default_rng(3), 8, 4)
    b = train_target(task, small_suite, 1, 0.1, np.random.default_rng(3), 8, 4)
    assert a.params == b.params


def test_perfect_predictions():
    y = np.array([0, 1, 2, 1])
    assert score("accuracy", y, y) == 1.0
    assert score("miou", y, y, 3) == 1.0
    r = np.array([[0.2, 0.4], [0.1, 0.9]])
    assert score("mae", r, r) == 0.0 and score("mse", r, r) == 0.0


def test_constant_predictor_accuracy():
    y = np.repeat(np.arange(4), 250)
    assert score("accuracy", np.zeros_like(y), y) == pytest.approx(0.25)


def test_miou_hand_example():
    labels = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 0]])
    pred = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0]])
    # class 1: I=2, U=4 ; class 0: I=5, U=7
    assert mean_iou(pred, labels, 2) == pytest.approx((2 / 4 + 5 / 7) / 2)


def test_empty_test_set():
    with pytest.raises(EmptyTestSet):
        score("accuracy", np.zeros(0), np.zeros(0))


def test_efficacy_sign(small_suite):
    acc = small_suite.task("shape")
    mae = small_suite.task("centroid")
    assert efficacy(acc, 0.5, 0.8) > 0 and efficacy(acc, 0.9, 0.8) < 0
    assert efficacy(mae, 0.2, 0.1) > 0 and efficacy(mae, 0.05, 0.1) < 0


def test_each_variant_flips_one_switch(tiny_config):
    switches = ("meta_test", "meta_flat", "history", "second_order")
    full = config_for_method(tiny_config, "mctueg")
    for m in METHOD_SWITCHES:
        if m == "mctueg":
            continue
        cfg = config_for_method(tiny_config, m)
        assert sum(getattr(cfg, s) != getattr(full, s) for s in switches) == 1


def test_protocol_rows_and_directions(tiny_config, tmp_path):
    cfg = tiny_config.replace(methods=("raw", "random_noise", "mctueg"))
    report = run_protocol(cfg)
    split = build_suite(cfg)
    assert len(report.rows) == len(split.tasks) * 3
    for r in report.rows:
        t = split.task(r.task)
        assert r.direction == t.direction and r.seen == t.seen and r.metric == t.metric_kind
    paths = report.write(tmp_path)
    assert {p.name for p in paths} >= {"report.tsv", "report.jsonl", "metric_raw.tsv"}
    back = ProtocolReport.read_jsonl(tmp_path / "report.jsonl")
    assert [r.values for r in back.rows] == [r.values for r in report.rows]


def test_raw_protocol_equals_plain_training(tiny_config):
    cfg = tiny_config.replace(methods=("raw",), eval_tasks=("shape",))
    report = run_protocol(cfg)
    split = build_suite(cfg)
    t = split.task("shape")
    m = train_target(t, split, cfg.target_epochs, cfg.target_lr, np.random.default_rng([0, 12]),
                     cfg.target_hidden, cfg.target_channels, cfg.batch_size)
    assert report.row("shape", "raw").values == (evaluate_target(m, split),)


def test_protocol_never_touches_test_images(tiny_config):
    split = build_suite(tiny_config)
    before = split.test.images.copy()
    run_protocol(tiny_config.replace(methods=("random_noise", "mctueg")), split)
    assert np.array_equal(split.test.images, before)
