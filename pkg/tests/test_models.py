import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mctueg.diffcore import finite_diff_check
from mctueg.models import (
    GeneratorObjective,
    LabelKindMismatch,
    NoiseBudget,
    ShapeMismatch,
    SurrogatePool,
    TaskObjective,
    apply_perturbation,
    build_generator,
    build_target,
    generator_forward,
    protect,
    surrogate_loss,
    task_loss,
)
from mctueg.tasksuite import ImageDims

EPS = 8 / 255


def test_budget_validation():
    with pytest.raises(ValueError):
        NoiseBudget(0.0)
    with pytest.raises(ValueError):
        NoiseBudget(1.5)


def test_zero_generator_gives_zero_field(small_suite):
    gen = build_generator(small_suite.dims, zero=True)
    field = generator_forward(gen, small_suite.train.images[:4])
    assert not field.any()
    assert np.array_equal(protect(gen, small_suite.train.images[:4], NoiseBudget()),
                          small_suite.train.images[:4])


def test_generator_is_deterministic(small_suite):
    a = build_generator(small_suite.dims, rng=np.random.default_rng(1))
    b = build_generator(small_suite.dims, rng=np.random.default_rng(1))
    x = small_suite.train.images[:3]
    assert np.array_equal(generator_forward(a, x), generator_forward(b, x))


def test_generator_rejects_wrong_shape():
    gen = build_generator(ImageDims())
    with pytest.raises(ShapeMismatch):
        generator_forward(gen, np.zeros((2, 3, 16, 16)))


def test_saturated_field_adds_full_budget():
    x = np.full((1, 1, 8, 8), 0.5)
    out = apply_perturbation(x, np.full_like(x, 40.0), NoiseBudget(EPS))
    np.testing.assert_allclose(out, 0.5 + EPS, atol=1e-12)


@given(arrays(np.float64, (4, 1, 8, 8), elements=st.floats(0, 1)),
       arrays(np.float64, (4, 1, 8, 8), elements=st.floats(-1e3, 1e3)))
@settings(max_examples=50, deadline=None)
def test_budget_and_range_hold(x, field):
    out = apply_perturbation(x, field, NoiseBudget(EPS))
    assert np.abs(out - x).max() <= EPS + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_uniform_logits_cross_entropy_is_log_k(small_suite):
    task = small_suite.task("shape")
    out = np.zeros((5, task.out_dim))
    labels = np.arange(5) % task.out_dim
    value, _ = task_loss(task, out, labels, small_suite.dims)
    assert value == pytest.approx(task.loss_weight * math.log(task.out_dim), abs=1e-9)


def test_perfect_regression_has_zero_loss(small_suite):
    task = small_suite.task("centroid")
    labels = small_suite.train.labels["centroid"][:4]
    value, grad = task_loss(task, labels.copy(), labels, small_suite.dims)
    assert value == 0.0 and not grad.any()


def test_losses_nonnegative(small_suite):
    rng = np.random.default_rng(0)
    pool = SurrogatePool(small_suite.seen, small_suite.dims, hidden=8, channels=4, rng=rng)
    x = small_suite.train.images[:6]
    for t in pool.task_ids:
        assert surrogate_loss(pool.surrogate(t), x, small_suite.train.labels[t][:6]) >= 0.0


def test_label_kind_mismatch(small_suite):
    surr = build_target(small_suite.task("shape"), small_suite.dims, hidden=8, channels=4)
    with pytest.raises(LabelKindMismatch):
        surrogate_loss(surr, small_suite.train.images[:4], small_suite.train.labels["mask"][:4])


def test_separate_trunks_have_own_segments(small_suite):
    shared = SurrogatePool(small_suite.seen[:2], small_suite.dims, hidden=8, channels=4)
    separate = SurrogatePool(small_suite.seen[:2], small_suite.dims, hidden=8, channels=4, shared_trunk=False)
    assert len(separate.params) > len(shared.params)
    assert any(n.startswith("trunk.shape.") for n in separate.params.names())


def _coords(n, rng, k=40):
    return rng.choice(n, size=min(k, n), replace=False)


@pytest.mark.parametrize("task_id", ["shape", "mask", "quadrant", "region", "brightness", "halves"])
def test_generator_objective_gradient(small_suite, task_id):
    rng = np.random.default_rng(11)
    dims = small_suite.dims
    gen = build_generator(dims, hidden=6, rng=rng)
    pool = SurrogatePool(small_suite.seen, dims, hidden=8, channels=4, rng=rng)
    obj = GeneratorObjective(gen, pool.surrogate(task_id), NoiseBudget())
    batch = (small_suite.train.images[:4], small_suite.train.labels[task_id][:4])
    report = finite_diff_check(obj, gen.params, batch, tol=1e-5, coords=_coords(len(gen.params), rng))
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("task_id", ["shape", "mask", "quadrant", "region", "brightness", "halves",
                                     "centroid", "density", "area", "contrast"])
def test_task_objective_gradient(small_suite, task_id):
    rng = np.random.default_rng(12)
    model = build_target(small_suite.task(task_id), small_suite.dims, hidden=8, channels=4, rng=rng)
    batch = (small_suite.train.images[:4], small_suite.train.labels[task_id][:4])
    report = finite_diff_check(TaskObjective(model), model.params, batch, tol=1e-5,
                               coords=_coords(len(model.params), rng, 60))
    assert report.passed, report.max_rel_error
