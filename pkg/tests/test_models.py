import math

import numpy as np
import pytest

from pamlab.errors import (
    ConfigError,
    DimensionError,
    EmptyDataError,
    LabelError,
    UnsupportedModelError,
)
from pamlab.models import (
    Batch,
    ModelSpec,
    accuracy,
    adapter_sites,
    ce_loss,
    forward,
    head_coords,
    layout,
    loss_and_grad,
    new_adapter,
    predict,
    trainable_mask,
)


def logistic_spec(d=3, c=4):
    return ModelSpec(kind="logistic", input_dim=d, num_classes=c,
                     hidden_dim=0, adapter_rank=0)


def mlp_spec(d=4, h=6, c=5, rank=2, seed=0):
    spec = ModelSpec(kind="mlp2", input_dim=d, num_classes=c, hidden_dim=h,
                     adapter_rank=rank)
    rng = np.random.default_rng(seed)
    spec.frozen_base = rng.standard_normal(spec.dim) * 0.3
    return spec


def rand_batch(rng, n, d, classes):
    x = rng.standard_normal((n, d))
    y = rng.choice(np.asarray(classes), size=n)
    return Batch(x, y)


def test_batch_validation():
    with pytest.raises(EmptyDataError):
        Batch(np.empty((0, 3)), np.empty(0, dtype=int))
    with pytest.raises(DimensionError):
        Batch(np.zeros((2, 3)), np.zeros(3, dtype=int))
    with pytest.raises(LabelError):
        Batch(np.zeros((2, 3)), np.array([0, -1]))


def test_spec_validation():
    with pytest.raises(UnsupportedModelError):
        ModelSpec(kind="tree", input_dim=2, num_classes=2, hidden_dim=0,
                  adapter_rank=0)
    with pytest.raises(ConfigError):
        ModelSpec(kind="mlp2", input_dim=2, num_classes=2, hidden_dim=4,
                  activation="relu6", adapter_rank=0)
    with pytest.raises(ConfigError):
        ModelSpec(kind="mlp2", input_dim=2, num_classes=2, hidden_dim=4,
                  adapter_rank=3)  # exceeds min(d, h) = 2


def test_uniform_logits_give_log_c():
    spec = logistic_spec(d=3, c=4)
    theta = np.zeros(spec.dim)
    batch = Batch(np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
    loss = ce_loss(spec, theta, batch)
    assert abs(loss - math.log(4)) < 1e-12


def test_binary_margin_hand_value():
    # logits (0, 1), true label 1: loss = log(1 + e^{-1})
    spec = logistic_spec(d=1, c=2)
    theta = np.zeros(spec.dim)
    lay = layout(spec)
    w = lay.view(theta, "w")
    w[0, 1] = 1.0
    batch = Batch(np.array([[1.0]]), np.array([1]))
    loss = ce_loss(spec, theta, batch)
    assert abs(loss - math.log1p(math.exp(-1.0))) < 1e-12


def test_logit_shift_invariance():
    spec = logistic_spec(d=3, c=4)
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(spec.dim)
    batch = rand_batch(rng, 32, 3, range(4))
    base = ce_loss(spec, theta, batch)
    shifted = theta.copy()
    lay = layout(spec)
    lay.view(shifted, "b")[:] += 7.5  # same constant on every logit
    assert abs(ce_loss(spec, shifted, batch) - base) < 1e-10


def test_zero_adapter_matches_frozen_base():
    spec = mlp_spec()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, spec.input_dim))
    base_logits = forward(spec, spec.frozen_base.copy(), x)
    adapter = new_adapter(spec, rng)
    from pamlab.params import materialize

    delta = materialize(adapter, layout(spec))
    np.testing.assert_array_equal(delta, np.zeros(spec.dim))
    np.testing.assert_array_equal(
        forward(spec, spec.frozen_base + delta, x), base_logits
    )


@pytest.mark.parametrize("kind", ["logistic", "mlp2"])
def test_gradient_matches_central_fd(kind):
    rng = np.random.default_rng(5)
    spec = logistic_spec() if kind == "logistic" else mlp_spec()
    theta = rng.standard_normal(spec.dim) * 0.5
    batch = rand_batch(rng, 24, spec.input_dim, range(spec.num_classes))
    _, g = loss_and_grad(spec, theta, batch)
    step = 1e-5
    coords = rng.choice(spec.dim, size=min(20, spec.dim), replace=False)
    for j in coords:
        up, dn = theta.copy(), theta.copy()
        up[j] += step
        dn[j] -= step
        fd = (ce_loss(spec, up, batch) - ce_loss(spec, dn, batch)) / (2 * step)
        rel = abs(g[j] - fd) / (abs(fd) + 1e-8)
        assert rel < 1e-5, f"coord {j}: analytic {g[j]} vs fd {fd}"


def test_masked_gradient_is_zero_on_frozen_coords():
    spec = mlp_spec()
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(spec.dim)
    batch = rand_batch(rng, 16, spec.input_dim, range(spec.num_classes))
    mask = trainable_mask(spec, new_classes=[3, 4])
    _, g = loss_and_grad(spec, theta, batch, mask=mask)
    assert np.all(g[~mask] == 0.0)
    assert np.any(g[mask] != 0.0)


def test_class_subset_loss_and_labels():
    spec = logistic_spec(d=2, c=6)
    theta = np.zeros(spec.dim)
    batch = Batch(np.ones((2, 2)), np.array([2, 4]))
    loss = ce_loss(spec, theta, batch, classes=[2, 4])
    assert abs(loss - math.log(2)) < 1e-12  # two active classes, uniform
    with pytest.raises(LabelError):
        ce_loss(spec, theta, batch, classes=[2])  # label 4 not in subset


def test_predict_tie_breaks_to_lowest_class_id():
    spec = logistic_spec(d=2, c=5)
    theta = np.zeros(spec.dim)  # all logits equal
    x = np.zeros((3, 2))
    np.testing.assert_array_equal(predict(spec, theta, x, class_subset=[1, 3, 4]),
                                  np.array([1, 1, 1]))
    np.testing.assert_array_equal(predict(spec, theta, x), np.zeros(3, dtype=int))


def test_accuracy_at_zero_theta_is_lowest_class_frequency():
    spec = logistic_spec(d=2, c=3)
    theta = np.zeros(spec.dim)
    rng = np.random.default_rng(9)
    batch = rand_batch(rng, 50, 2, [0, 1, 2])
    freq0 = float(np.mean(batch.labels == 0))
    assert accuracy(spec, theta, batch) == pytest.approx(freq0, abs=1e-12)


def test_head_coords_layout_and_errors():
    spec = mlp_spec(d=4, h=6, c=5)
    lay = layout(spec)
    idx = head_coords(spec, [2])
    w2 = lay.slice_of("w2")
    b2 = lay.slice_of("b2")
    expect_w = [w2.start + row * 5 + 2 for row in range(6)]
    assert idx.tolist() == expect_w + [b2.start + 2]
    with pytest.raises(LabelError):
        head_coords(spec, [5])
    assert adapter_sites(spec) == ("w1",)
    assert adapter_sites(logistic_spec()) == ()
