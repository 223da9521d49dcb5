import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cffl import estimator as est
from oracles import fd_gradient, loop_forward, max_rel_error, model_loss_fn, random_batch, random_model


def linear_model(w, b=None):
    w = np.asarray(w, dtype=float)
    return est.LayeredModel([est.Layer("dense", w, np.zeros(w.shape[0]) if b is None else b, "identity")])


def test_zero_model_zero_output():
    rng = np.random.default_rng(0)
    model = est.build_estimator(8, 5, 2, 3, 3, batchnorm=False, rng=rng)
    model.set_params([np.zeros_like(p) for p in model.params()])
    assert np.all(est.forward(model, rng.standard_normal((4, 2, 8))) == 0)


def test_identity_dense_flattens():
    x = np.random.default_rng(1).standard_normal((3, 2, 4))
    out = est.forward(linear_model(np.eye(8)), x)
    np.testing.assert_array_equal(out, x.reshape(3, 8))


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, kinds=2)
    x = rng.standard_normal((3, 2, 6))
    np.testing.assert_allclose(est.forward(model, x), loop_forward(model, x), atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        est.forward(linear_model(np.eye(8)), np.zeros((2, 2, 5)))


def test_mse_examples():
    x = np.zeros((1, 1))
    assert est.mse_loss(linear_model([[0.0]], np.array([2.0])), est.TrainBatch(x, np.zeros((1, 1)))) == 4.0
    rng = np.random.default_rng(2)
    model = random_model(rng)
    batch = random_batch(rng, n=5)
    same = est.TrainBatch(batch.inputs, est.forward(model, batch.inputs))
    assert est.mse_loss(model, same) == 0
    out = est.forward(model, batch.inputs)
    loop = sum(np.sum((out[i] - batch.targets[i]) ** 2) for i in range(5)) / 5
    assert abs(est.mse_loss(model, batch) - loop) < 1e-12
    with pytest.raises(ValueError):
        est.mse_loss(model, batch.subset(slice(0, 0)))


@pytest.mark.parametrize("seed", range(6))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    model = random_model(rng)
    batch = random_batch(rng)
    grads = est.backward(model, batch)
    assert max_rel_error(grads, fd_gradient(model_loss_fn(model, batch), model.params())) < 1e-4


def test_gradient_zero_at_fit():
    rng = np.random.default_rng(3)
    model = linear_model(rng.standard_normal((3, 12)), rng.standard_normal(3))
    x = rng.standard_normal((4, 2, 6))
    grads = est.backward(model, est.TrainBatch(x, est.forward(model, x)))
    assert all(np.allclose(g, 0, atol=1e-14) for g in grads)


def test_gradient_scales_with_loss_weight():
    rng = np.random.default_rng(4)
    model, batch = random_model(rng), random_batch(rng)
    _, g1 = est.loss_and_grad(model, batch)
    _, g3 = est.loss_and_grad(model, batch, weight=3.0)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(3 * a, b, atol=1e-13)
    # duplicating every sample leaves the mean loss and gradient unchanged
    dup = est.TrainBatch(np.concatenate([batch.inputs] * 2), np.concatenate([batch.targets] * 2))
    for a, b in zip(g1, est.backward(model, dup)):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_sgd_step_examples():
    rng = np.random.default_rng(5)
    model = random_model(rng)
    same = est.sgd_step(model, [np.zeros_like(p) for p in model.params()], 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(same.params(), model.params()))
    zero = est.sgd_step(model, model.params(), 1.0)
    assert all(np.all(p == 0) for p in zero.params())
    with pytest.raises(ValueError):
        est.sgd_step(model, model.params(), 0.0)
    with pytest.raises(ValueError):
        est.sgd_step(model, model.params()[:-1], 0.1)


def test_sgd_quadratic_converges():
    # least squares with a closed-form optimum
    rng = np.random.default_rng(6)
    x = rng.standard_normal((40, 2, 2))
    w_true = rng.standard_normal((2, 4))
    batch = est.TrainBatch(x, x.reshape(40, 4) @ w_true.T + 0.5)
    model = linear_model(np.zeros((2, 4)))
    for _ in range(1000):
        model = est.sgd_step(model, est.backward(model, batch), 0.1)
    np.testing.assert_allclose(model.layers[0].weight, w_true, atol=1e-6)
    np.testing.assert_allclose(model.layers[0].bias, 0.5, atol=1e-6)


def test_loss_monotone_small_steps():
    rng = np.random.default_rng(7)
    model, batch = random_model(rng, kinds=1), random_batch(rng, n=8)
    losses = []
    for _ in range(100):
        losses.append(est.mse_loss(model, batch))
        model = est.sgd_step(model, est.backward(model, batch), 1e-4)
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_deterministic_forward_backward():
    rng = np.random.default_rng(8)
    model, batch = random_model(rng), random_batch(rng)
    a, b = est.backward(model, batch), est.backward(model, batch)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_batchnorm_is_affine():
    rng = np.random.default_rng(9)
    layer = est.conv_layer(rng, 2, 3, 1, "identity", True)
    layer.bn_gamma, layer.bn_beta = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    layer.bn_mean, layer.bn_var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    x = rng.standard_normal((5, 2, 4))
    out = est.forward(est.LayeredModel([layer]), x)
    # explicit affine oracle: scale and offset per output channel
    scale = layer.bn_gamma / np.sqrt(layer.bn_var + est.BN_EPS)
    conv = np.einsum("oc,bct->bot", layer.weight[:, :, 0], x) + layer.bias[None, :, None]
    expected = scale[None, :, None] * conv + (layer.bn_beta - scale * layer.bn_mean)[None, :, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_calibrate_batchnorm_normalizes():
    rng = np.random.default_rng(10)
    model = est.build_estimator(8, 4, 2, 3, 3, True, rng=rng)
    x = 3 + 2 * rng.standard_normal((200, 2, 8))
    cal = est.calibrate_batchnorm(model, x)
    # with unit gamma and zero beta the first block's pre-activation is standardized
    _, caches = est.forward_cache(cal, x)
    xhat = caches[0]["xhat"]
    np.testing.assert_allclose(xhat.mean(axis=(0, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(xhat.var(axis=(0, 2)), 1, atol=1e-3)


def test_neighbor_floor():
    assert est.min_neighbor_samples(4000) == 400
    rng = np.random.default_rng(11)
    model = random_model(rng)
    own = random_batch(rng, n=40)
    with pytest.raises(est.NeighborContributionError):
        est.local_train(model, own, [random_batch(rng, n=3)], epochs=1)
    est.local_train(model, own, [random_batch(rng, n=4)], epochs=1)


def test_local_train_without_neighbors_is_plain_sgd():
    rng = np.random.default_rng(12)
    model, own = random_model(rng), random_batch(rng, n=10)
    trained = est.local_train(model, own, (), epochs=3, learning_rate=0.01, batch_size=None)
    ref = model
    for _ in range(3):
        ref = est.sgd_step(ref, est.backward(ref, own), 0.01)
    assert all(np.allclose(a, b, atol=1e-14) for a, b in zip(trained.params(), ref.params()))


def test_identical_neighbor_equals_doubled_weight():
    rng = np.random.default_rng(13)
    model, own = random_model(rng), random_batch(rng, n=16)
    a = est.local_train(model, own, [own], epochs=4, learning_rate=0.01, batch_size=None)
    b = est.local_train(model, own, (), epochs=4, learning_rate=0.01, batch_size=None, own_weight=2.0)
    assert abs(est.mse_loss(a, own) - est.mse_loss(b, own)) < 1e-9


def test_local_train_deterministic_under_seed():
    rng = np.random.default_rng(14)
    model, own = random_model(rng), random_batch(rng, n=20)
    a = est.local_train(model, own, epochs=2, batch_size=4, rng=np.random.default_rng(1))
    b = est.local_train(model, own, epochs=2, batch_size=4, rng=np.random.default_rng(1))
    assert np.array_equal(a.flat(), b.flat())


def test_frozen_prefix_untouched():
    rng = np.random.default_rng(15)
    model, own = random_model(rng, kinds=2), random_batch(rng, n=8)
    out = est.local_train(model, own, epochs=2, learning_rate=0.05, batch_size=None, first_layer=1)
    assert all(np.array_equal(a, b) for a, b in zip(out.layers[0].params(), model.layers[0].params()))
    assert not np.array_equal(out.layers[-1].weight, model.layers[-1].weight)


def test_nmse_examples():
    h = np.random.default_rng(16).standard_normal(20)
    assert est.nmse(h, h) == est.NMSE_FLOOR_DB
    assert est.nmse(np.zeros(20), h) == pytest.approx(0.0, abs=1e-12)
    assert est.nmse(1.1 * h, h) == pytest.approx(-20.0, abs=1e-9)
    with pytest.raises(ValueError):
        est.nmse(h, np.zeros(20))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gradient_congruent_and_finite(seed):
    rng = np.random.default_rng(seed)
    model, batch = random_model(rng), random_batch(rng)
    grads = est.backward(model, batch)
    assert [g.shape for g in grads] == [p.shape for p in model.params()]
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_dataset_layout_round_trip():
    rng = np.random.default_rng(17)
    from cffl.channel import PilotDataset
    truth = rng.standard_normal((3, 4, 2)) + 1j * rng.standard_normal((3, 4, 2))
    ds = PilotDataset(rng.standard_normal((3, 5)) + 0j, truth, np.zeros(3))
    batch = est.dataset_to_batch(ds)
    assert batch.inputs.shape == (3, 2, 5) and batch.targets.shape == (3, 16)
    np.testing.assert_array_equal(est.targets_to_channels(batch.targets, 4, 2), truth)
