import io

import numpy as np
import pytest

from atlmetric.encoder import (
    DegenerateNorm,
    EncoderParams,
    ForwardCounter,
    GradientBundle,
    backward,
    forward,
    init_encoder,
    load_checkpoint,
    normalization_backward,
    save_checkpoint,
    sgd_step,
)
from gradcheck import numeric_grad, rel_error


def test_init_is_deterministic():
    a = init_encoder(10, [7], 5, seed=3)
    b = init_encoder(10, [7], 5, seed=3)
    assert a.equals(b)
    assert not a.equals(init_encoder(10, [7], 5, seed=4))


def test_init_shapes_and_bounds():
    p = init_encoder(32, [], 128, seed=0)
    assert p.num_layers == 1
    assert p.weights[0].shape == (32, 128)
    assert p.biases[0].shape == (128,)
    assert np.abs(p.weights[0]).max() <= 1 / np.sqrt(32)


@pytest.mark.parametrize("dims", [(0, [], 4), (4, [0], 4), (4, [], 0)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_encoder(dims[0], dims[1], dims[2])


def test_params_reject_incompatible_layers():
    with pytest.raises(ValueError):
        EncoderParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ValueError):
        EncoderParams([np.full((2, 2), np.nan)], [np.zeros(2)])


def identity_params(d=2):
    return EncoderParams([np.eye(d)], [np.zeros(d)])


class TestForward:
    def test_identity_layer_normalizes(self):
        u, _ = forward(identity_params(), np.array([[3.0, 4.0]]), ForwardCounter())
        np.testing.assert_allclose(u, [[0.6, 0.8]], atol=1e-15)

    def test_outputs_unit_norm(self):
        rng = np.random.default_rng(0)
        p = init_encoder(9, [16, 8], 6, seed=1)
        u, _ = forward(p, rng.standard_normal((50, 9)), ForwardCounter())
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-9)

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            forward(identity_params(), np.ones((1, 3)), ForwardCounter())

    def test_degenerate_norm(self):
        with pytest.raises(DegenerateNorm):
            forward(identity_params(), np.zeros((1, 2)), ForwardCounter())

    def test_counter_counts_images(self):
        c = ForwardCounter()
        p = init_encoder(4, [], 3, seed=0)
        forward(p, np.ones((5, 4)), c)
        forward(p, np.ones((2, 4)), c)
        assert c.count == 7


def test_radial_direction_annihilated():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((20, 7)) * rng.uniform(0.1, 10, size=(20, 1))
    norms = np.linalg.norm(z, axis=1)
    u = z / norms[:, None]
    np.testing.assert_allclose(normalization_backward(u, norms, z), 0.0, atol=1e-10)
    # upstream parallel to the output: no gradient reaches the pre-normalization vector
    np.testing.assert_allclose(normalization_backward(u, norms, 3.0 * u), 0.0, atol=1e-12)


def test_zero_upstream_gives_zero_bundle():
    p = init_encoder(5, [6], 4, seed=2)
    u, cache = forward(p, np.random.default_rng(0).standard_normal((3, 5)), ForwardCounter())
    g = backward(p, cache, np.zeros_like(u))
    assert all(not w.any() for w in g.weights)
    assert all(not b.any() for b in g.biases)
    assert not g.inputs.any()


@pytest.mark.parametrize("config", range(5))
def test_backward_matches_finite_differences(config):
    rng = np.random.default_rng(100 + config)
    hidden = [[], [6], [5, 4]][config % 3]
    p = init_encoder(5, hidden, 4, seed=config)
    x = rng.standard_normal((3, 5))
    c = rng.standard_normal((3, 4))

    def f():
        return float(np.sum(c * forward(p, x, ForwardCounter())[0]))

    u, cache = forward(p, x, ForwardCounter())
    g = backward(p, cache, c)
    for i in range(p.num_layers):
        assert rel_error(g.weights[i], numeric_grad(f, p.weights[i])) < 1e-5
        assert rel_error(g.biases[i], numeric_grad(f, p.biases[i])) < 1e-5
    assert rel_error(g.inputs, numeric_grad(f, x)) < 1e-5


def test_backward_shape_mismatch():
    p = init_encoder(3, [], 2, seed=0)
    _, cache = forward(p, np.ones((2, 3)), ForwardCounter())
    with pytest.raises(ValueError):
        backward(p, cache, np.ones((3, 2)))


class TestSgd:
    def test_hand_arithmetic(self):
        p = EncoderParams([np.array([[1.0]])], [np.array([0.0])])
        g = GradientBundle([np.array([[0.5]])], [np.array([0.0])], np.zeros((1, 1)))
        assert sgd_step(p, g, 0.04).weights[0][0, 0] == pytest.approx(0.98, abs=1e-15)

    def test_rejects_nonpositive_lr(self):
        p = identity_params()
        g = GradientBundle([np.zeros((2, 2))], [np.zeros(2)], np.zeros((1, 2)))
        for lr in (0.0, -0.1):
            with pytest.raises(ValueError):
                sgd_step(p, g, lr)

    def test_rejects_nan(self):
        p = identity_params()
        g = GradientBundle([np.full((2, 2), np.nan)], [np.zeros(2)], np.zeros((1, 2)))
        with pytest.raises(ValueError):
            sgd_step(p, g, 0.1)

    def test_frozen_layers_unchanged(self):
        p = init_encoder(3, [4], 2, seed=0)
        g = GradientBundle([np.ones((3, 4)), np.ones((4, 2))], [np.ones(4), np.ones(2)],
                           np.zeros((1, 3)))
        q = sgd_step(p, g, 0.5, frozen_layers=[0])
        assert q.weights[0].tobytes() == p.weights[0].tobytes()
        np.testing.assert_array_equal(q.weights[1], p.weights[1] - 0.5)
        assert q.step == p.step + 1


def test_checkpoint_roundtrip_is_exact_and_byte_stable():
    p = init_encoder(6, [5], 4, seed=9)
    p.step = 17
    extra = {"class_weights": np.random.default_rng(0).standard_normal((3, 4))}
    buf1, buf2 = io.BytesIO(), io.BytesIO()
    save_checkpoint(buf1, p, extra, {"loss": "atl"})
    save_checkpoint(buf2, p, extra, {"loss": "atl"})
    assert buf1.getvalue() == buf2.getvalue()
    buf1.seek(0)
    q, arrays, meta = load_checkpoint(buf1)
    assert q.equals(p)
    assert (q.seed, q.step) == (9, 17)
    assert arrays["class_weights"].tobytes() == extra["class_weights"].tobytes()
    assert meta == {"loss": "atl"}


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        load_checkpoint(io.BytesIO(b"not a checkpoint at all"))
