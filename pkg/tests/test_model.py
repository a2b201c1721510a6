import numpy as np
import pytest

from marginrepair.model import (
    HeadModel,
    Sample,
    activate,
    activation_derivative,
    competitor,
    forward,
    gap,
    logits,
    logits_batch,
    predict,
)

from helpers import random_model
from oracles import central_difference


def identity_model(activation="relu", b_c=None):
    return HeadModel(
        W=np.eye(2),
        b=np.zeros(2),
        W_c=np.eye(2),
        b_c=np.zeros(2) if b_c is None else b_c,
        activation=activation,
    )


def test_forward_identity_relu():
    z, h, s = forward(identity_model(), np.array([1.0, -1.0]))
    assert np.allclose(z, [1.0, -1.0])
    assert np.allclose(h, [1.0, 0.0])
    assert np.allclose(s, [1.0, 0.0])


def test_forward_zero_input_tanh():
    m = identity_model("tanh", b_c=np.array([0.4, -0.2]))
    _, _, s = forward(m, np.zeros(2))
    assert np.allclose(s, m.b_c)


def test_forward_matches_reimplementation():
    m = random_model(3, d_in=4, d_out=5, n_classes=3)
    rng = np.random.default_rng(4)
    v = rng.standard_normal(4)
    z, h, s = forward(m, v)
    # plain re-implementation of the three products
    z_ref = np.array([m.W[i] @ v + m.b[i] for i in range(5)])
    h_ref = np.tanh(z_ref)
    s_ref = np.array([m.W_c[c] @ h_ref + m.b_c[c] for c in range(3)])
    assert np.allclose(z, z_ref, atol=1e-12)
    assert np.allclose(h, h_ref, atol=1e-12)
    assert np.allclose(s, s_ref, atol=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(identity_model(), np.zeros(3))


def score_model(scores):
    """Model whose logits equal ``scores`` for v = 0, built through b_c."""
    d = 2
    return HeadModel(
        W=np.zeros((d, d)),
        b=np.zeros(d),
        W_c=np.zeros((len(scores), d)),
        b_c=np.array(scores, dtype=float),
        activation="relu",
    )


def test_gap_two_class():
    m = score_model([2.0, 1.0])
    assert gap(m, np.zeros(2), 0) == pytest.approx(1.0)


def test_gap_tie_is_zero():
    m = score_model([1.0, 1.0])
    assert gap(m, np.zeros(2), 0) == 0.0


def test_gap_three_class():
    m = score_model([0.3, 0.9, 0.1])
    assert gap(m, np.zeros(2), 2) == pytest.approx(-0.8)


def test_competitor_rules():
    assert competitor(score_model([2.0, 1.0]), np.zeros(2), 0) == 1
    assert competitor(score_model([1.0, 5.0, 5.0]), np.zeros(2), 0) == 1  # tie -> low index
    assert competitor(score_model([0.3, 0.9, 0.1]), np.zeros(2), 1) == 0


def test_predict_rules():
    assert predict(score_model([0.0, 1.0]), np.zeros(2)) == 1
    assert predict(score_model([1.0, 1.0]), np.zeros(2)) == 0  # tie -> low index


def test_predict_gap_consistency():
    rng = np.random.default_rng(9)
    for trial in range(100):
        m = random_model(int(rng.integers(2**31)), d_in=3, d_out=4, n_classes=3)
        v = rng.standard_normal(3)
        y_hat = predict(m, v)
        assert gap(m, v, y_hat) >= 0.0
        # gap always reads the competitor's score
        s = logits(m, v)
        c = competitor(m, v, y_hat)
        assert gap(m, v, y_hat) == pytest.approx(s[y_hat] - s[c], abs=1e-12)


def test_positive_gap_iff_predicted():
    rng = np.random.default_rng(31)
    for _ in range(200):
        m = random_model(int(rng.integers(2**31)), d_in=3, d_out=3, n_classes=3)
        v = rng.standard_normal(3)
        s = logits(m, v)
        for y in range(3):
            g = gap(m, v, y)
            if g > 0:
                assert predict(m, v) == y
            elif predict(m, v) == y:
                # y wins only through the tie rule, so the gap is exactly 0
                assert g == 0.0


def test_invalid_class():
    with pytest.raises(ValueError):
        gap(identity_model(), np.zeros(2), 2)


def test_relu_derivative_piecewise():
    out = activation_derivative("relu", np.array([1.0, -1.0, 0.0]))
    assert np.array_equal(out, [1.0, 0.0, 0.0])  # subgradient at 0 fixed to 0


def test_tanh_derivative_at_zero():
    assert activation_derivative("tanh", np.array([0.0]))[0] == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "softplus"])
def test_smooth_derivatives_match_finite_differences(kind):
    rng = np.random.default_rng(12)
    z = rng.uniform(-3.0, 3.0, size=25)
    analytic = activation_derivative(kind, z)
    numeric = np.array(
        [central_difference(lambda t: float(activate(kind, t)[0]), np.array([zi]))[0] for zi in z]
    )
    assert np.max(np.abs(analytic - numeric)) < 1e-6


def test_sigmoid_derivative_at_half():
    numeric = central_difference(lambda t: float(activate("sigmoid", t)[0]), np.array([0.5]))[0]
    assert activation_derivative("sigmoid", np.array([0.5]))[0] == pytest.approx(numeric, abs=1e-6)


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid", "softplus"])
def test_activations_are_1_lipschitz(kind):
    rng = np.random.default_rng(13)
    a = rng.uniform(-10, 10, size=10_000)
    b = rng.uniform(-10, 10, size=10_000)
    lhs = np.abs(activate(kind, a) - activate(kind, b))
    assert np.all(lhs <= np.abs(a - b) + 1e-12)


def test_logits_batch_matches_single():
    m = random_model(21, d_in=5, d_out=4, n_classes=3)
    rng = np.random.default_rng(22)
    V = rng.standard_normal((7, 5))
    batch = logits_batch(m, V)
    for i in range(7):
        assert np.allclose(batch[i], logits(m, V[i]), atol=1e-12)


def test_model_validation():
    with pytest.raises(ValueError):
        HeadModel(W=np.eye(2), b=np.zeros(3), W_c=np.eye(2), b_c=np.zeros(2), activation="relu")
    with pytest.raises(ValueError):
        HeadModel(W=np.eye(2), b=np.zeros(2), W_c=np.zeros((1, 2)), b_c=np.zeros(1), activation="relu")
    with pytest.raises(ValueError):
        HeadModel(W=np.eye(2), b=np.zeros(2), W_c=np.eye(2), b_c=np.zeros(2), activation="gelu")
    with pytest.raises(ValueError):
        Sample(v=np.array([np.inf, 0.0]), label=0, id="x")


def test_model_arrays_frozen():
    m = identity_model()
    with pytest.raises(ValueError):
        m.W[0, 0] = 5.0
