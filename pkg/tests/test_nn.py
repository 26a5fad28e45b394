import numpy as np
import pytest

from tacda import autodiff as ad
from tacda import nn
from tacda.gradcheck import check_graph_gradients


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_lstm(x, wx, wh, b, reverse=False):
    """Loop-by-loop LSTM over ``x`` of shape (n, L, M); returns the final hidden state."""
    n, length, _ = x.shape
    hidden = wh.shape[0]
    h, c = np.zeros((n, hidden)), np.zeros((n, hidden))
    for t in (range(length - 1, -1, -1) if reverse else range(length)):
        z = x[:, t] @ wx + h @ wh + b
        i, f, o = _sig(z[:, :hidden]), _sig(z[:, hidden:2 * hidden]), _sig(z[:, 2 * hidden:3 * hidden])
        g = np.tanh(z[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


@pytest.fixture
def small():
    arch = nn.Architecture(3, 7, hidden=5, head_hidden=(4,))
    rng = np.random.default_rng(0)
    return arch, nn.ModelBundle.initialize(arch, rng), rng.normal(size=(4, 3, 7))


def test_encoder_matches_reference_lstm(small):
    arch, bundle, x = small
    p = bundle["encoder_source"]
    ref = reference_lstm(x.transpose(0, 2, 1), p["l0.fw.Wx"], p["l0.fw.Wh"], p["l0.fw.b"])
    np.testing.assert_allclose(nn.encoder_forward(p, x, arch).data, ref, rtol=1e-12, atol=1e-14)


def test_bidirectional_encoder_concatenates_both_directions():
    arch = nn.Architecture(2, 6, hidden=3, bidirectional=True, head_hidden=(4,))
    rng = np.random.default_rng(1)
    p = nn.init_encoder(arch, rng)
    x = rng.normal(size=(2, 2, 6))
    seq = x.transpose(0, 2, 1)
    fw = reference_lstm(seq, p["l0.fw.Wx"], p["l0.fw.Wh"], p["l0.fw.b"])
    bw = reference_lstm(seq, p["l0.bw.Wx"], p["l0.bw.Wh"], p["l0.bw.b"], reverse=True)
    out = nn.encoder_forward(p, x, arch).data
    assert out.shape == (2, arch.feature_dim) == (2, 6)
    np.testing.assert_allclose(out, np.hstack([fw, bw]), rtol=1e-12, atol=1e-14)


def test_stacked_layers_shapes():
    arch = nn.Architecture(2, 5, hidden=4, layers=2, bidirectional=True, head_hidden=(3,))
    bundle = nn.ModelBundle.initialize(arch, np.random.default_rng(2))
    f = nn.encoder_forward(bundle["encoder_source"], np.zeros((3, 2, 5)), arch)
    assert f.shape == (3, 8)
    assert nn.decoder_forward(bundle["decoder"], f, arch).shape == (3, 2, 5)
    assert nn.predictor_forward(bundle["predictor"], f, arch).shape == (3,)


def test_wrong_window_shape_is_rejected(small):
    arch, bundle, _ = small
    with pytest.raises(ValueError, match="expected windows"):
        nn.encoder_forward(bundle["encoder_source"], np.zeros((2, 3, 8)), arch)


def test_initial_target_encoder_is_an_independent_copy(small):
    _, bundle, _ = small
    for k, v in bundle["encoder_source"].items():
        np.testing.assert_array_equal(v, bundle["encoder_target"][k])
        assert not np.shares_memory(v, bundle["encoder_target"][k])


def test_predictor_output_in_unit_interval(small):
    arch, bundle, x = small
    f = nn.encoder_forward(bundle["encoder_source"], x * 50, arch)
    y = nn.predictor_forward(bundle["predictor"], f, arch).data
    assert np.all((y >= 0) & (y <= 1))


def test_discriminator_probabilities_clamped(small):
    arch, bundle, _ = small
    d = dict(bundle["discriminator"])
    d["fc1.b"] = np.array([1e4])
    p = nn.discriminator_forward(d, np.zeros((2, arch.feature_dim)), arch)
    assert np.all(p == 1 - nn.PROB_CLAMP)


def test_log_probabilities_match_direct_formulas():
    z = np.array([-30.0, -2.0, 0.0, 3.0, 40.0])
    d = _sig(z)
    np.testing.assert_allclose(nn.log_prob_source(ad.Tensor(z)).data, np.log(d), rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(nn.log_prob_target(ad.Tensor(z[:3])).data, np.log1p(-d[:3]), rtol=1e-9)
    assert np.isfinite(nn.log_prob_target(ad.Tensor(z)).data).all()


def test_encoder_adversarial_variants():
    z = ad.Tensor(np.array([0.5, -1.0]))
    flip = nn.encoder_adversarial_loss(z, "label-flip").data
    lit = nn.encoder_adversarial_loss(z, "literal-minimax").data
    assert flip == pytest.approx(-np.mean(np.log(_sig(z.data))))
    assert lit == pytest.approx(np.mean(np.log(1 - _sig(z.data))))
    with pytest.raises(ValueError, match="unknown adversarial variant"):
        nn.encoder_adversarial_loss(z, "other")


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    params = {"w": np.array([1.0, -1.0, 0.0])}
    original = params["w"]
    nn.Adam(0.01).step(params, {"w": np.array([3.0, -0.5, 0.0])})
    np.testing.assert_allclose(params["w"], [0.99, -0.99, 0.0], atol=1e-8)
    assert original[0] == 1.0  # rebinds rather than writing in place


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="gradient shape"):
        nn.Adam(0.1).step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_architecture_round_trip():
    arch = nn.Architecture(4, 9, hidden=6, layers=2, bidirectional=True, head_hidden=(5, 3))
    assert nn.Architecture.from_dict(arch.to_dict()) == arch


def test_full_graph_gradients_match_finite_differences():
    results = check_graph_gradients()
    assert len(results) == 3
    for r in results:
        assert r.passed, r.line()
