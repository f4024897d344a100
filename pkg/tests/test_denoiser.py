import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate

from microdiff.denoiser import (
    Architecture, DenoiserModel, GaussianOracle, TrainBatch, analytic_param_count,
    apply_label_dropout, gaussian_oracle_eps, load_checkpoint, noise_prediction_loss,
    save_checkpoint, time_embedding, train, train_step,
)
from microdiff.diffusion import forward_sample, from_phase
from microdiff.errors import DivergenceError, ValidationError
from microdiff.synth import GenSpec, generate_dataset

from helpers import fd_gradient_error

SMALL = dict(base_channels=4, emb_dim=16, max_groups=2)


# ----------------------------------------------------------------- oracle

def test_oracle_point_mass_recovers_noise(sched, rng):
    eps = rng.standard_normal((8, 8))
    for t in (1, 10, 500, 1000):
        x_t = forward_sample(np.full((8, 8), 0.3), t, eps, sched)
        np.testing.assert_allclose(gaussian_oracle_eps(x_t, t, 0.3, 0.0, sched), eps, atol=1e-12)


def test_oracle_flat_prior_limit(sched, rng):
    x_t = rng.standard_normal(100)
    for t in (1, 500, 1000):
        assert np.abs(gaussian_oracle_eps(x_t, t, 0.0, 1e12, sched)).max() < 1e-5


@pytest.mark.parametrize("t", [1, 50, 300, 800, 1000])
def test_oracle_matches_quadrature_posterior(sched, t):
    ab = sched.alpha_bar_at(t)
    for x_t in (-2.0, -0.3, 0.0, 0.7, 1.9):
        def lik(x0):
            return np.exp(-0.5 * x0 ** 2 - 0.5 * (x_t - np.sqrt(ab) * x0) ** 2 / (1 - ab))
        kw = dict(points=[x_t / np.sqrt(ab)], limit=200, epsabs=1e-13, epsrel=1e-10)
        z = integrate.quad(lik, -12, 12, **kw)[0]
        m = integrate.quad(lambda u: u * lik(u), -12, 12, **kw)[0] / z
        want = (x_t - np.sqrt(ab) * m) / np.sqrt(1 - ab)
        got = gaussian_oracle_eps(np.array([x_t]), t, 0.0, 1.0, sched)[0]
        assert got == pytest.approx(want, abs=1e-6)
        assert got == pytest.approx(x_t * np.sqrt(1 - ab), abs=1e-12)


def test_oracle_rejects_bad_inputs(sched):
    with pytest.raises(ValidationError):
        gaussian_oracle_eps(np.zeros(3), 5, 0.0, -1.0, sched)
    with pytest.raises(ValidationError):
        gaussian_oracle_eps(np.zeros(3), 0, 0.0, 1.0, sched)
    with pytest.raises(ValidationError):
        gaussian_oracle_eps(np.zeros(3), 1001, 0.0, 1.0, sched)


# ----------------------------------------------------------------- time embedding

@given(st.integers(1, 1000), st.sampled_from([2, 8, 32, 64]))
def test_time_embedding_range_and_purity(t, dim):
    e = time_embedding(t, dim, 1000)
    assert e.shape == (dim,)
    assert np.all(np.abs(e) <= 1.0)
    np.testing.assert_array_equal(e, time_embedding(t, dim, 1000))


def test_time_embedding_separates_ends():
    assert np.linalg.norm(time_embedding(1, 32) - time_embedding(1000, 32)) > 0.1


def test_time_embedding_sin_cos_pairs():
    e = time_embedding(7, 16)
    np.testing.assert_allclose(e[:8] ** 2 + e[8:] ** 2, 1.0, atol=1e-12)


def test_time_embedding_rejects():
    with pytest.raises(ValidationError):
        time_embedding(3, 7)
    with pytest.raises(ValidationError):
        time_embedding(0, 8, 1000)


# ----------------------------------------------------------------- architecture

@pytest.mark.parametrize("kw", [
    dict(), dict(base_channels=8), dict(num_res_blocks=1), dict(num_labels=3),
    dict(attention=True), dict(dims=3, base_channels=4), dict(channel_mult=(1, 2)),
    dict(dims=3, num_labels=4, attention=True, base_channels=6, max_groups=3),
])
def test_param_count_matches_analytic(kw):
    arch = Architecture(**kw)
    assert DenoiserModel(arch).num_parameters == analytic_param_count(arch)


def test_architecture_rejects():
    for kw in (dict(dims=1), dict(base_channels=0), dict(emb_dim=7), dict(num_labels=1),
               dict(channel_mult=())):
        with pytest.raises(ValidationError):
            Architecture(**kw)


@pytest.mark.parametrize("dims,shape", [(2, (16, 16)), (2, (3, 8, 12)), (3, (8, 8, 8))])
def test_untrained_output_shape_and_zero(dims, shape, rng):
    m = DenoiserModel(Architecture(dims=dims, **SMALL))
    x = rng.standard_normal(shape)
    out = m(x, 17)
    assert out.shape == x.shape
    assert np.all(out == 0.0)


def test_output_finite_and_bit_identical(rng):
    m = DenoiserModel(Architecture(num_labels=3, **SMALL), seed=4)
    torch.manual_seed(0)
    torch.nn.init.normal_(m.net.conv_out.weight)
    x = rng.standard_normal((2, 16, 16))
    a, b = m(x, 200, label=1), m(x, 200, label=1)
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, m(x, 200))


def test_same_seed_same_weights():
    a = DenoiserModel(Architecture(**SMALL), seed=3).flat_parameters()
    b = DenoiserModel(Architecture(**SMALL), seed=3).flat_parameters()
    c = DenoiserModel(Architecture(**SMALL), seed=4).flat_parameters()
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_predict_rejects_bad_shapes_and_labels(rng):
    m = DenoiserModel(Architecture(**SMALL))
    with pytest.raises(ValidationError):
        m(rng.standard_normal((2, 8, 8, 8)), 3)
    with pytest.raises(ValidationError):
        m(rng.standard_normal((10, 10)), 3)
    with pytest.raises(ValidationError):
        m(rng.standard_normal((8, 8)), 3, label=0)
    c = DenoiserModel(Architecture(num_labels=3, **SMALL))
    with pytest.raises(ValidationError):
        c(rng.standard_normal((8, 8)), 3, label=3)
    with pytest.raises(ValidationError):
        c(rng.standard_normal((8, 8)), 3, label=-1)


def test_train_batch_validation():
    with pytest.raises(ValidationError):
        TrainBatch(np.zeros((0, 8, 8)))
    with pytest.raises(ValidationError):
        TrainBatch(np.zeros((2, 8, 8)), labels=np.zeros(3))


# ----------------------------------------------------------------- loss and gradients

def test_zero_output_loss_is_unit(sched, rng):
    m = DenoiserModel(Architecture(**SMALL))
    x0 = rng.choice([-1.0, 1.0], size=(40, 16, 16))
    t = rng.integers(1, 1001, 40)
    eps = rng.standard_normal(x0.shape)
    loss = noise_prediction_loss(m, x0, t, eps, None, sched).item()
    assert loss == pytest.approx(1.0, rel=0.05)


def test_oracle_substitution_gives_zero_loss(sched, rng):
    x0 = np.full((4, 8, 8), -0.2)
    eps = rng.standard_normal(x0.shape)
    oracle = GaussianOracle(-0.2, 0.0, sched)
    for t in (1, 400, 1000):
        pred = oracle(forward_sample(x0, t, eps, sched), t)
        assert np.mean((pred - eps) ** 2) < 1e-20


@pytest.mark.parametrize("arch,shape", [
    (Architecture(**SMALL), (2, 8, 8)),
    (Architecture(num_labels=3, attention=True, **SMALL), (2, 8, 8)),
    (Architecture(dims=3, **SMALL), (2, 8, 8, 8)),
])
def test_gradient_matches_finite_differences(arch, shape):
    assert fd_gradient_error(arch, shape, seed=11) < 1e-3


def test_label_dropout_rate():
    rng = np.random.default_rng(0)
    out = apply_label_dropout(np.zeros(100_000, dtype=int), 9, 0.1, rng)
    frac = np.mean(out == 9)
    assert abs(frac - 0.1) < 0.01
    assert set(np.unique(out)) <= {0, 9}


def test_label_dropout_extremes():
    rng = np.random.default_rng(0)
    lab = np.arange(5)
    np.testing.assert_array_equal(apply_label_dropout(lab, 7, 0.0, rng), lab)
    np.testing.assert_array_equal(apply_label_dropout(lab, 7, 1.0, rng), np.full(5, 7))


def test_train_step_rejects_bad_dropout(sched, rng):
    m = DenoiserModel(Architecture(**SMALL))
    with pytest.raises(ValidationError):
        train_step(m, TrainBatch(np.zeros((2, 8, 8))), sched, rng, label_dropout=1.5)


def test_train_step_reports_divergence(sched, rng):
    m = DenoiserModel(Architecture(**SMALL))
    before = m.flat_parameters()
    with pytest.raises(DivergenceError):
        train_step(m, TrainBatch(np.full((2, 8, 8), np.nan)), sched, rng)
    np.testing.assert_array_equal(m.flat_parameters(), before)


def test_train_step_sgd_moves_parameters(sched, rng):
    m = DenoiserModel(Architecture(**SMALL))
    before = m.flat_parameters()
    _, loss = train_step(m, TrainBatch(rng.choice([-1.0, 1.0], (4, 8, 8))), sched, rng, lr=0.1)
    assert np.isfinite(loss)
    assert not np.array_equal(before, m.flat_parameters())


def test_train_rejects_bad_ema(sched):
    m = DenoiserModel(Architecture(**SMALL))
    with pytest.raises(ValidationError):
        train(m, np.zeros((2, 8, 8)), sched, 1, ema_decay=1.0)
    with pytest.raises(ValidationError):
        train(m, np.zeros((0, 8, 8)), sched, 1)


@pytest.fixture(scope="module")
def toy_data():
    spec = GenSpec(kind="inclusions", shape=(16, 16), target_fraction=0.3, radius_range=(2.0, 3.0))
    ms, _ = generate_dataset(spec, 96, seed=3)
    return np.stack([from_phase(m.phase) for m in ms])


@pytest.mark.slow
def test_training_reduces_loss_and_heldout_mse(sched, toy_data):
    train_x, held = toy_data[:64], toy_data[64:]
    m = DenoiserModel(Architecture(base_channels=8, emb_dim=32), seed=0)
    r = np.random.default_rng(99)
    t = r.integers(1, 1001, held.shape[0] * 4)
    x0 = np.repeat(held, 4, axis=0)
    eps = r.standard_normal(x0.shape)

    def held_mse():
        return noise_prediction_loss(m, x0, t, eps, None, sched).item()

    untrained = held_mse()
    losses = train(m, train_x, sched, 2000, batch_size=8, lr=2e-3, seed=1)
    ma = np.convolve(losses, np.ones(500) / 500, mode="valid")
    assert ma[-1] < losses[0]
    assert held_mse() < 0.9 * untrained


def test_train_is_deterministic(sched, toy_data):
    runs = []
    for _ in range(2):
        m = DenoiserModel(Architecture(**SMALL), seed=2)
        losses = train(m, toy_data, sched, 5, batch_size=4, seed=8, ema_decay=0.9)
        runs.append((losses, m.flat_parameters()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_conditional_train_with_dropout(sched, toy_data):
    m = DenoiserModel(Architecture(num_labels=3, **SMALL))
    labels = np.arange(toy_data.shape[0]) % 2
    losses = train(m, toy_data, sched, 3, batch_size=4, labels=labels, label_dropout=0.2)
    assert len(losses) == 3 and all(np.isfinite(losses))


# ----------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kw", [dict(**SMALL), dict(dims=3, num_labels=4, attention=True, **SMALL)])
def test_checkpoint_roundtrip(tmp_path, rng, kw):
    m = DenoiserModel(Architecture(**kw), seed=5, sample_shape=(8,) * kw.get("dims", 2))
    with torch.no_grad():
        m.net.conv_out.weight.normal_()
    p = tmp_path / "m.ck"
    save_checkpoint(p, m, schedule={"T": 1000}, seed=5, step=42)
    m2, header = load_checkpoint(p)
    assert header["step"] == 42 and header["schedule"] == {"T": 1000}
    assert m2.arch == m.arch and m2.sample_shape == m.sample_shape
    np.testing.assert_array_equal(m2.flat_parameters(), m.flat_parameters())
    x = rng.standard_normal(m.sample_shape)
    np.testing.assert_array_equal(m2(x, 30), m(x, 30))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ck"
    p.write_bytes(b"nope")
    with pytest.raises(ValidationError):
        load_checkpoint(p)
    m = DenoiserModel(Architecture(**SMALL))
    save_checkpoint(p, m)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValidationError):
        load_checkpoint(p)
