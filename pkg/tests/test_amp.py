import numpy as np
import pytest

import oracles
from ampgnn import amp, baselines, comms
from ampgnn.trainer import make_batch

QPSK = comms.make_qam(4).levels
QAM16 = comms.make_qam(16).levels


def _random_state(rng, M, N):
    x_hat = rng.normal(size=N)
    v_hat = rng.uniform(0.05, 2.0, size=N)
    Z = rng.normal(size=M)
    V = rng.uniform(0.05, 2.0, size=M)
    return amp.AmpState(x_hat=x_hat, v_hat=v_hat, Z=Z, V=V, t=3)


# -- init -------------------------------------------------------------------


def test_init_values():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(12, 8))
    y = rng.normal(size=12)
    st = amp.amp_init(H, y)
    assert not st.x_hat.any()
    np.testing.assert_allclose(st.v_hat, 8 / 12)
    assert np.array_equal(st.Z, y)
    np.testing.assert_allclose(st.V, (H * H) @ st.v_hat)
    assert st.t == 1
    sq = amp.amp_init(rng.normal(size=(6, 6)), rng.normal(size=6))
    np.testing.assert_array_equal(sq.v_hat, 1.0)
    assert np.all(amp.amp_init(H, y, v_init="prior").v_hat == 1.0)
    assert np.all(amp.amp_init(H, y, v_init=0.3).v_hat == 0.3)


# -- linear step --------------------------------------------------------------


def test_linear_step_zero_variance_orthonormal():
    rng = np.random.default_rng(1)
    Hq, _ = np.linalg.qr(rng.normal(size=(6, 4)))
    x_hat = rng.normal(size=4)
    y = rng.normal(size=6)
    st = amp.AmpState(x_hat=x_hat, v_hat=np.zeros(4), Z=y.copy(), V=np.zeros(6))
    obs, V, Z = amp.amp_linear_step(st, Hq, y, 0.37)
    assert not V.any()
    np.testing.assert_allclose(Z, Hq @ x_hat, atol=1e-14)
    np.testing.assert_allclose(obs.Sigma, 0.37, rtol=1e-12)
    np.testing.assert_allclose(obs.r, x_hat + Hq.T @ (y - Hq @ x_hat), atol=1e-12)


def test_linear_step_scalar_hand_evaluation():
    x, v, Zp, Vp, y, s2 = 0.3, 0.8, 0.1, 0.5, 1.2, 0.25
    st = amp.AmpState(x_hat=np.array([x]), v_hat=np.array([v]), Z=np.array([Zp]), V=np.array([Vp]))
    obs, V, Z = amp.amp_linear_step(st, np.array([[1.0]]), np.array([y]), s2)
    Zexp = x - v * (y - Zp) / (s2 + Vp)
    assert V[0] == pytest.approx(v, rel=1e-15)
    assert Z[0] == pytest.approx(Zexp, rel=1e-14)
    assert obs.Sigma[0] == pytest.approx(s2 + v, rel=1e-14)
    assert obs.r[0] == pytest.approx(x + (y - Zexp), rel=1e-14)


def test_linear_step_matches_direct_transcription():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(300):
        H = rng.normal(size=(4, 4)) / 2
        y = rng.normal(size=4)
        s2 = rng.uniform(0.01, 1.0)
        st = _random_state(rng, 4, 4)
        obs, V, Z = amp.amp_linear_step(st, H, y, s2)
        Vr, Zr, Sr, rr = oracles.amp_linear_direct(H, y, st.x_hat, st.v_hat, st.Z, st.V, s2)
        for a, b in ((V, Vr), (Z, Zr), (obs.Sigma, Sr), (obs.r, rr)):
            worst = max(worst, np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))
    assert worst < 1e-12


def test_linear_step_batched_equals_loop():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(5, 6, 4))
    y = rng.normal(size=(5, 6))
    s2 = rng.uniform(0.1, 1, size=5)
    st = amp.amp_init(H, y)
    obs, V, Z = amp.amp_linear_step(st, H, y, s2)
    for b in range(5):
        ob, Vb, Zb = amp.amp_linear_step(amp.amp_init(H[b], y[b]), H[b], y[b], s2[b])
        np.testing.assert_allclose(obs.r[b], ob.r, rtol=1e-14)
        np.testing.assert_allclose(obs.Sigma[b], ob.Sigma, rtol=1e-14)


def test_linear_step_reports_divergence():
    st = amp.amp_init(np.eye(2), np.array([np.nan, 0.0]))
    st = amp.AmpState(st.x_hat, st.v_hat, np.zeros(2), st.V, t=4)
    with pytest.raises(amp.NumericalDivergence) as info:
        amp.amp_linear_step(st, np.eye(2), np.array([np.nan, 0.0]), 0.1)
    assert info.value.iteration == 4


# -- denoiser -----------------------------------------------------------------


def test_denoiser_vanishing_noise():
    for k, s in enumerate(QAM16):
        m, v = amp.denoise(amp.EquivObservation(np.array([s]), np.array([1e-12])), QAM16)
        assert m[0] == pytest.approx(s, abs=1e-12) and v[0] < 1e-12


def test_denoiser_uninformative_limit():
    m, v = amp.denoise(amp.EquivObservation(np.array([0.3]), np.array([1e12])), QAM16)
    assert abs(m[0]) < 1e-9
    # complex-unit variance is twice the per-dimension prior variance of 1/2
    assert v[0] == pytest.approx(1.0, rel=1e-9)


def test_denoiser_bpsk_closed_form():
    levels = np.array([-1.0, 1.0])
    m, v = amp.denoise(amp.EquivObservation(np.array([0.5]), np.array([1.0])), levels)
    ref_m, ref_v = oracles.denoise_naive(0.5, 1.0, levels)
    assert m[0] == pytest.approx(np.tanh(1.0), abs=1e-15)
    assert m[0] == pytest.approx(ref_m, abs=1e-12)
    assert v[0] == pytest.approx(ref_v, abs=1e-12)


def test_denoiser_matches_naive_and_moment_identity():
    rng = np.random.default_rng(4)
    r = rng.normal(size=2000) * 1.5
    Sigma = rng.uniform(0.05, 5.0, size=2000)
    for levels in (QPSK, QAM16, comms.make_qam(64).levels):
        probs = amp.gaussian_categorical(amp.EquivObservation(r, Sigma), levels)
        m, v = amp.categorical_moments(probs, levels)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        centred = np.sum(probs * (levels - m[:, None]) ** 2, axis=-1)
        np.testing.assert_allclose(v / 2, centred, atol=1e-10)
        assert np.all(v >= 0) and np.all(v / 2 <= np.max(levels**2) + 1e-15)
        assert np.all((m >= levels[0]) & (m <= levels[-1]))
        for i in range(0, 2000, 97):
            rm, rv = oracles.denoise_naive(r[i], Sigma[i], levels)
            assert abs(m[i] - rm) < 1e-12 and abs(v[i] - rv) < 1e-12


def test_denoiser_nonuniform_prior():
    levels = np.array([-1.0, 1.0])
    prior = np.array([0.2, 0.8])
    m, _ = amp.denoise(amp.EquivObservation(np.array([0.0]), np.array([1.0])), levels, prior)
    assert m[0] == pytest.approx(0.6, abs=1e-15)


def test_denoiser_extreme_observation_is_finite():
    m, v = amp.denoise(amp.EquivObservation(np.array([1e6, -1e6]), np.array([1e-13, 1e-13])), QAM16)
    np.testing.assert_array_equal(m, [QAM16[-1], QAM16[0]])
    assert np.all(v == 0)


# -- full detector ------------------------------------------------------------


def test_noiseless_orthogonal_recovery():
    rng = np.random.default_rng(5)
    Hq, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    idx = rng.integers(0, 4, size=8)
    x = QAM16[idx]
    for T in (2, 5):
        traj = amp.amp_detect(Hq, Hq @ x, 1e-10, QAM16, T)
        np.testing.assert_array_equal(amp.hard_decision(traj.final, QAM16), idx)


def test_single_iteration_is_composition():
    rng = np.random.default_rng(6)
    H = rng.normal(size=(6, 4)) / 2
    y = rng.normal(size=6)
    traj = amp.amp_detect(H, y, 0.3, QPSK, T=1)
    obs, _, _ = amp.amp_linear_step(amp.amp_init(H, y), H, y, 0.3)
    m, v = amp.denoise(obs, QPSK)
    assert np.array_equal(traj.final, m) and np.array_equal(traj.v_hat[0], v)
    assert len(traj.x_hat) == 1


def test_trajectory_length_and_bounds():
    b = make_batch(8, 8, 16, 10.0, 20, np.random.default_rng(7))
    traj = amp.amp_detect(b.H, b.y, b.sigma2, QAM16, T=10)
    assert len(traj.x_hat) == len(traj.v_hat) == len(traj.r) == 10
    for v in traj.v_hat:
        assert np.all(v >= 0) and np.all(v <= 2 * QAM16.max() ** 2)


def test_invalid_T():
    with pytest.raises(ValueError):
        amp.amp_detect(np.eye(2), np.zeros(2), 0.1, QPSK, T=0)


def test_divergence_fallback_keeps_last_finite():
    y = np.array([1.0, np.inf])
    with pytest.raises(amp.NumericalDivergence):
        amp.amp_detect(np.eye(2), y, 0.1, QPSK, T=3)
    traj = amp.amp_detect(np.eye(2), y, 0.1, QPSK, T=3, on_divergence="last")
    assert traj.diverged and traj.diverged_at == 1
    assert np.array_equal(traj.final, np.zeros(2))


def test_user_permutation_equivariance():
    rng = np.random.default_rng(8)
    for _ in range(20):
        b = make_batch(6, 4, 4, 8.0, 1, rng)
        perm = rng.permutation(8)
        a = amp.amp_detect(b.H[0], b.y[0], b.sigma2[0], QPSK)
        p = amp.amp_detect(b.H[0][:, perm], b.y[0], b.sigma2[0], QPSK)
        for t in range(10):
            np.testing.assert_allclose(p.x_hat[t], a.x_hat[t][perm], atol=1e-12)
            np.testing.assert_allclose(p.v_hat[t], a.v_hat[t][perm], atol=1e-12)


def test_first_iteration_equals_complex_amp():
    rng = np.random.default_rng(9)
    cons = comms.make_qam(4)
    for _ in range(10):
        Hc = comms.sample_channel(6, 3, rng)
        x = cons.points[rng.integers(0, 4, size=3)]
        yc = Hc @ x + 0.3 * (rng.normal(size=6) + 1j * rng.normal(size=6))
        ref = oracles.amp_complex_direct(Hc, yc, 0.18, cons.points, 1)[0]
        got = amp.amp_detect(comms.complex_to_real_matrix(Hc), comms.complex_to_real_vector(yc), 0.18, cons.levels, 1)
        np.testing.assert_allclose(comms.from_real(got.final), ref, atol=1e-12)


def test_posterior_means_track_enumeration_oracle():
    # measured mean |AMP - exact MMSE| = 0.0145 on this stream; bound fixed at 0.02
    b = make_batch(2, 2, 4, 15.0, 10_000, np.random.default_rng(2024))
    traj = amp.amp_detect(b.H, b.y, b.sigma2, QPSK, 10)
    exact = baselines.enumerate_posterior(b.H, b.y, b.sigma2, QPSK)
    assert np.mean(np.abs(traj.final - exact.mean)) < 0.02


# -- hard decisions ------------------------------------------------------------


def test_hard_decision_rules():
    assert np.array_equal(amp.hard_decision(QAM16, QAM16), np.arange(4))
    pam = np.array([-3.0, -1.0, 1.0, 3.0])  # exact midpoints
    assert np.array_equal(amp.hard_decision(np.array([-2.0, 0.0, 2.0]), pam), np.arange(3))
    rng = np.random.default_rng(10)
    x = rng.normal(size=500)
    scan = [min(range(4), key=lambda i: (abs(v - QAM16[i]), i)) for v in x]
    assert np.array_equal(amp.hard_decision(x, QAM16), scan)
