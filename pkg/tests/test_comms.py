import numpy as np
import pytest

from ampgnn import comms
from ampgnn.numkit import ConfigError


@pytest.mark.parametrize("Q", [4, 16, 64])
def test_constellation_invariants(Q):
    c = comms.make_qam(Q)
    assert len(c.points) == Q
    assert abs(np.mean(np.abs(c.points) ** 2) - 1.0) < 1e-12
    assert len(np.unique(np.round(c.points, 12))) == Q
    assert c.prior.sum() == pytest.approx(1.0, abs=1e-15)
    assert len(c.levels) ** 2 == Q
    # Gray labelling: horizontal and vertical neighbours differ in one bit
    side = c.side
    for i in range(Q):
        for j in range(Q):
            ri, qi = divmod(i, side)
            rj, qj = divmod(j, side)
            if abs(ri - rj) + abs(qi - qj) == 1:
                assert np.sum(c.bits[i] != c.bits[j]) == 1


def test_qpsk_points():
    c = comms.make_qam(4)
    expected = {complex(a, b) / np.sqrt(2) for a in (-1, 1) for b in (-1, 1)}
    assert {complex(p) for p in c.points} == expected


def test_16qam_levels():
    np.testing.assert_allclose(comms.make_qam(16).levels, np.array([-3, -1, 1, 3]) / np.sqrt(10), rtol=1e-15)


def test_unsupported_order():
    with pytest.raises(ConfigError):
        comms.make_qam(8)


def test_scenario_validation():
    c = comms.make_qam(4)
    with pytest.raises(ConfigError):
        comms.MimoScenario(0, 2, 0.1, c)
    with pytest.raises(ConfigError):
        comms.MimoScenario(2, 2, 0.0, c)
    with pytest.raises(ConfigError):
        comms.MimoScenario(2, 2, np.array([0.1, -1.0]), c)


def test_channel_moments():
    rng = np.random.default_rng(1)
    M, N = 8, 4
    H = comms.sample_channel(M, N, rng, size=(12_500,))  # 4e5 entries
    assert np.var(H) == pytest.approx(1 / M, rel=0.02)
    assert abs(np.mean(H.real * H.imag)) < 0.02 / M
    x = comms.make_qam(4).points[rng.integers(0, 4, size=(12_500, N))]
    power = np.mean(np.sum(np.abs(np.einsum("bmn,bn->bm", H, x)) ** 2, axis=-1))
    assert power == pytest.approx(N, rel=0.02)


def test_channel_determinism():
    a = comms.sample_channel(3, 2, np.random.default_rng(5))
    b = comms.sample_channel(3, 2, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()


def test_snr_to_sigma2():
    assert comms.snr_to_sigma2(0.0, 16, 16) == pytest.approx(1.0, abs=1e-15)
    assert comms.snr_to_sigma2(10.0, 64, 64) == pytest.approx(0.1, rel=1e-14)
    s = comms.snr_to_sigma2(np.linspace(-5, 30, 50), 32, 16)
    assert np.all(np.diff(s) < 0)


def test_noiseless_sample():
    scen = comms.MimoScenario(6, 3, 1e-20, comms.make_qam(16))
    s = comms.make_sample(scen, np.random.default_rng(2))
    assert np.linalg.norm(s.y - s.H @ s.x) < 1e-9
    assert np.array_equal(comms.make_qam(16).points[s.x_idx], s.x)


def test_noise_power_and_empirical_snr():
    M, N, snr = 8, 4, 7.0
    sigma2 = float(comms.snr_to_sigma2(snr, M, N))
    scen = comms.MimoScenario(M, N, sigma2, comms.make_qam(4))
    s = comms.make_sample(scen, np.random.default_rng(3), size=(100_000,))
    noise = np.mean(np.sum(np.abs(s.noise) ** 2, axis=-1)) / M
    assert noise == pytest.approx(sigma2, rel=0.02)
    signal = np.mean(np.sum(np.abs(s.y - s.noise) ** 2, axis=-1))
    measured = 10 * np.log10(signal / (M * noise))
    assert abs(measured - snr) < 0.2


def test_per_sample_noise_variance():
    c = comms.make_qam(4)
    s2 = np.array([1e-20, 4.0])
    scen = comms.MimoScenario(64, 2, s2, c)
    s = comms.make_sample(scen, np.random.default_rng(0), size=(2,))
    p = np.mean(np.abs(s.noise) ** 2, axis=-1)
    assert p[0] < 1e-18 and 2.0 < p[1] < 8.0


def test_real_embedding_of_real_channel():
    H = np.array([[1.0, 2.0], [3.0, 4.0]]) + 0j
    Hr = comms.complex_to_real_matrix(H)
    np.testing.assert_array_equal(Hr[:2, :2], H.real)
    np.testing.assert_array_equal(Hr[2:, 2:], H.real)
    assert not Hr[:2, 2:].any() and not Hr[2:, :2].any()


def test_real_system_algebra():
    scen = comms.MimoScenario(5, 3, 0.3, comms.make_qam(64))
    s = comms.make_sample(scen, np.random.default_rng(4))
    rs = comms.to_real(s, scen.constellation)
    target = comms.complex_to_real_vector(s.y - s.noise)
    assert np.linalg.norm(rs.H @ rs.x - target) < 1e-12
    assert rs.noise_var == pytest.approx(0.15)
    assert np.array_equal(comms.from_real(rs.x), s.x)


def test_round_trip_is_bitwise():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(1000, 7)) + 1j * rng.normal(size=(1000, 7))
    assert comms.from_real(comms.complex_to_real_vector(v)).tobytes() == v.tobytes()


def test_level_index_round_trip():
    c = comms.make_qam(16)
    idx = np.random.default_rng(0).integers(0, 16, size=(50, 6))
    lv = comms.real_level_indices(idx, c)
    np.testing.assert_array_equal(c.levels[lv], comms.complex_to_real_vector(c.points[idx]))
    np.testing.assert_array_equal(comms.complex_indices(lv, c), idx)


def test_generate_dataset_empty_and_deterministic():
    scen = comms.MimoScenario(4, 2, 0.1, comms.make_qam(4))
    assert list(comms.generate_dataset(scen, 0, np.random.default_rng(0))) == []
    a = list(comms.generate_dataset(scen, 5, np.random.default_rng(9)))
    b = list(comms.generate_dataset(scen, 5, np.random.default_rng(9)))
    assert all(x.y.tobytes() == y.y.tobytes() and x.H.tobytes() == y.H.tobytes() for x, y in zip(a, b))


def test_symbol_histogram_uniform():
    # 1e5 QPSK symbols, every cell within 3 multinomial standard deviations
    scen = comms.MimoScenario(2, 1, 0.1, comms.make_qam(4))
    s = comms.make_sample(scen, np.random.default_rng(0), size=(100_000,))
    counts = np.bincount(s.x_idx.ravel(), minlength=4)
    n = s.x_idx.size
    sd = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sd)


def test_symbol_histogram_16qam_chi_square():
    from scipy.stats import chisquare

    scen = comms.MimoScenario(2, 4, 0.1, comms.make_qam(16))
    s = comms.make_sample(scen, np.random.default_rng(0), size=(25_000,))
    assert chisquare(np.bincount(s.x_idx.ravel(), minlength=16)).pvalue > 1e-3


def test_dataset_file_round_trip(tmp_path):
    scen = comms.MimoScenario(4, 3, 0.2, comms.make_qam(16))
    ds = comms.build_dataset(scen, 7, seed=21)
    path = tmp_path / "ds.agnn"
    comms.save_dataset(path, ds)
    back = comms.load_dataset(path)
    assert back.H.tobytes() == ds.H.tobytes()
    assert back.y.tobytes() == ds.y.tobytes()
    assert np.array_equal(back.x_idx, ds.x_idx)
    assert (back.M, back.N, back.sigma2, back.seed, back.order, len(back)) == (4, 3, 0.2, 21, 16, 7)
    from ampgnn.numkit import container

    names = set(container.load(path))
    assert {"H_real", "H_imag", "x_idx", "y_real", "y_imag", "M", "N", "sigma2", "seed"} <= names
