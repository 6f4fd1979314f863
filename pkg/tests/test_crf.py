import math
import time

import numpy as np
import pytest

from multiprior.crf import (BRUTE_FORCE_LIMIT, BilateralGrid, CrfConfig, CrfProblem, crf_energy,
                            crf_refine, default_penalty, gaussian_filter_sum,
                            mean_field_bruteforce, mean_field_fast, pairwise_kernel)
from multiprior.metrics import adjacency_count
from multiprior.volume_io import BACKGROUND, CSF, GM, WM, ProbabilityVolume


def random_problem(rng, dims=(4, 5, 3), n_classes=7):
    q = rng.dirichlet(np.ones(n_classes), size=dims)
    return CrfProblem.from_probabilities(np.moveaxis(q, -1, 0), rng.normal(size=dims))


def test_kernel_values():
    cfg = CrfConfig(w_appearance=1.0, w_smooth=1.0)
    assert pairwise_kernel((0, 0, 0), (3, 0, 0), 0.2, 0.2, cfg) == pytest.approx(
        math.exp(-0.5) + math.exp(-4.5))
    assert pairwise_kernel((0, 0, 0), (3, 0, 0), 0.2, 0.2, cfg) == pytest.approx(0.6176, abs=1e-4)
    assert pairwise_kernel((1, 2, 3), (1, 2, 3), 0.4, 0.4, CrfConfig()) == pytest.approx(4.0)
    assert pairwise_kernel((0, 0, 0), (300, 0, 0), 0.0, 0.0, cfg) == 0.0
    assert pairwise_kernel((0, 1, 0), (2, 0, 1), 0.1, 0.9, cfg) == pytest.approx(
        pairwise_kernel((2, 0, 1), (0, 1, 0), 0.9, 0.1, cfg))


def test_config_validation_and_file_roundtrip(tmp_path):
    mu = default_penalty()
    assert np.all(np.diag(mu) == 0) and mu[CSF, BACKGROUND] == 2.0 and mu[GM, WM] == 0.5
    bad = mu.copy()
    bad[0, 1] = 3.0
    with pytest.raises(ValueError):
        CrfConfig(penalty=bad)
    diag = mu.copy()
    diag[2, 2] = 1.0
    with pytest.raises(ValueError):
        CrfConfig(penalty=diag)
    with pytest.raises(ValueError):
        CrfConfig(theta_beta=0.0)
    cfg = CrfConfig(w_appearance=2.5, n_iterations=3)
    cfg.save(tmp_path / "crf.json")
    back = CrfConfig.load(tmp_path / "crf.json")
    assert back.to_dict() == cfg.to_dict()


def test_energy_hand_values():
    cfg = CrfConfig(w_appearance=1.0, w_smooth=1.0)
    one = CrfProblem(np.array([0.3, 1.2, 2.0, 0, 0, 0, 0]).reshape(7, 1, 1, 1), np.zeros((1, 1, 1)))
    assert crf_energy(one, np.array([[[1]]]), cfg) == pytest.approx(1.2)
    un = np.zeros((7, 2, 1, 1))
    un[:2, 0, 0, 0] = (0.1, 0.7)
    un[:2, 1, 0, 0] = (0.4, 0.2)
    prob = CrfProblem(un, np.array([0.0, 0.5]).reshape(2, 1, 1))
    assert crf_energy(prob, np.array([0, 0]).reshape(2, 1, 1), cfg) == pytest.approx(0.5)
    # distance 1, intensity gap 0.5 with theta 3 / 0.5 / 1
    k = math.exp(-1 / 18 - 0.5) + math.exp(-0.5)
    assert crf_energy(prob, np.array([0, 1]).reshape(2, 1, 1), cfg) == pytest.approx(0.1 + 0.2 + 0.5 * k)


def test_oversize_problems_rejected(rng):
    big = CrfProblem(np.zeros((2, 11, 10, 10)), np.zeros((11, 10, 10)))
    assert big.unaries[0].size > BRUTE_FORCE_LIMIT
    with pytest.raises(ValueError):
        mean_field_bruteforce(big, CrfConfig(penalty=np.zeros((2, 2))))
    with pytest.raises(ValueError):
        CrfProblem(np.zeros((2, 3, 3, 3)), np.zeros((3, 3, 2)))


def scripted_two_voxel(q0, w, n_iter):
    """Independent mean field on two voxels with a symmetric scalar coupling."""
    a, b = list(q0[0]), list(q0[1])
    psi_a = [-math.log(v) for v in a]
    psi_b = [-math.log(v) for v in b]
    mu = [[0.0, 1.0], [1.0, 0.0]]
    for _ in range(n_iter):
        na = [math.exp(-psi_a[l] - sum(mu[l][m] * w * b[m] for m in range(2))) for l in range(2)]
        nb = [math.exp(-psi_b[l] - sum(mu[l][m] * w * a[m] for m in range(2))) for l in range(2)]
        a = [v / sum(na) for v in na]
        b = [v / sum(nb) for v in nb]
    return a, b


def test_two_voxel_mean_field_matches_script():
    q0 = [[0.52, 0.48], [0.5, 0.5]]
    # two effective classes; the other five sit at the unary floor
    cfg = CrfConfig(penalty=1 - np.eye(7), w_appearance=4.0, w_smooth=4.0, n_iterations=20)
    probs = np.zeros((7, 2, 1, 1))
    probs[:2] = np.array(q0).T.reshape(2, 2, 1, 1)
    prob = CrfProblem.from_probabilities(probs, np.zeros((2, 1, 1)))
    out = mean_field_bruteforce(prob, cfg).data
    w = 4.0 * math.exp(-1 / 18) + 4.0 * math.exp(-0.5)
    a, b = scripted_two_voxel(q0, w, 20)
    np.testing.assert_allclose(out[:2, 0, 0, 0], a, atol=1e-6)
    np.testing.assert_allclose(out[:2, 1, 0, 0], b, atol=1e-6)
    assert out[0, 0, 0, 0] > 0.9 and out[0, 1, 0, 0] > 0.9
    fast = mean_field_fast(prob, cfg).data
    np.testing.assert_allclose(fast, out, atol=1e-3)


@pytest.mark.parametrize("variant", ["zero_weights", "zero_penalty", "zero_iterations"])
def test_no_coupling_returns_input(rng, variant):
    prob = random_problem(rng)
    kw = {"zero_weights": dict(w_appearance=0.0, w_smooth=0.0),
          "zero_penalty": dict(penalty=np.zeros((7, 7))),
          "zero_iterations": dict(n_iterations=0)}[variant]
    cfg = CrfConfig(**kw)
    q0 = np.exp(-prob.unaries)
    np.testing.assert_allclose(mean_field_bruteforce(prob, cfg).data, q0, atol=1e-12)
    np.testing.assert_allclose(mean_field_fast(prob, cfg).data, q0, atol=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_fast_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(2, 7, size=3))
    prob = random_problem(rng, dims)
    cfg = CrfConfig()
    brute = mean_field_bruteforce(prob, cfg).data
    fast = mean_field_fast(prob, cfg).data
    assert np.abs(brute - fast).max() < 2e-2
    assert np.mean(brute.argmax(0) == fast.argmax(0)) >= 0.99


def test_every_sweep_is_a_distribution(rng):
    prob = random_problem(rng, (6, 6, 6))
    seen = []

    def check(it, q):
        seen.append(it)
        assert q.min() >= 0
        np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-6)

    mean_field_fast(prob, CrfConfig(), callback=check)
    assert seen == list(range(5))


def test_class_permutation_equivariance(rng):
    prob = random_problem(rng, (5, 4, 6))
    cfg = CrfConfig()
    perm = rng.permutation(7)
    pcfg = CrfConfig(penalty=cfg.penalty[np.ix_(perm, perm)])
    pprob = CrfProblem(prob.unaries[perm], prob.intensities)
    for mf in (mean_field_bruteforce, mean_field_fast):
        np.testing.assert_allclose(mf(pprob, pcfg).data, mf(prob, cfg).data[perm], atol=1e-10)


def test_potts_output_respects_geometric_symmetry(rng):
    potts = CrfConfig(penalty=0.7 * (1 - np.eye(7)))
    un = rng.normal(size=(7, 5, 5, 5))
    img = rng.normal(size=(5, 5, 5))
    # symmetrise under the x and y flips and the x/y transpose
    un = un + un[:, ::-1]
    img = img + img[::-1]
    un = un + un[:, :, ::-1]
    img = img + img[:, ::-1]
    un = un + un.transpose(0, 2, 1, 3)
    img = img + img.transpose(1, 0, 2)
    prob = CrfProblem(un, img)
    for mf in (mean_field_bruteforce, mean_field_fast):
        q = mf(prob, potts).data
        np.testing.assert_allclose(q, q[:, ::-1], atol=1e-10)
        np.testing.assert_allclose(q, q.transpose(0, 2, 1, 3), atol=1e-10)
    flat = CrfProblem(np.zeros((7, 4, 4, 4)), np.zeros((4, 4, 4)))
    np.testing.assert_allclose(mean_field_fast(flat, potts).data, 1 / 7, atol=1e-12)


def test_smooth_hard_labels_unchanged():
    lab = np.full((8, 8, 8), GM)
    lab[:4] = WM
    q = np.full((7, 8, 8, 8), 0.01)
    np.put_along_axis(q, lab[None], 0.94, axis=0)
    img = np.where(lab == GM, 0.2, 1.0)
    out = crf_refine(ProbabilityVolume(q), img, CrfConfig())
    np.testing.assert_array_equal(out.labels, lab)


def test_salt_and_pepper_flipped(rng):
    lab = np.full((6, 6, 6), GM)
    noisy = lab.copy()
    for p in [(1, 1, 1), (3, 4, 2), (4, 2, 4)]:
        noisy[p] = WM
    q = np.full((7, 6, 6, 6), 0.02)
    np.put_along_axis(q, noisy[None], 0.88, axis=0)
    img = np.full((6, 6, 6), 0.3) + 0.01 * rng.normal(size=(6, 6, 6))
    cfg = CrfConfig()
    prob = CrfProblem.from_probabilities(q, img)
    np.testing.assert_array_equal(mean_field_bruteforce(prob, cfg).data.argmax(0), lab)
    np.testing.assert_array_equal(crf_refine(ProbabilityVolume(q), img, cfg).labels, lab)


def csf_ring_case():
    n = 16
    g = np.indices((n, n, n)) - 7.5
    r = np.sqrt(g[0] ** 2 + g[1] ** 2)
    lab = np.full((n, n, n), BACKGROUND)
    lab[r < 4.5] = GM
    ring = (r >= 4.5) & (r < 5.5) & (np.abs(g[2]) < 2)
    lab[ring] = CSF
    q = np.full((7, n, n, n), 0.02)
    np.put_along_axis(q, lab[None], 0.88, axis=0)
    q[:, ring] = 0.02
    q[CSF, ring] = 0.55
    q[BACKGROUND, ring] = 0.35
    img = np.where(lab == GM, 1.0, -1.0)
    return lab, q / q.sum(0), img


def test_csf_ring_adjacency_decreases():
    lab, q, img = csf_ring_case()
    before = adjacency_count(lab, CSF, BACKGROUND)
    out = crf_refine(ProbabilityVolume(q), img, CrfConfig())
    assert before > 0
    assert adjacency_count(out, CSF, BACKGROUND) < before


@pytest.mark.parametrize("seed", range(10))
def test_monotone_prohibition(seed):
    rng = np.random.default_rng(100 + seed)
    lab = rng.integers(0, 3, size=(6, 6, 6))
    q = rng.dirichlet(np.ones(7), size=(6, 6, 6))
    q = np.moveaxis(q, -1, 0)
    q += np.moveaxis(np.eye(7)[lab], -1, 0)
    q /= q.sum(0)
    img = rng.normal(size=(6, 6, 6))
    a, b = 1, 2
    counts = []
    for val in (0.5, 1.0, 2.0, 4.0):
        mu = default_penalty()
        mu[a, b] = mu[b, a] = val
        counts.append(adjacency_count(crf_refine(q, img, CrfConfig(penalty=mu)), a, b))
    assert all(x >= y for x, y in zip(counts, counts[1:]))


def test_gaussian_filter_sum_oracle(rng):
    v = rng.normal(size=(2, 7, 6, 5))
    out = gaussian_filter_sum(v, 1.0)
    pos = np.indices(v.shape[1:]).reshape(3, -1).T
    d2 = ((pos[:, None] - pos[None]) ** 2)
    taps = np.where(np.abs(np.sqrt(d2)) <= 3, np.exp(-d2 / 2), 0).prod(-1)
    ref = v.reshape(2, -1) @ taps.T
    np.testing.assert_allclose(out.reshape(2, -1), ref, atol=1e-12)


def test_bilateral_grid_close_to_dense(rng):
    img = rng.normal(size=(7, 6, 5))
    grid = BilateralGrid(img, 3.0, 0.5, n_channels=1)
    v = rng.uniform(size=(1,) + img.shape)
    pos = np.indices(img.shape).reshape(3, -1).T
    k = np.exp(-((pos[:, None] - pos[None]) ** 2).sum(-1) / 18
               - (img.ravel()[:, None] - img.ravel()[None]) ** 2 / 0.5)
    ref = (k @ v.ravel()).reshape(img.shape)
    out = grid.filter(v)[0]
    assert np.abs(out - ref).max() / ref.max() < 0.02


@pytest.mark.parametrize("theta,budget", [(0.7, 1.5), (1.0, 1.5), (3.0, 0.3)])
def test_bilateral_grid_tight_budget_stays_finite(rng, theta, budget):
    # a small memory budget pushes the lattice to a coarse stride
    img = rng.normal(size=(12, 11, 10))
    grid = BilateralGrid(img, theta, 0.5, n_channels=1, budget_mb=budget)
    assert (grid.step**2 - 1) / 3 <= 0.6 * theta**2
    v = rng.uniform(size=(1,) + img.shape)
    pos = np.indices(img.shape).reshape(3, -1).T
    k = np.exp(-((pos[:, None] - pos[None]) ** 2).sum(-1) / (2 * theta**2)
               - (img.ravel()[:, None] - img.ravel()[None]) ** 2 / 0.5)
    ref = (k @ v.ravel()).reshape(img.shape)
    out = grid.filter(v)[0]
    assert np.all(np.isfinite(out))
    assert np.abs(out - ref).max() / ref.max() < 0.15


def test_bilateral_grid_over_budget_raises(rng):
    with pytest.raises(ValueError, match="exceeds"):
        BilateralGrid(rng.normal(size=(12, 11, 10)), 1.0, 0.5, n_channels=1, budget_mb=0.01)


@pytest.mark.slow
def test_runtime_128_cube(rng):
    q = rng.dirichlet(np.ones(7), size=(128, 128, 128)).astype(np.float32)
    prob = CrfProblem.from_probabilities(np.moveaxis(q, -1, 0), rng.normal(size=(128,) * 3))
    del q
    t0 = time.perf_counter()
    out = mean_field_fast(prob, CrfConfig())
    elapsed = time.perf_counter() - t0
    assert out.data.shape == (7, 128, 128, 128)
    assert elapsed < 60.0, elapsed
