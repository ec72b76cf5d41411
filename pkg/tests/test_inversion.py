import warnings

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from oracles import crandn, dense_oracle
from wipr.grid import Bounds, Grid2D, ModelField, make_toy_model
from wipr.helmholtz import PmlProfile, StencilConfig, assemble, forward_solve
from wipr.inversion import (
    AcquisitionSet,
    AugmentedSolver,
    ConfigurationError,
    Dataset,
    InversionConfig,
    IterationLog,
    LogRecord,
    Mode,
    MultiplierState,
    bilinear_recovery,
    default_penalty,
    model_error,
    phase_align,
    reconstruct_wavefield,
    run_batch,
    run_inversion,
    simulate_data,
    stopping_check,
    surface_acquisition,
    update_model_ls,
    update_model_pr,
    update_multipliers,
    virtual_source,
)


def random_model(grid, rng):
    return ModelField(grid, 1.0 / rng.uniform(1500, 4500, grid.n) ** 2)


@pytest.fixture
def small():
    g = Grid2D(21, 21, 20.0)
    pml = PmlProfile(4)
    acq = surface_acquisition(g, 4, 3, 1)
    return g, pml, acq


# -- data and wavefields ----------------------------------------------------


def test_simulate_dense_pipeline(small):
    g, pml, _ = small
    acq = AcquisitionSet(g, [(10, 8)], [(x, 6) for x in range(4, 17)], pml_thickness=4)
    m = make_toy_model("homogeneous", g, v=2000)
    f = 6.0
    data = simulate_data(m, acq, [f], pml)
    lap, mass = dense_oracle(m, 2 * np.pi * f, 4, pml.amplitude, 1.0)
    b = np.zeros(g.n, complex)
    b[g.index(10, 8)] = 1.0
    u = scipy.linalg.solve(lap + mass, b)
    ref = np.array([u[g.index(x, 6)] for x in range(4, 17)])
    assert np.linalg.norm(data.at(f)[:, 0] - ref) <= 1e-12 * np.linalg.norm(ref)


def test_colocated_receiver_and_linearity(small):
    g, pml, _ = small
    m = make_toy_model("homogeneous", g, v=2500)
    acq1 = AcquisitionSet(g, [(9, 9)], [(9, 9), (12, 9)], amplitudes=[1.0], pml_thickness=4)
    acq2 = AcquisitionSet(g, [(9, 9)], [(9, 9), (12, 9)], amplitudes=[2.0], pml_thickness=4)
    d1 = simulate_data(m, acq1, [5.0], pml)
    d2 = simulate_data(m, acq2, [5.0], pml)
    u = forward_solve(assemble(m, 2 * np.pi * 5.0, pml), acq1.source_vectors()[:, 0])
    assert d1.at(5.0)[0, 0] == u[g.index(9, 9)]
    np.testing.assert_allclose(d2.values, 2 * d1.values, rtol=1e-14, atol=0)


def test_acquisition_validation(small):
    g, _, _ = small
    with pytest.raises(ValueError):
        AcquisitionSet(g, [(1, 5)], [(5, 5)], pml_thickness=4)
    acq = AcquisitionSet(g, [(5, 5), (6, 6)], [(7, 7), (8, 8), (9, 9)])
    P = acq.sampling.toarray()
    assert np.all(P.sum(axis=1) == 1) and np.all((P == 0) | (P == 1))


def observed(g, pml, acq, rng, freq=5.0):
    """Data from a perturbed model, as a Dataset for the default penalty rule."""
    m_obs = ModelField(g, random_model(g, rng).values)
    return simulate_data(m_obs, acq, [freq], pml)


def test_consistent_data_fixed_point_of_augmented_solve(small, rng):
    g, pml, acq = small
    m = random_model(g, rng)
    sys_ = assemble(m, 2 * np.pi * 5, pml)
    b = acq.source_vectors()
    u_true = forward_solve(sys_, b)
    data = simulate_data(m, acq, [5.0], pml)
    lam0 = default_penalty({5.0: sys_}, 1e-2, acq, data)
    for lam in (lam0 * 1e-6, lam0, lam0 * 1e6):
        u = reconstruct_wavefield(sys_, acq, data.at(5.0), b, lam)
        assert np.linalg.norm(u - u_true) <= 1e-9 * np.linalg.norm(u_true)


def test_large_penalty_limit(small, rng):
    g, pml, acq = small
    sys_ = assemble(random_model(g, rng), 2 * np.pi * 5, pml)
    data = observed(g, pml, acq, rng)
    b = acq.source_vectors()
    lam = 1e8 * default_penalty({5.0: sys_}, 1e-2, acq, data)
    u = reconstruct_wavefield(sys_, acq, data.at(5.0), b, lam)
    ref = forward_solve(sys_, b)
    assert np.linalg.norm(u - ref) <= 1e-4 * np.linalg.norm(ref)


def test_small_penalty_limit_full_coverage(small, rng):
    g, pml, _ = small
    nodes = [(ix, iz) for ix in range(g.nx) for iz in range(g.nz)]
    acq = AcquisitionSet(g, [(10, 10)], nodes)
    sys_ = assemble(random_model(g, rng), 2 * np.pi * 5, pml)
    data = observed(g, pml, acq, rng)
    d = data.at(5.0)
    lam = 1e-12 * default_penalty({5.0: sys_}, 1e-2, acq, data)
    u = reconstruct_wavefield(sys_, acq, d, acq.source_vectors(), lam)
    assert np.linalg.norm(u - d) <= 1e-4 * np.linalg.norm(d)


def test_penalty_rules(small, rng):
    g, pml, acq = small
    sys_ = assemble(random_model(g, rng), 2 * np.pi * 5, pml)
    data = observed(g, pml, acq, rng)
    A = sys_.matrix.toarray()
    peak = np.max(np.diag(A.conj().T @ A).real)
    assert default_penalty({5.0: sys_}, 0.5, rule="balanced") == pytest.approx(0.5 / peak,
                                                                              rel=1e-13)
    P = acq.sampling.toarray()
    b = acq.source_vectors()
    ref = 0.5 * np.linalg.norm(P.T @ data.at(5.0)) ** 2 / np.linalg.norm(A.conj().T @ b) ** 2
    assert default_penalty({5.0: sys_}, 0.5, acq, data) == pytest.approx(ref, rel=1e-12)
    # the data-ratio rule follows the data scale
    scaled = Dataset(data.frequencies, 10 * data.values)
    assert default_penalty({5.0: sys_}, 0.5, acq, scaled) == pytest.approx(100 * ref, rel=1e-12)
    with pytest.raises(ValueError):
        default_penalty({5.0: sys_}, 0.5)
    with pytest.raises(ConfigurationError):
        default_penalty({5.0: sys_}, 0.5, acq, data, rule="magic")
    with pytest.raises(ConfigurationError):
        InversionConfig([[5.0]], penalty_rule="magic")


def test_augmented_normal_residual(small, rng):
    g, pml, acq = small
    sys_ = assemble(random_model(g, rng), 2 * np.pi * 7, pml)
    lam = default_penalty({7.0: sys_}, 1e-2, rule="balanced")
    solver = AugmentedSolver(sys_, acq.sampling, lam)
    b = crandn(rng, g.n, 2)
    d = crandn(rng, acq.n_receivers, 2)
    u = solver.solve(b, d)
    A, P = sys_.matrix, acq.sampling
    K = lam * (A.conj().T @ A) + P.T @ P
    rhs = solver.rhs(b, d)
    assert np.linalg.norm(K @ u - rhs) <= 1e-10 * np.linalg.norm(rhs)
    with pytest.raises(ValueError):
        AugmentedSolver(sys_, acq.sampling, 0.0)


# -- virtual sources and model updates --------------------------------------


@pytest.mark.parametrize("stencil", [StencilConfig(), StencilConfig.anti_lumped()])
def test_bilinearity_identity(rng, stencil):
    g = Grid2D(12, 10, 15.0)
    for f in (3.0, 7.5):
        sys_ = assemble(random_model(g, rng), 2 * np.pi * f, PmlProfile(3), stencil)
        u = crandn(rng, g.n)
        b = crandn(rng, g.n)
        L, y = virtual_source(sys_, u, b)
        lhs = sys_.matrix @ u - sys_.laplacian @ u
        scale = np.linalg.norm(sys_.matrix @ u)
        assert np.linalg.norm(lhs - L @ sys_.model.values) <= 1e-13 * scale
        assert np.linalg.norm(sys_.mass @ u - L @ sys_.model.values) <= 1e-13 * scale
        np.testing.assert_array_equal(y, b - sys_.laplacian @ u)


def test_virtual_source_trivial_cases(rng):
    g = Grid2D(8, 8, 10.0)
    sys_ = assemble(random_model(g, rng), 20.0, PmlProfile(0))
    b = crandn(rng, g.n)
    L, y = virtual_source(sys_, np.zeros(g.n, complex), b)
    assert L.count_nonzero() == 0 and np.array_equal(y, b)
    u = crandn(rng, g.n)
    L, _ = virtual_source(sys_, u, b)
    assert (L - sp.diags(400.0 * u)).count_nonzero() == 0
    with pytest.raises(ValueError):
        virtual_source(sys_, np.ones(g.n - 1), b)


def exact_parts(m, pml, stencil, freqs, sources):
    parts = []
    for f in freqs:
        sys_ = assemble(m, 2 * np.pi * f, pml, stencil)
        for k in sources:
            b = np.zeros(m.grid.n, complex)
            b[k] = 1.0
            parts.append(virtual_source(sys_, forward_solve(sys_, b), b))
    return parts


@pytest.mark.parametrize("stencil", [StencilConfig(), StencilConfig.anti_lumped()])
def test_exact_wavefield_recovery(rng, stencil):
    g = Grid2D(20, 18, 15.0)
    m = random_model(g, rng)
    parts = exact_parts(m, PmlProfile(4), stencil, [6.0], [g.index(10, 9)])
    rec = update_model_ls(parts)
    assert np.linalg.norm(rec - m.values) <= 1e-9 * np.linalg.norm(m.values)
    rec_pr = update_model_pr(parts, m.values * rng.uniform(0.8, 1.2, g.n))
    assert np.linalg.norm(rec_pr - m.values) <= 1e-9 * np.linalg.norm(m.values)


def test_ls_scalar_oracle_and_duplicates(rng):
    g = Grid2D(8, 8, 10.0)
    sys_ = assemble(random_model(g, rng), 25.0, PmlProfile(0))
    L, y = virtual_source(sys_, crandn(rng, g.n), crandn(rng, g.n))
    m = update_model_ls([(L, y)])
    diag = L.diagonal()
    ref = np.array([(np.conj(diag[i]) * y[i]).real / abs(diag[i]) ** 2 for i in range(g.n)])
    np.testing.assert_allclose(m, ref, rtol=1e-14)
    np.testing.assert_allclose(update_model_ls([(L, y), (L, y)]), m, rtol=1e-14)


def test_ls_bounds_applied(rng):
    g = Grid2D(6, 6, 10.0)
    L = sp.diags(crandn(rng, g.n))
    y = crandn(rng, g.n)
    m = update_model_ls([(L, y)], Bounds(-0.1, 0.1))
    assert np.all(np.abs(m) <= 0.1)


def test_phase_align_examples(rng):
    L = sp.diags(crandn(rng, 6))
    m_k = rng.uniform(1, 2, 6)
    pred = L @ m_k
    y = 3.0 * pred
    np.testing.assert_allclose(phase_align(L, m_k, y), y, rtol=1e-15)
    y0 = crandn(rng, 6)
    y0[2] = 0
    out = phase_align(L, m_k, y0)
    assert out[2] == 0
    np.testing.assert_allclose(np.abs(out), np.abs(y0), rtol=1e-15)
    # zero prediction takes phase 1
    m_z = m_k.copy()
    m_z[4] = 0.0
    assert phase_align(L, m_z, y0)[4] == abs(y0[4])
    with pytest.raises(ValueError):
        phase_align(L, m_k, np.ones(5))


def test_phase_align_optimal_against_random_phases(rng):
    L = sp.csr_matrix(crandn(rng, 10, 6))
    m_k = rng.standard_normal(6)
    y = crandn(rng, 10)
    pred = L @ m_k
    best = np.linalg.norm(pred - phase_align(L, m_k, y))
    phis = rng.uniform(-np.pi, np.pi, (1000, 10))
    others = np.linalg.norm(pred - np.abs(y) * np.exp(1j * phis), axis=1)
    assert np.all(best <= others)


def test_update_pr_is_ls_on_aligned_data_and_descends(rng):
    def pr_obj(parts, m):
        return sum(0.5 * np.sum((np.abs(L @ m) - np.abs(y)) ** 2) for L, y in parts)

    for _ in range(20):
        parts = [(sp.csr_matrix(crandn(rng, 12, 5)), crandn(rng, 12)) for _ in range(3)]
        m = rng.standard_normal(5)
        aligned = [(L, phase_align(L, m, y)) for L, y in parts]
        m_next = update_model_pr(parts, m)
        np.testing.assert_array_equal(m_next, update_model_ls(aligned))
        for _ in range(5):
            f_prev = pr_obj(parts, m)
            m = update_model_pr(parts, m)
            assert pr_obj(parts, m) <= f_prev + 1e-12


def test_update_pr_fixed_point(rng):
    g = Grid2D(20, 18, 15.0)
    m = random_model(g, rng)
    parts = exact_parts(m, PmlProfile(4), StencilConfig(), [5.0, 6.0],
                        [g.index(6, 9), g.index(14, 9)])
    out = update_model_pr(parts, m.values)
    assert np.linalg.norm(out - m.values) <= 1e-10 * np.linalg.norm(m.values)


# -- multipliers, stopping, metrics -----------------------------------------


def test_multipliers_running_sum(small, rng):
    g, pml, acq = small
    m = random_model(g, rng)
    sys_ = assemble(m, 2 * np.pi * 4, pml)
    P = acq.sampling
    ns, nr = acq.n_sources, acq.n_receivers
    state = MultiplierState.zeros([4.0], g.n, ns, nr)
    acc_b = np.zeros((g.n, ns), complex)
    acc_d = np.zeros((nr, ns), complex)
    for _ in range(6):
        u = crandn(rng, g.n, ns)
        b = crandn(rng, g.n, ns)
        d = crandn(rng, nr, ns)
        state = update_multipliers(state, 4.0, sys_, u, b, d, P)
        acc_b = acc_b + (b - sys_.matrix @ u)
        acc_d = acc_d + (d - P @ u)
    assert np.max(np.abs(state.source[4.0] - acc_b)) <= 1e-15 * np.max(np.abs(acc_b))
    assert np.max(np.abs(state.data[4.0] - acc_d)) <= 1e-15 * np.max(np.abs(acc_d))


def test_multipliers_trivial_cases(small, rng):
    g, pml, acq = small
    sys_ = assemble(random_model(g, rng), 2 * np.pi * 4, pml)
    P = acq.sampling
    u = crandn(rng, g.n, acq.n_sources)
    b, d = sys_.matrix @ u, P @ u
    s0 = MultiplierState.zeros([4.0], g.n, acq.n_sources, acq.n_receivers)
    s1 = update_multipliers(s0, 4.0, sys_, u, b, d, P)
    assert np.all(s1.data[4.0] == 0)
    assert np.linalg.norm(s1.source[4.0]) <= 1e-13 * np.linalg.norm(b)
    r_b = crandn(rng, g.n, acq.n_sources)
    s = s0
    for _ in range(2):
        s = update_multipliers(s, 4.0, sys_, u, b + r_b, d, P)
    np.testing.assert_allclose(s.source[4.0], 2 * r_b, atol=1e-12 * np.linalg.norm(b))
    # the input state is never mutated
    assert np.all(s0.source[4.0] == 0)


@pytest.mark.parametrize(
    "src, dat, it, cap, expected",
    [
        (1e-4, 1e-6, 3, 30, True),
        (1e-2, 1e-6, 3, 30, False),
        (1e-4, 1e-4, 3, 30, False),
        (1e-3, 1e-5, 3, 30, True),
        (5.0, 5.0, 30, 30, True),
        (5.0, 5.0, 31, 30, True),
    ],
)
def test_stopping_truth_table(src, dat, it, cap, expected):
    assert stopping_check(src, dat, iteration=it, max_iters=cap) is expected


def test_model_error(rng):
    g = Grid2D(5, 4, 1.0)
    mt = ModelField(g, rng.uniform(1e-8, 1e-7, g.n))
    assert model_error(mt, mt) == 0.0
    assert model_error(1.1 * mt.values, mt) == pytest.approx(10.0, rel=1e-13)
    m = rng.uniform(1e-8, 1e-7, g.n)
    num = den = 0.0
    for a, b in zip(m, mt.values):
        num += abs(a - b)
        den += abs(b)
    assert model_error(m, mt) == pytest.approx(100 * num / den, rel=1e-13)
    assert model_error(m, mt) == model_error(m.copy(), mt)
    with pytest.raises(ValueError):
        model_error(np.ones(3), mt)


# -- logs -------------------------------------------------------------------


def test_log_csv_round_trip(tmp_path):
    log = IterationLog([LogRecord(1, 0, "wipr", 0.1, 1 / 3, 12.5, 1e-9, 0.25),
                        LogRecord(2, 0, "wipr", 0.05, 0.2, float("nan"), 1e-9, 0.5)])
    path = tmp_path / "log.csv"
    text = log.to_csv(path)
    assert text.splitlines()[0] == "iter,freq_batch,mode,data_residual,source_residual," \
                                   "model_error,lambda,seconds"
    back = IterationLog.from_csv(path)
    assert back[0] == log[0]
    assert np.isnan(back[1].model_error)
    assert "0.0" == log.to_csv(record_timing=False).splitlines()[1].split(",")[-1]


def test_log_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("iter,foo\n")
    with pytest.raises(ValueError, match=":1:"):
        IterationLog.from_csv(bad)
    bad.write_text("iter,freq_batch,mode,data_residual,source_residual,model_error,lambda,"
                   "seconds\n1,0,wipr,x,1,1,1,1\n")
    with pytest.raises(ValueError, match=":2:"):
        IterationLog.from_csv(bad)


# -- driver -----------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    g = Grid2D(40, 30, 50.0)
    mt = make_toy_model("inclusion", g, v_background=2500, v_anomaly=3500,
                        rect=(15, 24, 12, 19))
    pml = PmlProfile(8)
    acq = surface_acquisition(g, 8, 3, 1)
    data = simulate_data(mt, acq, [3.0, 3.5, 4.5, 5.0], pml)
    m0 = make_toy_model("homogeneous", g, v=3000)
    return g, mt, pml, acq, data, m0


def test_fixed_point_terminates_at_first_iteration(toy):
    g, mt, pml, acq, data, _ = toy
    cfg = InversionConfig([[3.0, 3.5]], modes=("irwri",), pml=pml)
    res = run_batch(cfg, mt, acq, data, [3.0, 3.5], "irwri", mt)
    assert len(res.log) == 1
    rec = res.log[0]
    assert rec.source_residual <= 1e-3 and rec.data_residual <= 1e-5
    assert model_error(res.model, mt) <= 1e-8
    for f in (3.0, 3.5):
        assert np.max(np.abs(res.multipliers.data[f])) <= 1e-5


def test_wipr_batch_reduces_model_error(toy):
    g, mt, pml, acq, data, m0 = toy
    cfg = InversionConfig([[3.0, 3.5]], modes=("wipr",), max_iters=10, pml=pml,
                          penalty_rule="balanced")
    res = run_batch(cfg, m0, acq, data, [3.0, 3.5], Mode.WIPR, mt)
    assert len(res.log) == 10
    assert [r.iter for r in res.log] == list(range(1, 11))
    assert res.log[-1].model_error < model_error(m0, mt)
    assert all(r.mode == "wipr" for r in res.log)
    assert len({r.lam for r in res.log}) == 1


def test_two_batch_wipr_first_not_worse(toy):
    g, mt, pml, acq, data, m0 = toy
    bounds = Bounds.from_velocity(1500, 5000)
    sched = [[3.0, 3.5], [4.5, 5.0]]
    runs = {}
    for name, modes in (("irwri", ("irwri",)), ("pr", ("wipr", "irwri"))):
        cfg = InversionConfig(sched, modes=modes, max_iters=10, pml=pml, bounds=bounds,
                              penalty_rule="balanced")
        seen = []
        m, log = run_inversion(cfg, acq, data, m0, mt, callback=lambda i, m: seen.append(i))
        assert seen == [0, 1]
        assert [r.freq_batch for r in log] == [0] * 10 + [1] * 10
        runs[name] = log
    assert [r.mode for r in runs["pr"]] == ["wipr"] * 10 + ["irwri"] * 10
    assert runs["pr"][-1].model_error <= runs["irwri"][-1].model_error


def test_single_batch_inversion_equals_run_batch(toy):
    g, mt, pml, acq, data, m0 = toy
    cfg = InversionConfig([[3.0, 3.5]], max_iters=3, pml=pml)
    m, log = run_inversion(cfg, acq, data, m0, mt)
    res = run_batch(cfg, m0, acq, data, [3.0, 3.5], "irwri", mt)
    assert np.array_equal(m.values, res.model.values)
    assert [r.model_error for r in log] == [r.model_error for r in res.log]


def test_missing_frequency_rejected_before_solving(toy):
    g, mt, pml, acq, data, m0 = toy
    cfg = InversionConfig([[3.0, 7.0]], pml=pml)
    with pytest.raises(ConfigurationError, match="7"):
        run_inversion(cfg, acq, data, m0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        InversionConfig([])
    with pytest.raises(ConfigurationError):
        InversionConfig([[3.0]], lam=-1.0)
    with pytest.raises(ConfigurationError):
        InversionConfig([[3.0]], eps_data=0.0)
    with pytest.raises(ValueError):
        InversionConfig([[3.0]], modes=("fwi",))
    cfg = InversionConfig([[3.0], [4.0], [5.0]], modes=("wipr", "irwri"))
    assert [cfg.mode_for(i) for i in range(3)] == [Mode.WIPR, Mode.IRWRI, Mode.IRWRI]


def test_dataset_lookup():
    ds = Dataset([3.0, 3.5], np.zeros((2, 1, 4)))
    assert 3.5 in ds and 4.0 not in ds
    assert ds.at(3.5).shape == (4, 1)
    with pytest.raises(ValueError):
        Dataset([3.5, 3.0], np.zeros((2, 1, 4)))


# -- bilinear recovery ------------------------------------------------------


@pytest.fixture(scope="module")
def smooth_case():
    g = Grid2D(21, 21, 10.0)
    m = make_toy_model("smooth", g, vmin=1800, vmax=3200, seed=11)
    omega = 2 * np.pi * 6.0
    sys_ = assemble(m, omega, PmlProfile(0))
    b = np.zeros(g.n, complex)
    b[g.index(10, 10)] = 1.0
    b += 0.05 * np.exp(1j * np.linspace(0, 9, g.n))  # distributed source avoids nodal zeros
    u = forward_solve(sys_, b)
    interior = np.zeros(g.shape, bool)
    interior[1:-1, 1:-1] = True
    return g, m, omega, b, u, interior.ravel()


@pytest.mark.parametrize("magnitude_only", [False, True])
def test_bilinear_recovery_exact(smooth_case, magnitude_only):
    g, m, omega, b, u, interior = smooth_case
    rec = bilinear_recovery(u, b, omega, g, magnitude_only=magnitude_only)
    assert not rec.mask.any()
    err = np.abs(rec.data - m.values)[interior] / m.values[interior]
    assert err.max() < 1e-8


def test_bilinear_recovery_scale_invariance(smooth_case):
    g, m, omega, b, u, _ = smooth_case
    c = 0.3 - 1.7j
    for mag in (False, True):
        base = bilinear_recovery(u, b, omega, g, magnitude_only=mag)
        scaled = bilinear_recovery(c * u, c * b, omega, g, magnitude_only=mag)
        np.testing.assert_allclose(scaled.data, base.data, rtol=1e-12)


def test_bilinear_recovery_masks_zero_node(smooth_case):
    g, m, omega, b, u, _ = smooth_case
    k = g.index(7, 12)
    u0 = u.copy()
    u0[k] = 0.0
    rec = bilinear_recovery(u0, b, omega, g)
    base = bilinear_recovery(u, b, omega, g)
    assert rec.mask[k] and rec.mask.sum() == 1
    assert rec[k] is np.ma.masked
    # neighbors keep their value but see the modified Laplacian of u
    nbr = g.index(7, 14)
    assert rec.data[nbr] == base.data[nbr]
