import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from kamreduce.linear_hamiltonian import b0_field, field_from_triple, kill_b0, normal_field
from kamreduce.torus_fourier import TorusSeries
from kamreduce.wave_model import (
    BlockOperator,
    DegeneratePotential,
    ModelParams,
    galerkin_blocks,
    packed_lambda,
    packed_modes,
    prepare,
    step1_rescale,
    step3_details,
    sturm_spectrum,
    weighted_norm,
)


def cos_theta(amp=1.0, n=1):
    k = (1,) + (0,) * (n - 1)
    return TorusSeries.from_modes({k: amp / 2, tuple(-x for x in k): amp / 2}, n, real_valued=True)


def params(eps=1e-3, V0=None, Vmodes=None, omega=1.3, J=4, **kw):
    V0 = cos_theta() if V0 is None else V0
    if Vmodes is None:
        Vmodes = {1: cos_theta(0.5), -1: cos_theta(0.5)}
    return ModelParams(n=1, M=kw.pop("M", 1.0), eps=eps, gamma=1e-2, N=8, J=J, V0=V0, Vmodes=Vmodes,
                       omega=[omega], **kw)


# --- spectrum and packing ---------------------------------------------


def test_sturm_spectrum_values():
    lam, w = sturm_spectrum(1.0, 4)
    assert lam[0] == 1.0 and lam[2] == 5.0
    lam, w = sturm_spectrum(0.5, 3)
    assert lam[3] == 9.5 and abs(w[3] - 9.5 ** 0.25) < 1e-15


def test_packing_layout():
    assert list(packed_modes(2)) == [0, 1, -1, 2, -2]
    assert list(packed_lambda(1.0, 2)) == [1, 2, 2, 5, 5]
    B = BlockOperator(np.arange(25).reshape(5, 5), 2)
    assert B.block(0, 0).shape == (1, 1)
    assert B.block(0, 2).shape == (1, 2)
    assert B.block(1, 0).shape == (2, 1)
    assert B.block(2, 1).shape == (2, 2)


def test_params_validation():
    with pytest.raises(ValueError):
        params(Vmodes={1: cos_theta(), -1: cos_theta(), 2: cos_theta()})
    with pytest.raises(ValueError):
        params(Vmodes={1: cos_theta()})
    with pytest.raises(DegeneratePotential):
        params(eps=0.6, V0=cos_theta(4.0))
    with pytest.raises(ValueError):
        params(J=2, Vmodes={5: cos_theta(), -5: cos_theta()})


# --- step 1 -----------------------------------------------------------


def test_step1_unperturbed():
    p = params(eps=0.0)
    a0, a1, V1 = step1_rescale(p)
    assert abs(a0.mean() - 1) < 1e-15 and a0.tail(0).strip_norm(0.0) < 1e-15
    assert a1.strip_norm(0.0) == 0.0
    want0 = p.M * p.V0.resize(a0.cutoff)
    assert (V1[0] - want0).strip_norm(0.0) < 1e-14
    assert (V1[1] - p.Vmodes[1].resize(a0.cutoff)).strip_norm(0.0) < 1e-14


def test_step1_constant_V0():
    c, eps = 0.5, 0.2
    a0, a1, _ = step1_rescale(params(eps=eps, V0=TorusSeries.constant(c, 1)))
    assert abs(a0.mean() - np.sqrt(1 - eps * c)) < 1e-15
    assert a0.tail(0).strip_norm(0.0) < 1e-14
    assert a1.strip_norm(0.0) < 1e-14


def test_step1_matches_finite_differences():
    eps, w = 0.1, 1.3
    p = params(eps=eps, omega=w)
    a0, a1, _ = step1_rescale(p)
    th = np.linspace(0, 2 * np.pi, 41)
    beta = lambda t: (1 - eps * np.cos(t)) ** -0.25
    h = 1e-3
    dbeta = (-beta(th + 2 * h) + 8 * beta(th + h) - 8 * beta(th - h) + beta(th - 2 * h)) / (12 * h)
    want_a1 = w * dbeta / (eps * beta(th))
    got_a0 = np.real(a0.eval(th[:, None]))
    got_a1 = np.real(a1.eval(th[:, None]))
    assert np.max(np.abs(got_a0 - beta(th) ** -2)) <= 1e-8
    assert np.max(np.abs(got_a1 - want_a1)) <= 1e-8 * np.max(np.abs(want_a1))


# --- step 3 -----------------------------------------------------------


def test_step3_trivial_cases():
    z = TorusSeries.zeros(1, 4)
    r = step3_details(TorusSeries.constant(1.0, 1, 4), z, {0: z}, [1.5], 0.01)
    assert r.rho == 1.0 and r.a.strip_norm(0.0) == 0.0 and r.diffeo.roundtrip_defect() == 0.0
    r = step3_details(TorusSeries.constant(1.7, 1, 4), z, {0: z}, [1.5], 0.01)
    assert abs(r.rho - 1.7) < 1e-15 and r.a.strip_norm(0.0) < 1e-15


def test_step3_cosine_frequency_factor():
    a0 = TorusSeries.constant(1.0, 1, 8) + cos_theta(0.05).resize(8)
    z = TorusSeries.zeros(1, 8)
    r = step3_details(a0, z, {0: z}, [1.5], 0.01)
    assert abs(r.rho - 1.0) < 1e-15
    want = TorusSeries.from_modes({1: -0.5j * 0.05 / 1.5, -1: 0.5j * 0.05 / 1.5}, 1, 8)
    assert (r.a - want).strip_norm(0.0) < 1e-15
    assert r.identity_residual <= 1e-10
    assert r.diffeo.roundtrip_defect() <= 1e-10


# --- Galerkin blocks --------------------------------------------------


def test_galerkin_zero_potential():
    R = galerkin_blocks({0: TorusSeries.zeros(1, 0)}, sturm_spectrum(1.0, 3)[0], 3)
    assert all(p.series.strip_norm(0.0) == 0.0 for p in R.parts())


def test_galerkin_selection_integral():
    x = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    for j, l, k in ((1, 2, 3), (2, 2, 4), (1, 2, 2)):
        integral = np.sum(np.exp(1j * (j + l - k) * x)) * (2 * np.pi / 64)
        assert abs(integral - (2 * np.pi if j + l == k else 0.0)) < 1e-12


def test_galerkin_against_quadrature():
    J = 3
    lam = sturm_spectrum(1.0, J)[0]
    R = galerkin_blocks({1: TorusSeries.constant(1.0, 1), -1: TorusSeries.constant(1.0, 1)}, lam, J)
    ub = R.ub.series.coeff((0,))
    assert abs(ub[1, 0] - np.pi / 2 ** 0.25) < 1e-14
    # <phi_k, (V/2) phi_l> with V = 2 cos x and phi_k = exp(ikx), weighted by lambda^(-1/4)
    x = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    V = 2 * np.cos(x)
    modes = packed_modes(J)
    w = packed_lambda(1.0, J) ** -0.25
    for p, k in enumerate(modes):
        for q, l in enumerate(modes):
            quad = np.sum(np.exp(-1j * k * x) * 0.5 * V * np.exp(1j * l * x)) * (2 * np.pi / 256)
            assert abs(ub[p, q] - quad * w[p] * w[q]) < 1e-13
    assert np.array_equal(R.uu.series.coeffs, 0.5 * R.ub.series.coeffs)
    assert R.uu.tag == "symmetric" and R.uu.symmetry_defect() == 0.0


# --- weighted norms ---------------------------------------------------


def test_weighted_norm_zero_and_identity():
    J = 5
    assert weighted_norm(BlockOperator(np.zeros((11, 11)), J)) == 0.0
    got = weighted_norm(BlockOperator.identity(J), M=1.0)
    assert abs(got - np.sqrt(J * J + 1.0)) < 1e-12


def test_weighted_norm_matches_dense_oracle(rng):
    J = 3
    B = rng.normal(size=(7, 7)) + 1j * rng.normal(size=(7, 7))
    Jw = np.diag(packed_lambda(2.0, J) ** 0.25)
    W = np.diag(np.where(packed_modes(J) == 0, 1.0, np.abs(packed_modes(J)) ** 2.0))
    want = np.linalg.norm(W @ Jw @ B @ Jw @ np.linalg.inv(W), 2)
    assert abs(weighted_norm(B, M=2.0, N=2.0) - want) < 1e-12 * want


def test_weighted_norm_translation_invariant(rng):
    c = rng.normal(size=(7, 5, 5))
    s = TorusSeries(c, 1, 3)
    shift = np.exp(1j * np.arange(-3, 4) * 0.77)[:, None, None]
    t = TorusSeries(c * shift, 1, 3)
    for strip in (0.0, 0.3):
        assert abs(weighted_norm(s, strip) - weighted_norm(t, strip)) < 1e-12 * weighted_norm(s, strip)


def test_weighted_norm_of_galerkin_blocks_is_bounded():
    # the weighted norm of the coupling stays bounded by a fixed multiple of sup |V| as J grows
    ratios = []
    for J in (4, 8, 16, 32):
        lam = sturm_spectrum(1.0, J)[0]
        R = galerkin_blocks({1: TorusSeries.constant(1.0, 1), -1: TorusSeries.constant(1.0, 1)}, lam, J)
        ratios.append(weighted_norm(R.ub) / 2.0)
    # J B J is pi (S + S^-1) truncated, so the fitted constant increases towards pi
    assert np.all(np.diff(ratios) > 0)
    assert ratios[-1] <= np.pi * (1 + 1e-12)


# --- b0 elimination ---------------------------------------------------


def _small_model(J=3):
    lam = sturm_spectrum(1.0, J)[0]
    V = {1: cos_theta(0.5), -1: cos_theta(0.5)}
    return lam, galerkin_blocks(V, lam, J)


def test_kill_b0_identity_cases():
    lam, R = _small_model()
    out = kill_b0(lam, TorusSeries.zeros(1, 2), 1.0, R, 1e-2, [1.3])
    assert out.identity and out.R is R
    b0 = cos_theta(0.3)
    out = kill_b0(lam, b0, 1.0, R, 0.0, [1.3])
    assert out.identity and out.R is R


def test_kill_b0_matches_integrated_flow(rng):
    J, eps, rho, w = 3, 1e-2, 1.02, 1.3
    d = 2 * J + 1
    lam, R = _small_model(J)
    c = 0.05 * (rng.normal(size=7) + 1j * rng.normal(size=7))
    c = 0.5 * (c + np.conj(c[::-1]))
    b0 = TorusSeries(c, 1, 3, real_valued=True)
    out = kill_b0(lam, b0, rho, R, eps, [w])
    assert not out.identity
    AN = normal_field(rho * np.diag(packed_lambda(1.0, J) ** 0.5))
    old = field_from_triple(R, eps).resize(3) + b0_field(b0, d, eps)
    old_at = lambda th: AN + old.eval(np.array([th]))
    new_at = lambda th: AN + out.field.eval(np.array([th]))

    def flow(th):
        K = out.generator.eval(np.array([th]))
        sol = solve_ivp(lambda t, y: (K @ y.reshape(2 * d, 2 * d)).ravel(), (0, 1),
                        np.eye(2 * d, dtype=complex).ravel(), method="DOP853", rtol=1e-13, atol=1e-15)
        return sol.y[:, -1].reshape(2 * d, 2 * d)

    h = 1e-3
    for th in rng.uniform(0, 2 * np.pi, 10):
        Psi = flow(th)
        assert np.max(np.abs(Psi - expm(out.generator.eval(np.array([th]))))) < 1e-12
        dPsi = (-flow(th + 2 * h) + 8 * flow(th + h) - 8 * flow(th - h) + flow(th - 2 * h)) / (12 * h)
        inv = np.linalg.inv(Psi)
        want = inv @ old_at(th) @ Psi - w * inv @ dPsi
        X = rng.normal(size=2 * d) + 1j * rng.normal(size=2 * d)
        got_v, want_v = new_at(th) @ X, want @ X
        pert = np.linalg.norm((want - AN) @ X)
        assert np.linalg.norm(got_v - want_v) <= 1e-6 * pert


def test_prepare_reference_model(ref_params):
    pm = prepare(ref_params)
    assert pm.reparam.identity_residual <= 1e-10
    assert pm.reparam.diffeo.roundtrip_defect() <= 1e-10
    assert not pm.killed.identity
    assert abs(pm.rho - 1.0) < 1e-3
