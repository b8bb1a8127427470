import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from qrkd import kernels, qsim
from qrkd.exceptions import ShapeError, ValidationError
from qrkd.kernels import JLProjector
from qrkd.qsim import EncodingSpec

PI = math.pi


def _pair(rng, spec, scale=2.0):
    return rng.uniform(-scale, scale, (2, spec.capacity))


# ------------------------------------------------------------- fidelity


def test_fidelity_examples():
    s = EncodingSpec(1)
    assert kernels.fidelity_kernel([0.3], [0.3], s) == pytest.approx(1)
    assert kernels.fidelity_kernel([0.0], [PI], s) == pytest.approx(0, abs=1e-15)
    assert kernels.fidelity_kernel([0.0], [PI / 2], s) == pytest.approx(0.5)


@given(st.integers(1, 4), st.data())
def test_fidelity_properties(n, data):
    spec = EncodingSpec(n, 2)
    a = data.draw(arrays(np.float64, spec.capacity, elements=st.floats(-5, 5)))
    b = data.draw(arrays(np.float64, spec.capacity, elements=st.floats(-5, 5)))
    k_ab = kernels.fidelity_kernel(a, b, spec)
    assert -1e-9 <= k_ab <= 1 + 1e-9
    assert k_ab == pytest.approx(kernels.fidelity_kernel(b, a, spec), abs=1e-12)
    assert kernels.fidelity_kernel(a, a, spec) == pytest.approx(1, abs=1e-9)
    assert k_ab == pytest.approx(oracles.fidelity(oracles.encode(a, n, 2), oracles.encode(b, n, 2)), abs=1e-10)


def test_fidelity_1000_random_trials(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        spec = EncodingSpec(n, 2)
        a, b = _pair(rng, spec, 4)
        k = kernels.fidelity_kernel(a, b, spec)
        assert -1e-9 <= k <= 1 + 1e-9
        assert k == kernels.fidelity_kernel(b, a, spec) or abs(k - kernels.fidelity_kernel(b, a, spec)) < 1e-12


# ------------------------------------------------------------ projected


def test_projected_examples():
    s1 = EncodingSpec(1)
    assert kernels.projected_kernel([0.4], [0.4], s1) == pytest.approx(1)
    assert kernels.projected_kernel([0.0], [PI], s1) == pytest.approx(0, abs=1e-15)
    bell = [PI / 2, 0]
    for method in ("pauli", "trace"):
        assert kernels.projected_kernel(bell, bell, EncodingSpec(2), method) == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        kernels.projected_kernel(bell, bell, EncodingSpec(2), "magic")


def test_projected_trace_equals_pauli(rng):
    for _ in range(300):
        spec = EncodingSpec(int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        a, b = _pair(rng, spec, 3)
        pauli = kernels.projected_kernel(a, b, spec, "pauli")
        trace = kernels.projected_kernel(a, b, spec, "trace")
        assert abs(pauli - trace) < 1e-10
        # third path: dense oracle states and the explicit partial trace
        n = spec.n_qubits
        ra = oracles.partial_trace_keep(oracles.encode(a, n, spec.n_layers), 0, n)
        rb = oracles.partial_trace_keep(oracles.encode(b, n, spec.n_layers), 0, n)
        assert abs(np.trace(ra @ rb).real - pauli) < 1e-10
        assert -1e-9 <= pauli <= 1 + 1e-9


def test_projected_diagonal_is_purity(rng):
    spec = EncodingSpec(3, 2)
    x = rng.uniform(-2, 2, spec.capacity)
    rho = qsim.reduced_density_matrix(qsim.encode_features(x, spec), 0)
    assert kernels.projected_kernel(x, x, spec) == pytest.approx(qsim.purity(rho), abs=1e-12)


# ------------------------------------------------------------- gaussian


def test_gaussian_examples():
    assert kernels.gaussian_kernel([1, 2], [1, 2], 0.3) == 1.0
    sigma = 0.7
    d = np.array([sigma * math.sqrt(2), 0])
    assert kernels.gaussian_kernel(d, [0, 0], sigma) == pytest.approx(math.exp(-1))
    assert kernels.gaussian_kernel(d, [0, 0], sigma) == pytest.approx(0.367879, abs=1e-6)
    for bad in (0.0, -1.0):
        with pytest.raises(ValidationError):
            kernels.gaussian_kernel([0], [1], bad)
    with pytest.raises(ShapeError):
        kernels.gaussian_kernel([0, 1], [1], 1.0)


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)),
       st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
def test_gaussian_properties(a, b, sigma):
    k = kernels.gaussian_kernel(a, b, sigma)
    assert 0 <= k <= 1
    assert k == kernels.gaussian_kernel(b, a, sigma)
    if np.array_equal(a, b):
        assert k == 1
    elif np.sum((a - b) ** 2) / (2 * sigma**2) > 1e-12:
        assert k < 1


# -------------------------------------------------------------- matrices


def test_kernel_matrix_examples(rng):
    spec = EncodingSpec(2)
    m = kernels.kernel_matrix([[0.1, 0.2], [0.1, 0.2]], "fidelity", spec)
    np.testing.assert_allclose(m.values, np.ones((2, 2)))
    samples = rng.uniform(-1, 1, (4, 2))
    for kind, kw in (("fidelity", {"spec": spec}), ("projected", {"spec": spec}), ("gaussian", {"sigma": 0.5})):
        m = kernels.kernel_matrix(samples, kind, **kw)
        assert m.kind == kind
        np.testing.assert_array_equal(m.values, m.values.T)
        assert kernels.offdiag_variance(m).n_pairs == 6
    fid = kernels.kernel_matrix(samples, "fidelity", spec).values
    np.testing.assert_allclose(np.diag(fid), 1, atol=1e-9)
    with pytest.raises(ValidationError):
        kernels.kernel_matrix(samples[:1], "fidelity", spec)
    with pytest.raises(ValidationError):
        kernels.kernel_matrix(samples, "cosine", spec)


def test_kernel_matrix_is_deterministic(rng):
    samples = rng.uniform(-1, 1, (5, 6))
    spec = EncodingSpec(3, 2)
    a = kernels.kernel_matrix(samples, "projected", spec).values
    b = kernels.kernel_matrix(samples, "projected", spec).values
    assert a.tobytes() == b.tobytes()


def test_offdiag_variance_examples():
    assert kernels.offdiag_variance(np.ones((4, 4))).variance == 0
    m = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=float)
    # strict upper triangle is {0, 1, 1}
    st_ = kernels.offdiag_variance(m)
    assert st_.mean == pytest.approx(2 / 3) and st_.variance == pytest.approx(2 / 9)
    two = kernels.offdiag_variance(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert two.n_pairs == 1 and two.variance == 0
    with pytest.raises(ValidationError):
        kernels.offdiag_variance(np.ones((1, 1)))


def test_fqk_concentrates_with_qubits():
    x = np.random.default_rng(3).uniform(0, 1, (60, 48))
    var = {n: kernels.offdiag_variance(kernels.kernel_matrix(
        x, "fidelity", EncodingSpec.for_dim(48, n, normalize=True))).variance for n in (2, 8)}
    assert var[8] < var[2]


# ------------------------------------------------------------ gradients


@pytest.mark.parametrize("kind", ["fidelity", "projected"])
@pytest.mark.parametrize("normalize", [False, True])
def test_shift_gradient_matches_finite_differences(rng, kind, normalize):
    for _ in range(12):
        n = int(rng.integers(1, 5))
        spec = EncodingSpec(n, int(rng.integers(1, 3)), normalize=normalize)
        a, b = _pair(rng, spec)
        g_a, g_b = kernels.kernel_gradient(a, b, spec, kind)
        fd_a = oracles.central_diff(lambda v: kernels.kernel_value(v, b, spec, kind), a)
        fd_b = oracles.central_diff(lambda v: kernels.kernel_value(a, v, spec, kind), b)
        assert oracles.rel_err(g_a, fd_a) <= 1e-4
        assert oracles.rel_err(g_b, fd_b) <= 1e-4


@pytest.mark.parametrize("kind", ["fidelity", "projected"])
def test_per_gate_shift_equals_per_qubit(rng, kind):
    spec = EncodingSpec(3, 3)
    a, b = _pair(rng, spec)
    fast = kernels.kernel_gradient(a, b, spec, kind)
    slow = kernels.kernel_gradient(a, b, spec, kind, per_gate=True)
    for f, s in zip(fast, slow):
        np.testing.assert_allclose(f, s, atol=1e-12)


def test_single_qubit_closed_form_gradient():
    # k = cos^2((ti - tj) / 2); dk/dtj = 0.5 sin(ti - tj) = -0.5 at ti=0, tj=pi/2
    g_i, g_j = kernels.kernel_gradient([0.0], [PI / 2], EncodingSpec(1), "fidelity")
    assert g_j[0] == pytest.approx(-0.5)
    assert g_i[0] == pytest.approx(0.5)


def test_self_fidelity_is_stationary(rng):
    spec = EncodingSpec(3, 2)
    x = rng.uniform(-1, 1, spec.capacity)
    g_i, g_j = kernels.kernel_gradient(x, x, spec, "fidelity")
    for e in np.eye(x.size):
        assert abs(g_i @ e - g_j @ e) < 1e-12


def test_gaussian_gradient(rng):
    a, b = rng.uniform(-1, 1, (2, 5))
    k, g_a, g_b = kernels.kernel_value_and_gradient(a, b, None, "gaussian", sigma=0.8)
    fd = oracles.central_diff(lambda v: kernels.gaussian_kernel(v, b, 0.8), a)
    assert oracles.rel_err(g_a, fd) <= 1e-6
    np.testing.assert_allclose(g_b, -g_a)


def test_gradient_unpadded_shape(rng):
    spec = EncodingSpec(3, 2)
    g_i, g_j = kernels.kernel_gradient(rng.uniform(size=4), rng.uniform(size=5), spec, "fidelity")
    assert g_i.shape == (4,) and g_j.shape == (5,)
    with pytest.raises(ValidationError):
        kernels.kernel_gradient([0.1], [0.2], EncodingSpec(1), "gaussian")


# ------------------------------------------------------------------- JL


def test_jl_projector_construction():
    p = JLProjector.random(16, 4, seed=42)
    assert p.matrix.shape == (4, 16)
    a = np.random.default_rng(42).standard_normal((4, 16)) / 2.0
    np.testing.assert_array_equal(p.matrix, a)
    with pytest.raises(ValidationError):
        JLProjector.random(8, 16, seed=0)


def test_jl_project_examples():
    p = JLProjector.random(16, 8, seed=42)
    s = qsim.encode_features(np.linspace(0, 1, 8), EncodingSpec(4, 2))
    out = kernels.jl_project(s, p)
    assert out.shape == (8,) and np.iscomplexobj(out)
    again = kernels.jl_project(s, JLProjector.random(16, 8, seed=42))
    assert out.tobytes() == again.tobytes()
    np.testing.assert_array_equal(kernels.jl_project(qsim.StateVector(np.zeros(16)), p), 0)
    with pytest.raises(ShapeError):
        kernels.jl_project(qsim.StateVector.zero(3), p)


def test_projection_error_identity_is_zero(rng):
    spec = EncodingSpec(3, 2)
    x = rng.uniform(-1, 1, (6, spec.capacity))
    assert kernels.projection_error(x, spec, JLProjector.identity(8)) == 0.0
    assert kernels.projection_error(x, spec, JLProjector.random(8, 4, seed=1)) >= 0


def test_projection_error_matches_direct_computation(rng):
    spec = EncodingSpec(4, 2)
    x = rng.uniform(-1, 1, (5, spec.capacity))
    p = JLProjector.random(16, 8, seed=7)
    states = [oracles.encode(v, 4, 2) for v in x]
    want = max(abs(oracles.fidelity(states[i], states[j]) - abs(np.vdot(p.matrix @ states[i], p.matrix @ states[j])) ** 2)
               for i in range(5) for j in range(i + 1, 5))
    assert kernels.projection_error(x, spec, p) == pytest.approx(want, abs=1e-12)


def test_bound_check_examples(rng):
    spec = EncodingSpec(4, 2)
    s = rng.uniform(-1, 1, (6, spec.capacity))
    same = kernels.bound_check(s, s, spec, JLProjector.random(16, 8, seed=3))
    np.testing.assert_array_equal(same.lhs, 0)
    np.testing.assert_allclose(same.slack, same.rhs)
    t = rng.uniform(-1, 1, (6, spec.capacity))
    ident = kernels.bound_check(s, t, spec, JLProjector.identity(16))
    assert ident.eps_max == 0 and ident.passed
    np.testing.assert_allclose(ident.lhs, ident.rhs, atol=1e-15)
    with pytest.raises(ValidationError):
        kernels.bound_check(s, t[:5], spec, JLProjector.identity(16))


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_bound_check_always_holds(seed, k):
    rng = np.random.default_rng(seed)
    spec = EncodingSpec(4, 2, normalize=True)
    s, t = rng.uniform(-1, 1, (2, 5, spec.capacity))
    rep = kernels.bound_check(s, t, spec, JLProjector.random(16, k, seed=seed))
    assert rep.passed
    assert len(rep.pairs) == 10
