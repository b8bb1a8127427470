"""Pairwise kernels on encoded features, their gradients, and JL analysis.

Two quantum kernels are provided:

* fidelity:  ``|<phi(x_i)|phi(x_j)>|^2``
* projected: ``tr[rho_1(x_i) rho_1(x_j)]`` with ``rho_1`` the reduced state of
  qubit 0, evaluated as ``(1 + b_i . b_j) / 2`` from Bloch vectors.

Gradients use the parameter-shift rule. Every rotation is ``exp(-i t Y / 2)``,
so for any expectation value ``f``

    df/dt = (f(t + pi/2) - f(t - pi/2)) / 2

holds exactly. Because rotations on one qubit commute and add, shifting any
single gate on qubit ``q`` equals shifting that qubit's total angle; the
default path evaluates one shift pair per qubit, ``per_gate=True`` evaluates
one per gate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, ValidationError
from .qsim import (
    EncodingSpec,
    StateVector,
    encode_features,
    encoding_angles,
    inner_product,
    pauli_expectations,
    prepare_state,
    qubit_angles,
    reduced_density_matrix,
)

KERNEL_KINDS = ("fidelity", "projected", "gaussian", "projected_fidelity_jl")
QUANTUM_KINDS = ("fidelity", "projected")
SHIFT = math.pi / 2


@dataclass
class KernelMatrix:
    values: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class KernelStats:
    mean: float
    variance: float
    n_pairs: int


@dataclass
class JLProjector:
    """Real Gaussian projection ``P = A / sqrt(k)`` from ``C^d`` to ``C^k``."""

    matrix: np.ndarray
    seed: int | None
    target_dim: int
    source_dim: int

    @classmethod
    def random(cls, source_dim: int, target_dim: int, seed: int) -> "JLProjector":
        if not 0 < target_dim <= source_dim:
            raise ValidationError(f"target_dim must be in [1, {source_dim}], got {target_dim}")
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((target_dim, source_dim))
        return cls(a / math.sqrt(target_dim), seed, target_dim, source_dim)

    @classmethod
    def identity(cls, dim: int) -> "JLProjector":
        return cls(np.eye(dim), None, dim, dim)


@dataclass
class BoundReport:
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray
    eps_student: float
    eps_teacher: float
    pairs: list = field(default_factory=list)
    tol: float = 1e-12

    @property
    def eps_max(self) -> float:
        return max(self.eps_student, self.eps_teacher)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.slack >= -self.tol))


# ---------------------------------------------------------------- kernels


def fidelity_kernel(x_i, x_j, spec: EncodingSpec) -> float:
    return _fidelity(encode_features(x_i, spec), encode_features(x_j, spec))


def _fidelity(a: StateVector, b: StateVector) -> float:
    return abs(inner_product(a, b)) ** 2


def projected_kernel(x_i, x_j, spec: EncodingSpec, method: str = "pauli") -> float:
    """One-qubit projected kernel on qubit 0.

    ``method="pauli"`` combines Bloch vectors; ``method="trace"`` multiplies the
    reduced density matrices directly.
    """
    a, b = encode_features(x_i, spec), encode_features(x_j, spec)
    if method == "pauli":
        return _projected_from_bloch(
            pauli_expectations(a, 0).as_array(), pauli_expectations(b, 0).as_array()
        )
    if method == "trace":
        return float(np.trace(reduced_density_matrix(a, 0) @ reduced_density_matrix(b, 0)).real)
    raise ValidationError(f"unknown method {method!r}")


def _projected_from_bloch(b_i: np.ndarray, b_j: np.ndarray) -> float:
    return float(0.5 * (1.0 + b_i @ b_j))


def gaussian_kernel(x_i, x_j, sigma: float) -> float:
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    x_i, x_j = np.ravel(x_i).astype(float), np.ravel(x_j).astype(float)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    d = x_i - x_j
    return float(math.exp(-(d @ d) / (2.0 * sigma**2)))


def jl_project(state: StateVector, projector: JLProjector) -> np.ndarray:
    """``P @ amplitudes``; the result is not renormalized."""
    if projector.source_dim != state.dim:
        raise ShapeError(f"projector expects dimension {projector.source_dim}, state has {state.dim}")
    return projector.matrix @ state.amplitudes


def _jl_fidelity(u: np.ndarray, v: np.ndarray, renormalize: bool) -> float:
    if renormalize:
        u = u / np.linalg.norm(u)
        v = v / np.linalg.norm(v)
    return abs(np.vdot(u, v)) ** 2


def kernel_matrix(
    samples,
    kind: str,
    spec: EncodingSpec | None = None,
    sigma: float | None = None,
    projector: JLProjector | None = None,
    renormalize: bool = False,
) -> KernelMatrix:
    """Symmetric Gram matrix; each unordered pair is evaluated once."""
    samples = [np.ravel(s) for s in samples]
    m = len(samples)
    if m < 2:
        raise ValidationError("kernel_matrix needs at least 2 samples")
    if kind not in KERNEL_KINDS:
        raise ValidationError(f"unknown kernel kind {kind!r}")
    if kind == "gaussian":
        if sigma is None:
            raise ValidationError("gaussian kernel needs sigma")
        pair = lambda i, j: gaussian_kernel(samples[i], samples[j], sigma)  # noqa: E731
    else:
        if spec is None:
            raise ValidationError(f"{kind} kernel needs an EncodingSpec")
        states = [encode_features(s, spec) for s in samples]
        if kind == "fidelity":
            pair = lambda i, j: _fidelity(states[i], states[j])  # noqa: E731
        elif kind == "projected":
            bloch = [pauli_expectations(s, 0).as_array() for s in states]
            pair = lambda i, j: _projected_from_bloch(bloch[i], bloch[j])  # noqa: E731
        else:
            if projector is None:
                raise ValidationError("projected_fidelity_jl kernel needs a projector")
            images = [jl_project(s, projector) for s in states]
            pair = lambda i, j: _jl_fidelity(images[i], images[j], renormalize)  # noqa: E731
    values = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            values[i, j] = values[j, i] = pair(i, j)
    return KernelMatrix(values, kind)


def offdiag_variance(matrix: KernelMatrix | np.ndarray) -> KernelStats:
    """Population mean and variance over the strict upper triangle."""
    values = matrix.values if isinstance(matrix, KernelMatrix) else np.asarray(matrix)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 2:
        raise ValidationError("need a square matrix of size at least 2")
    upper = values[np.triu_indices(values.shape[0], k=1)]
    return KernelStats(float(upper.mean()), float(upper.var()), int(upper.size))


# -------------------------------------------------------------- gradients


def _normalization_vjp(padded: np.ndarray, grad_angles: np.ndarray, spec: EncodingSpec) -> np.ndarray:
    """Pull an angle-space gradient back through ``x -> s * x / |x|``."""
    if not spec.normalize:
        return grad_angles
    norm = np.linalg.norm(padded)
    if norm == 0:
        # zero features encode to zero angles; use the unnormalized map there
        return grad_angles
    return spec.norm_scale * (grad_angles / norm - padded * (padded @ grad_angles) / norm**3)


def _padded(features, spec: EncodingSpec) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    raw = encoding_angles(x, EncodingSpec(spec.n_qubits, spec.n_layers, normalize=False, pad=spec.pad))
    return raw


def _shift_gradient(gate_angles: np.ndarray, n_qubits: int, observable, per_gate: bool) -> np.ndarray:
    """Parameter-shift gradient of ``observable(state)`` w.r.t. every gate angle.

    ``observable`` maps a StateVector to a scalar or a vector of expectations.
    Returns an array of shape ``(n_gates,) + observable_shape``.
    """
    n_gates = gate_angles.size
    if per_gate:
        rows = []
        for g in range(n_gates):
            plus, minus = gate_angles.copy(), gate_angles.copy()
            plus[g] += SHIFT
            minus[g] -= SHIFT
            f_plus = observable(prepare_state(plus, n_qubits, fuse=False))
            f_minus = observable(prepare_state(minus, n_qubits, fuse=False))
            rows.append((np.asarray(f_plus) - np.asarray(f_minus)) / 2.0)
        return np.array(rows)
    theta = qubit_angles(gate_angles, n_qubits)
    per_qubit = []
    for q in range(n_qubits):
        plus, minus = theta.copy(), theta.copy()
        plus[q] += SHIFT
        minus[q] -= SHIFT
        f_plus = observable(prepare_state(plus, n_qubits))
        f_minus = observable(prepare_state(minus, n_qubits))
        per_qubit.append((np.asarray(f_plus) - np.asarray(f_minus)) / 2.0)
    per_qubit = np.array(per_qubit)
    return np.tile(per_qubit, (n_gates // n_qubits,) + (1,) * (per_qubit.ndim - 1))


def kernel_value_and_gradient(
    x_i, x_j, spec: EncodingSpec | None, kind: str, sigma: float | None = None, per_gate: bool = False
) -> tuple[float, np.ndarray, np.ndarray]:
    """Kernel value together with its gradients w.r.t. both raw feature vectors.

    Gradients have the (unpadded) shapes of ``x_i`` and ``x_j``.
    """
    x_i = np.asarray(x_i, dtype=np.float64).reshape(-1)
    x_j = np.asarray(x_j, dtype=np.float64).reshape(-1)
    if kind == "gaussian":
        k = gaussian_kernel(x_i, x_j, sigma)
        g = -k * (x_i - x_j) / sigma**2
        return k, g, -g
    if kind not in QUANTUM_KINDS:
        raise ValidationError(f"gradient not available for kernel kind {kind!r}")

    n = spec.n_qubits
    pad_i, pad_j = _padded(x_i, spec), _padded(x_j, spec)
    ang_i, ang_j = encoding_angles(x_i, spec), encoding_angles(x_j, spec)
    state_i, state_j = prepare_state(ang_i, n), prepare_state(ang_j, n)

    if kind == "fidelity":
        k = _fidelity(state_i, state_j)
        # k as a function of one side is <P> with P the projector on the other state
        d_i = _shift_gradient(ang_i, n, lambda s: _fidelity(s, state_j), per_gate)
        d_j = _shift_gradient(ang_j, n, lambda s: _fidelity(state_i, s), per_gate)
    else:
        bloch = lambda s: pauli_expectations(s, 0).as_array()  # noqa: E731
        b_i, b_j = bloch(state_i), bloch(state_j)
        k = _projected_from_bloch(b_i, b_j)
        # product rule: dk/dtheta_i = (db_i/dtheta_i . b_j) / 2
        d_i = 0.5 * _shift_gradient(ang_i, n, bloch, per_gate) @ b_j
        d_j = 0.5 * _shift_gradient(ang_j, n, bloch, per_gate) @ b_i

    g_i = _normalization_vjp(pad_i, d_i, spec)[: x_i.size]
    g_j = _normalization_vjp(pad_j, d_j, spec)[: x_j.size]
    return k, g_i, g_j


def kernel_gradient(x_i, x_j, spec: EncodingSpec, kind: str, per_gate: bool = False):
    """``(dk/dx_i, dk/dx_j)`` by the parameter-shift rule."""
    if kind not in QUANTUM_KINDS:
        raise ValidationError(f"kernel_gradient supports {QUANTUM_KINDS}, got {kind!r}")
    _, g_i, g_j = kernel_value_and_gradient(x_i, x_j, spec, kind, per_gate=per_gate)
    return g_i, g_j


def kernel_value(x_i, x_j, spec: EncodingSpec | None, kind: str, sigma: float | None = None) -> float:
    if kind == "fidelity":
        return fidelity_kernel(x_i, x_j, spec)
    if kind == "projected":
        return projected_kernel(x_i, x_j, spec)
    if kind == "gaussian":
        return gaussian_kernel(x_i, x_j, sigma)
    raise ValidationError(f"unknown kernel kind {kind!r}")


# ------------------------------------------------------ projection analysis


def _fidelity_and_projected(states, projector, renormalize):
    m = len(states)
    images = [jl_project(s, projector) for s in states]
    exact = np.empty((m, m))
    approx = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            exact[i, j] = exact[j, i] = _fidelity(states[i], states[j])
            approx[i, j] = approx[j, i] = _jl_fidelity(images[i], images[j], renormalize)
    return exact, approx


def projection_error(samples, spec: EncodingSpec, projector: JLProjector, renormalize: bool = False) -> float:
    """Largest fidelity-kernel change caused by the JL projection over all pairs."""
    if len(samples) < 2:
        raise ValidationError("projection_error needs at least 2 samples")
    states = [encode_features(s, spec) for s in samples]
    exact, approx = _fidelity_and_projected(states, projector, renormalize)
    iu = np.triu_indices(len(states), k=1)
    return float(np.max(np.abs(exact - approx)[iu]))


def bound_check(student_samples, teacher_samples, spec: EncodingSpec, projector: JLProjector,
                renormalize: bool = False, tol: float = 1e-12) -> BoundReport:
    """Check ``|Ks - Kt| <= |Ks_proj - Kt_proj| + 2 eps`` for every pair.

    ``eps`` is the larger of the student and teacher projection errors measured
    on the same samples. ``tol`` only absorbs floating-point rounding.
    """
    if len(student_samples) != len(teacher_samples):
        raise ValidationError("student and teacher sample counts differ")
    if len(student_samples) < 2:
        raise ValidationError("bound_check needs at least 2 samples")
    s_states = [encode_features(x, spec) for x in student_samples]
    t_states = [encode_features(x, spec) for x in teacher_samples]
    ks, ks_p = _fidelity_and_projected(s_states, projector, renormalize)
    kt, kt_p = _fidelity_and_projected(t_states, projector, renormalize)
    iu = np.triu_indices(len(s_states), k=1)
    eps_s = float(np.max(np.abs(ks - ks_p)[iu]))
    eps_t = float(np.max(np.abs(kt - kt_p)[iu]))
    lhs = np.abs(ks - kt)[iu]
    rhs = np.abs(ks_p - kt_p)[iu] + 2 * max(eps_s, eps_t)
    return BoundReport(lhs, rhs, rhs - lhs, eps_s, eps_t, list(zip(*iu)), tol)
