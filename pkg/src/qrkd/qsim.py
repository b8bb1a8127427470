"""Dense statevector simulation of the Ry angle-encoding circuit.

Bit convention: qubit 0 is the most significant bit of the basis index, so
``amplitudes.reshape([2] * n)`` has axis ``q`` belonging to qubit ``q``.

The encoding circuit applies ``L`` layers of single-qubit ``Ry`` rotations
(feature ``l * n + j`` drives qubit ``j`` in layer ``l``) followed by a single
CNOT chain ``CNOT(0, 1), CNOT(1, 2), ..., CNOT(n-2, n-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import CapacityError, ShapeError, ValidationError

MAX_QUBITS = 20

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)


def ry_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


@dataclass(frozen=True)
class StateVector:
    """Immutable pure state of ``n_qubits`` qubits."""

    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        n = int(round(math.log2(amps.size))) if amps.size else -1
        if n < 0 or 2**n != amps.size:
            raise ShapeError(f"state length {amps.size} is not a power of two")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_qubits(self) -> int:
        return int(self.amplitudes.size).bit_length() - 1

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    def norm(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        _check_qubit_count(n_qubits)
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "StateVector":
        _check_qubit_count(n_qubits)
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[index] = 1.0
        return cls(amps)


@dataclass(frozen=True)
class EncodingSpec:
    """Shape and preprocessing of the angle-encoding circuit.

    Parameters
    ----------
    n_qubits : int
        Circuit width.
    n_layers : int
        Number of rotation layers; the circuit holds ``n_qubits * n_layers``
        rotation angles.
    normalize : bool
        L2-normalize the zero-padded feature vector before encoding.
    norm_scale : float
        Multiplier applied after normalization (radians).
    pad : bool
        Zero-pad short feature vectors up to ``n_qubits * n_layers``. When
        False the feature length must match the capacity exactly.
    """

    n_qubits: int
    n_layers: int = 1
    normalize: bool = False
    norm_scale: float = math.pi
    pad: bool = True

    def __post_init__(self):
        _check_qubit_count(self.n_qubits)
        if self.n_layers < 1:
            raise ValidationError("n_layers must be positive")
        if self.normalize and not self.norm_scale > 0:
            raise ValidationError("norm_scale must be positive when normalize is set")

    @property
    def capacity(self) -> int:
        return self.n_qubits * self.n_layers

    @classmethod
    def for_dim(cls, dim: int, n_qubits: int, **kwargs) -> "EncodingSpec":
        """Smallest layer count that fits ``dim`` features on ``n_qubits``."""
        return cls(n_qubits=n_qubits, n_layers=max(1, -(-dim // n_qubits)), **kwargs)


@dataclass(frozen=True)
class PauliExpectations:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def _check_qubit_count(n_qubits: int) -> None:
    if n_qubits < 1:
        raise ValidationError("n_qubits must be positive")
    if n_qubits > MAX_QUBITS:
        raise CapacityError(f"{n_qubits} qubits exceeds the dense simulation cap of {MAX_QUBITS}")


def _check_qubit(state: StateVector, qubit: int) -> None:
    if not 0 <= qubit < state.n_qubits:
        raise IndexError(f"qubit {qubit} out of range for {state.n_qubits}-qubit state")


def _apply_1q(amps: np.ndarray, n: int, qubit: int, matrix: np.ndarray) -> np.ndarray:
    t = amps.reshape(2**qubit, 2, 2 ** (n - qubit - 1))
    return np.einsum("ij,ajb->aib", matrix, t).reshape(-1)


def _apply_ry_raw(amps: np.ndarray, n: int, qubit: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    t = amps.reshape(2**qubit, 2, 2 ** (n - qubit - 1))
    out = np.empty_like(t)
    out[:, 0, :] = c * t[:, 0, :] - s * t[:, 1, :]
    out[:, 1, :] = s * t[:, 0, :] + c * t[:, 1, :]
    return out.reshape(-1)


def _apply_cnot_raw(amps: np.ndarray, n: int, control: int, target: int) -> np.ndarray:
    t = amps.reshape([2] * n).copy()
    sel = [slice(None)] * n
    sel[control] = 1
    sub = t[tuple(sel)]
    # target axis index inside the sub-array once the control axis is dropped
    axis = target - 1 if target > control else target
    t[tuple(sel)] = np.flip(sub, axis=axis)
    return t.reshape(-1)


def apply_ry(state: StateVector, qubit: int, angle: float) -> StateVector:
    """Rotate ``qubit`` about the Y axis by ``angle`` radians."""
    _check_qubit(state, qubit)
    return StateVector(_apply_ry_raw(state.amplitudes, state.n_qubits, qubit, float(angle)))


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    """Flip ``target`` on every basis state whose ``control`` bit is 1."""
    if control == target:
        raise ValidationError("control and target must differ")
    _check_qubit(state, control)
    _check_qubit(state, target)
    return StateVector(_apply_cnot_raw(state.amplitudes, state.n_qubits, control, target))


def encoding_angles(features, spec: EncodingSpec) -> np.ndarray:
    """Rotation angles for every gate, in gate order (layer-major, then qubit).

    Pads with zeros to ``spec.capacity`` and applies the optional L2
    normalization and scaling. A zero vector is left at zero.
    """
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    if x.size > spec.capacity:
        raise CapacityError(
            f"{x.size} features exceed circuit capacity {spec.capacity} "
            f"({spec.n_qubits} qubits x {spec.n_layers} layers)"
        )
    if x.size < spec.capacity:
        if not spec.pad:
            raise CapacityError(f"expected exactly {spec.capacity} features, got {x.size}")
        x = np.concatenate([x, np.zeros(spec.capacity - x.size)])
    if spec.normalize:
        norm = np.linalg.norm(x)
        if norm > 0:
            x = spec.norm_scale * x / norm
    return x


def qubit_angles(gate_angles: np.ndarray, n_qubits: int) -> np.ndarray:
    """Total rotation per qubit. Rotations about one axis compose additively."""
    return np.asarray(gate_angles).reshape(-1, n_qubits).sum(axis=0)


def _cnot_chain(amps: np.ndarray, n: int) -> np.ndarray:
    for k in range(n - 1):
        amps = _apply_cnot_raw(amps, n, k, k + 1)
    return amps


def prepare_state(gate_angles: np.ndarray, n_qubits: int, fuse: bool = True) -> StateVector:
    """Run the encoding circuit for already-preprocessed gate angles.

    With ``fuse`` the ``L`` rotations on each qubit are merged into one;
    otherwise every gate is applied in order.
    """
    n = n_qubits
    amps = np.zeros(2**n, dtype=np.complex128)
    amps[0] = 1.0
    if fuse:
        for j, theta in enumerate(qubit_angles(gate_angles, n)):
            amps = _apply_ry_raw(amps, n, j, float(theta))
    else:
        for idx, theta in enumerate(np.asarray(gate_angles).reshape(-1)):
            amps = _apply_ry_raw(amps, n, idx % n, float(theta))
    return StateVector(_cnot_chain(amps, n))


def encode_features(features, spec: EncodingSpec, fuse: bool = True) -> StateVector:
    """Angle-encode a real feature vector into an ``spec.n_qubits`` state."""
    return prepare_state(encoding_angles(features, spec), spec.n_qubits, fuse=fuse)


def inner_product(a: StateVector, b: StateVector) -> complex:
    """``<a|b>``, conjugating the first argument."""
    if a.dim != b.dim:
        raise ShapeError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def reduced_density_matrix(state: StateVector, keep_qubit: int = 0) -> np.ndarray:
    """2x2 density matrix of ``keep_qubit`` with all other qubits traced out."""
    _check_qubit(state, keep_qubit)
    n = state.n_qubits
    t = state.amplitudes.reshape(2**keep_qubit, 2, 2 ** (n - keep_qubit - 1))
    m = np.moveaxis(t, 1, 0).reshape(2, -1)
    return m @ m.conj().T


def pauli_expectations(state: StateVector, qubit: int = 0) -> PauliExpectations:
    """``<X>, <Y>, <Z>`` on one qubit, from the full state without forming rho."""
    _check_qubit(state, qubit)
    n, psi = state.n_qubits, state.amplitudes
    vals = [np.vdot(psi, _apply_1q(psi, n, qubit, p)).real for p in (PAULI_X, PAULI_Y, PAULI_Z)]
    return PauliExpectations(*(float(v) for v in vals))


def bloch_vector(gate_angles: np.ndarray, n_qubits: int, qubit: int = 0) -> np.ndarray:
    return pauli_expectations(prepare_state(gate_angles, n_qubits), qubit).as_array()


def purity(rho: np.ndarray) -> float:
    return float(np.trace(rho @ rho).real)
