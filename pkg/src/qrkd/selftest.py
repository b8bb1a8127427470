"""Fast invariant checks shipped with the package (``qrkd selftest``).

Each check returns ``(passed, detail)``. They use small sizes so the whole
suite runs in a few seconds; the full test suite lives under ``tests/``.
"""
from __future__ import annotations

import math
from functools import reduce

import numpy as np

from . import kernels, qsim
from .distill import compute_metrics, RunMetrics
from .losses import angle_loss, distance_loss, kd_loss, quantum_relational_loss
from .nn import autodiff as ad
from .nn.model import Model, student_spec

CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


def _kron_all(mats):
    return reduce(np.kron, mats)


def dense_encoding_unitary(gate_angles: np.ndarray, n: int) -> np.ndarray:
    """Full ``2^n x 2^n`` circuit matrix built from Kronecker products."""
    eye = np.eye(2)
    u = np.eye(2**n, dtype=complex)
    for idx, theta in enumerate(np.ravel(gate_angles)):
        q = idx % n
        u = _kron_all([qsim.ry_matrix(theta) if k == q else eye for k in range(n)]) @ u
    for c in range(n - 1):
        u = _kron_all([eye] * c + [CNOT] + [eye] * (n - c - 2)) @ u
    return u


def check_encoding_oracle(rng, trials: int = 20):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 5))
        spec = qsim.EncodingSpec(n, n_layers=int(rng.integers(1, 4)), normalize=bool(rng.integers(2)))
        x = rng.uniform(-2, 2, size=spec.capacity)
        angles = qsim.encoding_angles(x, spec)
        ref = dense_encoding_unitary(angles, n)[:, 0]
        worst = max(worst, float(np.max(np.abs(qsim.encode_features(x, spec).amplitudes - ref))))
    return worst < 1e-10, f"max amplitude error {worst:.2e}"


def check_shift_gradients(rng, trials: int = 5, h: float = 1e-4):
    worst = 0.0
    for kind in kernels.QUANTUM_KINDS:
        for _ in range(trials):
            spec = qsim.EncodingSpec(3, n_layers=2)
            a, b = rng.uniform(-1, 1, (2, spec.capacity))
            _, g, _ = kernels.kernel_value_and_gradient(a, b, spec, kind)
            fd = np.array([(kernels.kernel_value(a + h * e, b, spec, kind)
                            - kernels.kernel_value(a - h * e, b, spec, kind)) / (2 * h)
                           for e in np.eye(a.size)])
            worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_pqk_paths(rng, trials: int = 50):
    spec = qsim.EncodingSpec(3, n_layers=2)
    worst = max(
        abs(kernels.projected_kernel(a, b, spec, "pauli") - kernels.projected_kernel(a, b, spec, "trace"))
        for a, b in (rng.uniform(-2, 2, (2, spec.capacity)) for _ in range(trials))
    )
    return worst < 1e-10, f"max path difference {worst:.2e}"


def check_zero_clone(rng):
    teacher = Model.init(student_spec(), rng)
    student = teacher.clone()
    x = rng.uniform(0, 1, (8, 1, 28, 28))
    f_t, z_t = teacher(x)
    f_s, z_s = student(x)
    spec = qsim.EncodingSpec.for_dim(192, 4, normalize=True)
    losses = {
        "kd": kd_loss(z_t.values, z_s).item(),
        "dr": distance_loss(f_s, f_t.values).item(),
        "ar": angle_loss(f_s, f_t.values).item(),
        "qr": quantum_relational_loss(f_s, f_t.values, spec, pairs=[(0, 1), (2, 3)]).item(),
    }
    return max(losses.values()) < 1e-10, ", ".join(f"{k}={v:.1e}" for k, v in losses.items())


def check_metric_arithmetic(_rng):
    qrkd = RunMetrics("QRKD", 1, 95.15, 95.38)
    scratch = RunMetrics("scratch", 1, 94.79, 94.91)
    teacher = RunMetrics("teacher", 1, 99.32, 98.70)
    runs, _ = compute_metrics([qrkd, scratch], scratch, teacher)
    ok = math.isclose(runs[0].ts_gap, 3.32, abs_tol=1e-9) and math.isclose(runs[0].dist_gain, 0.47, abs_tol=1e-9)
    return ok, f"ts_gap={runs[0].ts_gap:.2f} dist_gain={runs[0].dist_gain:.2f}"


def check_autodiff(rng):
    x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    ad.tsum(ad.square(ad.matmul(x, w))).backward()
    expected = 2 * (x.values @ w) @ w.T
    err = float(np.max(np.abs(x.grad - expected)))
    return err < 1e-12, f"max gradient error {err:.1e}"


CHECKS = {
    "encoding-oracle": check_encoding_oracle,
    "shift-gradients": check_shift_gradients,
    "pqk-dual-path": check_pqk_paths,
    "zero-clone": check_zero_clone,
    "metric-arithmetic": check_metric_arithmetic,
    "autodiff": check_autodiff,
}


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
