"""Encode feature vectors as quantum states and compare the two quantum kernels.

Run: python demos/encoding_and_kernels.py
"""
import numpy as np

from qrkd import kernels, qsim

rng = np.random.default_rng(0)

# Four qubits, three rotation layers: twelve features per state.
spec = qsim.EncodingSpec(4, 3, normalize=True)
x, y = rng.uniform(0, 1, (2, spec.capacity))

state = qsim.encode_features(x, spec)
print("amplitudes (first 4):", np.round(state.amplitudes[:4], 4))
print("norm:", round(state.norm(), 12))

rho = qsim.reduced_density_matrix(state, 0)
print("qubit-0 purity:", round(qsim.purity(rho), 4))
print("qubit-0 Bloch vector:", np.round(qsim.pauli_expectations(state, 0).as_array(), 4))

print("fidelity kernel      k(x, y) =", round(kernels.fidelity_kernel(x, y, spec), 6))
print("projected kernel     k(x, y) =", round(kernels.projected_kernel(x, y, spec), 6))
print("  same, via trace            =", round(kernels.projected_kernel(x, y, spec, "trace"), 6))

# Exact gradients from parameter shifts, checked against a finite difference.
g_x, _ = kernels.kernel_gradient(x, y, spec, "fidelity")
h = 1e-5
e0 = np.eye(x.size)[0]
fd = (kernels.fidelity_kernel(x + h * e0, y, spec) - kernels.fidelity_kernel(x - h * e0, y, spec)) / (2 * h)
print(f"d k / d x[0]: shift rule {g_x[0]:.8f}, finite difference {fd:.8f}")
