"""Kernel values concentrate as the encoding widens.

With more qubits the off-diagonal fidelity kernel entries bunch up around a
constant, so their variance shrinks. The projected kernel, which only looks
at one qubit, is affected much less.

Run: python demos/kernel_concentration.py
"""
from qrkd.cli import kernel_variance_rows

rows = kernel_variance_rows(qubits=[2, 4, 6, 8], samples=100, dim=192, seeds=[1, 2],
                            kinds=["fidelity", "projected"], normalize=True)

print(f"{'kernel':>10} {'qubits':>6} {'seed':>4} {'mean':>8} {'variance':>10}")
for r in rows:
    if r["row_type"] == "stat":
        print(f"{r['kernel']:>10} {r['n_qubits']:>6} {r['seed']:>4} {r['mean']:>8.4f} {r['variance']:>10.5f}")
for r in rows:
    if r["row_type"] == "trend":
        print(f"{r['kernel']}: variance fell from {r['n_qubits'].replace('>', ' to ')} qubits "
              f"on {r['decreasing_fraction']:.0%} of seeds")
