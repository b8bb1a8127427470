"""Random projections of encoded states and the kernel-error bound.

Twelve-qubit states live in 4096 dimensions. Projecting them to k dimensions
with a scaled Gaussian matrix distorts pairwise overlaps by at most eps, and
the kernel gap between teacher and student then obeys an explicit bound.

Run: python demos/jl_projection.py
"""
from qrkd.cli import jl_rows

rows = jl_rows(source_qubits=12, target_dims=[64, 256, 1024], seeds=[1, 2], samples=10, dim=192)

for r in rows:
    if r["row_type"] == "run":
        print(f"k={r['target_dim']:>5} seed={r['seed']}  eps={r['eps_max']:.4f}  "
              f"bound held on all {r['n_pairs']} pairs: {r['bound_pass']}  min slack {r['min_slack']:.4f}")
for r in rows:
    if r["row_type"] == "median":
        print(f"median eps at k={r['target_dim']}: {r['eps_max']:.4f}")
