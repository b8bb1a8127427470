"""Command-line experiment driver.

Every subcommand writes a tidy CSV (atomically) into the output directory and
prints a short summary. Exit codes: 0 success, 1 runtime error, 2 usage error.
The output directory is ``--output-dir``, else ``$QRKD_OUTPUT_DIR``, else the
config file's ``output_dir``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels, qsim
from .distill import (
    CSV_COLUMNS,
    DistillConfig,
    RunMetrics,
    compute_metrics,
    distill_student,
    evaluate,
    load_datasets,
    load_teacher,
    metrics_rows,
    rows_to_csv,
    teacher_path,
    train_teacher,
)
from .exceptions import CapacityError, QRKDError, ValidationError
from .losses import VARIANTS, canonical_variant
from .fileio import atomic_write

log = logging.getLogger("qrkd")

OUTPUT_ENV = "QRKD_OUTPUT_DIR"


@dataclass
class ExperimentReport:
    command: str
    config_digest: str
    csv_path: str
    summary: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    def format(self) -> str:
        lines = [f"{self.command}: {self.csv_path} (config {self.config_digest[:12]}, "
                 f"{self.wall_seconds:.1f}s)"]
        for row in self.summary:
            lines.append("  " + "  ".join(_cell(k, v) for k, v in row.items()))
        return "\n".join(lines)

    def write(self, path: Path) -> None:
        atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())


def _cell(key, value) -> str:
    if isinstance(value, float):
        return f"{key}={value:.4g}"
    if isinstance(value, tuple):
        return f"{key}={value[0]:.2f}±{value[1]:.2f}"
    return f"{key}={'' if value is None else value}"


# ----------------------------------------------------------- arg helpers


def parse_int_list(text: str) -> list[int]:
    """``"1..5"``, ``"1,2,5"`` or a mix like ``"1..3,7"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _int_list(text):
    try:
        return parse_int_list(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pow2_list(text):
    """Plain integers, or ``2^6..2^10`` style power ranges."""
    if "^" in text:
        parts = [p.strip() for p in text.split("..")]
        exps = [int(p.split("^")[1]) for p in parts]
        return [2**e for e in (range(exps[0], exps[-1] + 1) if len(exps) == 2 else exps)]
    return _int_list(text)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variants(text):
    if text.lower() == "all":
        return list(VARIANTS)
    try:
        return [canonical_variant(v.strip()) for v in text.split(",")]
    except QRKDError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -------------------------------------------------------------- config


def load_config(args) -> DistillConfig:
    """Built-in defaults < config file < command-line flags."""
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        base = json.loads(path.read_text())
    cfg = DistillConfig.from_dict(base)
    ds = {}
    for flag, key in (("mnist_dir", "mnist_dir"), ("train_size", "train_size"),
                      ("test_size", "test_size"), ("dataset", "source")):
        value = getattr(args, flag, None)
        if value is not None:
            ds[key] = value
    if ds:
        cfg = replace(cfg, dataset=replace(cfg.dataset, **ds))
    top = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "n_qubits", "kernel")
           if getattr(args, k, None) is not None}
    if top:
        cfg = replace(cfg, **top)
    out = args.output_dir or os.environ.get(OUTPUT_ENV)
    if out:
        cfg = replace(cfg, output_dir=out)
    return cfg


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    atomic_write(path, rows_to_csv(rows, columns).encode())


# ------------------------------------------------------------ commands


def cmd_train_teacher(args) -> ExperimentReport:
    cfg = load_config(args)
    seeds = args.seeds or [cfg.seed]
    train, test = load_datasets(cfg)
    out = Path(cfg.output_dir)
    runs = []
    for seed in seeds:
        c = replace(cfg, seed=seed)
        _, metrics = train_teacher(c, train, test, checkpoint=teacher_path(c))
        runs.append(metrics)
    csv_path = out / "teacher.csv"
    rows = metrics_rows(runs)
    _write_csv(csv_path, rows, CSV_COLUMNS)
    summary = [{"seed": r.seed, "train_acc": r.train_acc, "test_acc": r.test_acc,
                "checkpoint": str(teacher_path(cfg, r.seed))} for r in runs]
    return ExperimentReport("train-teacher", cfg.digest(), str(csv_path), summary)


def _distill_job(job):
    cfg, train, test = job
    teacher = load_teacher(cfg) if cfg.variant != "scratch" else None
    ckpt = Path(cfg.output_dir) / "checkpoints" / f"{cfg.variant}_seed{cfg.seed}.ckpt"
    _, metrics = distill_student(cfg, train, test, teacher, checkpoint=ckpt)
    return metrics


def _teacher_accuracy(cfg: DistillConfig, seed: int, train, test) -> RunMetrics:
    model = load_teacher(cfg, seed)
    return RunMetrics("teacher", seed, evaluate(model, train), evaluate(model, test))


def _run_grid(configs, train, test, jobs: int) -> list[RunMetrics]:
    work = [(c, train, test) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_distill_job, work))
    return [_distill_job(w) for w in work]


def _summarize(runs, teachers, scratch) -> tuple[list[RunMetrics], list[dict]]:
    runs, summary = compute_metrics(runs, scratch, teachers)
    table = []
    for variant, s in summary.items():
        row = {"variant": variant, "n": s.n_runs}
        for key in ("train_acc", "test_acc", "acc_gap", "ts_gap", "dist_gain"):
            row[key] = (s.mean[key], s.std[key]) if key in s.mean else None
        table.append(row)
    t_test = [t.test_acc for t in teachers]
    table.append({"variant": "teacher", "n": len(teachers),
                  "test_acc": (float(np.mean(t_test)), float(np.std(t_test, ddof=1)) if len(t_test) > 1 else 0.0)})
    return runs, table


def _distill_grid(cfg, variants, seeds, jobs, train, test):
    """Run every (variant, seed), always including the scratch baseline."""
    variants = ["scratch"] + [v for v in variants if v != "scratch"]
    for seed in seeds:
        if any(v != "scratch" for v in variants) and not teacher_path(cfg, seed).is_file():
            raise FileNotFoundError(
                f"teacher checkpoint {teacher_path(cfg, seed)} not found; run train-teacher first")
    configs = [replace(cfg, variant=v, seed=s) for v in variants for s in seeds]
    runs = _run_grid(configs, train, test, jobs)
    teachers = [_teacher_accuracy(cfg, s, train, test) for s in seeds]
    return runs, teachers


def cmd_distill(args) -> ExperimentReport:
    cfg = load_config(args)
    train, test = load_datasets(cfg)
    runs, teachers = _distill_grid(cfg, args.variant, args.seeds, args.jobs, train, test)
    runs, table = _summarize(runs, teachers, [r for r in runs if r.variant == "scratch"])
    csv_path = Path(cfg.output_dir) / "distill.csv"
    _write_csv(csv_path, metrics_rows(runs), CSV_COLUMNS)
    return ExperimentReport("distill", cfg.digest(), str(csv_path), table)


def cmd_gaussian_sweep(args) -> ExperimentReport:
    if any(not s > 0 for s in args.sigma):
        raise argparse.ArgumentTypeError("every sigma must be positive")
    cfg = load_config(args)
    train, test = load_datasets(cfg)
    base_runs, teachers = _distill_grid(cfg, ["QRKD"], args.seeds, args.jobs, train, test)
    runs = list(base_runs)
    for sigma in args.sigma:
        gcfg = replace(cfg, kernel="gaussian", sigma=sigma)
        configs = [replace(gcfg, variant="QRKD", seed=s) for s in args.seeds]
        for m in _run_grid(configs, train, test, args.jobs):
            m.variant = f"QRKD-gaussian-{sigma:g}"
            runs.append(m)
    runs, table = _summarize(runs, teachers, [r for r in runs if r.variant == "scratch"])
    csv_path = Path(cfg.output_dir) / "gaussian_sweep.csv"
    _write_csv(csv_path, metrics_rows(runs), CSV_COLUMNS)
    return ExperimentReport("gaussian-sweep", cfg.digest(), str(csv_path), table)


KV_COLUMNS = ["row_type", "seed", "n_qubits", "kernel", "normalized", "mean", "variance",
              "n_pairs", "decreasing_fraction"]


def kernel_variance_rows(qubits, samples, dim, seeds, kinds, normalize) -> list[dict]:
    """Off-diagonal kernel statistics per (seed, qubit count, kind), then trend rows.

    Features are uniform on [0, 1)^dim, standing in for post-ReLU activations.
    """
    rows = []
    for seed in seeds:
        x = np.random.default_rng(seed).uniform(0.0, 1.0, (samples, dim))
        for n in qubits:
            spec = qsim.EncodingSpec.for_dim(dim, n, normalize=normalize)
            for kind in kinds:
                st = kernels.offdiag_variance(kernels.kernel_matrix(x, kind, spec))
                rows.append({"row_type": "stat", "seed": seed, "n_qubits": n, "kernel": kind,
                             "normalized": normalize, "mean": st.mean, "variance": st.variance,
                             "n_pairs": st.n_pairs})
    lo, hi = min(qubits), max(qubits)
    for kind in kinds:
        wins = []
        for seed in seeds:
            var = {r["n_qubits"]: r["variance"] for r in rows
                   if r["row_type"] == "stat" and r["seed"] == seed and r["kernel"] == kind}
            wins.append(var[hi] < var[lo])
        rows.append({"row_type": "trend", "n_qubits": f"{lo}>{hi}", "kernel": kind,
                     "normalized": normalize, "decreasing_fraction": float(np.mean(wins))})
    return rows


def cmd_kernel_variance(args) -> ExperimentReport:
    kinds = ["fidelity", "projected"] if args.kernel == "both" else [args.kernel]
    for n in args.qubits:
        if n > qsim.MAX_QUBITS:
            raise CapacityError(f"{n} qubits exceeds the simulator cap of {qsim.MAX_QUBITS}")
    rows = kernel_variance_rows(args.qubits, args.samples, args.dim, args.seeds, kinds, args.normalize)
    out = Path(_output_dir(args))
    csv_path = out / "kernel_variance.csv"
    _write_csv(csv_path, rows, KV_COLUMNS)
    digest = _args_digest(args)
    summary = [{k: r[k] for k in ("kernel", "n_qubits", "decreasing_fraction")}
               for r in rows if r["row_type"] == "trend"]
    return ExperimentReport("kernel-variance", digest, str(csv_path), summary)


JL_COLUMNS = ["row_type", "seed", "target_dim", "source_qubits", "eps_student", "eps_teacher",
              "eps_max", "n_pairs", "bound_pass", "min_slack", "nonincreasing"]


def jl_rows(source_qubits, target_dims, seeds, samples, dim) -> list[dict]:
    """Projection error and bound check per (target dim, seed), then median rows."""
    spec = qsim.EncodingSpec.for_dim(dim, source_qubits, normalize=True)
    for k in target_dims:
        if k > 2**source_qubits:
            raise ValidationError(f"target dim {k} exceeds 2^{source_qubits}")
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        student = rng.uniform(0.0, 1.0, (samples, dim))
        teacher = rng.uniform(0.0, 1.0, (samples, dim))
        for k in target_dims:
            proj = kernels.JLProjector.random(2**source_qubits, k, seed=seed * 100_003 + k)
            rep = kernels.bound_check(student, teacher, spec, proj)
            rows.append({"row_type": "run", "seed": seed, "target_dim": k, "source_qubits": source_qubits,
                         "eps_student": rep.eps_student, "eps_teacher": rep.eps_teacher,
                         "eps_max": rep.eps_max, "n_pairs": len(rep.lhs), "bound_pass": rep.passed,
                         "min_slack": float(rep.slack.min())})
    medians = [float(np.median([r["eps_max"] for r in rows if r["target_dim"] == k])) for k in target_dims]
    for i, (k, med) in enumerate(zip(target_dims, medians)):
        rows.append({"row_type": "median", "target_dim": k, "source_qubits": source_qubits,
                     "eps_max": med, "nonincreasing": i == 0 or med <= medians[i - 1]})
    return rows


def cmd_jl(args) -> ExperimentReport:
    rows = jl_rows(args.source_qubits, args.target_dims, args.seeds, args.samples, args.dim)
    csv_path = Path(_output_dir(args)) / "jl.csv"
    _write_csv(csv_path, rows, JL_COLUMNS)
    summary = [{"target_dim": r["target_dim"], "median_eps": r["eps_max"], "nonincreasing": r["nonincreasing"]}
               for r in rows if r["row_type"] == "median"]
    summary.append({"bound_pass_all": all(r["bound_pass"] for r in rows if r["row_type"] == "run")})
    return ExperimentReport("jl", _args_digest(args), str(csv_path), summary)


def cmd_selftest(args) -> ExperimentReport:
    from .selftest import run_all
    results = run_all(args.seed)
    summary = [{"check": name, "status": "PASS" if ok else "FAIL", "detail": detail}
               for name, ok, detail in results]
    report = ExperimentReport("selftest", _args_digest(args), "", summary)
    if not all(ok for _, ok, _ in results):
        print(report.format())
        raise RuntimeError("selftest failed")
    return report


def _output_dir(args) -> str:
    return args.output_dir or os.environ.get(OUTPUT_ENV) or "runs"


def _args_digest(args) -> str:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "output_dir", "verbose")}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- parser


def _add_common(p, config=True):
    p.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    if config:
        p.add_argument("--config", help="JSON DistillConfig file; flags override its values")
        p.add_argument("--mnist-dir", help="directory holding the MNIST IDX files")
        p.add_argument("--dataset", choices=("mnist", "synthetic"), help="dataset source")
        p.add_argument("--train-size", type=int, help="training subset size")
        p.add_argument("--test-size", type=int, help="test subset size")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--batch-size", type=int, help="minibatch size")
        p.add_argument("--lr", type=float, help="Adam learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train teacher checkpoints (task loss only)")
    _add_common(p)
    p.add_argument("--seeds", type=_int_list, help="seed list such as 1..5 (default: config seed)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill students for one or more variants over seeds")
    _add_common(p)
    p.add_argument("--variant", type=_variants, default=list(VARIANTS),
                   help=f"'all' or a comma list of {', '.join(VARIANTS)}")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5], help="seed list (default 1..5)")
    p.add_argument("--kernel", choices=("fidelity", "projected"), help="quantum kernel for the qr term")
    p.add_argument("--n-qubits", type=int, help="qubits in the feature encoding")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("kernel-variance", help="off-diagonal kernel variance versus qubit count")
    _add_common(p, config=False)
    p.add_argument("--qubits", type=_int_list, default=[2, 4, 6, 8, 12], help="qubit counts")
    p.add_argument("--samples", type=int, default=200, help="random feature vectors per seed")
    p.add_argument("--dim", type=int, default=192, help="feature dimension")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="L2-normalize features and scale by pi")
    p.add_argument("--kernel", choices=("fidelity", "projected", "both"), default="both")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5], help="seed list")
    p.set_defaults(func=cmd_kernel_variance)

    p = sub.add_parser("jl", help="JL projection error and kernel-error bound check")
    _add_common(p, config=False)
    p.add_argument("--source-qubits", type=int, default=12, help="qubits of the encoded states")
    p.add_argument("--target-dims", type=_pow2_list, default=[64, 128, 256, 512, 1024],
                   help="projected dimensions, e.g. 64,128 or 2^6..2^10")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5], help="seed list")
    p.add_argument("--samples", type=int, default=20, help="feature vectors per side and seed")
    p.add_argument("--dim", type=int, default=192, help="feature dimension")
    p.set_defaults(func=cmd_jl)

    p = sub.add_parser("gaussian-sweep", help="QRKD with the qr kernel replaced by a Gaussian kernel")
    _add_common(p)
    p.add_argument("--sigma", type=_float_list, default=[0.1, 0.3, 0.5, 0.7, 0.9], help="bandwidths")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5], help="seed list")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_gaussian_sweep)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    _add_common(p, config=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        report = args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (QRKDError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"qrkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    report.wall_seconds = time.perf_counter() - start
    if report.csv_path:
        report.write(Path(report.csv_path).with_suffix(".report.json"))
    print(report.format())
    return 0


if __name__ == "__main__":
    sys.exit(main())
