"""Teacher training, student distillation and run metrics."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as qdata
from .exceptions import ShapeError, ValidationError
from .losses import (
    COMPONENTS,
    LossBreakdown,
    LossCoefficients,
    angle_loss,
    canonical_variant,
    distance_loss,
    kd_loss,
    quantum_relational_loss,
    total_loss,
)
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.model import Model, get_spec, parameter_count
from .nn.optim import AdamState, adam_step
from .qsim import EncodingSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "variant", "seed", "epoch", "train_acc", "test_acc", "acc_gap", "ts_gap", "dist_gain",
    "loss_task", "loss_kd", "loss_dr", "loss_ar", "loss_qr", "loss_total",
]


@dataclass
class DatasetConfig:
    source: str = "mnist"  # "mnist" or "synthetic"
    mnist_dir: str | None = None
    train_size: int | None = 10_000
    test_size: int | None = 2_000
    subset_seed: int = 0
    synthetic_spread: float = 0.25


@dataclass
class DistillConfig:
    """Everything that determines a run. Defaults follow the CNN/MNIST setting."""

    variant: str = "QRKD"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 2.0
    delta: float = 1.0
    coefficients: dict | None = None
    kernel: str = "fidelity"
    sigma: float = 0.5
    n_qubits: int = 4
    normalize: bool = True
    norm_scale: float = math.pi
    group_count: int = 4
    pairs_per_batch: int = 4
    rkd_normalize: bool = False
    student_arch: str = "student"
    teacher_arch: str = "teacher"
    teacher_checkpoint: str = "teacher_seed{seed}.ckpt"
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _from_dict(DatasetConfig, self.dataset)
        self.variant = canonical_variant(self.variant)
        if self.group_count < 2:
            raise ValidationError("group_count must be at least 2")
        if not 1 <= self.pairs_per_batch <= self.group_count**2:
            raise ValidationError("pairs_per_batch must be in [1, group_count^2]")
        if self.batch_size % self.group_count:
            raise ValidationError("batch_size must be divisible by group_count")
        if self.kernel not in ("fidelity", "projected", "gaussian"):
            raise ValidationError(f"unsupported distillation kernel {self.kernel!r}")
        if self.kernel == "gaussian" and not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        self.loss_coefficients()

    def loss_coefficients(self) -> LossCoefficients:
        base = LossCoefficients.for_variant(self.variant, self.tau, self.delta)
        return replace(base, **self.coefficients) if self.coefficients else base

    def encoding_spec(self, feature_dim: int) -> EncodingSpec:
        return EncodingSpec.for_dim(feature_dim, self.n_qubits, normalize=self.normalize,
                                    norm_scale=self.norm_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return _from_dict(cls, d)

    @classmethod
    def from_json(cls, path) -> "DistillConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; independent of key order.

        ``output_dir`` is left out since it does not affect results.
        """
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunMetrics:
    variant: str
    seed: int
    train_acc: float
    test_acc: float
    epoch_losses: list[LossBreakdown] = field(default_factory=list)
    param_count: int = 0
    acc_gap: float = float("nan")
    ts_gap: float | None = None
    dist_gain: float | None = None

    def __post_init__(self):
        self.acc_gap = self.train_acc - self.test_acc


# ---------------------------------------------------------------- random


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "shuffle", "pairs")."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


# ------------------------------------------------------------ pair sampling


def group_representatives(features, g: int):
    """Average ``g`` contiguous groups of a batch into ``(g, d)`` flattened rows."""
    b = features.shape[0]
    if b % g:
        raise ValidationError(f"batch of {b} is not divisible into {g} groups")
    if isinstance(features, Tensor):
        flat = ad.reshape(features, (g, b // g, -1))
        return ad.mean(flat, axis=1)
    return np.asarray(features, dtype=np.float64).reshape(g, b // g, -1).mean(axis=1)


def sample_feature_pairs(features, g: int, pairs_per_batch: int, rng: np.random.Generator):
    """Group-average the batch and draw ``pairs_per_batch`` of the ``g * g`` ordered pairs.

    Returns ``(representatives, pairs)``. Self-pairs ``(i, i)`` are candidates.
    When every pair is requested they are returned in row-major order.
    """
    reps = group_representatives(features, g)
    if not 1 <= pairs_per_batch <= g * g:
        raise ValidationError(f"pairs_per_batch must be in [1, {g * g}]")
    if pairs_per_batch == g * g:
        flat = np.arange(g * g)
    else:
        flat = rng.choice(g * g, size=pairs_per_batch, replace=False)
    return reps, [(int(a // g), int(a % g)) for a in flat]


# -------------------------------------------------------------- training


def evaluate(model: Model, dataset: qdata.LabeledDataset) -> float:
    """Top-1 accuracy in percent."""
    if tuple(dataset.images.shape[1:]) != model.spec.input_shape:
        raise ShapeError("dataset images do not match the model input shape")
    if len(dataset) == 0:
        return float("nan")
    return float(100.0 * np.mean(model.predict(dataset.images) == dataset.labels))


def _teacher_outputs(teacher: Model, images: np.ndarray, chunk: int = 500):
    feats, logits = [], []
    with ad.no_grad():
        for s in range(0, len(images), chunk):
            f, z = teacher(images[s:s + chunk])
            feats.append(f.values.reshape(len(f.values), -1))
            logits.append(z.values)
    return np.concatenate(feats), np.concatenate(logits)


def _batches(n: int, batch_size: int, g: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = perm[s:s + batch_size]
        if len(idx) % g == 0:
            yield idx


def _train(model: Model, train: qdata.LabeledDataset, config: DistillConfig,
           coeffs: LossCoefficients, teacher: Model | None, hooks=None,
           label: str | None = None) -> list[LossBreakdown]:
    weights = coeffs.weights()
    uses_teacher = teacher is not None and any(weights[k] > 0 for k in ("kd", "dr", "ar", "qr"))
    if uses_teacher:
        if teacher.spec.feature_shape != model.spec.feature_shape:
            raise ValidationError(
                f"teacher tap {teacher.spec.feature_shape} != student tap {model.spec.feature_shape}")
        t_feats, t_logits = _teacher_outputs(teacher, train.images)
        spec = config.encoding_spec(int(np.prod(model.spec.feature_shape)))
    shuffle_rng = rng_stream(config.seed, "shuffle")
    pair_rng = rng_stream(config.seed, "pairs")
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    params = model.parameters()
    g, delta = config.group_count, coeffs.delta
    history = []
    for epoch in range(config.epochs):
        records = []
        for idx in _batches(len(train), config.batch_size, g, shuffle_rng):
            feat, logits = model(train.images[idx])
            comps = {"task": ad.cross_entropy(logits, train.labels[idx])}
            # pair draws happen for every variant so ablations share one stream
            reps_s, pairs = sample_feature_pairs(feat, g, config.pairs_per_batch, pair_rng)
            if uses_teacher:
                reps_t = group_representatives(t_feats[idx], g)

                def term(name, fn):
                    if weights[name] > 0:
                        return fn()
                    with ad.no_grad():
                        return fn()

                comps["kd"] = term("kd", lambda: kd_loss(t_logits[idx], logits, coeffs.tau))
                comps["dr"] = term("dr", lambda: distance_loss(reps_s, reps_t, delta, pairs,
                                                               normalize=config.rkd_normalize))
                comps["ar"] = term("ar", lambda: angle_loss(reps_s, reps_t, delta, pairs)
                                   if g >= 3 else Tensor(0.0))
                comps["qr"] = term("qr", lambda: quantum_relational_loss(
                    reps_s, reps_t, spec, config.kernel, pairs, delta, config.sigma))
            breakdown = total_loss(comps, coeffs)
            if not math.isfinite(breakdown.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch + 1}: {breakdown.as_dict()}")
            if hooks:
                hooks(epoch, idx, breakdown)
            model.zero_grad()
            breakdown.objective.backward()
            adam_step(params, state)
            breakdown.objective = None
            records.append(breakdown)
        mean = LossBreakdown.mean(records)
        history.append(mean)
        log.info("%s seed=%d epoch=%d total=%.5f", label or config.variant, config.seed, epoch + 1, mean.total)
    return history


def train_teacher(config: DistillConfig, train: qdata.LabeledDataset, test: qdata.LabeledDataset,
                  checkpoint: str | Path | None = None) -> tuple[Model, RunMetrics]:
    """Task-loss-only training of the teacher architecture."""
    cfg = replace(config, variant="scratch", coefficients=None)
    model = Model.init(get_spec(cfg.teacher_arch), rng_stream(cfg.seed, "init"))
    history = _train(model, train, cfg, cfg.loss_coefficients(), None, label="teacher")
    metrics = RunMetrics("teacher", cfg.seed, evaluate(model, train), evaluate(model, test),
                         history, parameter_count(model))
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, seed=cfg.seed,
                        metadata={"role": "teacher", "config_digest": cfg.digest(),
                                  "train_acc": metrics.train_acc, "test_acc": metrics.test_acc})
    return model, metrics


def distill_student(config: DistillConfig, train: qdata.LabeledDataset, test: qdata.LabeledDataset,
                    teacher: Model | None = None, student: Model | None = None,
                    checkpoint: str | Path | None = None, hooks=None) -> tuple[Model, RunMetrics]:
    """Train a student under ``config.variant``; the teacher is never updated.

    ``student`` overrides the freshly initialized student (used to start from
    copied weights).
    """
    coeffs = config.loss_coefficients()
    needs_teacher = any(v > 0 for k, v in coeffs.weights().items() if k != "task")
    if needs_teacher and teacher is None:
        raise ValidationError(f"variant {config.variant} needs a teacher")
    if teacher is not None:
        teacher = teacher.clone().freeze()
    model = student if student is not None else Model.init(get_spec(config.student_arch),
                                                           rng_stream(config.seed, "init"))
    history = _train(model, train, config, coeffs, teacher if needs_teacher else None, hooks)
    metrics = RunMetrics(config.variant, config.seed, evaluate(model, train), evaluate(model, test),
                         history, parameter_count(model))
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, seed=config.seed,
                        metadata={"role": "student", "variant": config.variant,
                                  "config_digest": config.digest()})
    return model, metrics


# ------------------------------------------------------------------ metrics


@dataclass
class VariantSummary:
    variant: str
    n_runs: int
    mean: dict[str, float]
    std: dict[str, float]


def _by_seed(runs, what: str) -> dict[int, RunMetrics]:
    runs = [runs] if isinstance(runs, RunMetrics) else list(runs or [])
    if not runs:
        raise ValidationError(f"missing {what} run")
    return {r.seed: r for r in runs}


def compute_metrics(student_runs, scratch_runs, teacher_runs):
    """Fill gap/gain fields per run and summarize mean and sample std per variant.

    Baselines are matched by seed; a single baseline run is shared by all seeds.
    """
    scratch = _by_seed(scratch_runs, "scratch baseline")
    teacher = _by_seed(teacher_runs, "teacher")

    def pick(table, seed, what):
        if seed in table:
            return table[seed]
        if len(table) == 1:
            return next(iter(table.values()))
        raise ValidationError(f"no {what} run for seed {seed}")

    runs = list(student_runs)
    for r in runs:
        r.acc_gap = r.train_acc - r.test_acc
        r.ts_gap = pick(teacher, r.seed, "teacher").test_acc - r.test_acc
        r.dist_gain = None if r.variant == "scratch" else r.test_acc - pick(scratch, r.seed, "scratch").test_acc
    summary = {}
    for variant in dict.fromkeys(r.variant for r in runs):
        group = [r for r in runs if r.variant == variant]
        cols = {"train_acc": [r.train_acc for r in group], "test_acc": [r.test_acc for r in group],
                "acc_gap": [r.acc_gap for r in group], "ts_gap": [r.ts_gap for r in group]}
        if variant != "scratch":
            cols["dist_gain"] = [r.dist_gain for r in group]
        summary[variant] = VariantSummary(
            variant, len(group),
            {k: float(np.mean(v)) for k, v in cols.items()},
            {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in cols.items()},
        )
    return runs, summary


# ---------------------------------------------------------------- output


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def metrics_rows(runs: list[RunMetrics]) -> list[dict]:
    """One row per (variant, seed, epoch); accuracy columns only on the last epoch."""
    rows = []
    for r in runs:
        for e, b in enumerate(r.epoch_losses, start=1):
            last = e == len(r.epoch_losses)
            rows.append({
                "variant": r.variant, "seed": r.seed, "epoch": e,
                "train_acc": r.train_acc if last else None,
                "test_acc": r.test_acc if last else None,
                "acc_gap": r.acc_gap if last else None,
                "ts_gap": r.ts_gap if last else None,
                "dist_gain": r.dist_gain if last else None,
                **{f"loss_{k}": getattr(b, k) for k in (*COMPONENTS, "total")},
            })
    return rows


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


# ---------------------------------------------------------------- datasets


def load_datasets(config: DistillConfig) -> tuple[qdata.LabeledDataset, qdata.LabeledDataset]:
    ds = config.dataset
    if ds.source == "mnist":
        directory = ds.mnist_dir or qdata.default_mnist_dir()
        train = qdata.load_mnist(directory, "train")
        test = qdata.load_mnist(directory, "test")
        if ds.train_size and ds.train_size < len(train):
            train = qdata.subset(train, ds.train_size, ds.subset_seed)
        if ds.test_size and ds.test_size < len(test):
            test = qdata.subset(test, ds.test_size, ds.subset_seed)
        return train, test
    if ds.source == "synthetic":
        n_train, n_test = ds.train_size or 1000, ds.test_size or 200
        per_class = -(-(n_train + n_test) // 10)
        blobs = qdata.synthetic_blobs(10, per_class, 784, ds.synthetic_spread, ds.subset_seed)
        train = blobs.take(np.arange(n_train))
        test = blobs.take(np.arange(n_train, n_train + n_test))
        return (qdata.LabeledDataset(train.images, train.labels, "train"),
                qdata.LabeledDataset(test.images, test.labels, "test"))
    raise ValidationError(f"unknown dataset source {ds.source!r}")


def teacher_path(config: DistillConfig, seed: int | None = None) -> Path:
    path = Path(config.teacher_checkpoint.format(seed=config.seed if seed is None else seed))
    return path if path.is_absolute() else Path(config.output_dir) / path


def load_teacher(config: DistillConfig, seed: int | None = None) -> Model:
    model, _ = load_checkpoint(teacher_path(config, seed))
    return model
