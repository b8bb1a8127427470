"""Distillation losses and their weighted combination.

All losses take the student side as a :class:`~qrkd.nn.Tensor` and the
teacher side as plain arrays, so gradients only ever reach the student.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from itertools import combinations

import numpy as np

from .exceptions import ShapeError, ValidationError
from .kernels import kernel_value, kernel_value_and_gradient
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .qsim import EncodingSpec

# (alpha, beta, gamma_d, gamma_a, omega) per training variant
VARIANTS = {
    "scratch": (1.0, 0.0, 0.0, 0.0, 0.0),
    "KD": (0.5, 0.5, 0.0, 0.0, 0.0),
    "RKD": (0.5, 0.5, 0.1, 0.1, 0.0),
    "QRKD": (0.5, 0.5, 0.1, 0.1, 0.1),
    "QRKD-A": (0.5, 0.5, 0.0, 0.1, 0.0),
    "QRKD-D": (0.5, 0.5, 0.1, 0.0, 0.0),
    "QRKD-Q": (0.5, 0.5, 0.0, 0.0, 0.1),
}
COMPONENTS = ("task", "kd", "dr", "ar", "qr")


def canonical_variant(name: str) -> str:
    for key in VARIANTS:
        if key.lower() == name.lower():
            return key
    raise ValidationError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class LossCoefficients:
    alpha: float = 1.0
    beta: float = 0.0
    gamma_d: float = 0.0
    gamma_a: float = 0.0
    omega: float = 0.0
    tau: float = 2.0
    delta: float = 1.0

    def __post_init__(self):
        for f in ("alpha", "beta", "gamma_d", "gamma_a", "omega"):
            if getattr(self, f) < 0:
                raise ValidationError(f"coefficient {f} must be non-negative")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        if not self.delta > 0:
            raise ValidationError("delta must be positive")

    @classmethod
    def for_variant(cls, variant: str, tau: float = 2.0, delta: float = 1.0) -> "LossCoefficients":
        return cls(*VARIANTS[canonical_variant(variant)], tau=tau, delta=delta)

    def weights(self) -> dict[str, float]:
        return dict(zip(COMPONENTS, (self.alpha, self.beta, self.gamma_d, self.gamma_a, self.omega)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    task: float = 0.0
    kd: float = 0.0
    dr: float = 0.0
    ar: float = 0.0
    qr: float = 0.0
    total: float = 0.0
    objective: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "objective"}

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        return cls(**{k: float(np.mean([getattr(b, k) for b in items])) for k in (*COMPONENTS, "total")})


def huber(r, delta: float = 1.0):
    """``r^2 / 2`` for ``|r| <= delta``, else ``delta * (|r| - delta / 2)``."""
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _huber_slope(r: float, delta: float) -> float:
    return r if abs(r) <= delta else delta * np.sign(r)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _flat(h) -> Tensor:
    h = ad.as_tensor(h)
    return ad.reshape(h, (h.shape[0], -1)) if h.ndim != 2 else h


def kd_loss(teacher_logits, student_logits, tau: float = 2.0) -> Tensor:
    """Batch mean of ``KL(softmax(f_t / tau) || softmax(f_s / tau))``; no tau^2 factor."""
    f_t = _values(teacher_logits)
    f_s = ad.as_tensor(student_logits)
    if f_t.shape != f_s.shape:
        raise ShapeError(f"teacher logits {f_t.shape} vs student logits {f_s.shape}")
    log_p_t = np.log(ad.softmax_np(f_t / tau))
    p_t = np.exp(log_p_t)
    log_p_s = ad.log_softmax(ad.mul(f_s, 1.0 / tau))
    per_row = ad.tsum(ad.mul(ad.sub(log_p_t, log_p_s), p_t), axis=1)
    return ad.mean(per_row)


def _all_pairs(b: int) -> list[tuple[int, int]]:
    return list(combinations(range(b), 2))


def distance_loss(h_s, h_t, delta: float = 1.0, pairs=None, normalize: bool = False) -> Tensor:
    """Sum of Huber gaps between student and teacher Euclidean distances.

    ``pairs`` defaults to every unordered pair ``i < j``. With ``normalize``
    both distance sets are divided by their mean over the pair set.
    """
    s, t = _flat(h_s), _values(h_t).reshape(len(_values(h_s)), -1)
    if s.shape[0] < 2:
        raise ValidationError("distance_loss needs a batch of at least 2")
    pairs = _all_pairs(s.shape[0]) if pairs is None else list(pairs)
    if not pairs:
        raise ValidationError("empty pair set")
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    diff = ad.sub(ad.take_rows(s, ii), ad.take_rows(s, jj))
    d_s = ad.safe_sqrt(ad.tsum(ad.square(diff), axis=1))
    d_t = np.linalg.norm(t[ii] - t[jj], axis=1)
    if normalize:
        mt = d_t.mean()
        d_t = d_t / mt if mt > 0 else d_t
        ms = d_s.values.mean()
        if ms > 0:
            d_s = ad.div(d_s, ad.mean(d_s))
    return ad.tsum(ad.huber(ad.sub(d_s, d_t), delta))


def angle_triplets(batch: int, pairs=None) -> list[tuple[int, int, int]]:
    """``(i, j, k)`` with vertex ``j``: for each end pair ``i != k``, every other ``j``.

    Without ``pairs`` the end pairs are all ``i < k``, so each unordered angle
    appears once.
    """
    ends = _all_pairs(batch) if pairs is None else [(i, k) for i, k in pairs if i != k]
    return [(i, j, k) for i, k in ends for j in range(batch) if j not in (i, k)]


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def angle_loss(h_s, h_t, delta: float = 1.0, pairs=None, eps: float = 1e-12) -> Tensor:
    """Sum over triplets of Huber gaps between student and teacher vertex cosines.

    Triplets whose difference vectors vanish on either side are skipped.
    """
    s = _flat(h_s)
    t = _values(h_t).reshape(s.shape[0], -1)
    if s.shape[0] < 3:
        raise ValidationError("angle_loss needs a batch of at least 3")
    trip = angle_triplets(s.shape[0], pairs)
    sv = s.values
    keep = [
        (i, j, k) for i, j, k in trip
        if min(np.linalg.norm(sv[i] - sv[j]), np.linalg.norm(sv[k] - sv[j]),
               np.linalg.norm(t[i] - t[j]), np.linalg.norm(t[k] - t[j])) > eps
    ]
    if not keep:
        return ad.mul(ad.tsum(s), 0.0)
    ii, jj, kk = (np.array(c) for c in zip(*keep))
    cos_t = np.sum(_unit_rows(t[ii] - t[jj]) * _unit_rows(t[kk] - t[jj]), axis=1)
    vj = ad.take_rows(s, jj)
    a = ad.sub(ad.take_rows(s, ii), vj)
    b = ad.sub(ad.take_rows(s, kk), vj)
    na = ad.safe_sqrt(ad.tsum(ad.square(a), axis=1, keepdims=True))
    nb = ad.safe_sqrt(ad.tsum(ad.square(b), axis=1, keepdims=True))
    cos_s = ad.tsum(ad.mul(ad.div(a, na), ad.div(b, nb)), axis=1)
    return ad.tsum(ad.huber(ad.sub(cos_s, cos_t), delta))


def l2_normalize_rows(h: Tensor) -> Tensor:
    """Row-wise unit vectors; all-zero rows are left at zero."""
    norm = np.linalg.norm(h.values, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    u = h.values / safe

    def backward(g):
        return ((g - u * np.sum(u * g, axis=1, keepdims=True)) / safe,)

    return Tensor.from_op(u, (h,), backward)


def quantum_relational_loss(h_s, h_t, spec: EncodingSpec | None, kind: str = "fidelity",
                            pairs=None, delta: float = 1.0, sigma: float | None = None) -> Tensor:
    """Sum over pairs of Huber gaps between student and teacher kernel values.

    ``kind`` is ``"fidelity"`` or ``"projected"`` (quantum, gradients by
    parameter shift) or ``"gaussian"`` (classical baseline on unit-normalized
    rows when ``spec.normalize`` is set, else on raw rows).
    """
    s = _flat(h_s)
    t = _values(h_t).reshape(s.shape[0], -1)
    if s.shape[0] < 2:
        raise ValidationError("quantum_relational_loss needs a batch of at least 2")
    pairs = _all_pairs(s.shape[0]) if pairs is None else [tuple(p) for p in pairs]
    if not pairs:
        raise ValidationError("empty pair set")
    if kind == "gaussian":
        if sigma is None:
            raise ValidationError("gaussian kernel needs sigma")
        if spec is None or spec.normalize:
            s = l2_normalize_rows(s)
            t = l2_normalize_rows(Tensor(t)).values
        kspec = None
    else:
        kspec = spec

    sv = s.values
    want_grad = s.requires_grad and ad._GRAD_ENABLED
    total, grad = 0.0, np.zeros_like(sv)
    teacher_cache: dict[tuple[int, int], float] = {}
    for i, j in pairs:
        key = (min(i, j), max(i, j))
        if key not in teacher_cache:
            teacher_cache[key] = kernel_value(t[i], t[j], kspec, kind, sigma)
        if want_grad:
            k_s, g_i, g_j = kernel_value_and_gradient(sv[i], sv[j], kspec, kind, sigma)
        else:
            k_s = kernel_value(sv[i], sv[j], kspec, kind, sigma)
        r = k_s - teacher_cache[key]
        total += huber(r, delta)
        if want_grad:
            slope = _huber_slope(r, delta)
            grad[i] += slope * g_i
            grad[j] += slope * g_j

    return Tensor.from_op(np.array(total), (s,), lambda g: (g * grad,))


def total_loss(components: dict, coefficients: LossCoefficients) -> LossBreakdown:
    """Weighted sum of the component losses.

    ``components`` maps names in ``COMPONENTS`` to Tensors or floats; missing
    entries count as 0. The differentiable sum over the non-zero weights is
    returned as ``objective``.
    """
    weights = coefficients.weights()
    values, objective = {}, None
    for name in COMPONENTS:
        comp = components.get(name)
        values[name] = 0.0 if comp is None else float(_values(comp))
        w = weights[name]
        if w != 0 and comp is not None:
            term = ad.mul(ad.as_tensor(comp), w)
            objective = term if objective is None else ad.add(objective, term)
    total = sum(weights[n] * values[n] for n in COMPONENTS)
    return LossBreakdown(**values, total=total, objective=objective)
