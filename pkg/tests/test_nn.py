import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from qrkd.exceptions import FormatError, GraphError, ShapeError
from qrkd.nn import autodiff as ad
from qrkd.nn import (AdamState, Model, ModelSpec, Tensor, adam_step, get_spec, load_checkpoint,
                     no_grad, parameter_count, save_checkpoint, student_spec, teacher_spec)
from qrkd.nn.checkpoint import MAGIC, read_header


def grad_check(fn, *shapes, rng, positive=False, h=1e-4, tol=1e-4):
    """Compare reverse-mode gradients of ``sum(fn(*xs) * w)`` with central differences."""
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    out = fn(*[Tensor(x) for x in xs])
    w = rng.standard_normal(out.shape)

    def scalar(*arrays_):
        return float(np.sum(fn(*[Tensor(a) for a in arrays_]).values * w))

    tensors = [Tensor(x.copy(), requires_grad=True) for x in xs]
    ad.tsum(ad.mul(fn(*tensors), w)).backward()
    for k, t in enumerate(tensors):
        def f_k(v, k=k):
            args = list(xs)
            args[k] = v
            return scalar(*args)
        assert oracles.rel_err(t.grad, oracles.central_diff(f_k, xs[k], h)) <= tol, f"input {k}"


# ------------------------------------------------------------- autodiff


OPS = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)], False),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 1), (3, 4)], False),
    "mul": (lambda a, b: ad.mul(a, b), [(2, 3), (2, 3)], False),
    "div": (lambda a, b: ad.div(a, b), [(2, 3), (3,)], True),
    "exp": (lambda a: ad.exp(a), [(5,)], False),
    "log": (lambda a: ad.log(a), [(5,)], True),
    "square": (lambda a: ad.square(a), [(2, 2)], False),
    "safe_sqrt": (lambda a: ad.safe_sqrt(a), [(4,)], True),
    "relu": (lambda a: ad.relu(a), [(6,)], False),
    "huber": (lambda a: ad.huber(ad.mul(a, 2.0), 1.0), [(8,)], False),
    "sum_axis": (lambda a: ad.tsum(a, axis=1, keepdims=True), [(3, 4)], False),
    "mean_axis": (lambda a: ad.mean(a, axis=0), [(3, 4)], False),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "getitem": (lambda a: ad.getitem(a, (slice(1, 3), [0, 2])), [(4, 3)], False),
    "take_rows": (lambda a: ad.take_rows(a, np.array([0, 2, 2, 1])), [(3, 2)], False),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [(5, 4), (3, 4), (3,)], False),
    "log_softmax": (lambda a: ad.log_softmax(a), [(3, 5)], False),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)], False),
    "cross_entropy": (lambda a: ad.cross_entropy(a, np.array([0, 4, 2])), [(3, 5)], False),
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)], False),
    "conv2d_stride": (lambda x, w, b: ad.conv2d(x, w, b, stride=2), [(1, 2, 7, 7), (2, 2, 3, 3), (2,)], False),
    "maxpool2d": (lambda x: ad.maxpool2d(x, 2), [(2, 3, 4, 6)], False),
    "maxpool3": (lambda x: ad.maxpool2d(x, 3), [(1, 2, 6, 6)], False),
    "flatten": (lambda x: ad.flatten(x), [(2, 3, 2, 2)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    fn, shapes, positive = OPS[name]
    if name == "relu":
        # keep away from the kink
        xs = rng.standard_normal(6)
        xs[np.abs(xs) < 0.1] += 0.5
        t = Tensor(xs, requires_grad=True)
        ad.tsum(ad.relu(t)).backward()
        np.testing.assert_array_equal(t.grad, (xs > 0).astype(float))
        return
    grad_check(fn, *shapes, rng=rng, positive=positive)


def test_conv_matches_loop_oracle(rng):
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).values
        np.testing.assert_allclose(got, oracles.conv2d_loop(x, w, b, stride, pad), atol=1e-12)


def test_maxpool_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 12, 12))
    for s in (2, 3):
        np.testing.assert_array_equal(ad.maxpool2d(Tensor(x), s).values, oracles.maxpool_loop(x, s))
    with pytest.raises(ShapeError):
        ad.maxpool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)


def test_maxpool_tie_routes_to_one_slot():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.tsum(ad.maxpool2d(x, 2)).backward()
    assert x.grad.sum() == 1 and x.grad[0, 0, 0, 0] == 1


def test_quadratic_gradient_and_accumulation(rng):
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    ad.tsum(ad.square(w)).backward()
    np.testing.assert_allclose(w.grad, 2 * w.values)
    ad.tsum(ad.square(w)).backward()
    np.testing.assert_allclose(w.grad, 4 * w.values)
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, 0)


def test_shared_subexpression_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, x)
    ad.tsum(ad.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_cross_entropy_gradient_closed_form(rng):
    z = rng.standard_normal((4, 6))
    labels = np.array([1, 0, 5, 2])
    t = Tensor(z, requires_grad=True)
    ad.cross_entropy(t, labels).backward()
    onehot = np.eye(6)[labels]
    np.testing.assert_allclose(t.grad, (oracles.softmax(z) - onehot) / 4, atol=1e-12)
    with pytest.raises(ShapeError):
        ad.cross_entropy(t, labels[:3])


@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    p = ad.softmax(Tensor(z)).values
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-9)


def test_graph_errors():
    with pytest.raises(GraphError):
        Tensor(np.ones(2)).backward()
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(GraphError):
        ad.tsum(w.detach()).backward()
    with pytest.raises(GraphError):
        ad.mul(w, 2.0).backward()


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ad.tsum(ad.mul(w, 3.0))
    assert not y.requires_grad
    assert ad.tsum(w).requires_grad


def test_non_finite_gradient_is_an_error():
    w = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        ad.tsum(ad.log(w)).backward()


def test_safe_sqrt_zero_gradient():
    w = Tensor(np.zeros(3), requires_grad=True)
    ad.tsum(ad.safe_sqrt(w)).backward()
    np.testing.assert_array_equal(w.grad, 0)


# ---------------------------------------------------------------- models


def test_parameter_counts():
    assert parameter_count(student_spec()) == 1682
    assert parameter_count(teacher_spec()) == 6314
    assert abs(1682 - 1725) / 1725 <= 0.25
    assert abs(6314 - 6690) / 6690 <= 0.25
    dense = ModelSpec("d", [{"type": "flatten"}, {"type": "dense", "in": 192, "out": 10}], 0, (12, 4, 4))
    assert parameter_count(dense) == 1930
    conv = ModelSpec("c", [{"type": "conv", "in": 1, "out": 4, "kernel": 3}], 0)
    assert parameter_count(conv) == 40
    m = Model.init(student_spec(), np.random.default_rng(0))
    assert parameter_count(m) == parameter_count(m.spec)


@pytest.mark.parametrize("spec_fn", [student_spec, teacher_spec])
def test_forward_shapes(spec_fn, rng):
    model = Model.init(spec_fn(), rng)
    feat, logits = model(rng.uniform(0, 1, (64, 1, 28, 28)))
    assert feat.shape == (64, 12, 4, 4) and logits.shape == (64, 10)
    feat, logits = model(rng.uniform(0, 1, (1, 1, 28, 28)))
    assert feat.shape == (1, 12, 4, 4) and logits.shape == (1, 10)
    assert model.spec.feature_shape == (12, 4, 4)
    with pytest.raises(ShapeError):
        model(np.zeros((2, 1, 27, 28)))


def test_forward_matches_loop_reference(rng):
    """The channels-last internals must agree with a plain NCHW reference."""
    model = Model.init(student_spec(), rng)
    x = rng.uniform(0, 1, (2, 1, 28, 28))
    p = {k: v.values for k, v in model.params.items()}
    h = np.maximum(oracles.conv2d_loop(x, p["0.weight"], p["0.bias"], 1, 1), 0)
    h = oracles.maxpool_loop(h, 2)
    h = np.maximum(oracles.conv2d_loop(h, p["3.weight"], p["3.bias"]), 0)
    tap = oracles.maxpool_loop(h, 3)
    logits = oracles.maxpool_loop(tap, 2).reshape(2, -1) @ p["8.weight"].T + p["8.bias"]
    feat, out = model(x)
    np.testing.assert_allclose(feat.values, tap, atol=1e-12)
    np.testing.assert_allclose(out.values, logits, atol=1e-12)


def test_zero_weights_give_zero_logits(rng):
    model = Model.init(student_spec(), rng)
    model.load_arrays({k: np.zeros_like(v.values) for k, v in model.params.items()})
    _, logits = model(rng.uniform(0, 1, (3, 1, 28, 28)))
    np.testing.assert_array_equal(logits.values, 0)


def test_forward_deterministic_and_init_seeded():
    a = Model.init(student_spec(), np.random.default_rng(5))
    b = Model.init(student_spec(), np.random.default_rng(5))
    x = np.random.default_rng(1).uniform(0, 1, (4, 1, 28, 28))
    assert a(x)[1].values.tobytes() == b(x)[1].values.tobytes()
    assert a(x)[1].values.tobytes() == a(x)[1].values.tobytes()
    for k in a.params:
        assert np.array_equal(a.params[k].values, b.params[k].values)
    w = a.params["0.weight"].values
    assert np.abs(w).max() <= np.sqrt(6 / 9)
    np.testing.assert_array_equal(a.params["0.bias"].values, 0)


def test_model_gradients_match_finite_differences(rng):
    spec = ModelSpec("tiny", [{"type": "conv", "in": 1, "out": 2, "kernel": 3, "padding": 1}, {"type": "relu"},
                              {"type": "maxpool", "size": 2}, {"type": "flatten"},
                              {"type": "dense", "in": 8, "out": 3}], 2, (1, 4, 4), 3)
    model = Model.init(spec, rng)
    x = rng.uniform(0, 1, (2, 1, 4, 4))
    y = np.array([0, 2])
    model.zero_grad()
    ad.cross_entropy(model(x)[1], y).backward()
    for name, p in model.params.items():
        base = p.values.copy()

        def f(v):
            p.values = v
            with no_grad():
                out = ad.cross_entropy(model(x)[1], y).item()
            p.values = base
            return out
        assert oracles.rel_err(p.grad, oracles.central_diff(f, base)) <= 1e-4, name


def test_get_spec_and_roundtrip():
    spec = get_spec("teacher")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(Exception):
        get_spec("resnet")


def test_clone_and_freeze(rng):
    m = Model.init(student_spec(), rng)
    c = m.clone().freeze()
    c.params["0.weight"].values[0, 0, 0, 0] += 1
    assert m.params["0.weight"].values[0, 0, 0, 0] != c.params["0.weight"].values[0, 0, 0, 0]
    assert not any(p.requires_grad for p in c.parameters())


# ------------------------------------------------------------------ adam


def test_adam_zero_gradient_no_change(rng):
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    before = p.values.copy()
    p.grad = np.zeros(4)
    adam_step([p], AdamState())
    np.testing.assert_array_equal(p.values, before)


def test_adam_first_step_is_sign_like():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([0.5, -2.0, 1e-3])
    adam_step([p], AdamState(lr=1e-3))
    np.testing.assert_allclose(p.values, -1e-3 * np.sign(p.grad), rtol=1e-4)


def test_adam_matches_reference_recursion(rng):
    p = Tensor(rng.standard_normal(3), requires_grad=True)
    ref, m, v = p.values.copy(), np.zeros(3), np.zeros(3)
    state = AdamState()
    assert (state.lr, state.beta1, state.beta2, state.eps) == (1e-3, 0.9, 0.999, 1e-8)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        p.grad = g
        adam_step([p], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.values, ref, rtol=1e-12)
    assert state.step == 5


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    m = Model.init(teacher_spec(), rng)
    path = save_checkpoint(m, tmp_path / "t.ckpt", seed=3, metadata={"role": "teacher"})
    loaded, header = load_checkpoint(path)
    assert header["seed"] == 3 and header["metadata"] == {"role": "teacher"}
    assert header["parameter_count"] == 6314
    for k in m.params:
        assert loaded.params[k].values.tobytes() == m.params[k].values.tobytes()
    x = rng.uniform(0, 1, (2, 1, 28, 28))
    np.testing.assert_array_equal(loaded(x)[1].values, m(x)[1].values)


def test_checkpoint_layout(tmp_path, rng):
    m = Model.init(student_spec(), rng)
    path = save_checkpoint(m, tmp_path / "s.ckpt")
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<I", raw[8:12])
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    assert body.size == 1682
    first = read_header(path)["parameters"][0]
    np.testing.assert_array_equal(body[: first["count"]], m.params[first["name"]].values.ravel())
    manifest = (tmp_path / "s.ckpt.manifest.txt").read_text().splitlines()
    assert manifest[0] == "0.weight (10, 1, 3, 3)"
    assert len(manifest) == len(m.params)
    # byte-identical on re-save
    again = save_checkpoint(m, tmp_path / "s2.ckpt").read_bytes()
    assert again == raw


def test_checkpoint_errors(tmp_path, rng):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    m = Model.init(student_spec(), rng)
    raw = save_checkpoint(m, tmp_path / "s.ckpt").read_bytes()
    for cut in (100, 8, 3):
        (tmp_path / "cut.ckpt").write_bytes(raw[:-cut])
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0" * 8)
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "long.ckpt")
