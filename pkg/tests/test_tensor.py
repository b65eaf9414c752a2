import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import check_gradients
from prolad import kernels, plad
from prolad import tensor as T
from prolad.errors import ConfigurationError, ContractError, DimensionError, FormatError
from prolad.tensor import Tensor


def rng(seed):
    return np.random.default_rng(seed)


# -- forward examples ----------------------------------------------------------------
def test_softmax_uniform():
    out = T.softmax(Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-15)


def test_conv_identity_kernel():
    x = rng(0).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_grouped_conv_parameter_count():
    w = np.zeros((16, 16 // 2, 3, 3))
    assert w[:8].size == 8 * 8 * 3 * 3
    assert w.size == 1152
    out = T.conv2d(Tensor(np.ones((1, 16, 4, 4))), Tensor(w), padding=1, groups=2)
    assert out.shape == (1, 16, 4, 4)


def _conv_reference(x, w, stride, padding, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    og = o // groups
    for oc in range(o):
        g = oc // og
        for y in range(ho):
            for z in range(wo):
                patch = xp[:, g * cg:(g + 1) * cg, y * stride:y * stride + kh, z * stride:z * stride + kw]
                out[:, oc, y, z] = (patch * w[oc]).sum(axis=(1, 2, 3))
    return out


@pytest.mark.parametrize("backend", ["python", "cython"])
@pytest.mark.parametrize("stride,padding,groups,k", [(1, 1, 1, 3), (2, 1, 1, 3), (1, 1, 2, 3),
                                                     (2, 0, 4, 1), (1, 0, 1, 1), (2, 1, 2, 3)])
def test_conv_matches_loop_reference(backend, stride, padding, groups, k):
    prev = kernels.BACKEND
    try:
        kernels.use_backend(backend)
    except ImportError:
        pytest.skip("compiled kernels not built")
    try:
        r = rng(1)
        x = r.normal(size=(2, 8, 6, 6))
        w = r.normal(size=(8, 8 // groups, k, k))
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, groups=groups).data
        np.testing.assert_allclose(got, _conv_reference(x, w, stride, padding, groups), atol=1e-12)
    finally:
        kernels.use_backend(prev)


def test_backends_agree_on_col2im():
    try:
        from prolad import _ckernels
    except ImportError:
        pytest.skip("compiled kernels not built")
    from prolad import _pykernels

    cols = rng(2).normal(size=(2, 3, 3, 3, 4, 4))
    np.testing.assert_allclose(_ckernels.col2im(cols, 9, 9, 2), _pykernels.col2im(cols, 9, 9, 2),
                               atol=1e-13)
    xp = rng(3).normal(size=(2, 3, 9, 9))
    np.testing.assert_array_equal(_ckernels.im2col(xp, 3, 3, 2), _pykernels.im2col(xp, 3, 3, 2))


# -- errors --------------------------------------------------------------------------
def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(DimensionError, match=r"\(3,\).*\(4,\)"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_groups_must_divide_channels():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.ones((1, 6, 4, 4))), Tensor(np.ones((6, 2, 3, 3))), groups=4)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)
    with pytest.raises(ContractError):
        T.backward(Tensor(1.0))


# -- backward examples -----------------------------------------------------------------
def test_sum_grad_is_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_accumulation_is_additive():
    r = rng(4)
    x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(r.normal(size=(4, 2)), requires_grad=True)
    loss = T.log_softmax(T.relu(x @ w)).sum()
    loss.backward()
    once = x.grad.copy(), w.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * once[0])
    np.testing.assert_array_equal(w.grad, 2 * once[1])
    x.zero_grad()
    assert not x.grad.any()


def test_grad_present_iff_requires_grad():
    assert Tensor(np.ones(2)).grad is None
    assert Tensor(np.ones(2), requires_grad=True).grad.shape == (2,)


def test_tape_is_topological():
    a = Tensor(np.ones(3), requires_grad=True)
    b = a * 2.0
    c = b + a
    d = (c * b).sum()
    tape = T.Tape.record(d)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_no_grad_is_per_thread():
    import threading
    entered, release = threading.Event(), threading.Event()

    def hold():
        with T.no_grad():
            entered.set()
            release.wait(5)
    t = threading.Thread(target=hold)
    t.start()
    entered.wait(5)
    try:
        y = Tensor(np.ones(2), requires_grad=True) * 2.0
        assert y.requires_grad
    finally:
        release.set()
        t.join()
    assert T.is_recording()


# -- finite-difference suite ------------------------------------------------------------
def _cases(shape_fn, n=20):
    return [(seed, shape_fn(rng(seed))) for seed in range(n)]


PRIMITIVES = {
    "add": (lambda a, b: a + b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": (lambda a, b: a * b, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2, size=(3, 1))]),
    "matmul": (T.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "relu": (T.relu, lambda r: [r.normal(size=(4, 5))]),
    "exp": (T.exp, lambda r: [r.normal(size=(4,))]),
    "log": (T.log, lambda r: [r.uniform(0.2, 3.0, size=(4,))]),
    "softmax": (T.softmax, lambda r: [r.normal(size=(3, 5))]),
    "log_softmax": (T.log_softmax, lambda r: [r.normal(size=(3, 5))]),
    "l2_norm": (lambda x: T.l2_norm(x, axis=1), lambda r: [r.normal(size=(3, 5))]),
    "reshape": (lambda x: T.reshape(x, (6, 2)) * T.reshape(x, (6, 2)), lambda r: [r.normal(size=(3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1),
               lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "global_avg_pool": (T.global_avg_pool, lambda r: [r.normal(size=(2, 3, 4, 4))]),
    "conv3x3": (lambda x, w: T.conv2d(x, w, padding=1),
                lambda r: [r.normal(size=(2, 3, 5, 5)), r.normal(size=(4, 3, 3, 3))]),
    "conv3x3_stride2": (lambda x, w: T.conv2d(x, w, stride=2, padding=1),
                        lambda r: [r.normal(size=(2, 3, 6, 6)), r.normal(size=(4, 3, 3, 3))]),
    "grouped_conv": (lambda x, w: T.conv2d(x, w, padding=1, groups=2),
                     lambda r: [r.normal(size=(2, 4, 4, 4)), r.normal(size=(4, 2, 3, 3))]),
    "conv1x1_stride2": (lambda x, w: T.conv2d(x, w, stride=2),
                        lambda r: [r.normal(size=(2, 3, 4, 4)), r.normal(size=(5, 3, 1, 1))]),
    "batch_norm_affine": (lambda x, g, b: T.batch_norm(x, g, b)[0],
                          lambda r: [r.normal(1.0, 2.0, size=(4, 3, 3, 3)), r.normal(size=3),
                                     r.normal(size=3)]),
    "batch_norm_plain": (lambda x: T.batch_norm(x)[0], lambda r: [r.normal(size=(5, 3))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    op, make = PRIMITIVES[name]
    for seed, arrays in _cases(make):
        err = check_gradients(op, arrays, seed=seed)
        assert err < 1e-4, f"{name} seed {seed}: rel err {err:.2e}"


# -- properties ----------------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# -- serialization -----------------------------------------------------------------------
def test_plad_roundtrip_and_layout(tmp_path):
    a = rng(5).normal(size=(2, 3, 4))
    buf = plad.encode(a)
    assert buf[:4] == b"PLAD"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert buf[8] == 0 and buf[9] == 3
    assert int.from_bytes(buf[10:18], "little") == 2
    assert len(buf) == 10 + 3 * 8 + a.size * 8
    np.testing.assert_array_equal(plad.decode(buf), a)
    plad.save_checkpoint(tmp_path / "ck", {"x": a, "ta/site0": np.eye(2)}, {"note": "t"})
    tensors, manifest = plad.load_checkpoint(tmp_path / "ck")
    np.testing.assert_array_equal(tensors["ta/site0"], np.eye(2))
    assert manifest["tensors"]["x"] == [2, 3, 4]
    with pytest.raises(FormatError):
        plad.decode(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        plad.decode(buf[:-8])
