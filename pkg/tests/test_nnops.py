import math
import struct

import numpy as np
import pytest
import torch

from kspunet import nnops
from kspunet.errors import CheckpointError, MissingGradient, ShapeMismatch


@pytest.fixture(autouse=True)
def float64():
    with nnops.precision("float64"):
        yield


def _param(rng, shape, away_from_zero=False):
    a = rng.standard_normal(shape)
    if away_from_zero:
        a = np.where(np.abs(a) < 0.05, 0.05 * np.sign(a) + 0.05 * (a == 0), a)
    return torch.nn.Parameter(torch.as_tensor(a))


def _probe(out, rng):
    """Random linear functional, so the check sees every output coordinate."""
    r = torch.as_tensor(rng.standard_normal(tuple(out.shape)))
    return (out * r).sum()


def _shape(rng, lo=1, hi=4, n=2):
    return tuple(int(s) for s in rng.integers(lo, hi, size=n))


def _check(build, params):
    store = nnops.ParameterStore(params)
    err, where = nnops.grad_check(build, store)
    assert err < 1e-6, where


@pytest.mark.parametrize("seed", range(3))
def test_grad_elementwise_and_matmul(seed):
    rng = np.random.default_rng(seed)
    s = _shape(rng)
    a, b = _param(rng, s), _param(rng, s)
    probe = torch.as_tensor(rng.standard_normal(s))
    _check(lambda: (nnops.add(a, b) * probe).sum(), {"a": a, "b": b})
    _check(lambda: (nnops.multiply(a, b) * probe).sum(), {"a": a, "b": b})
    c = _param(rng, (s[1], int(rng.integers(1, 4))))
    probe2 = torch.as_tensor(rng.standard_normal((s[0], c.shape[1])))
    _check(lambda: (nnops.matmul(a, c) * probe2).sum(), {"a": a, "c": c})


@pytest.mark.parametrize("seed", range(3))
def test_grad_pointwise_nonlinearities(seed):
    rng = np.random.default_rng(10 + seed)
    x = _param(rng, _shape(rng, n=3), away_from_zero=True)
    for fn in (nnops.relu, nnops.sigmoid, nnops.softplus):
        probe = torch.as_tensor(rng.standard_normal(tuple(x.shape)))
        _check(lambda fn=fn, probe=probe: (fn(x) * probe).sum(), {"x": x})


@pytest.mark.parametrize("seed", range(3))
def test_grad_conv2d(seed):
    rng = np.random.default_rng(20 + seed)
    cin, cout = (int(c) for c in rng.integers(1, 3, size=2))
    size = int(rng.choice([1, 3]))
    x = _param(rng, (2, cin, 5, 6))
    w = _param(rng, (cout, cin, size, size))
    b = _param(rng, (cout,))
    probe = torch.as_tensor(rng.standard_normal((2, cout, 5, 6)))
    _check(lambda: (nnops.conv2d(x, w, b) * probe).sum(), {"x": x, "w": w, "b": b})


def test_grad_structural_ops():
    rng = np.random.default_rng(30)
    x = _param(rng, (2, 2, 4, 6))
    y = _param(rng, (2, 1, 4, 6))
    z = _param(rng, (2, 3))
    t = torch.as_tensor((rng.uniform(size=(2, 2, 4, 6)) > 0.5).astype(float))
    cases = {
        "concat": (lambda: _probe_fixed(nnops.concat_channels([x, y]), 0), {"x": x, "y": y}),
        "pool": (lambda: _probe_fixed(nnops.avg_pool2(x), 1), {"x": x}),
        "upsample": (lambda: _probe_fixed(nnops.upsample2(x), 2), {"x": x}),
        "broadcast": (lambda: _probe_fixed(nnops.broadcast_spatial(z, 3, 5), 3), {"z": z}),
        "mean": (lambda: nnops.reduce_mean(x) + _probe_fixed(nnops.reduce_mean(x, dim=(2, 3)), 4), {"x": x}),
        "bce": (lambda: nnops.bce_with_logits(x, t), {"x": x}),
    }
    for name, (fn, params) in cases.items():
        store = nnops.ParameterStore(params)
        err, where = nnops.grad_check(fn, store)
        assert err < 1e-6, (name, where)


def _probe_fixed(out, seed):
    return _probe(out, np.random.default_rng(100 + seed))


def test_composite_graph_gradient():
    rng = np.random.default_rng(40)
    x = torch.as_tensor(rng.uniform(size=(1, 1, 8, 8)))
    w1 = _param(rng, (3, 1, 3, 3))
    w2 = _param(rng, (2, 6, 3, 3))
    b2 = _param(rng, (2,))
    target = torch.as_tensor((rng.uniform(size=(1, 2, 8, 8)) > 0.5).astype(float))

    def block():
        h = nnops.relu(nnops.conv2d(x, w1))
        down = nnops.upsample2(nnops.avg_pool2(h))
        return nnops.bce_with_logits(nnops.conv2d(nnops.concat_channels([h, down]), w2, b2), target)

    _check(block, {"w1": w1, "w2": w2, "b2": b2})


def test_softplus_kappa_head_gradient():
    rng = np.random.default_rng(41)
    feats = torch.as_tensor(rng.standard_normal((4, 5)))
    w = _param(rng, (5, 1))
    b = _param(rng, (1,))
    _check(lambda: (nnops.softplus(nnops.matmul(feats, w) + b) + 0.1).log().sum(), {"w": w, "b": b})


def test_linear_function_is_exact():
    rng = np.random.default_rng(42)
    a = _param(rng, (3, 4))
    coef = torch.as_tensor(rng.standard_normal((3, 4)))
    err, _ = nnops.grad_check(lambda: (a * coef).sum(), nnops.ParameterStore({"a": a}))
    assert err < 1e-10


def test_grad_check_reports_location():
    a = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
    b = torch.nn.Parameter(torch.tensor([3.0]))

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    err, where = nnops.grad_check(lambda: a.sum() + Wrong.apply(b).sum(), nnops.ParameterStore({"a": a, "b": b}))
    assert err == pytest.approx(0.5)
    assert where == "b[0]"


def test_conv_identity_kernel():
    x = torch.as_tensor(np.random.default_rng(0).standard_normal((2, 1, 7, 5)))
    w = torch.zeros(1, 1, 3, 3)
    w[0, 0, 1, 1] = 1.0
    assert torch.equal(nnops.conv2d(x, w), x)


def test_softplus_zero():
    assert nnops.softplus(torch.tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert nnops.softplus(torch.tensor(0.0)).item() == pytest.approx(0.693147, abs=1e-6)


def test_shape_mismatches():
    a, b = torch.zeros(2, 3), torch.zeros(3, 2)
    with pytest.raises(ShapeMismatch):
        nnops.add(a, b)
    with pytest.raises(ShapeMismatch):
        nnops.multiply(a, b.T[:1])
    with pytest.raises(ShapeMismatch):
        nnops.matmul(a, a)
    with pytest.raises(ShapeMismatch):
        nnops.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ShapeMismatch):
        nnops.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2))
    with pytest.raises(ShapeMismatch):
        nnops.concat_channels([torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5)])
    with pytest.raises(ShapeMismatch):
        nnops.avg_pool2(torch.zeros(1, 1, 5, 4))
    with pytest.raises(ShapeMismatch):
        nnops.broadcast_spatial(torch.zeros(3), 2, 2)
    with pytest.raises(ShapeMismatch):
        nnops.bce_with_logits(torch.zeros(2, 2), torch.zeros(2, 3))


def test_shapes_of_structural_ops():
    x = torch.zeros(2, 3, 8, 6)
    assert nnops.avg_pool2(x).shape == (2, 3, 4, 3)
    assert nnops.upsample2(x).shape == (2, 3, 16, 12)
    assert nnops.broadcast_spatial(torch.zeros(2, 5), 4, 7).shape == (2, 5, 4, 7)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_parameters():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0]))
    store = nnops.ParameterStore({"w": w})
    for _ in range(5):
        nnops.adam_step(store, {"w": torch.zeros(3)}, lr=0.1)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0, 3.0]))


def test_adam_quadratic_convergence():
    w = torch.nn.Parameter(torch.tensor([0.0]))
    store = nnops.ParameterStore({"w": w})
    for _ in range(500):
        store.zero_grad()
        ((w - 3.0) ** 2).sum().backward()
        nnops.adam_step(store, lr=0.1)
    assert abs(w.item() - 3.0) < 1e-3


def test_adam_missing_gradient():
    store = nnops.ParameterStore({"w": torch.nn.Parameter(torch.zeros(2))})
    with pytest.raises(MissingGradient):
        nnops.adam_step(store, lr=0.1)


def _adam_run(seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.nn.Parameter(torch.randn(4, 3, generator=g))
    x = torch.randn(16, 4, generator=g)
    store = nnops.ParameterStore({"w": w})
    for _ in range(50):
        store.zero_grad()
        torch.tanh(x @ w).pow(2).mean().backward()
        nnops.adam_step(store, lr=0.05)
    return w.detach().clone()


def test_adam_deterministic():
    assert torch.equal(_adam_run(3), _adam_run(3))


def test_parameter_store_sorted():
    store = nnops.ParameterStore({"b": torch.zeros(1), "a": torch.zeros(1), "c": torch.zeros(1)})
    assert [n for n, _ in store] == ["a", "b", "c"]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": torch.randn(3, 4, dtype=torch.float64), "b": torch.randn(2, dtype=torch.float32)}
    p = tmp_path / "m.kspu"
    nnops.save_checkpoint(p, tensors, {"note": "x"})
    back, meta = nnops.load_checkpoint(p)
    assert meta == {"note": "x"}
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert torch.equal(back[k], tensors[k])
    raw = p.read_bytes()
    assert raw[:4] == b"KSPU"
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == nnops.VERSION
    assert not list(tmp_path.glob("*.tmp"))
    nnops.save_checkpoint(tmp_path / "again.kspu", back, {"note": "x"})
    assert (tmp_path / "again.kspu").read_bytes() == raw


def test_checkpoint_bad_magic_and_version(tmp_path):
    p = tmp_path / "m.kspu"
    nnops.save_checkpoint(p, {"w": torch.zeros(2)})
    raw = p.read_bytes()
    (tmp_path / "magic.kspu").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        nnops.load_checkpoint(tmp_path / "magic.kspu")
    (tmp_path / "ver.kspu").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        nnops.load_checkpoint(tmp_path / "ver.kspu")
    (tmp_path / "trunc.kspu").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        nnops.load_checkpoint(tmp_path / "trunc.kspu")
    with pytest.raises(CheckpointError):
        nnops.load_checkpoint(tmp_path / "missing.kspu")


def test_precision_context_restores():
    before = torch.get_default_dtype()
    with nnops.precision("float32"):
        assert torch.get_default_dtype() == torch.float32
    assert torch.get_default_dtype() == before
