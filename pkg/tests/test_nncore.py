
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmgnn import nncore as nn


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def test_linear_identity():
    w = nn.Tensor(np.eye(3))
    b = nn.Tensor(np.zeros(3))
    h = nn.Tensor(np.array([[1.0, -2.0, 3.0]]))
    assert np.array_equal(nn.linear_forward(w, b, h).data, h.data)


def test_linear_scalar_case():
    out = nn.linear_forward(nn.Tensor([[2.0]]), nn.Tensor([3.0]), nn.Tensor([[4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_linear_matches_triple_loop(rng):
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    h = rng.normal(size=(5, 4))
    out = nn.linear_forward(nn.Tensor(w), nn.Tensor(b), nn.Tensor(h)).data
    ref = np.zeros((5, 3))
    for n in range(5):
        for j in range(3):
            acc = b[j]
            for i in range(4):
                acc += h[n, i] * w[i, j]
            ref[n, j] = acc
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_softmax_symmetric_pair():
    assert nn.softmax(np.array([0.0, 0.0])).tolist() == [0.5, 0.5]


@given(arrays(np.float64, 5, elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_shift_invariant(v, c):
    p = nn.softmax(v)
    assert np.isclose(p.sum(), 1.0)
    assert np.allclose(p, nn.softmax(v + c), atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_relu_pointwise(v):
    assert np.array_equal(nn.relu(nn.Tensor(v)).data, np.maximum(v, 0.0))


def test_dropout_eval_identity(rng):
    x = nn.Tensor(rng.normal(size=(4, 6)))
    assert nn.dropout(x, 0.5, rng, train=False) is x


def test_dropout_train_scaling(rng):
    x = nn.Tensor(np.ones((200, 200)))
    out = nn.dropout(x, 0.1, rng, train=True).data
    kept = out != 0
    assert np.allclose(out[kept], 1.0 / 0.9)
    assert abs(kept.mean() - 0.9) < 0.01


def test_two_layer_net_gradcheck(rng):
    l1 = nn.Linear(5, 7, rng)
    l2 = nn.Linear(7, 3, rng)
    x = nn.Tensor(rng.normal(size=(4, 5)))
    target = np.array([0, 2, 1, 1])
    mask = np.ones((4, 3), dtype=bool)

    def loss():
        logp = nn.masked_log_softmax(l2(nn.relu(l1(x))), mask)
        return nn.neg(nn.mean(nn.reshape(nn.gather(logp, target[:, None]), (4,))))

    for p in [l1.weight, l1.bias, l2.weight, l2.bias]:
        p.zero_grad()
    loss().backward()
    for p in [l1.weight, l1.bias, l2.weight, l2.bias]:
        num = numeric_grad(lambda: loss().item(), p.data)
        assert rel_err(p.grad, num) < 1e-4


def test_every_op_gradcheck(rng):
    a = nn.parameter(rng.normal(size=(3, 4)))
    b = nn.parameter(rng.normal(size=(4, 2)))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 1], [0, 1, 1, 1]], dtype=bool)
    rows = np.array([2, 0, 0, 1])

    def loss():
        h = nn.add(nn.matmul(a, b), 0.3)
        h = nn.concat([h, nn.square(h)], axis=1)
        h = nn.take_rows(nn.pad_last(h, 5), rows)
        m = nn.masked_max(nn.mul(a, a), mask)
        s = nn.sum(nn.exp(nn.mul(h, 0.1)), axis=1)
        lsm = nn.masked_fill(nn.masked_log_softmax(a, mask), mask)
        return nn.add(nn.add(nn.mean(s), nn.sum(m)), nn.mean(nn.reshape(lsm, (12,))))

    a.zero_grad()
    b.zero_grad()
    loss().backward()
    for p in (a, b):
        assert rel_err(p.grad, numeric_grad(lambda: loss().item(), p.data)) < 1e-4


def test_unused_parameter_gradient_zero(rng):
    used = nn.parameter(rng.normal(size=3))
    unused = nn.parameter(rng.normal(size=3))
    nn.sum(nn.square(used)).backward()
    assert unused.grad is None or not unused.grad.any()


def test_softmax_cross_entropy_gradient_closed_form():
    logits = nn.parameter(np.zeros((1, 4)))
    t = 2
    loss = nn.neg(nn.gather(nn.masked_log_softmax(logits, np.ones((1, 4), bool)), np.array([[t]])))
    nn.sum(loss).backward()
    p = np.full(4, 0.25)
    onehot = np.eye(4)[t]
    assert np.allclose(logits.grad[0], p - onehot)


def test_masked_log_softmax_masked_entries():
    logits = nn.Tensor(np.array([[1.0, 5.0, 2.0]]))
    out = nn.masked_log_softmax(logits, np.array([[True, False, True]]))
    assert np.isneginf(out.data[0, 1])
    assert np.isclose(np.exp(out.data[0, [0, 2]]).sum(), 1.0)


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = {}
    new = nn.adam_step(params, {"w": np.zeros(2)}, 1e-3, state)
    assert np.array_equal(new["w"], params["w"])


def test_adam_first_step_descends():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -4.0, 1e-3])
    new = nn.adam_step(params, {"w": g}, 1e-3, {})
    assert np.array_equal(np.sign(new["w"] - params["w"]), -np.sign(g))
    assert np.allclose(np.abs(new["w"] - params["w"]), 1e-3, rtol=1e-4)


def _train_small(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Linear(3, 2, rng)
    opt = nn.Adam(layer.named_parameters())
    x = nn.Tensor(rng.normal(size=(8, 3)))
    for _ in range(20):
        opt.zero_grad()
        nn.mean(nn.square(layer(x))).backward()
        opt.step()
    return layer.state_dict()


def test_adam_determinism_and_isolation():
    a = _train_small(5)
    _train_small(6)  # a second model in the same process must not interfere
    b = _train_small(5)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip_bytes(tmp_path, rng):
    tensors = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "adam.t": np.array(3.0)}
    meta = {"kind": "x", "n": 3}
    raw = nn.dump_checkpoint(tensors, meta)
    t2, m2 = nn.parse_checkpoint(raw)
    assert m2 == meta
    assert all(np.array_equal(t2[k], tensors[k]) for k in tensors)
    assert nn.dump_checkpoint(t2, m2) == raw
    path = tmp_path / "c.ckpt"
    nn.save_checkpoint(path, tensors, meta)
    assert path.read_bytes() == raw
    assert nn.load_checkpoint(path)[1] == meta


def test_checkpoint_rejects_corruption(rng):
    raw = nn.dump_checkpoint({"a": rng.normal(size=3)})
    with pytest.raises(ValueError):
        nn.parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        nn.parse_checkpoint(raw + b"\0")
    with pytest.raises(ValueError):
        nn.parse_checkpoint(raw[:-3])


def test_module_state_dict_shape_check(rng):
    layer = nn.Linear(3, 2, rng)
    state = layer.state_dict()
    state["w"] = np.zeros((2, 3))
    with pytest.raises(ValueError):
        layer.load_state_dict(state)


def test_linear_init_bounds(rng):
    layer = nn.Linear(16, 4, rng)
    assert np.abs(layer.weight.data).max() <= 0.25
    assert np.abs(layer.bias.data).max() <= 0.25
