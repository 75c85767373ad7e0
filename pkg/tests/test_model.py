import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetnet.config import ResNetConfig, avgpool_kernel
from budgetnet.errors import ConfigError
from budgetnet.gradcheck import numeric_grad, rel_error
from budgetnet.layers import BasicBlock, SqueezeExcitation
from budgetnet.model import build, count_params, our_model_config, resnet18_config, se_params
from budgetnet.rng import RngStream


def enumerated(model):
    return sum(int(np.prod(p.shape)) for p in model.parameters())


@pytest.mark.parametrize("n,p", [(1, 32), (2, 16), (3, 8), (4, 4), (5, 2)])
def test_avgpool_kernel(n, p):
    assert avgpool_kernel(n) == p


@pytest.mark.parametrize("n", [0, 6, -1])
def test_avgpool_kernel_out_of_range(n):
    with pytest.raises(ConfigError):
        avgpool_kernel(n)


def test_resnet18_count():
    assert count_params(resnet18_config()) == 11_173_962


def test_our_model_counts():
    no_se = our_model_config(se_enabled=False)
    assert count_params(no_se) == 4_697_162
    assert enumerated(build(no_se)) == 4_697_162
    with_se = our_model_config()
    assert count_params(with_se) == enumerated(build(with_se)) == 4_733_610
    assert count_params(with_se) < 5_000_000
    # the 580 the published total adds over the SE-free count equals one SE unit on 64 channels
    assert se_params(64, 16) == 580


def test_minimal_count_and_identity_shortcut():
    cfg = ResNetConfig(1, [1], [4], [3], [1], 32)
    model = build(cfg)
    assert count_params(cfg) == enumerated(model) == 470
    assert not any(b.has_projection for b in model.blocks())


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_count_matches_enumeration(draw):
    n = draw.draw(st.integers(1, 4))
    lists = lambda values: st.lists(st.sampled_from(values), min_size=n, max_size=n)
    se = draw.draw(st.booleans())
    cfg = ResNetConfig(
        n_layers=n,
        blocks=draw.draw(lists([1, 2, 3])),
        channels=draw.draw(lists([4, 8, 16])),
        conv_kernels=draw.draw(lists([1, 3, 5])),
        skip_kernels=draw.draw(lists([1, 3])),
        se_enabled=se,
        se_ratio=4,
    )
    assert count_params(cfg) == enumerated(build(cfg))


def test_parameter_order():
    cfg = ResNetConfig(2, [1, 2], [4, 8], [3, 3], [1, 1], se_enabled=True, se_ratio=2)
    names = [p.name for p in build(cfg).parameters()]
    assert names[:3] == ["stem.conv.weight", "stem.bn.gamma", "stem.bn.beta"]
    assert names[3:13] == [
        "layer1.0.conv1.weight", "layer1.0.bn1.gamma", "layer1.0.bn1.beta",
        "layer1.0.conv2.weight", "layer1.0.bn2.gamma", "layer1.0.bn2.beta",
        "layer1.0.se.fc1.weight", "layer1.0.se.fc1.bias", "layer1.0.se.fc2.weight", "layer1.0.se.fc2.bias",
    ]
    first_down = [n for n in names if n.startswith("layer2.0.")]
    assert first_down[-3:] == ["layer2.0.shortcut.conv.weight", "layer2.0.shortcut.bn.gamma",
                               "layer2.0.shortcut.bn.beta"]
    assert names[-2:] == ["fc.weight", "fc.bias"]
    assert not any(n.startswith("layer2.1.shortcut") for n in names)


@pytest.mark.parametrize("cfg", [our_model_config(), resnet18_config()], ids=["our_model", "resnet18"])
def test_published_configs_forward_shape(cfg):
    model = build(cfg).eval()
    out = model.forward(np.random.default_rng(0).normal(size=(1, 3, 32, 32)).astype(np.float32))
    assert out.shape == (1, 10)
    assert np.all(np.isfinite(out))


def test_shape_trace_four_layers():
    n = 4
    model = build(ResNetConfig(4, [1, 1, 1, 1], [n, 2 * n, 4 * n, 8 * n], [3] * 4, [1] * 4))
    trace = []
    model.eval().forward(np.zeros((1, 3, 32, 32), dtype=np.float32), trace=trace)
    assert trace == [(1, n, 32, 32), (1, 2 * n, 16, 16), (1, 4 * n, 8, 8), (1, 8 * n, 4, 4),
                     (1, 8 * n, 1, 1), (1, 8 * n), (1, 10)]


def test_zero_weights_give_constant_function():
    model = build(ResNetConfig(2, [1, 1], [4, 8], [3, 3], [1, 1], se_enabled=True, se_ratio=2))
    for p in model.parameters():
        p.data[...] = 0
    model.eval()
    rng = np.random.default_rng(1)
    a = model.forward(rng.normal(size=(3, 3, 32, 32)).astype(np.float32))
    b = model.forward(rng.normal(size=(3, 3, 32, 32)).astype(np.float32))
    assert np.all(a == a[0]) and np.array_equal(a, b)


def test_build_deterministic():
    cfg = ResNetConfig(2, [1, 1], [4, 8], [3, 3], [1, 1])
    a = build(cfg, rng=RngStream(7))
    b = build(cfg, rng=RngStream(7))
    c = build(cfg, rng=RngStream(8))
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))
    assert any(p.data.tobytes() != q.data.tobytes() for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("field,kwargs", [
    ("blocks", dict(blocks=[1])),
    ("conv_kernels", dict(conv_kernels=[2, 3])),
    ("skip_kernels", dict(skip_kernels=[1, 4])),
    ("pool_kernel", dict(pool_kernel=8)),
    ("se_ratio", dict(se_enabled=True, se_ratio=3)),
    ("residual_layers", dict(n_layers=5)),
])
def test_config_errors_name_field(field, kwargs):
    base = dict(n_layers=2, blocks=[1, 1], channels=[4, 8], conv_kernels=[3, 3], skip_kernels=[1, 1])
    base.update(kwargs)
    with pytest.raises(ConfigError, match=field):
        ResNetConfig(**base)


# --- squeeze and excitation -----------------------------------------------------

def test_se_zero_weights_halves_input():
    se = SqueezeExcitation("se", 8, 4, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(2, 8, 3, 3))
    np.testing.assert_array_equal(se.forward(x), 0.5 * x)


def test_se_squeeze_of_constant_channels():
    se = SqueezeExcitation("se", 4, 2, dtype=np.float64)
    v = np.array([1.0, -2.0, 3.5, 0.25])
    x = np.broadcast_to(v.reshape(1, 4, 1, 1), (1, 4, 5, 5)).copy()
    se.forward(x)
    np.testing.assert_allclose(se.fc1._x, v.reshape(1, 4))


def test_se_ratio_must_divide():
    with pytest.raises(ConfigError):
        SqueezeExcitation("se", 6, 4)


def test_se_gradient():
    rng = np.random.default_rng(3)
    se = SqueezeExcitation("se", 6, 3, dtype=np.float64)
    for p in se.parameters():
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(2, 6, 3, 3))
    r = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(se.forward(x) * r))
    se.forward(x)
    gx = se.backward(r)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    for p in se.parameters():
        assert rel_error(p.grad, numeric_grad(loss, p.data)) < 1e-4


def _paired_blocks(seed=0):
    with_se = BasicBlock("b", 4, 8, 3, 1, stride=2, se_ratio=2)
    plain = BasicBlock("b", 4, 8, 3, 1, stride=2)
    rng = np.random.default_rng(seed)
    shared = {p.name: rng.normal(size=p.shape).astype(np.float32) for p in with_se.parameters()}
    for block in (with_se, plain):
        for p in block.parameters():
            p.data[...] = shared[p.name]
    return with_se, plain


def test_se_forced_to_one_matches_plain_block():
    with_se, plain = _paired_blocks()
    with_se.se.force_excitation = 1.0
    x = np.random.default_rng(4).normal(size=(2, 4, 8, 8)).astype(np.float32)
    a, b = with_se.forward(x), plain.forward(x)
    assert a.tobytes() == b.tobytes()
    g = np.random.default_rng(5).normal(size=a.shape).astype(np.float32)
    assert with_se.backward(g).tobytes() == plain.backward(g).tobytes()


def test_full_block_gradient():
    rng = np.random.default_rng(6)
    block = BasicBlock("b", 2, 4, 3, 3, stride=2, se_ratio=2, dtype=np.float64)
    for p in block.parameters():
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(2, 2, 4, 4))
    r = rng.normal(size=(2, 4, 2, 2))
    loss = lambda: float(np.sum(block.forward(x) * r))
    block.forward(x)
    gx = block.backward(r)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-4
    w = block.conv1.weight
    assert rel_error(w.grad, numeric_grad(loss, w.data)) < 1e-4
