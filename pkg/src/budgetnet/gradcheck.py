"""Central finite-difference checks for every backward pass, in float64."""

import numpy as np

from budgetnet import functional as F
from budgetnet.layers import SqueezeExcitation
from budgetnet.rng import RngStream

EPS = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as absolute error
REL_FLOOR = 1e-8


def numeric_grad(f, x, eps=EPS):
    """d f / d x by central differences; ``f`` returns a scalar and may read ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _projection(shape, rng):
    return rng.normal(size=shape)


def check_conv2d(rng):
    n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    f = int(rng.integers(0, 3)) * 2 + 1
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, (f - 1) // 2 + 2))
    h, w = (int(v) for v in rng.integers(max(f - 2 * pad, 1) + 1, 7, size=2))
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin, f, f))
    out = F.conv2d_forward(x, wt, stride, pad)
    r = _projection(out.shape, rng)
    loss = lambda: float(np.sum(F.conv2d_forward(x, wt, stride, pad) * r))
    gx, gw = F.conv2d_backward(r, x, wt, stride, pad)
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gw, numeric_grad(loss, wt)))


def check_batchnorm(rng):
    n, c, h, w = (int(v) for v in rng.integers(2, 5, size=4))
    x = rng.normal(1.0, 2.0, size=(n, c, h, w))
    state = F.BatchNormState(c, dtype=np.float64)
    state.gamma[...] = rng.normal(size=c)
    state.beta[...] = rng.normal(size=c)
    r = _projection(x.shape, rng)

    def loss():
        out, _ = F.batchnorm_forward(x, state)
        return float(np.sum(out * r))

    _, cache = F.batchnorm_forward(x, state)
    gx, gg, gb = F.batchnorm_backward(r, cache)
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gg, numeric_grad(loss, state.gamma)),
               rel_error(gb, numeric_grad(loss, state.beta)))


def check_linear(rng):
    n, d, m = (int(v) for v in rng.integers(1, 7, size=3))
    x = rng.normal(size=(n, d))
    wt = rng.normal(size=(d, m))
    b = rng.normal(size=m)
    r = _projection((n, m), rng)
    loss = lambda: float(np.sum(F.linear_forward(x, wt, b) * r))
    gx, gw, gb = F.linear_backward(r, x, wt)
    return max(rel_error(gx, numeric_grad(loss, x)), rel_error(gw, numeric_grad(loss, wt)),
               rel_error(gb, numeric_grad(loss, b)))


def check_avgpool(rng):
    k = int(rng.integers(1, 4))
    n, c = (int(v) for v in rng.integers(1, 4, size=2))
    h, w = k * int(rng.integers(1, 4)), k * int(rng.integers(1, 4))
    x = rng.normal(size=(n, c, h, w))
    r = _projection((n, c, h // k, w // k), rng)
    loss = lambda: float(np.sum(F.avgpool_forward(x, k) * r))
    return rel_error(F.avgpool_backward(r, k), numeric_grad(loss, x))


def check_relu(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    x = rng.normal(size=shape)
    # keep samples off the kink so the finite difference never straddles 0
    x = np.where(np.abs(x) < 1e-2, np.sign(x + 1e-12) * 1e-2 + x, x)
    r = _projection(shape, rng)
    loss = lambda: float(np.sum(F.relu(x) * r))
    return rel_error(F.relu_backward(r, x), numeric_grad(loss, x))


def check_sigmoid(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    x = rng.normal(0.0, 3.0, size=shape)
    r = _projection(shape, rng)
    loss = lambda: float(np.sum(F.sigmoid(x) * r))
    return rel_error(F.sigmoid_backward(r, F.sigmoid(x)), numeric_grad(loss, x))


def check_dropout(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
    p = float(rng.uniform(0.1, 0.7))
    x = rng.normal(size=shape)
    mask = F.dropout_mask(shape, p, rng, np.float64)
    r = _projection(shape, rng)
    loss = lambda: float(np.sum(x * mask * r))
    return rel_error(F.dropout_backward(r, mask), numeric_grad(loss, x))


def check_se_block(rng):
    ratio = int(rng.integers(1, 3))
    c = ratio * int(rng.integers(1, 4))
    n, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    se = SqueezeExcitation("se", c, ratio, dtype=np.float64)
    for p in se.parameters():
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(n, c, h, w))
    r = _projection(x.shape, rng)
    loss = lambda: float(np.sum(se.forward(x) * r))
    se.forward(x)
    gx = se.backward(r)
    errs = [rel_error(gx, numeric_grad(loss, x))]
    for p in se.parameters():
        errs.append(rel_error(p.grad, numeric_grad(loss, p.data)))
    return max(errs)


def check_cross_entropy(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 11))
    logits = rng.normal(0.0, 2.0, size=(n, k))
    labels = rng.integers(0, k, size=n)
    loss = lambda: softmax_loss(logits, labels)
    _, g = F.softmax_cross_entropy(logits, labels)
    return rel_error(g, numeric_grad(loss, logits))


def softmax_loss(logits, labels):
    return F.softmax_cross_entropy(logits, labels)[0]


CHECKS = {
    "conv2d": check_conv2d,
    "batchnorm": check_batchnorm,
    "linear": check_linear,
    "avgpool": check_avgpool,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "dropout": check_dropout,
    "se_block": check_se_block,
    "cross_entropy": check_cross_entropy,
}


def run(ops=None, trials=5, seed=0):
    """Max relative error per op over ``trials`` random shapes."""
    ops = list(CHECKS) if ops is None else list(ops)
    unknown = [o for o in ops if o not in CHECKS]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; choose from {sorted(CHECKS)}")
    results = {}
    for op in ops:
        rng = RngStream(seed, 100 + list(CHECKS).index(op))
        results[op] = max(CHECKS[op](rng) for _ in range(trials))
    return results
