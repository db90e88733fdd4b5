"""Finite-difference oracle harness for every differentiable primitive and
for the full two-layer attention model driven through the hinge loss.

Each check builds a random instance, reduces the op output to a scalar
through a fixed random weighting, and compares reverse-mode gradients to
central differences coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .tensor import Tensor, finite_diff_grad, relative_error
from .theory import SyntheticTaskSpec, build_constructed_vit, gen_batch

FD_H = 1e-5
OP_TOL = 1e-6
COMPOSITE_TOL = 1e-5
KINK_MARGIN = 1e-3  # rejection band around relu/hinge kinks, > spec's 1e-4


@dataclass
class OpReport:
    name: str
    worst_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tol


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.normal(size=shape)
    small = np.abs(x) < margin
    x[small] = np.sign(x[small] + 0.5) * (margin + np.abs(x[small]))
    return x


def _scalar_check(build, x0: np.ndarray, corrupt: bool = False) -> float:
    """Compare autodiff and central differences for scalar f(x) = build(x)."""
    xt = Tensor(x0.copy(), requires_grad=True)
    with T.Tape() as tape:
        out = build(xt)
        tape.backward(out)
    auto = xt.grad.copy()
    if corrupt:
        auto *= 1.001

    def f(x):
        return build(Tensor(x)).item()

    fd = finite_diff_grad(f, x0, h=FD_H)
    return relative_error(auto, fd)


def _weighting(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def check_op(name: str, rng: np.random.Generator, corrupt: bool = False) -> float:
    """Worst-case relative error for one random instance of `name`."""
    if name == "add":
        b = Tensor(rng.normal(size=(4,)))
        w = _weighting(rng, (3, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.add(x, b) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "sub":
        b = Tensor(rng.normal(size=(3, 4)))
        w = _weighting(rng, (3, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.sub(x, b) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "scale":
        c = float(rng.normal())
        w = _weighting(rng, (5,))
        return _scalar_check(lambda x: T.reduce_sum(T.scale(x, c) * Tensor(w)),
                             rng.normal(size=(5,)), corrupt)
    if name == "elementwise_mul":
        b = Tensor(rng.normal(size=(4,)))
        w = _weighting(rng, (3, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.elementwise_mul(x, b) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "div":
        b = Tensor(_away_from_zero(rng, (3, 4), margin=0.3))
        w = _weighting(rng, (3, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.div(x, b) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "matmul":
        b = Tensor(rng.normal(size=(4, 2)))
        w = _weighting(rng, (3, 2))
        return _scalar_check(lambda x: T.reduce_sum((x @ b) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "matmul_batched":
        b = Tensor(rng.normal(size=(2, 4, 3)))
        w = _weighting(rng, (2, 5, 3))
        return _scalar_check(lambda x: T.reduce_sum((x @ b) * Tensor(w)),
                             rng.normal(size=(2, 5, 4)), corrupt)
    if name == "relu":
        w = _weighting(rng, (4, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.relu(x) * Tensor(w)),
                             _away_from_zero(rng, (4, 4)), corrupt)
    if name == "softmax":
        w = _weighting(rng, (5,))
        return _scalar_check(lambda x: T.reduce_sum(T.softmax(x, axis=0) * Tensor(w)),
                             rng.normal(size=(5,)), corrupt)
    if name == "log_softmax":
        w = _weighting(rng, (2, 5))
        return _scalar_check(lambda x: T.reduce_sum(T.log_softmax(x, axis=1) * Tensor(w)),
                             rng.normal(size=(2, 5)), corrupt)
    if name == "sqrt":
        w = _weighting(rng, (6,))
        return _scalar_check(lambda x: T.reduce_sum(T.sqrt(x) * Tensor(w)),
                             rng.uniform(0.5, 2.0, size=(6,)), corrupt)
    if name == "reduce_sum":
        w = _weighting(rng, (3,))
        return _scalar_check(lambda x: T.reduce_sum(T.reduce_sum(x, axis=1) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "reduce_mean":
        w = _weighting(rng, (4,))
        return _scalar_check(lambda x: T.reduce_sum(T.reduce_mean(x, axis=0) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "reduce_var":
        w = _weighting(rng, (4,))
        return _scalar_check(lambda x: T.reduce_sum(T.reduce_var(x, axis=0) * Tensor(w)),
                             rng.normal(size=(3, 4)), corrupt)
    if name == "reshape_transpose":
        w = _weighting(rng, (4, 3))
        return _scalar_check(
            lambda x: T.reduce_sum(T.transpose(T.reshape(x, (3, 4)), (1, 0)) * Tensor(w)),
            rng.normal(size=(12,)), corrupt)
    if name == "broadcast_to":
        w = _weighting(rng, (3, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.broadcast_to(x, (3, 4)) * Tensor(w)),
                             rng.normal(size=(4,)), corrupt)
    if name == "masked_embed":
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :] = True
        mask[:, 0] = True
        base = rng.normal(size=(4, 4))
        w = _weighting(rng, (4, 4))
        return _scalar_check(lambda x: T.reduce_sum(T.masked_embed(x, mask, base) * Tensor(w)),
                             rng.normal(size=(int(mask.sum()),)), corrupt)
    if name == "conv2d_zero":
        wgt = Tensor(rng.normal(size=(3, 2, 3, 3)))
        w = _weighting(rng, (2, 3, 4, 4))
        return _scalar_check(
            lambda x: T.reduce_sum(layers.conv2d(x, wgt, padding="zero") * Tensor(w)),
            rng.normal(size=(2, 2, 4, 4)), corrupt)
    if name == "conv2d_circular":
        wgt = Tensor(rng.normal(size=(3, 2, 3, 3)))
        w = _weighting(rng, (2, 3, 4, 4))
        return _scalar_check(
            lambda x: T.reduce_sum(layers.conv2d(x, wgt, padding="circular") * Tensor(w)),
            rng.normal(size=(2, 2, 4, 4)), corrupt)
    if name == "conv2d_weight":
        z = Tensor(rng.normal(size=(2, 2, 4, 4)))
        w = _weighting(rng, (2, 3, 4, 4))
        return _scalar_check(
            lambda x: T.reduce_sum(layers.conv2d(z, x, padding="circular") * Tensor(w)),
            rng.normal(size=(3, 2, 3, 3)), corrupt)
    if name == "layernorm":
        gamma = Tensor(rng.uniform(0.5, 1.5, size=4))
        beta = Tensor(rng.normal(size=4))
        w = _weighting(rng, (4, 3))
        return _scalar_check(
            lambda x: T.reduce_sum(layers.layernorm(x, gamma, beta) * Tensor(w)),
            rng.normal(size=(4, 3)), corrupt)
    if name == "batchnorm":
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2))
        beta = Tensor(rng.normal(size=2))
        w = _weighting(rng, (3, 2, 2, 2))
        return _scalar_check(
            lambda x: T.reduce_sum(layers.batchnorm(x, gamma, beta) * Tensor(w)),
            rng.normal(size=(3, 2, 2, 2)), corrupt)
    if name == "attention":
        wq = Tensor(rng.normal(size=(3, 3)))
        wk = Tensor(rng.normal(size=(3, 3)))
        wv = Tensor(rng.normal(size=(3, 3)))
        w = _weighting(rng, (3, 4))

        def build(x):
            out, _ = layers.attention_block(x, wq, wk, wv)
            return T.reduce_sum(out * Tensor(w))

        return _scalar_check(build, rng.normal(size=(3, 4)), corrupt)
    if name == "conv_bn_relu":
        wgt = Tensor(rng.normal(size=(2, 2, 3, 3)))
        gamma = Tensor(rng.uniform(0.5, 1.5, size=2))
        beta = Tensor(rng.normal(size=2))
        w = _weighting(rng, (2, 2, 4, 4))

        def build(x):
            out = layers.conv_bn_relu_block(x, wgt, gamma, beta, padding="circular")
            return T.reduce_sum(out * Tensor(w))

        # batch-norm output straddles relu kinks by construction; reject
        # draws whose pre-relu values sit inside the kink margin
        for _ in range(50):
            x0 = rng.normal(size=(2, 2, 4, 4))
            pre = layers.batchnorm(layers.conv2d(Tensor(x0), wgt, padding="circular"),
                                   gamma, beta).data
            if np.min(np.abs(pre)) > KINK_MARGIN:
                break
        return _scalar_check(build, x0, corrupt)
    raise KeyError(f"unknown op {name!r}")


OP_NAMES = (
    "add", "sub", "scale", "elementwise_mul", "div", "matmul", "matmul_batched",
    "relu", "softmax", "log_softmax", "sqrt", "reduce_sum", "reduce_mean",
    "reduce_var", "reshape_transpose", "broadcast_to", "masked_embed",
    "conv2d_zero", "conv2d_circular", "conv2d_weight", "layernorm", "batchnorm",
    "attention", "conv_bn_relu",
)


def _vit_instance(rng: np.random.Generator):
    """Small (<=200 trainable scalars) prompted two-layer model and sample,
    resampled until every relu and the hinge sit away from their kinks."""
    spec = SyntheticTaskSpec(P=4, d=4, sigma_noise=0.1, noise_scale_c=0.5,
                             seed=int(rng.integers(2 ** 31)))
    model = build_constructed_vit(spec, m=8)
    for _ in range(200):
        x, y = gen_batch(spec, 1, rng)
        x = x[0]
        yv = float(y[0])
        delta0 = 0.1 * rng.normal(size=(spec.d, spec.P))
        leaves = {
            "delta": Tensor(delta0, requires_grad=True),
            "wo1": Tensor(model.params["wo1"].data.copy(), requires_grad=True),
            "wo2": Tensor(model.params["wo2"].data.copy(), requires_grad=True),
            "head": Tensor(model.params["head"].data.copy(), requires_grad=True),
        }

        def forward(lv):
            params = dict(model.params)
            params["wo1"] = lv["wo1"]
            params["wo2"] = lv["wo2"]
            params["head"] = lv["head"]
            score, _, _ = layers.two_layer_vit_forward(Tensor(x), params, h=1,
                                                       delta=lv["delta"])
            margin = Tensor(np.asarray(1.0 / spec.P))
            return T.relu(margin - T.scale(score, yv))

        # kink probe: replicate the pre-relu values in plain numpy
        xp = x + delta0
        a1 = _np_softmax((xp @ model.perm1).T @ xp)
        h1 = leaves["wo1"].data @ ((xp @ model.perm1) @ a1)
        z = np.maximum(h1, 0)
        a2 = _np_softmax((z @ model.perm2).T @ z)
        h2 = leaves["wo2"].data @ ((z @ model.perm2) @ a2)
        score = float(np.sum(leaves["head"].data * np.maximum(h2, 0)))
        gap = abs(1.0 / spec.P - yv * score)
        if min(np.min(np.abs(h1)), np.min(np.abs(h2))) > KINK_MARGIN and gap > KINK_MARGIN:
            return leaves, forward
    raise RuntimeError("could not sample a kink-free model instance")


def _np_softmax(s):
    e = np.exp(s - s.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def check_vit_composite(rng: np.random.Generator, corrupt: bool = False) -> float:
    """Every leaf gradient of the hinge-loss model vs central differences."""
    leaves, forward = _vit_instance(rng)
    with T.Tape() as tape:
        loss = forward(leaves)
        tape.backward(loss)
    worst = 0.0
    for name, leaf in leaves.items():
        auto = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        if corrupt:
            auto *= 1.001

        def f(v, _name=name, _leaf=leaf):
            saved = _leaf.data
            _leaf.data = v
            out = forward(leaves).item()
            _leaf.data = saved
            return out

        fd = finite_diff_grad(f, leaf.data.copy(), h=FD_H)
        worst = max(worst, relative_error(auto, fd))
    return worst


def run_suite(seed: int = 0, trials: int = 100, composite_trials: int = 100,
              corrupt: bool = False) -> list[OpReport]:
    """Whole gradient-oracle suite; deterministic given the seed."""
    from .seeding import mix64

    reports = []
    for name in OP_NAMES:
        rng = np.random.default_rng(mix64(seed, name))
        worst = max(check_op(name, rng, corrupt=corrupt) for _ in range(trials))
        reports.append(OpReport(name, worst, OP_TOL))
    rng = np.random.default_rng(mix64(seed, "two_layer_vit_hinge"))
    worst = max(check_vit_composite(rng, corrupt=corrupt)
                for _ in range(composite_trials))
    reports.append(OpReport("two_layer_vit_hinge", worst, COMPOSITE_TOL))
    return reports
