"""Layer primitives and the hookable layered-model container.

Two toy architectures are provided: a small CNN (1x1 stem, four
conv-BN-relu blocks with circular padding, global average pool, linear
head) and a small pre-norm ViT (single-head attention blocks with
residuals, token mean pooling, linear head).  Prompts attach at named
hook sites "site_0" (the input) through "site_K" (before pooling).
"""

from __future__ import annotations

import json
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# functional primitives


def conv2d(z: Tensor, w: Tensor, bias: Tensor | None = None,
           padding: str = "circular") -> Tensor:
    """Same-size 2-D convolution, zero or circular padding.

    z: (B, Cin, H, W); w: (Cout, Cin, kh, kw) with odd kernel extents.
    """
    if z.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {z.shape} and {w.shape}")
    if z.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel counts disagree, {z.shape} vs {w.shape}")
    if padding not in ("zero", "circular"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    B, Ci, H, W = z.shape
    Co, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2

    if padding == "zero":
        zp = np.pad(z.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        out = np.zeros((B, Co, H, W))
        for ky in range(kh):
            for kx in range(kw):
                out += np.einsum("oc,bcyx->boyx", w.data[:, :, ky, kx],
                                 zp[:, :, ky:ky + H, kx:kx + W])
    else:
        out = np.zeros((B, Co, H, W))
        for ky in range(kh):
            for kx in range(kw):
                shifted = np.roll(z.data, shift=(ph - ky, pw - kx), axis=(2, 3))
                out += np.einsum("oc,bcyx->boyx", w.data[:, :, ky, kx], shifted)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = (z, w) if bias is None else (z, w, bias)

    def backward(o: Tensor):
        g = o.grad
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if padding == "zero":
            zp_ = np.pad(z.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            if z.requires_grad:
                gzp = np.zeros_like(zp_)
                for ky in range(kh):
                    for kx in range(kw):
                        gzp[:, :, ky:ky + H, kx:kx + W] += np.einsum(
                            "oc,boyx->bcyx", w.data[:, :, ky, kx], g)
                z.accumulate_grad(gzp[:, :, ph:ph + H, pw:pw + W])
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for ky in range(kh):
                    for kx in range(kw):
                        gw[:, :, ky, kx] = np.einsum(
                            "boyx,bcyx->oc", g, zp_[:, :, ky:ky + H, kx:kx + W])
                w.accumulate_grad(gw)
        else:
            if z.requires_grad:
                gz = np.zeros_like(z.data)
                for ky in range(kh):
                    for kx in range(kw):
                        gz += np.roll(np.einsum("oc,boyx->bcyx", w.data[:, :, ky, kx], g),
                                      shift=(ky - ph, kx - pw), axis=(2, 3))
                z.accumulate_grad(gz)
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for ky in range(kh):
                    for kx in range(kw):
                        gw[:, :, ky, kx] = np.einsum(
                            "boyx,bcyx->oc", g,
                            np.roll(z.data, shift=(ph - ky, pw - kx), axis=(2, 3)))
                w.accumulate_grad(gw)

    return T.from_op(out, inputs, backward)


class VarianceFloorCounter:
    """Counts degenerate zero-variance channels hit during normalization."""

    def __init__(self):
        self.hits = 0


def batchnorm(z: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8,
              mu: Tensor | None = None, var: Tensor | None = None,
              counter: VarianceFloorCounter | None = None) -> Tensor:
    """Per-channel normalization over batch and spatial dims.

    Training mode computes batch statistics (pass mu=var=None); eval mode
    normalizes with the supplied running statistics.  Variance is
    population variance; eps under the square root floors degenerate
    channels (counted, never an error).
    """
    if mu is None:
        mu = T.reduce_mean(z, axis=(0, 2, 3), keepdims=True)
        var = T.reduce_var(z, axis=(0, 2, 3), keepdims=True)
        if counter is not None:
            counter.hits += int(np.count_nonzero(var.data == 0.0))
    sigma = T.sqrt(var + Tensor(np.full_like(var.data, eps)))
    zhat = (z - mu) / sigma
    C = gamma.data.size
    return T.reshape(gamma, (1, C, 1, 1)) * zhat + T.reshape(beta, (1, C, 1, 1))


def layernorm(z: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each token over the embedding dimension.

    z: (..., D, P); statistics are per sample and token, parameters per
    embedding dimension.
    """
    mu = T.reduce_mean(z, axis=-2, keepdims=True)
    var = T.reduce_var(z, axis=-2, keepdims=True)
    sigma = T.sqrt(var + Tensor(np.full_like(var.data, eps)))
    zhat = (z - mu) / sigma
    D = gamma.data.size
    return T.reshape(gamma, (D, 1)) * zhat + T.reshape(beta, (D, 1))


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(a, axes)


def attention_block(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor):
    """Single-head self-attention over token columns.

    z: (..., D, P).  Column k of the returned attention matrix is the
    softmax over j of (wk z_j)^T (wq z_k); columns sum to 1.  Returns
    (output, attention) with output column k = sum_j (wv z_j) attn[j, k].
    """
    q = wq @ z
    k = wk @ z
    v = wv @ z
    scores = _swap_last(k) @ q
    attn = T.softmax(scores, axis=-2)
    out = v @ attn
    return out, attn


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on trailing feature axis: x (B, F) @ w (F, C) + b (C,)."""
    return x @ w + b


def mlp_tokens(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron applied per token column of z (..., D, P)."""
    h = T.relu(w1 @ z + T.reshape(b1, (b1.data.size, 1)))
    return w2 @ h + T.reshape(b2, (b2.data.size, 1))


def conv_bn_relu_block(z: Tensor, w: Tensor, gamma: Tensor, beta: Tensor,
                       padding: str = "circular", eps: float = 1e-8,
                       mu: Tensor | None = None, var: Tensor | None = None,
                       counter: VarianceFloorCounter | None = None) -> Tensor:
    """relu(BN(Conv(z))) with batch statistics unless (mu, var) are given."""
    return T.relu(batchnorm(conv2d(z, w, padding=padding), gamma, beta,
                            eps=eps, mu=mu, var=var, counter=counter))


def two_layer_vit_forward(x: Tensor, params: dict, h: int | None = None,
                          delta: Tensor | None = None):
    """Forward pass of the two-layer single-head ViT used by the theory bench.

    x: (d, P) or (B, d, P).  Key/value matrices act on the token-position
    axis (right multiplication), query/key scaling is folded into them.
    h=1 adds delta (d x P) to the input tokens; h=2 adds delta (m x P) to
    the first layer's output tokens.  Returns (score, attn1, attn2) where
    score is the network's scalar output per sample.
    """
    if h not in (None, 1, 2):
        raise ValueError(f"invalid prompt layer h={h}; expected 1 or 2")
    wq1, wk1, wv1 = params["wq1"], params["wk1"], params["wv1"]
    wq2, wk2, wv2 = params["wq2"], params["wk2"], params["wv2"]
    wo1, wo2, head = params["wo1"], params["wo2"], params["head"]

    if h == 1 and delta is not None:
        x = x + (delta if delta.shape == x.shape else T.broadcast_to(delta, x.shape))
    s1 = _swap_last(x @ wk1) @ (x @ wq1)
    attn1 = T.softmax(s1, axis=-2)
    z = T.relu(wo1 @ ((x @ wv1) @ attn1))
    if h == 2 and delta is not None:
        z = z + (delta if delta.shape == z.shape else T.broadcast_to(delta, z.shape))
    s2 = _swap_last(z @ wk2) @ (z @ wq2)
    attn2 = T.softmax(s2, axis=-2)
    f = T.relu(wo2 @ ((z @ wv2) @ attn2))
    score = T.reduce_sum(head * f, axis=(-2, -1))
    return score, attn1, attn2


# ---------------------------------------------------------------------------
# layer blocks


def _param(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Block:
    kind = "?"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen = False

    def forward(self, z: Tensor, params: dict[str, Tensor], train_mode: bool,
                extras: dict | None = None) -> Tensor:
        raise NotImplementedError

    def norm_param_pairs(self) -> list[tuple[str, str]]:
        """(gamma_name, beta_name) pairs of normalization parameters."""
        return []

    def config(self) -> dict:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        pass


class Conv2dBlock(Block):
    kind = "Conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, padding: str,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.padding = padding
        self.params["w"] = _param(rng, out_ch, in_ch, kernel, kernel,
                                  scale=np.sqrt(2.0 / fan_in))
        if bias:
            self.params["b"] = Tensor(np.zeros(out_ch), requires_grad=True)

    def forward(self, z, params, train_mode, extras=None):
        return conv2d(z, params["w"], params.get("b"), padding=self.padding)

    def config(self):
        w = self.params["w"]
        return {"in_ch": w.shape[1], "out_ch": w.shape[0], "kernel": w.shape[2],
                "padding": self.padding, "bias": "b" in self.params}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg["padding"],
                   rng, bias=cfg["bias"])


class ConvBnReluBlock(Block):
    """Conv -> BatchNorm -> relu; running statistics kept for eval mode."""

    kind = "ConvBnRelu"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, padding: str,
                 rng: np.random.Generator, eps: float = 1e-8, momentum: float = 0.1):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.padding = padding
        self.eps = eps
        self.momentum = momentum
        self.params["w"] = _param(rng, out_ch, in_ch, kernel, kernel,
                                  scale=np.sqrt(2.0 / fan_in))
        self.params["gamma"] = Tensor(np.ones(out_ch), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(out_ch), requires_grad=True)
        self.running_mean = np.zeros(out_ch)
        self.running_var = np.ones(out_ch)
        self.floor_counter = VarianceFloorCounter()

    def forward(self, z, params, train_mode, extras=None):
        c = conv2d(z, params["w"], padding=self.padding)
        if train_mode:
            mu = c.data.mean(axis=(0, 2, 3))
            var = c.data.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            out = batchnorm(c, params["gamma"], params["beta"], eps=self.eps,
                            counter=self.floor_counter)
        else:
            C = self.running_mean.size
            out = batchnorm(c, params["gamma"], params["beta"], eps=self.eps,
                            mu=Tensor(self.running_mean.reshape(1, C, 1, 1)),
                            var=Tensor(self.running_var.reshape(1, C, 1, 1)))
        return T.relu(out)

    def norm_param_pairs(self):
        return [("gamma", "beta")]

    def config(self):
        w = self.params["w"]
        return {"in_ch": w.shape[1], "out_ch": w.shape[0], "kernel": w.shape[2],
                "padding": self.padding, "eps": self.eps, "momentum": self.momentum}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg["padding"], rng,
                   eps=cfg["eps"], momentum=cfg["momentum"])

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, bufs):
        self.running_mean = np.asarray(bufs["running_mean"], dtype=np.float64)
        self.running_var = np.asarray(bufs["running_var"], dtype=np.float64)


class TransformerBlock(Block):
    """Pre-norm block: z += attn(LN(z)); z += MLP(LN(z)). Single head."""

    kind = "Transformer"

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        s = 1.0 / np.sqrt(dim)
        for name in ("wq", "wk", "wv"):
            self.params[name] = _param(rng, dim, dim, scale=s)
        self.params["ln1_gamma"] = Tensor(np.ones(dim), requires_grad=True)
        self.params["ln1_beta"] = Tensor(np.zeros(dim), requires_grad=True)
        self.params["ln2_gamma"] = Tensor(np.ones(dim), requires_grad=True)
        self.params["ln2_beta"] = Tensor(np.zeros(dim), requires_grad=True)
        self.params["w1"] = _param(rng, hidden, dim, scale=np.sqrt(2.0 / dim))
        self.params["b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        self.params["w2"] = _param(rng, dim, hidden, scale=np.sqrt(2.0 / hidden))
        self.params["b2"] = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, z, params, train_mode, extras=None):
        t = layernorm(z, params["ln1_gamma"], params["ln1_beta"], eps=self.eps)
        a, attn = attention_block(t, params["wq"], params["wk"], params["wv"])
        if extras is not None:
            extras["attn"] = attn.data.copy()
        z = z + a
        t2 = layernorm(z, params["ln2_gamma"], params["ln2_beta"], eps=self.eps)
        return z + mlp_tokens(t2, params["w1"], params["b1"], params["w2"], params["b2"])

    def norm_param_pairs(self):
        return [("ln1_gamma", "ln1_beta"), ("ln2_gamma", "ln2_beta")]

    def config(self):
        return {"dim": self.params["wq"].shape[0], "hidden": self.params["w1"].shape[0],
                "eps": self.eps}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["dim"], cfg["hidden"], rng, eps=cfg["eps"])


class PatchifyBlock(Block):
    """Split (B, C, H, W) images into non-overlapping patch tokens (B, C*ph*pw, P)."""

    kind = "Patchify"

    def __init__(self, channels: int, height: int, width: int, patch: int):
        super().__init__()
        if height % patch or width % patch:
            raise ShapeError(f"patch {patch} does not tile {height}x{width}")
        self.channels, self.height, self.width, self.patch = channels, height, width, patch

    def forward(self, z, params, train_mode, extras=None):
        B = z.shape[0]
        c, hh, ww, p = self.channels, self.height, self.width, self.patch
        hp, wp = hh // p, ww // p
        t = T.reshape(z, (B, c, hp, p, wp, p))
        t = T.transpose(t, (0, 1, 3, 5, 2, 4))
        return T.reshape(t, (B, c * p * p, hp * wp))

    def config(self):
        return {"channels": self.channels, "height": self.height,
                "width": self.width, "patch": self.patch}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["channels"], cfg["height"], cfg["width"], cfg["patch"])


class MeanPoolBlock(Block):
    """Global average pool: images over (H, W), token maps over P."""

    kind = "Pool"

    def __init__(self, mode: str):
        super().__init__()
        if mode not in ("image", "tokens"):
            raise ValueError(f"unknown pool mode {mode!r}")
        self.mode = mode

    def forward(self, z, params, train_mode, extras=None):
        axis = (-2, -1) if self.mode == "image" else -1
        return T.reduce_mean(z, axis=axis)

    def config(self):
        return {"mode": self.mode}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["mode"])


class HeadBlock(Block):
    kind = "Head"

    def __init__(self, in_features: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.params["w"] = _param(rng, in_features, n_classes,
                                  scale=1.0 / np.sqrt(in_features))
        self.params["b"] = Tensor(np.zeros(n_classes), requires_grad=True)

    def forward(self, z, params, train_mode, extras=None):
        return linear(z, params["w"], params["b"])

    def config(self):
        w = self.params["w"]
        return {"in_features": w.shape[0], "n_classes": w.shape[1]}

    @classmethod
    def from_config(cls, cfg, rng):
        return cls(cfg["in_features"], cfg["n_classes"], rng)


_BLOCK_REGISTRY = {cls.kind: cls for cls in
                   (Conv2dBlock, ConvBnReluBlock, TransformerBlock, PatchifyBlock,
                    MeanPoolBlock, HeadBlock)}


# ---------------------------------------------------------------------------
# the model container


class LayeredModel:
    """Ordered blocks with named prompt insertion points.

    Hook site "site_i" is the boundary before block i; site_0 is the raw
    input and the last site sits just before the pooling block.  With a
    zero prompt, a hooked forward is bitwise identical to a plain one.
    """

    def __init__(self, arch: str, blocks: list[Block], pool_index: int):
        self.arch = arch
        self.blocks = blocks
        self.pool_index = pool_index

    @property
    def hook_sites(self) -> list[str]:
        return [f"site_{i}" for i in range(self.pool_index + 1)]

    def site_index(self, site: str) -> int:
        if site not in self.hook_sites:
            raise KeyError(f"unknown hook site {site!r}; have {self.hook_sites}")
        return int(site.split("_")[1])

    def freeze(self) -> "LayeredModel":
        for b in self.blocks:
            b.frozen = True
            for p in b.params.values():
                p.requires_grad = False
        return self

    def all_params(self) -> dict[str, Tensor]:
        return {f"block{i}.{name}": p
                for i, b in enumerate(self.blocks) for name, p in b.params.items()}

    def n_params(self) -> int:
        return sum(p.size for p in self.all_params().values())

    def norm_widths(self) -> list[int]:
        return [b.params[g].size for b in self.blocks for g, _ in b.norm_param_pairs()]

    def site_shape(self, site: str, x_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample activation shape at a site, from a dry-run forward."""
        probe = Tensor(np.zeros((1,) + tuple(x_shape)))
        _, acts = self.forward(probe, collect=True)
        return acts[site].shape[1:]

    def forward(self, x, site: str | None = None, delta: Tensor | None = None,
                train_mode: bool = False,
                overrides: dict[tuple[int, str], Tensor] | None = None,
                collect: bool = False, collect_extras: dict | None = None):
        """Run the model; optionally inject `delta` at `site`.

        Returns the output tensor, or (output, {site: activation}) when
        `collect` is set.  `overrides` substitutes specific block
        parameters, leaving the model itself untouched.
        """
        z = x if isinstance(x, Tensor) else Tensor(x)
        inject_at = self.site_index(site) if site is not None else None
        acts: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            if i <= self.pool_index:
                if inject_at == i:
                    if delta.shape != z.shape:
                        if delta.shape != z.shape[1:]:
                            raise ShapeError(
                                f"prompt shape {delta.shape} does not match activation "
                                f"{z.shape[1:]} at site_{i}")
                        z = z + T.broadcast_to(delta, z.shape)
                    else:
                        z = z + delta
                if collect:
                    acts[f"site_{i}"] = z
            params = block.params
            if overrides:
                merged = {k: overrides.get((i, k), v) for k, v in params.items()}
                params = merged
            extras = None
            if collect_extras is not None:
                extras = {}
            z = block.forward(z, params, train_mode, extras=extras)
            if extras:
                for k, v in extras.items():
                    collect_extras[f"block{i}.{k}"] = v
        if collect:
            return z, acts
        return z


def forward_with_hook(model: LayeredModel, x, site: str, delta: Tensor,
                      train_mode: bool = False):
    """Forward with the activation at `site` replaced by activation + delta.

    Returns (output, activations) with every site activation recorded.
    Blocks before the site never enter the tape when only the prompt
    requires gradients.
    """
    return model.forward(x, site=site, delta=delta, train_mode=train_mode, collect=True)


# ---------------------------------------------------------------------------
# toy architectures


def make_toy_cnn(rng: np.random.Generator, in_ch: int = 1, image: int = 8,
                 channels: int = 8, n_blocks: int = 4, n_classes: int = 2) -> LayeredModel:
    blocks: list[Block] = [Conv2dBlock(in_ch, channels, 1, "zero", rng)]
    for _ in range(n_blocks):
        blocks.append(ConvBnReluBlock(channels, channels, 3, "circular", rng))
    pool_index = len(blocks)
    blocks.append(MeanPoolBlock("image"))
    blocks.append(HeadBlock(channels, n_classes, rng))
    return LayeredModel("cnn", blocks, pool_index)


def make_toy_vit(rng: np.random.Generator, dim: int = 8, tokens: int = 8,
                 hidden: int = 16, n_blocks: int = 4, n_classes: int = 2,
                 patchify: tuple[int, int, int, int] | None = None) -> LayeredModel:
    """Token-input ViT; pass patchify=(C, H, W, patch) to consume images."""
    blocks: list[Block] = []
    if patchify is not None:
        c, hh, ww, p = patchify
        blocks.append(PatchifyBlock(c, hh, ww, p))
        dim = c * p * p
    for _ in range(n_blocks):
        blocks.append(TransformerBlock(dim, hidden, rng))
    pool_index = len(blocks)
    blocks.append(MeanPoolBlock("tokens"))
    blocks.append(HeadBlock(dim, n_classes, rng))
    return LayeredModel("vit", blocks, pool_index)


# ---------------------------------------------------------------------------
# parameter save/load


def save_model(model: LayeredModel, path: str) -> None:
    """Write a JSON manifest of named f64 arrays; byte-stable given a seed."""
    doc = {"arch": model.arch, "pool_index": model.pool_index, "blocks": []}
    for block in model.blocks:
        doc["blocks"].append({
            "kind": block.kind,
            "config": block.config(),
            "frozen": block.frozen,
            "params": {name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                       for name, p in sorted(block.params.items())},
            "buffers": {name: arr.tolist() for name, arr in sorted(block.buffers().items())},
        })
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_model(path: str) -> LayeredModel:
    with open(path) as fh:
        doc = json.load(fh)
    rng = np.random.default_rng(0)  # shapes only; parameters are overwritten
    blocks = []
    for bdoc in doc["blocks"]:
        cls = _BLOCK_REGISTRY[bdoc["kind"]]
        block = cls.from_config(bdoc["config"], rng)
        block.frozen = bdoc["frozen"]
        for name, spec in bdoc["params"].items():
            arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            block.params[name] = Tensor(arr, requires_grad=not bdoc["frozen"])
        if bdoc["buffers"]:
            block.set_buffers({k: np.array(v, dtype=np.float64)
                               for k, v in bdoc["buffers"].items()})
        blocks.append(block)
    return LayeredModel(doc["arch"], blocks, doc["pool_index"])
