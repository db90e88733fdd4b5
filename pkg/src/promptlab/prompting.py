"""Adaptation methods for a frozen model: additive prompts at a hook site
(input-level prompting is the site_0 case), resize-and-concatenate input
prompts, normalization tuning, and the linear probe.  Includes the shared
ERM training loop, SGD/Adam, and exact parameter counting.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .layers import HeadBlock, LayeredModel

METHODS = ("VP_additive", "VP_resize_concat", "AP", "NormTune", "LinearProbe")
DIVERGENCE_THRESHOLD = 1e6


@dataclass
class PromptSpec:
    """Which adaptation method, where it attaches, and its prompt shape."""

    method: str
    site: str | None = None
    shape_mode: str = "full"  # full | shared_spatial | shared_token
    train_head: bool = True
    resize_inner: tuple[int, int] | None = None  # VP_resize_concat only

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method.startswith("VP") and self.site not in (None, "site_0"):
            raise ValueError("VP methods attach at site_0 only")
        if self.method in ("NormTune", "LinearProbe") and self.site is not None:
            raise ValueError(f"{self.method} takes no hook site")


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "sgd" | "adam"
    learning_rate: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# lr grid for sweeps; the choice of grid points is ours, not prescribed
LR_GRID_DEFAULT = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


@dataclass
class RunRecord:
    """One training run: config snapshot, loss trace, and final metrics."""

    config: dict
    seed: int
    losses: list[float]
    final_train_acc: float
    final_test_acc: float
    param_count: int
    wall_time_s: float
    diverged: bool
    steps: int
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= self.lr * g


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: list[Tensor]):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate, cfg.weight_decay)
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


# ---------------------------------------------------------------------------
# resize-and-concatenate template


def bilinear_resize(images: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of (B, C, H, W) image data."""
    B, C, H, W = images.shape
    oh, ow = out_hw
    ys = np.linspace(0.0, H - 1.0, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(0.0, W - 1.0, ow) if ow > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = images[:, :, y0][:, :, :, x0] * (1 - wx) + images[:, :, y0][:, :, :, x1] * wx
    bot = images[:, :, y1][:, :, :, x0] * (1 - wx) + images[:, :, y1][:, :, :, x1] * wx
    return top * (1 - wy) + bot * wy


def frame_mask(target_hw: tuple[int, int], inner_hw: tuple[int, int]) -> np.ndarray:
    """Boolean border mask: True outside the centred inner window."""
    th, tw = target_hw
    ih, iw = inner_hw
    if ih > th or iw > tw:
        raise ShapeError(f"inner {inner_hw} exceeds target {target_hw}")
    y0, x0 = (th - ih) // 2, (tw - iw) // 2
    mask = np.ones((th, tw), dtype=bool)
    mask[y0:y0 + ih, x0:x0 + iw] = False
    return mask


def resize_concat_template(x: Tensor, delta: Tensor, target_hw: tuple[int, int],
                           inner_hw: tuple[int, int]) -> Tensor:
    """Resize the image into the centre and fill the border frame with delta.

    x: (B, C, H, W) data (never trained); delta: flat (C * frame) values.
    Gradients flow into delta only.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    B, C, _, _ = xd.shape
    th, tw = target_hw
    mask2d = frame_mask(target_hw, inner_hw)
    n_frame = int(mask2d.sum())
    if delta.size != C * n_frame:
        raise ShapeError(
            f"border prompt has {delta.size} values but the frame holds {C * n_frame}")
    ih, iw = inner_hw
    y0, x0 = (th - ih) // 2, (tw - iw) // 2
    base = np.zeros((B, C, th, tw))
    base[:, :, y0:y0 + ih, x0:x0 + iw] = bilinear_resize(xd, inner_hw)
    mask3d = np.broadcast_to(mask2d, (C, th, tw))
    canvas = T.masked_embed(delta, mask3d, np.zeros((C, th, tw)))
    return Tensor(base) + T.broadcast_to(canvas, (B, C, th, tw))


# ---------------------------------------------------------------------------
# adaptation construction


class Adaptation:
    """Trainable parameter set plus a forward closure over a frozen model."""

    def __init__(self, model: LayeredModel, spec: PromptSpec, x_shape: tuple[int, ...]):
        self.model = model
        self.spec = spec
        self.x_shape = tuple(x_shape)
        self.trainables: dict[str, Tensor] = {}
        self.delta: Tensor | None = None
        self._site: str | None = None
        self._overrides: dict[tuple[int, str], Tensor] = {}

        head_idx = next(i for i, b in enumerate(model.blocks) if isinstance(b, HeadBlock))
        method = spec.method

        if method in ("AP", "VP_additive"):
            self._site = spec.site or "site_0"
            site_shape = model.site_shape(self._site, x_shape)
            self.delta = self._make_delta(site_shape, spec.shape_mode)
            self.trainables["delta"] = self.delta
        elif method == "VP_resize_concat":
            if spec.resize_inner is None:
                raise ValueError("VP_resize_concat needs resize_inner=(h, w)")
            if len(x_shape) != 3:
                raise ShapeError("VP_resize_concat expects image input (C, H, W)")
            C, H, W = x_shape
            n_frame = int(frame_mask((H, W), spec.resize_inner).sum())
            self.delta = Tensor(np.zeros(C * n_frame), requires_grad=True)
            self.trainables["delta"] = self.delta
        elif method == "NormTune":
            for i, block in enumerate(model.blocks):
                for g, b in block.norm_param_pairs():
                    for name in (g, b):
                        clone = Tensor(block.params[name].data.copy(), requires_grad=True)
                        self.trainables[f"block{i}.{name}"] = clone
                        self._overrides[(i, name)] = clone
        elif method == "LinearProbe":
            pass
        else:  # pragma: no cover - guarded by PromptSpec
            raise ValueError(method)

        if spec.train_head or method == "LinearProbe":
            for name in ("w", "b"):
                clone = Tensor(model.blocks[head_idx].params[name].data.copy(),
                               requires_grad=True)
                self.trainables[f"head.{name}"] = clone
                self._overrides[(head_idx, name)] = clone

    def _make_delta(self, site_shape: tuple[int, ...], mode: str) -> Tensor:
        # zero-init so the first forward equals the frozen model exactly
        if mode == "full":
            return Tensor(np.zeros(site_shape), requires_grad=True)
        if mode == "shared_spatial":
            if len(site_shape) != 3:
                raise ShapeError(
                    f"shared_spatial needs a (C, H, W) activation, got {site_shape}")
            return Tensor(np.zeros(site_shape[0]), requires_grad=True)
        if mode == "shared_token":
            if len(site_shape) != 2:
                raise ShapeError(
                    f"shared_token needs a (D, P) activation, got {site_shape}")
            return Tensor(np.zeros(site_shape[0]), requires_grad=True)
        raise ValueError(f"unknown shape_mode {mode!r}")

    def materialized_delta(self) -> Tensor | None:
        """Prompt tiled to the full per-sample activation shape."""
        if self.delta is None or self.spec.method == "VP_resize_concat":
            return None
        mode = self.spec.shape_mode
        if mode == "full":
            return self.delta
        site_shape = self.model.site_shape(self._site, self.x_shape)
        if mode == "shared_spatial":
            c = site_shape[0]
            return T.broadcast_to(T.reshape(self.delta, (c, 1, 1)), site_shape)
        c = site_shape[0]
        return T.broadcast_to(T.reshape(self.delta, (c, 1)), site_shape)

    def forward(self, x, train_mode: bool = False) -> Tensor:
        overrides = self._overrides or None
        if self.spec.method == "VP_resize_concat":
            xt = x if isinstance(x, Tensor) else Tensor(x)
            th, tw = self.x_shape[1], self.x_shape[2]
            prompted = resize_concat_template(xt, self.delta, (th, tw),
                                              self.spec.resize_inner)
            return self.model.forward(prompted, train_mode=train_mode,
                                      overrides=overrides)
        if self.delta is not None:
            return self.model.forward(x, site=self._site,
                                      delta=self.materialized_delta(),
                                      train_mode=train_mode, overrides=overrides)
        return self.model.forward(x, train_mode=train_mode, overrides=overrides)

    def param_count(self) -> int:
        return sum(p.size for p in self.trainables.values())

    def trainable_list(self) -> list[Tensor]:
        return [self.trainables[k] for k in sorted(self.trainables)]


def build_adaptation(model: LayeredModel, spec: PromptSpec,
                     x_shape: tuple[int, ...]) -> Adaptation:
    """Exactly the tensors to optimize plus the prompted forward closure.

    Prompts start at zero, NormTune parameters start at the model's
    pretrained values, and head weights are cloned when train_head is set;
    everything else stays frozen.
    """
    return Adaptation(model, spec, x_shape)


def count_params(model: LayeredModel, spec: PromptSpec,
                 x_shape: tuple[int, ...]) -> int:
    """Exact count of optimizer-visible scalars for this adaptation."""
    return build_adaptation(model, spec, x_shape).param_count()


# ---------------------------------------------------------------------------
# losses and the training loop


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch; labels are class indices."""
    B, C = logits.shape
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    ls = T.log_softmax(logits, axis=1)
    return T.scale(T.reduce_sum(ls * Tensor(onehot)), -1.0 / B)


def hinge_loss(score: Tensor, y, margin: float) -> Tensor:
    """max(0, margin - y*score), averaged when batched; flat at the kink."""
    y_t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    viol = T.relu(Tensor(np.full(score.shape, margin)) - y_t * score)
    if score.data.ndim == 0:
        return viol
    return T.reduce_mean(viol)


def predict(adaptation: Adaptation, x: np.ndarray, loss: str,
            chunk: int = 512) -> np.ndarray:
    # chunked to keep peak memory flat on large evaluation sets
    outs = []
    for lo in range(0, x.shape[0], chunk):
        out = adaptation.forward(x[lo:lo + chunk]).data
        outs.append(np.where(out >= 0, 1, -1) if loss == "hinge"
                    else np.argmax(out, axis=1))  # ties resolve to the lowest index
    return np.concatenate(outs)


def accuracy(adaptation: Adaptation, x: np.ndarray, y: np.ndarray, loss: str) -> float:
    return float(np.mean(predict(adaptation, x, loss) == y))


def train(adaptation: Adaptation, train_xy, test_xy, cfg: TrainConfig,
          loss: str = "ce", hinge_margin: float | None = None,
          max_steps: int | None = None, stop_at_zero_loss: bool = False,
          snapshot_every: int | None = None) -> RunRecord:
    """Run ERM on the adaptation's trainable parameters only.

    Deterministic given cfg.seed (shuffling included).  Divergence (loss
    above the threshold or non-finite) aborts the run and flags the
    record instead of raising.
    """
    x_train, y_train = train_xy
    x_test, y_test = test_xy
    n = x_train.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if loss == "hinge" and hinge_margin is None:
        raise ValueError("hinge loss requires hinge_margin")

    params = adaptation.trainable_list()
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    snapshots: list[float] = []
    diverged = False
    steps = 0
    start = time.perf_counter()

    done = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_all_zero = True
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            with T.Tape() as tape:
                out = adaptation.forward(xb, train_mode=False)
                if loss == "ce":
                    step_loss = cross_entropy(out, yb)
                else:
                    step_loss = hinge_loss(out, yb.astype(np.float64), hinge_margin)
                val = step_loss.item()
                losses.append(val)
                if val != 0.0:
                    epoch_all_zero = False
                if not np.isfinite(val) or val > DIVERGENCE_THRESHOLD:
                    diverged = True
                    done = True
                    break
                tape.backward(step_loss)
            opt.step()
            opt.zero_grad()
            steps += 1
            if snapshot_every and steps % snapshot_every == 0 and adaptation.delta is not None:
                snapshots.append(float(np.linalg.norm(adaptation.delta.data)))
            if max_steps is not None and steps >= max_steps:
                done = True
                break
        if done:
            break
        # an epoch of exactly-zero losses means the parameters never moved
        # and every training sample already satisfies the objective
        if stop_at_zero_loss and epoch_all_zero and not diverged:
            break

    wall = time.perf_counter() - start
    rec = RunRecord(
        config={"method": adaptation.spec.method, "site": adaptation.spec.site,
                "shape_mode": adaptation.spec.shape_mode,
                "train_head": adaptation.spec.train_head,
                "optimizer": cfg.optimizer, "learning_rate": cfg.learning_rate,
                "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "weight_decay": cfg.weight_decay, "loss": loss},
        seed=cfg.seed,
        losses=losses,
        final_train_acc=accuracy(adaptation, x_train, y_train, loss) if not diverged else 0.0,
        final_test_acc=accuracy(adaptation, x_test, y_test, loss) if not diverged else 0.0,
        param_count=adaptation.param_count(),
        wall_time_s=wall,
        diverged=diverged,
        steps=steps,
    )
    if snapshots:
        rec.extra["delta_norm_snapshots"] = snapshots
    if adaptation.delta is not None:
        rec.extra["delta_norm"] = float(np.linalg.norm(adaptation.delta.data))
    return rec
