"""Representation analysis: average attention distance, linear CKA
similarity, layer-preference sweeps, and the constructive check that an
additive activation prompt matches normalization tuning under unit
scaling.
"""

from __future__ import annotations

import numpy as np

from . import prompting
from .layers import Conv2dBlock, ConvBnReluBlock, LayeredModel, TransformerBlock, conv2d
from .prompting import PromptSpec, TrainConfig
from .tensor import ShapeError, Tensor


class EquivalencePreconditionError(ValueError):
    """A stated precondition of the prompt/norm-tune equivalence fails."""


class UndefinedSimilarityError(ValueError):
    """CKA is undefined for constant (zero-variance) activations."""


# ---------------------------------------------------------------------------
# average attention distance


def _index_distance(i: np.ndarray, j: np.ndarray, P: int, distance: str) -> np.ndarray:
    d = np.abs(i - j)
    if distance == "circular":
        return np.minimum(d, P - d)
    if distance == "absolute":
        return d
    raise ValueError(f"unknown distance convention {distance!r}")


def avg_attention_distance(record, distance: str = "absolute") -> float:
    """Mean over queries of the index distance to the argmax-scoring key.

    `record` is either a (P, P) score/attention matrix with entry [j, i]
    scoring key j against query i, or a (queries, keys) pair of (d, P)
    matrices.  Among keys tied at the maximum score, the one nearest the
    query wins (then the smallest index); a sharp maximum reduces this to
    the plain argmax.
    """
    if isinstance(record, tuple):
        queries, keys = record
        scores = np.asarray(keys, dtype=np.float64).T @ np.asarray(queries, dtype=np.float64)
    else:
        scores = np.asarray(record, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"attention record must be square, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("attention scores contain NaN or Inf")
    P = scores.shape[0]
    total = 0.0
    js = np.arange(P)
    for i in range(P):
        col = scores[:, i]
        ties = np.flatnonzero(col == col.max())
        dists = _index_distance(np.full(ties.shape, i), ties, P, distance)
        total += float(dists.min())
    return total / P


# ---------------------------------------------------------------------------
# linear CKA


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between activation matrices (n samples by features).

    ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centred
    inputs; lies in [0, 1], symmetric, invariant to orthogonal transforms
    and isotropic scaling of either argument.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA needs (n, p) and (n, q) inputs, got {x.shape}, {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        raise UndefinedSimilarityError("zero-variance activations; similarity undefined")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xx * yy))


def layer_activations(model: LayeredModel, x: np.ndarray) -> dict[str, np.ndarray]:
    """Flattened per-site activations, one (n, features) matrix per site."""
    _, acts = model.forward(Tensor(np.asarray(x, dtype=np.float64)), collect=True)
    return {site: a.data.reshape(a.shape[0], -1) for site, a in acts.items()}


def cka_matrix(model_a: LayeredModel, model_b: LayeredModel, x: np.ndarray):
    """Layer-pair CKA table between two models on shared inputs."""
    acts_a = layer_activations(model_a, x)
    acts_b = layer_activations(model_b, x)
    sites_a = sorted(acts_a, key=lambda s: int(s.split("_")[1]))
    sites_b = sorted(acts_b, key=lambda s: int(s.split("_")[1]))
    mat = np.zeros((len(sites_a), len(sites_b)))
    for i, sa in enumerate(sites_a):
        for j, sb in enumerate(sites_b):
            mat[i, j] = linear_cka(acts_a[sa], acts_b[sb])
    return sites_a, sites_b, mat


# ---------------------------------------------------------------------------
# layer-preference sweep


def layer_sweep(model: LayeredModel, train_xy, test_xy, cfg: TrainConfig,
                lr_grid=prompting.LR_GRID_DEFAULT,
                methods=("AP", "VP_additive", "NormTune"),
                shape_mode: str = "full"):
    """Train the adaptation at every hook site (site-independent methods
    once), best-over-lr per row; divergent runs are recorded and skipped
    in the ranking.  Returns (run_rows, summary_rows).
    """
    x_train, y_train = train_xy
    x_shape = x_train.shape[1:]
    run_rows: list[dict] = []
    summary_rows: list[dict] = []

    def run_one(spec: PromptSpec, lr: float) -> dict:
        adaptation = prompting.build_adaptation(model, spec, x_shape)
        rcfg = TrainConfig(optimizer=cfg.optimizer, learning_rate=lr,
                           epochs=cfg.epochs, batch_size=cfg.batch_size,
                           seed=cfg.seed, weight_decay=cfg.weight_decay)
        rec = prompting.train(adaptation, train_xy, test_xy, rcfg, loss="ce")
        return {"seed": cfg.seed, "method": spec.method,
                "site": spec.site if spec.site is not None else "",
                "lr": lr, "epochs": cfg.epochs, "n_train": x_train.shape[0],
                "param_count": rec.param_count,
                "final_train_acc": rec.final_train_acc,
                "final_test_acc": rec.final_test_acc,
                "diverged": int(rec.diverged)}

    def best_row(rows: list[dict]) -> dict:
        ok = [r for r in rows if not r["diverged"]]
        pool = ok if ok else rows
        return max(pool, key=lambda r: r["final_test_acc"])

    ap_best: list[dict] = []
    if "AP" in methods:
        for site in model.hook_sites:
            rows = [run_one(PromptSpec("AP", site=site, shape_mode=shape_mode), lr)
                    for lr in lr_grid]
            run_rows.extend(rows)
            b = best_row(rows)
            ap_best.append({"method": "AP", "site": site,
                            "best_lr": b["lr"], "best_test_acc": b["final_test_acc"],
                            "all_diverged": int(all(r["diverged"] for r in rows))})
    for method in methods:
        if method == "AP":
            continue
        rows = [run_one(PromptSpec(method), lr) for lr in lr_grid]
        run_rows.extend(rows)
        b = best_row(rows)
        summary_rows.append({"method": method, "site": "",
                             "best_lr": b["lr"], "best_test_acc": b["final_test_acc"],
                             "all_diverged": int(all(r["diverged"] for r in rows)),
                             "is_argmax_site": 0})
    if ap_best:
        top = max(range(len(ap_best)), key=lambda k: ap_best[k]["best_test_acc"])
        for k, row in enumerate(ap_best):
            row["is_argmax_site"] = int(k == top)
        summary_rows = ap_best + summary_rows
    return run_rows, summary_rows


def best_site_index(summary_rows: list[dict]) -> int:
    ap_rows = [r for r in summary_rows if r["method"] == "AP"]
    row = max(ap_rows, key=lambda r: r["best_test_acc"])
    return int(row["site"].split("_")[1])


def is_deep_site(site_index: int, n_sites: int) -> bool:
    """Deeper half of the hook sites (site indices count from the input)."""
    return site_index >= n_sites / 2


# ---------------------------------------------------------------------------
# prompt <-> norm-tune equivalence (unit-scaling construction)


def _affine_norm(z: np.ndarray, slope: np.ndarray, intercept: np.ndarray,
                 channel_axis: int) -> np.ndarray:
    # normalization written as slope*z + intercept; the rearrangement keeps
    # the zero-prompt case exact instead of accumulating (z-mu)+mu rounding
    shape = [1] * z.ndim
    shape[channel_axis] = slope.size
    return slope.reshape(shape) * z + intercept.reshape(shape)


def normtune_from_ap_tokens(z: np.ndarray, delta: np.ndarray, eps: float = 1e-8,
                            tol: float = 1e-9):
    """Token/LayerNorm case: with delta shared across tokens and a batch
    whose per-token means and deviations agree, the layer-norm parameters
    gamma = sigma, beta = delta + mu reproduce z + delta.

    Returns (gamma, beta, max |prompted - normalized|).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"token batch must be (B, D, P), got {z.shape}")
    B, D, P = z.shape
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 2:
        if not np.all(delta == delta[:, :1]):
            raise EquivalencePreconditionError(
                "prompt is not shared across tokens (delta columns differ)")
        delta_vec = delta[:, 0]
    elif delta.ndim == 1:
        delta_vec = delta
    else:
        raise ShapeError(f"delta must be (D,) or (D, P), got {delta.shape}")
    if delta_vec.size != D:
        raise ShapeError(f"delta has {delta_vec.size} entries for dimension {D}")

    mus = z.mean(axis=1)                      # (B, P) per-sample per-token
    sigmas = np.sqrt(z.var(axis=1) + eps)
    if np.max(np.abs(mus - mus.flat[0])) > tol:
        raise EquivalencePreconditionError(
            "per-token means are not equal across the batch")
    if np.max(np.abs(sigmas - sigmas.flat[0])) > tol:
        raise EquivalencePreconditionError(
            "per-token deviations are not equal across the batch (unit scaling "
            "gamma/sigma = 1 needs a common sigma)")
    mu = mus.flat[0]
    sigma = sigmas.flat[0]

    gamma = np.full(D, sigma)
    beta = delta_vec + mu
    slope = gamma / sigma                      # exactly ones
    intercept = beta - slope * mu
    normalized = _affine_norm(z, slope, intercept, channel_axis=1)
    prompted = z + delta_vec[None, :, None]
    return gamma, beta, float(np.max(np.abs(prompted - normalized)))


def normtune_from_ap_conv(z_in: np.ndarray, w: np.ndarray, delta: np.ndarray,
                          padding: str = "circular", eps: float = 1e-8):
    """Conv/BatchNorm case: with a spatially uniform prompt before a 1x1 or
    circularly padded conv, gamma = sigma and beta = w.delta + mu make the
    batch-normalized unprompted path equal the prompted convolution.

    Returns (gamma, beta, max |conv(z+delta) - BN(conv(z))|).
    """
    z_in = np.asarray(z_in, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z_in.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"need (B,C,H,W) input and (O,C,kh,kw) weight, "
                         f"got {z_in.shape}, {w.shape}")
    delta = np.asarray(delta, dtype=np.float64)
    C = z_in.shape[1]
    if delta.ndim == 3:
        if not np.all(delta == delta[:, :1, :1]):
            raise EquivalencePreconditionError(
                "prompt is not spatially uniform (delta varies over positions)")
        delta_vec = delta[:, 0, 0]
    elif delta.ndim == 1:
        delta_vec = delta
    else:
        raise ShapeError(f"delta must be (C,) or (C, H, W), got {delta.shape}")
    if delta_vec.size != C:
        raise ShapeError(f"delta has {delta_vec.size} entries for {C} channels")
    if w.shape[2] != 1 and padding != "circular":
        raise EquivalencePreconditionError(
            "conv must be 1x1 or circularly padded for a uniform prompt to "
            "shift every output position equally")

    base = conv2d(Tensor(z_in), Tensor(w), padding=padding).data
    mu = base.mean(axis=(0, 2, 3))
    sigma = np.sqrt(base.var(axis=(0, 2, 3)) + eps)
    w_delta = np.einsum("ockl,c->o", w, delta_vec)

    gamma = sigma.copy()
    beta = w_delta + mu
    slope = gamma / sigma                      # exactly ones
    intercept = beta - slope * mu
    normalized = _affine_norm(base, slope, intercept, channel_axis=1)
    prompted = conv2d(Tensor(z_in + delta_vec[None, :, None, None]),
                      Tensor(w), padding=padding).data
    return gamma, beta, float(np.max(np.abs(prompted - normalized)))


def normtune_from_ap(model: LayeredModel, site: str, delta: np.ndarray,
                     batch: np.ndarray):
    """Dispatch on the block following `site`: conv-batch-norm blocks use
    the convolutional construction, transformer blocks the token one.
    """
    idx = model.site_index(site)
    _, acts = model.forward(Tensor(np.asarray(batch, dtype=np.float64)), collect=True)
    z = acts[site].data
    block = model.blocks[idx]
    if isinstance(block, (ConvBnReluBlock, Conv2dBlock)):
        eps = getattr(block, "eps", 1e-8)
        return normtune_from_ap_conv(z, block.params["w"].data, delta,
                                     padding=block.padding, eps=eps)
    if isinstance(block, TransformerBlock):
        return normtune_from_ap_tokens(z, delta, eps=block.eps)
    raise EquivalencePreconditionError(
        f"block after {site} is {block.kind}; equivalence needs a conv+BN or "
        f"layer-norm block")


# ---------------------------------------------------------------------------
# constructions that satisfy the equivalence preconditions exactly


def make_equal_stat_token_batch(B: int, D: int, P: int, rng: np.random.Generator,
                                mu: float = 0.0, spread: float = 1.0) -> np.ndarray:
    """Token batch whose per-token mean and deviation are bitwise equal.

    Each token is mu + spread * (balanced +/-1 pattern), so the mean is
    exactly mu and the population variance exactly spread^2 for every
    token.  D must be even.
    """
    if D % 2 != 0:
        raise ValueError("token dimension must be even for balanced patterns")
    base = np.concatenate([np.ones(D // 2), -np.ones(D // 2)])
    z = np.empty((B, D, P))
    for b in range(B):
        for p in range(P):
            z[:, :, p][b] = mu + spread * rng.permutation(base)
    return z
