"""Executable bench for the two-layer ViT theory: the four-pattern data
model, the hand-constructed pretrained model whose MLP neurons equal data
patterns and whose attention matrices are scaled permutations, hinge-loss
prompt training at layer 1 vs layer 2, the attention-distance check, and
the sample-complexity sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prompting
from .layers import two_layer_vit_forward
from .prompting import PromptSpec, RunRecord, TrainConfig
from .seeding import mix64, rng_for
from .tensor import Tensor


@dataclass
class SyntheticTaskSpec:
    """Parameters of the four-pattern token data model.

    Tokens are noisy copies of four unit patterns; exactly one token per
    sample carries the label-deciding pattern, the rest carry one of two
    background patterns with mutual overlap zeta in (-1, 0).
    """

    P: int = 8
    d: int = 4
    sigma_noise: float | None = None  # defaults to noise_scale_c / P
    zeta: float = -0.5
    d_A: int = 1
    n_train: int = 512
    n_test: int = 2000
    seed: int = 0
    noise_scale_c: float = 0.5

    def __post_init__(self):
        if self.d < 4:
            raise ValueError("token dimension must be >= 4 to fit four patterns")
        if not (-1.0 < self.zeta < 0.0):
            raise ValueError(f"zeta must lie strictly in (-1, 0), got {self.zeta}")
        if not (1 <= self.d_A <= self.P - 1):
            raise ValueError(f"d_A must lie in [1, P-1], got {self.d_A}")
        if self.sigma_noise is None:
            self.sigma_noise = self.noise_scale_c / self.P
        if self.sigma_noise > self.noise_scale_c / self.P + 1e-12:
            raise ValueError(
                f"sigma_noise={self.sigma_noise} exceeds the recorded bound "
                f"{self.noise_scale_c}/P")


def gen_pattern_basis(d: int, zeta: float, seed: int):
    """Four unit patterns: mutually orthogonal except v3.v4 = zeta.

    v3 and v4 are cos(phi/2) u +/- sin(phi/2) w with cos(phi) = zeta, on a
    random orthonormal frame, so the Gram matrix holds to ~1e-15.
    """
    if not (-1.0 < zeta < 0.0):
        raise ValueError(f"zeta must lie strictly in (-1, 0), got {zeta}")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    u1, u2, u3, u4 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    half = 0.5 * np.arccos(zeta)
    v3 = np.cos(half) * u3 + np.sin(half) * u4
    v4 = np.cos(half) * u3 - np.sin(half) * u4
    return u1.copy(), u2.copy(), np.ascontiguousarray(v3), np.ascontiguousarray(v4)


def gen_sample(spec: SyntheticTaskSpec, y: int, rng: np.random.Generator,
               patterns=None) -> np.ndarray:
    """One (d, P) sample: a single discriminative token at a uniform
    position, background tokens drawn fair-coin between the two
    non-discriminative patterns, iid Gaussian noise on every coordinate.
    """
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y}")
    v1, v2, v3, v4 = patterns if patterns is not None else gen_pattern_basis(
        spec.d, spec.zeta, spec.seed)
    pos = int(rng.integers(spec.P))
    coins = rng.integers(0, 2, size=spec.P)
    x = np.where(coins[None, :] == 0, v3[:, None], v4[:, None]).astype(np.float64)
    x[:, pos] = v1 if y == 1 else v2
    if spec.sigma_noise > 0:
        x = x + rng.normal(0.0, spec.sigma_noise, size=x.shape)
    return x


def gen_batch(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator,
              patterns=None):
    if patterns is None:
        patterns = gen_pattern_basis(spec.d, spec.zeta, spec.seed)
    ys = np.where(rng.integers(0, 2, size=n) == 0, 1, -1)
    xs = np.stack([gen_sample(spec, int(y), rng, patterns) for y in ys])
    return xs, ys


@dataclass
class ConstructedViT:
    """The assumed (not trained) two-layer single-head ViT.

    First-layer MLP rows are copies of the data patterns; second-layer
    rows are unit-normalized indicators of the first layer's neuron
    groups.  Key/value matrices are scaled cyclic-shift permutations of
    the token positions (shift d_A in layer 1, shift 1 in layer 2).
    """

    spec: SyntheticTaskSpec
    m: int
    beta1: float
    beta2: float
    patterns: tuple
    perm1: np.ndarray
    perm2: np.ndarray
    params: dict = field(repr=False, default_factory=dict)

    def forward(self, x, h: int | None = None, delta: Tensor | None = None):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        return two_layer_vit_forward(xt, self.params, h=h, delta=delta)

    def delta_shape(self, h: int) -> tuple[int, int]:
        if h == 1:
            return (self.spec.d, self.spec.P)
        if h == 2:
            return (self.m, self.spec.P)
        raise ValueError(f"invalid prompt layer h={h}")


def _shift_matrix(P: int, shift: int) -> np.ndarray:
    """Right-operator whose column j selects token (j + shift) mod P."""
    pi = np.zeros((P, P))
    for j in range(P):
        pi[(j + shift) % P, j] = 1.0
    return pi


def build_constructed_vit(spec: SyntheticTaskSpec, m: int = 16,
                          beta1: float = 1.0, beta2: float = 1.0) -> ConstructedViT:
    if m % 4 != 0:
        raise ValueError(f"MLP width must be a multiple of 4, got {m}")
    P, d = spec.P, spec.d
    patterns = gen_pattern_basis(d, spec.zeta, spec.seed)
    group = m // 4

    wo1 = np.zeros((m, d))
    for g in range(4):
        wo1[g * group:(g + 1) * group, :] = patterns[g]

    group_units = np.zeros((4, m))
    for g in range(4):
        group_units[g, g * group:(g + 1) * group] = 1.0 / np.sqrt(group)
    wo2 = np.zeros((m, m))
    for g in range(4):
        wo2[g * group:(g + 1) * group, :] = group_units[g]

    head = np.empty((m, P))
    head[0 * group:1 * group, :] = 1.0 / (m * P)
    head[1 * group:2 * group, :] = -1.0 / (m * P)
    head[2 * group:3 * group, :] = 1.0 / (m * P)
    head[3 * group:4 * group, :] = -1.0 / (m * P)

    pi1 = _shift_matrix(P, spec.d_A)
    pi2 = _shift_matrix(P, 1)
    params = {
        "wq1": Tensor(beta1 * np.eye(P)),
        "wk1": Tensor(beta1 * pi1),
        "wv1": Tensor(pi1),
        "wq2": Tensor(beta2 * np.eye(P)),
        "wk2": Tensor(beta2 * pi2),
        "wv2": Tensor(pi2),
        "wo1": Tensor(wo1),
        "wo2": Tensor(wo2),
        "head": Tensor(head),
    }
    return ConstructedViT(spec=spec, m=m, beta1=beta1, beta2=beta2,
                          patterns=patterns, perm1=pi1, perm2=pi2, params=params)


def hinge_loss(score, y, P: int):
    """max(0, 1/P - y*score); the margin is one over the token count."""
    return prompting.hinge_loss(score, y, 1.0 / P)


def make_single_pattern_sample(spec: SyntheticTaskSpec, disc: int, background: int,
                               patterns=None, pos: int | None = None) -> np.ndarray:
    """Noiseless sample with one `disc` pattern token and P-1 `background`
    tokens; pattern indices are 1-based. The discriminative token sits at
    the centre position by default, keeping index distances wrap-free.
    """
    pats = patterns if patterns is not None else gen_pattern_basis(
        spec.d, spec.zeta, spec.seed)
    pos = spec.P // 2 if pos is None else pos
    x = np.tile(pats[background - 1][:, None], (1, spec.P))
    x[:, pos] = pats[disc - 1]
    return x


def verify_lemma1(model: ConstructedViT, spec: SyntheticTaskSpec,
                  distance: str = "absolute"):
    """Average attention distance of both layers on the proof configuration
    (noiseless, one v1 token, v4 background, zero prompt).
    """
    from .analysis import avg_attention_distance

    x = make_single_pattern_sample(spec, disc=1, background=4)
    _, attn1, attn2 = model.forward(x)
    d1 = avg_attention_distance(attn1.data, distance=distance)
    d2 = avg_attention_distance(attn2.data, distance=distance)
    return d1, d2


def lemma1_expected(spec: SyntheticTaskSpec):
    return ((1.0 + spec.d_A) / spec.P, 1.0 / spec.P)


# ---------------------------------------------------------------------------
# prompt training on the constructed model


class TheoryAdaptation:
    """Duck-typed adaptation: a single trainable prompt on the constructed
    model, scores in {-1, +1} classification read off the sign."""

    def __init__(self, model: ConstructedViT, h: int):
        self.model = model
        self.h = h
        self.delta = Tensor(np.zeros(model.delta_shape(h)), requires_grad=True)
        self.spec = PromptSpec(method="AP", site=f"layer_{h}", shape_mode="full",
                               train_head=False)
        self.trainables = {"delta": self.delta}

    def forward(self, x, train_mode: bool = False):
        score, _, _ = self.model.forward(x, h=self.h, delta=self.delta)
        return score

    def param_count(self) -> int:
        return self.delta.size

    def trainable_list(self):
        return [self.delta]


def train_theory_prompt(spec: SyntheticTaskSpec, model: ConstructedViT, h: int,
                        cfg: TrainConfig, max_steps: int = 20000,
                        n_train: int | None = None,
                        data_seed: int | None = None) -> tuple[RunRecord, Tensor]:
    """SGD on the prompt alone with hinge margin 1/P; returns the record
    (loss trajectory, fresh-sample test accuracy) and the trained prompt.
    """
    if cfg.optimizer != "sgd":
        raise ValueError("theory-mode training uses SGD")
    if h not in (1, 2):
        raise ValueError(f"invalid prompt layer h={h}")
    n = spec.n_train if n_train is None else n_train
    dseed = spec.seed if data_seed is None else data_seed
    patterns = model.patterns
    x_train, y_train = gen_batch(spec, n, rng_for(dseed, "train", n), patterns)
    x_test, y_test = gen_batch(spec, spec.n_test, rng_for(dseed, "test"), patterns)

    adaptation = TheoryAdaptation(model, h)
    epochs = max(1, int(np.ceil(max_steps * cfg.batch_size / n)))
    run_cfg = TrainConfig(optimizer="sgd", learning_rate=cfg.learning_rate,
                          epochs=epochs, batch_size=min(cfg.batch_size, n),
                          seed=cfg.seed, weight_decay=cfg.weight_decay)
    rec = prompting.train(adaptation, (x_train, y_train), (x_test, y_test), run_cfg,
                          loss="hinge", hinge_margin=1.0 / spec.P,
                          max_steps=max_steps, stop_at_zero_loss=True,
                          snapshot_every=100)
    rec.extra["h"] = h
    rec.extra["n_train"] = n
    return rec, adaptation.delta


# ---------------------------------------------------------------------------
# sample-complexity sweep


N_GRID_EXPONENTS = tuple(range(4, 15))  # N in {2^4 .. 2^14}


def find_min_samples(spec: SyntheticTaskSpec, model: ConstructedViT, h: int,
                     base_seed: int, seed_index: int, eta: float = 0.5,
                     batch_size: int = 16, max_steps: int = 20000,
                     target_acc: float = 0.99) -> dict:
    """Bisect over N in {2^4..2^14} for the smallest training-set size whose
    trained prompt reaches the target test accuracy; censored when even
    the largest N fails within budget.
    """

    def attempt(exp: int):
        n = 2 ** exp
        cell_seed = mix64(base_seed, spec.P, h, seed_index, n)
        cfg = TrainConfig(optimizer="sgd", learning_rate=eta, epochs=1,
                          batch_size=batch_size, seed=cell_seed)
        rec, delta = train_theory_prompt(spec, model, h, cfg, max_steps=max_steps,
                                         n_train=n, data_seed=cell_seed)
        return rec, delta

    results: dict[int, tuple] = {}

    def reaches(exp: int) -> bool:
        if exp not in results:
            results[exp] = attempt(exp)
        return results[exp][0].final_test_acc >= target_acc

    lo, hi = N_GRID_EXPONENTS[0], N_GRID_EXPONENTS[-1]
    if not reaches(hi):
        rec = results[hi][0]
        return {"P": spec.P, "h": h, "seed": seed_index, "N_star": 2 ** hi,
                "censored": 1, "steps_used": rec.steps,
                "delta_norm": rec.extra.get("delta_norm", 0.0),
                "test_acc_at_Nstar": rec.final_test_acc}
    if reaches(lo):
        best = lo
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if reaches(mid):
                hi = mid
            else:
                lo = mid
        best = hi
    rec = results[best][0]
    return {"P": spec.P, "h": h, "seed": seed_index, "N_star": 2 ** best,
            "censored": 0, "steps_used": rec.steps,
            "delta_norm": rec.extra.get("delta_norm", 0.0),
            "test_acc_at_Nstar": rec.final_test_acc}


def sweep_cell(args: tuple) -> dict:
    """One (P, h, seed) job; top-level so process pools can pickle it."""
    (P, h, seed_index, base_seed, d, zeta, d_A, m, eta, batch_size,
     max_steps, target_acc, n_test) = args
    spec = SyntheticTaskSpec(P=P, d=d, zeta=zeta, d_A=d_A, n_test=n_test,
                             seed=mix64(base_seed, "patterns", P))
    model = build_constructed_vit(spec, m=m)
    return find_min_samples(spec, model, h, base_seed, seed_index, eta=eta,
                            batch_size=batch_size, max_steps=max_steps,
                            target_acc=target_acc)


def sample_complexity_sweep(P_list, h_list, n_seeds: int, base_seed: int = 0,
                            d: int = 4, zeta: float = -0.5, d_A: int = 1,
                            m: int = 16, eta=0.5, batch_size: int = 16,
                            max_steps: int = 20000, target_acc: float = 0.99,
                            n_test: int = 2000, jobs: int = 1):
    """Run the full (P, h, seed) grid; returns (cell_rows, summary_rows).

    `eta` is a float or an {h: float} map (the learning rate is tuned per
    method, matching the grid-search-per-method protocol).  Cells are
    independent jobs with seeds derived from their coordinates, so any
    parallel schedule reproduces the serial results.
    """
    eta_by_h = eta if isinstance(eta, dict) else {h: eta for h in h_list}
    grid = [(P, h, s, base_seed, d, zeta, d_A, m, eta_by_h[h], batch_size,
             max_steps, target_acc, n_test)
            for P in P_list for h in h_list for s in range(n_seeds)]
    if jobs > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(sweep_cell, grid))
    else:
        rows = [sweep_cell(a) for a in grid]
    rows.sort(key=lambda r: (r["P"], r["h"], r["seed"]))

    summary = []
    for P in P_list:
        for h in h_list:
            ns = [r["N_star"] for r in rows if r["P"] == P and r["h"] == h]
            med = float(np.median(ns))
            summary.append({"P": P, "h": h, "median_N_star": med,
                            "nstar_over_P": med / P,
                            "nstar_over_P2logP": med / (P * P * np.log(P))})
    return rows, summary
