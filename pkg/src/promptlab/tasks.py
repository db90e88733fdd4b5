"""Synthetic desk-scale tasks and the pretrained toy models.

The experiment cookbook:

* CNN source task ("which band"): each image holds one full-image cosine
  template at a random circular phase; the label is the template's row
  frequency.  Random phases force the network to learn rectified,
  phase-invariant band-energy features, built up over depth.
* CNN downstream task ("band-amplitude agreement"): both templates are
  present at independent random phases; the label says whether both
  amplitudes sit on the same side of a threshold.  The pooled readout
  alone cannot express the agreement, and an additive input prompt is
  phase-incoherent with every sample, so re-gating the deep
  phase-invariant features is the effective adaptation.
* CNN alternative task ("half placement"): the low-frequency template
  occupies the top or bottom image half with a random sign; the classes
  are exact circular shifts of each other, blinding every
  shift-invariant readout while spatially resolved prompts succeed.
* ViT source task ("pattern counting"): every token is one of the four
  unit patterns plus noise; the label compares the count of patterns
  {1, 3} against {2, 4}.
* ViT downstream task: the single-discriminative-token data model of the
  theory bench, where one token decides the label and the rest are
  background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import prompting
from . import tensor as T
from .layers import LayeredModel, make_toy_cnn, make_toy_vit
from .prompting import Adam, cross_entropy
from .seeding import mix64, rng_for
from .theory import SyntheticTaskSpec, gen_batch, gen_pattern_basis


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def xy(self):
        return self.x, self.y


# ---------------------------------------------------------------------------
# CNN tasks


def cosine_template(height: int = 8, width: int = 8, row_freq: int = 1,
                    row_shift: int = 0, col_shift: int = 0) -> np.ndarray:
    r = np.arange(height)[:, None] + row_shift
    c = np.arange(width)[None, :] + col_shift
    return np.cos(2 * np.pi * row_freq * r / height) * np.cos(2 * np.pi * c / width)


def make_band_choice_task(n: int, rng: np.random.Generator, height: int = 8,
                          width: int = 8, noise: float = 0.3) -> Dataset:
    """Source: one template per image at a random circular phase; the label
    is its row frequency (1 or 2)."""
    y = rng.integers(0, 2, size=n)
    x = np.zeros((n, 1, height, width))
    for i in range(n):
        amp = rng.uniform(0.7, 1.3)
        x[i, 0] = amp * cosine_template(height, width, row_freq=1 + y[i],
                                        row_shift=int(rng.integers(height)),
                                        col_shift=int(rng.integers(width)))
    x += rng.normal(0, noise, x.shape)
    return Dataset(x, y.astype(np.int64))


def make_band_agreement_task(n: int, rng: np.random.Generator, height: int = 8,
                             width: int = 8, noise: float = 0.3,
                             margin: float = 0.25) -> Dataset:
    """Downstream: both templates at independent random phases; the label is
    whether the two band amplitudes agree about a fixed threshold."""
    y = rng.integers(0, 2, size=n)
    x = np.zeros((n, 1, height, width))
    for i in range(n):
        hi = rng.uniform(1.0 + margin, 1.6, size=2)
        lo = rng.uniform(0.4, 1.0 - margin, size=2)
        if y[i] == 1:
            a, b = (hi[0], hi[1]) if rng.integers(2) else (lo[0], lo[1])
        else:
            a, b = (hi[0], lo[1]) if rng.integers(2) else (lo[0], hi[1])
        x[i, 0] = (a * cosine_template(height, width, 1, int(rng.integers(height)),
                                       int(rng.integers(width)))
                   + b * cosine_template(height, width, 2, int(rng.integers(height)),
                                         int(rng.integers(width))))
    x += rng.normal(0, noise, x.shape)
    return Dataset(x, y.astype(np.int64))


def make_half_placement_task(n: int, rng: np.random.Generator, height: int = 8,
                             width: int = 8, noise: float = 0.3) -> Dataset:
    g = cosine_template(height, width)
    y = rng.integers(0, 2, size=n)
    sign = np.where(rng.integers(0, 2, size=n) == 0, 1.0, -1.0)
    x = np.zeros((n, 1, height, width))
    half = height // 2
    for i in range(n):
        masked = np.zeros_like(g)
        if y[i] == 1:
            masked[:half] = g[:half]
        else:
            masked[half:] = g[half:]
        x[i, 0] = sign[i] * masked
    x += rng.normal(0, noise, x.shape)
    return Dataset(x, y.astype(np.int64))


# ---------------------------------------------------------------------------
# ViT tasks


def make_pattern_count_task(n: int, rng: np.random.Generator, d: int = 8,
                            P: int = 8, zeta: float = -0.5, pattern_seed: int = 0,
                            noise: float = 0.05) -> Dataset:
    patterns = np.stack(gen_pattern_basis(d, zeta, pattern_seed))
    x = np.empty((n, d, P))
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        while True:
            ids = rng.integers(0, 4, size=P)
            plus = np.sum((ids == 0) | (ids == 2))
            if plus != P - plus:
                break
        x[i] = patterns[ids].T
        y[i] = int(plus > P - plus)
    x += rng.normal(0, noise, x.shape)
    return Dataset(x, y)


def make_disc_token_task(n: int, rng: np.random.Generator, spec: SyntheticTaskSpec) -> Dataset:
    xs, ys = gen_batch(spec, n, rng)
    return Dataset(xs, ((ys + 1) // 2).astype(np.int64))


# ---------------------------------------------------------------------------
# full-model pretraining (construction phase of the toy models)


def fit_model(model: LayeredModel, ds: Dataset, epochs: int, batch_size: int,
              lr: float, seed: int) -> float:
    """Train every model parameter with Adam + cross-entropy; returns the
    final train accuracy.  Used only to manufacture pretrained toys."""
    params = [p for p in model.all_params().values()]
    opt = Adam(params, lr)
    rng = np.random.default_rng(seed)
    n = ds.x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            with T.Tape() as tape:
                logits = model.forward(T.Tensor(ds.x[idx]), train_mode=True)
                loss = cross_entropy(logits, ds.y[idx])
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
    logits = model.forward(T.Tensor(ds.x))
    return float(np.mean(np.argmax(logits.data, axis=1) == ds.y))


def cnn_experiment(seed: int, n_source: int = 1536, source_epochs: int = 6,
                   n_train: int = 256, n_test: int = 512):
    """Pretrained frozen toy CNN plus downstream train/test splits."""
    model = make_toy_cnn(rng_for(seed, "cnn-init"))
    source = make_band_choice_task(n_source, rng_for(seed, "cnn-src"))
    fit_model(model, source, epochs=source_epochs, batch_size=32, lr=3e-3,
              seed=mix64(seed, "cnn-fit"))
    model.freeze()
    train_ds = make_band_agreement_task(n_train, rng_for(seed, "cnn-down-train"))
    test_ds = make_band_agreement_task(n_test, rng_for(seed, "cnn-down-test"))
    return model, train_ds, test_ds


def vit_experiment(seed: int, d: int = 8, P: int = 8, n_source: int = 1024,
                   source_epochs: int = 8, n_train: int = 256, n_test: int = 512):
    """Pretrained frozen toy ViT plus downstream train/test splits."""
    model = make_toy_vit(rng_for(seed, "vit-init"), dim=d, tokens=P, hidden=16)
    source = make_pattern_count_task(n_source, rng_for(seed, "vit-src"), d=d, P=P,
                                     pattern_seed=mix64(seed, "patterns"))
    fit_model(model, source, epochs=source_epochs, batch_size=32, lr=3e-3,
              seed=mix64(seed, "vit-fit"))
    model.freeze()
    spec = SyntheticTaskSpec(P=P, d=d, seed=mix64(seed, "patterns"))
    train_ds = make_disc_token_task(n_train, rng_for(seed, "vit-down-train"), spec)
    test_ds = make_disc_token_task(n_test, rng_for(seed, "vit-down-test"), spec)
    return model, train_ds, test_ds


def image_vit_experiment(seed: int, n_source: int = 1024, source_epochs: int = 8):
    """Image-consuming toy ViT (2x2 patch tokens) pretrained on the CNN
    source task; used for cross-architecture representation comparison."""
    model = make_toy_vit(rng_for(seed, "ivit-init"), hidden=16,
                         patchify=(1, 8, 8, 2))
    source = make_band_choice_task(n_source, rng_for(seed, "ivit-src"))
    fit_model(model, source, epochs=source_epochs, batch_size=32, lr=3e-3,
              seed=mix64(seed, "ivit-fit"))
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# CSV dataset files


def save_dataset_csv(ds: Dataset, path: str) -> None:
    n = ds.x.shape[0]
    feats = ds.x.reshape(n, -1)
    with open(path, "w") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(feats.shape[1])) + "\n")
        for i in range(n):
            fh.write(str(int(ds.y[i])) + ","
                     + ",".join(format(v, ".17g") for v in feats[i]) + "\n")


def load_dataset_csv(path: str, geometry) -> Dataset:
    """Read a `label,f0,f1,...` CSV; features reshape to the declared
    geometry (channels x height x width, or dim x tokens)."""
    geometry = tuple(int(g) for g in geometry)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "label":
            raise ValueError(f"dataset CSV must start with a 'label' column, "
                             f"got {header[0]!r}")
        labels = []
        rows = []
        width = len(header) - 1
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != width + 1:
                raise ValueError(f"{path}:{lineno}: expected {width + 1} fields, "
                                 f"got {len(parts)}")
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    x = np.asarray(rows, dtype=np.float64)
    if x.shape[1] != int(np.prod(geometry)):
        raise ValueError(f"feature length {x.shape[1]} does not match geometry "
                         f"{geometry}")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    return Dataset(x.reshape((-1,) + geometry), y)
