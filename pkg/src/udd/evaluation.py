"""Evaluation harness, coreset baselines, the mUE utilization metric and embedding export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data_io import LabeledImages, SyntheticDataset
from .model import ModelParams, attach, feature_maps, forward, init_convnet, predict
from .seeding import stream


@dataclass
class EvalConfig:
    epochs: int = 300
    lr: float = 0.01
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0005
    repeats: int = 3
    depth: int = 3
    width: int = 128
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid epochs / batch_size / lr")


@dataclass
class MueConfig:
    ds: tuple = (5, 6, 7, 8, 9, 10)
    literal: bool = False

    def __post_init__(self):
        self.ds = tuple(int(d) for d in self.ds)
        if not self.ds or min(self.ds) < 2:
            raise ValueError("every interval count must be >= 2")


@dataclass
class EvalResult:
    mean: float
    std: float
    accuracies: list = field(default_factory=list)


# ---------------------------------------------------------------- training

def train_classifier(params: ModelParams, data: LabeledImages, epochs: int, lr: float, batch_size: int,
                     rng_label: str, seed: int, momentum: float = 0.0, weight_decay: float = 0.0) -> ModelParams:
    """Minibatch SGD on cross-entropy (heavy-ball momentum, L2 decay). Updates a copy."""
    params = params.copy()
    images = data.images.astype(params.dtype, copy=False)
    names = params.names()
    velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    n = len(data)
    for epoch in range(epochs):
        order = stream(seed, f"{rng_label}/epoch={epoch}").permutation(n)
        for start in range(0, n, batch_size):
            take = order[start:start + batch_size]
            g = params.graph()
            nodes = attach(params, g)
            out = forward(params, nodes, g.constant(images[take]))
            ce = g.apply("softmax_cross_entropy", [out.logits], labels=data.labels[take])
            grads = g.eval_many(g.derive(ce, [nodes[k] for k in names]))
            for k, gk in zip(names, grads):
                step = gk + weight_decay * params.arrays[k] if weight_decay else gk
                velocity[k] = momentum * velocity[k] + step
                params.arrays[k] = params.arrays[k] - lr * velocity[k]
    return params


def accuracy(params: ModelParams, test: LabeledImages, batch_size: int = 1000) -> float:
    logits = predict(params, test.images.astype(params.dtype, copy=False), batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def evaluate_synthetic(train: LabeledImages | SyntheticDataset, test: LabeledImages, cfg: EvalConfig,
                       label: str = "eval") -> EvalResult:
    """Train ``cfg.repeats`` freshly initialized networks on ``train`` and report test accuracy."""
    if isinstance(train, SyntheticDataset):
        train = train.flat()
    if len(train) == 0:
        raise ValueError("empty training set")
    accs = []
    in_shape = tuple(train.images.shape[1:])
    for r in range(cfg.repeats):
        params = init_convnet(cfg.depth, cfg.width, in_shape, train.classes,
                              stream(cfg.seed, f"{label}/init/r={r}"), dtype=cfg.precision)
        params = train_classifier(params, train, cfg.epochs, cfg.lr, cfg.batch_size, f"{label}/r={r}",
                                  cfg.seed, cfg.momentum, cfg.weight_decay)
        accs.append(accuracy(params, test))
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return EvalResult(float(np.mean(accs)), std, accs)


# ---------------------------------------------------------------- mUE

def utilization_entropy(values: np.ndarray, d: int, literal: bool = False) -> float:
    """Normalized histogram entropy of ``values`` with ``d`` equal-width bins over [min, max]."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty activation map")
    lo, hi = x.min(), x.max()
    if hi == lo:
        counts = np.zeros(d)
        counts[0] = x.size
    else:
        idx = np.minimum(np.floor((x - lo) / (hi - lo) * d).astype(np.int64), d - 1)
        counts = np.bincount(idx, minlength=d).astype(np.float64)
    p = counts / x.size
    nz = p[p > 0]
    plogp = float(np.sum(nz * np.log(nz)))
    if literal:
        return 1.0 + plogp / (x.size * math.log(d))
    return -plogp / math.log(d)


def mue(activation_map: np.ndarray, cfg: Optional[MueConfig] = None) -> float:
    """Mean of the normalized entropy over the interval counts ``cfg.ds``; 0 for a constant map."""
    cfg = cfg or MueConfig()
    x = np.asarray(activation_map)
    if x.size == 0:
        raise ValueError("empty activation map")
    if not cfg.literal and x.max() == x.min():
        return 0.0
    return float(np.mean([utilization_entropy(x, d, cfg.literal) for d in cfg.ds]))


def dataset_mue(params: ModelParams, images: np.ndarray, cfg: Optional[MueConfig] = None) -> np.ndarray:
    """Per-image mUE of the channel-mean last-block feature map."""
    maps = feature_maps(params, images.astype(params.dtype, copy=False)).mean(axis=1)
    return np.array([mue(m, cfg) for m in maps])


def normal_std_sweep(stds: Sequence[float], size: tuple = (16, 16), maps: int = 20, levels: int = 255,
                     seed: int = 0, cfg: Optional[MueConfig] = None) -> np.ndarray:
    """mUE of normally distributed maps recorded on an 8-bit grid, for each std.

    Values are drawn from N(0.5, std^2), clipped to [0, 1] and rounded to ``levels``
    steps, as an 8-bit activation heatmap would be. Small spreads occupy few grid
    levels (low utilization); wide ones fill the bins like a continuous normal.
    """
    out = []
    for std in stds:
        rng = stream(seed, f"std-sweep/std={std!r}")
        vals = []
        for _ in range(maps):
            x = np.clip(rng.normal(0.5, std, size), 0.0, 1.0)
            vals.append(mue(np.round(x * levels) / levels, cfg))
        out.append(float(np.mean(vals)))
    return np.array(out)


# ---------------------------------------------------------------- coresets

def _check_counts(real: LabeledImages, ipc: int) -> list[np.ndarray]:
    per = real.indices_by_class()
    for c, idx in enumerate(per):
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} examples, need {ipc}")
    return per


def coreset_random(real: LabeledImages, ipc: int, rng: np.random.Generator) -> LabeledImages:
    picks = [np.sort(rng.choice(idx, ipc, replace=False)) for idx in _check_counts(real, ipc)]
    return real.subset(np.concatenate(picks))


def herding_order(features: np.ndarray, k: int) -> list[int]:
    """Greedy: each step adds the example that brings the running mean closest to the full mean.
    Ties go to the smaller index."""
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    mu = features.mean(axis=0)
    chosen: list[int] = []
    total = np.zeros_like(mu)
    free = np.ones(len(features), dtype=bool)
    for step in range(k):
        cand = (total[None, :] + features) / (step + 1)
        dist = np.linalg.norm(cand - mu, axis=1)
        dist[~free] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        free[i] = False
        total += features[i]
    return chosen


def embed(params: ModelParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        g = params.graph()
        x = g.constant(images[start:start + batch_size])
        out.append(g.eval(forward(params, attach(params, g, as_leaves=False), x).embedding))
    return np.concatenate(out)


def coreset_herding(real: LabeledImages, ipc: int, params: ModelParams) -> LabeledImages:
    """Herding per class on embeddings from ``params`` (typically a briefly trained network)."""
    picks = []
    for idx in _check_counts(real, ipc):
        feats = embed(params, real.images[idx].astype(params.dtype, copy=False))
        picks.append(idx[herding_order(feats, ipc)])
    return real.subset(np.concatenate(picks))


def herding_extractor(real: LabeledImages, cfg: EvalConfig, epochs: int = 1, subset: int = 10000) -> ModelParams:
    """Network trained briefly on a class-balanced random subset of ``real`` for herding features."""
    rng = stream(cfg.seed, "herding/subset")
    take = np.sort(rng.choice(len(real), min(subset, len(real)), replace=False))
    data = real.subset(take)
    params = init_convnet(cfg.depth, cfg.width, tuple(real.images.shape[1:]), real.classes,
                          stream(cfg.seed, "herding/init"), dtype=cfg.precision)
    return train_classifier(params, data, epochs, cfg.lr, cfg.batch_size, "herding", cfg.seed,
                            cfg.momentum, cfg.weight_decay)


def as_synthetic(core: LabeledImages, mean, std, config_hash: str = "0" * 64) -> SyntheticDataset:
    """Class-major [C, IPC, ...] container for a balanced coreset."""
    order = np.argsort(core.labels, kind="stable")
    imgs = core.images[order]
    c = core.classes
    return SyntheticDataset(imgs.reshape(c, -1, *imgs.shape[1:]).astype(np.float64),
                            np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64),
                            0, config_hash)


# ---------------------------------------------------------------- embeddings

def export_embeddings(syn: SyntheticDataset, params: ModelParams, path) -> np.ndarray:
    """CSV with header ``class,e0,...``; one row per synthetic image, class-major."""
    flat = syn.flat()
    emb = embed(params, flat.images.astype(params.dtype, copy=False))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + [f"e{i}" for i in range(emb.shape[1])])
        for c, row in zip(flat.labels, emb):
            w.writerow([int(c)] + [repr(float(v)) for v in row])
    return emb


def class_separation(embeddings: np.ndarray, labels) -> float:
    """Mean pairwise cosine distance between class-mean embeddings."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    means = np.stack([np.asarray(embeddings, dtype=np.float64)[labels == c].mean(axis=0) for c in classes])
    unit = means / np.linalg.norm(means, axis=1, keepdims=True)
    cos = unit @ unit.T
    iu = np.triu_indices(len(classes), k=1)
    return float(np.mean(1.0 - cos[iu]))
