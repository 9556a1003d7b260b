"""Region utilization scoring and underutilized-region selection.

Two scoring families are provided. Response scores average ``|activation|``
(or ``|dCE/dx|``) inside each window; jitter scores measure how much a
window's activation score moves when only that window is perturbed. Low
scores mark underutilized windows, which are cropped, upsampled and added to
the batch being optimized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .autodiff import Graph, Node
from .model import ModelParams, attach, feature_maps, forward
from .regions import RegionSpec, crop_region, map_to_feature_coords, upsample_to

POLICIES = ("none", "activation", "gradient", "jitter", "vote")
JITTER_KINDS = ("gaussian", "salt_pepper", "uniform")


@dataclass
class PolicyConfig:
    policy: str = "jitter"
    N: int = 12
    P: int = 8
    M: int = 2
    jitter_kind: str = "gaussian"
    jitter_magnitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.jitter_kind not in JITTER_KINDS:
            raise ValueError(f"unknown jitter_kind {self.jitter_kind!r}; choose from {JITTER_KINDS}")
        if not 0 <= self.P <= self.N:
            raise ValueError(f"P={self.P} must lie in [0, N={self.N}]")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.jitter_magnitude < 0:
            raise ValueError("jitter_magnitude must be >= 0")


@dataclass
class RegionScores:
    values: np.ndarray
    policy: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite {self.policy} scores: {self.values}")

    def __len__(self):
        return len(self.values)

    def order(self) -> np.ndarray:
        """Ascending by score; ties by region index."""
        return np.argsort(self.values, kind="stable")


@dataclass
class Extractor:
    """Maps a batch [B, ch, H, W] to feature maps [B, k, h, w]; ``reduction`` = H / h."""

    fn: Callable[[np.ndarray], np.ndarray]
    reduction: int


def as_extractor(model: Union[ModelParams, Extractor]) -> Extractor:
    if isinstance(model, Extractor):
        return model
    return Extractor(lambda x: feature_maps(model, x), 2 ** model.depth)


def window_score(values: np.ndarray, r: RegionSpec) -> float:
    """Mean of ``|values|`` over the window (last two axes). The window is copied first so the
    reduction order depends only on the window contents, not on its position in the map."""
    win = np.ascontiguousarray(values[..., r.y0:r.y0 + r.h, r.x0:r.x0 + r.w])
    return float(np.mean(np.abs(win)))


# ---------------------------------------------------------------- response policy

def response_activation_scores(feature_map: np.ndarray, regions: Sequence[RegionSpec],
                               reduction: int) -> RegionScores:
    """Windows run on one image's feature map [k, h, w] after mapping to map coordinates."""
    _, fh, fw = feature_map.shape
    vals = [window_score(feature_map, map_to_feature_coords(r, reduction, fh, fw)) for r in regions]
    return RegionScores(vals, "activation")


def naive_activation_scores(model, image: np.ndarray, regions: Sequence[RegionSpec]) -> RegionScores:
    """Reference scheme: crop each window from the image and run the network on it alone."""
    ext = as_extractor(model)
    vals = []
    for r in regions:
        crop = np.ascontiguousarray(image[None, :, r.y0:r.y0 + r.h, r.x0:r.x0 + r.w])
        fmap = ext.fn(crop)[0]
        vals.append(float(np.mean(np.abs(np.ascontiguousarray(fmap)))))
    return RegionScores(vals, "activation")


def response_gradient_scores(input_grad: np.ndarray, regions: Sequence[RegionSpec]) -> RegionScores:
    return RegionScores([window_score(input_grad, r) for r in regions], "gradient")


def input_gradients(params: ModelParams, images: np.ndarray, labels) -> np.ndarray:
    """d(cross-entropy)/d(images), evaluated. Uses the summed loss so each image's gradient
    is independent of the batch size."""
    g = params.graph()
    x = g.leaf("x", images.shape)
    out = forward(params, attach(params, g, as_leaves=False), x)
    ce = g.apply("softmax_cross_entropy", [out.logits], labels=np.asarray(labels))
    (gx,) = g.derive(ce * float(len(images)), [x])
    return g.eval(gx, {x: images})


# ---------------------------------------------------------------- jitter policy

def jitter_region(image: np.ndarray, r: RegionSpec, kind: str, magnitude: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Copy of ``image`` [ch, H, W] with noise applied inside ``r`` only.

    gaussian: N(0, magnitude^2); uniform: U(-magnitude, magnitude); salt_pepper: a
    ``magnitude`` fraction of window pixels set to the channel's min or max.
    """
    out = image.copy()
    win = out[:, r.y0:r.y0 + r.h, r.x0:r.x0 + r.w]
    if kind == "gaussian":
        win += rng.normal(0.0, 1.0, win.shape) * magnitude
    elif kind == "uniform":
        win += rng.uniform(-1.0, 1.0, win.shape) * magnitude
    elif kind == "salt_pepper":
        hit = rng.random(win.shape[1:]) < magnitude
        salt = rng.random(win.shape[1:]) < 0.5
        lo = image.min(axis=(1, 2))
        hi = image.max(axis=(1, 2))
        for c in range(win.shape[0]):
            win[c][hit & salt] = hi[c]
            win[c][hit & ~salt] = lo[c]
    else:
        raise ValueError(f"unknown jitter kind {kind!r}")
    return out


def jitter_scores(model, image: np.ndarray, regions: Sequence[RegionSpec], cfg: PolicyConfig,
                  rng: np.random.Generator) -> RegionScores:
    """sigma_n = |Lambda_n - mean_m Lambda_hat_{n,m}|, jittering one window at a time."""
    ext = as_extractor(model)
    clean_map = ext.fn(image[None])[0]
    base = response_activation_scores(clean_map, regions, ext.reduction).values
    jittered = np.stack([jitter_region(image, r, cfg.jitter_kind, cfg.jitter_magnitude, rng)
                         for r in regions for _ in range(cfg.M)])
    changed = np.array([not np.array_equal(j, image) for j in jittered])
    maps = np.empty((len(jittered),) + clean_map.shape, dtype=clean_map.dtype)
    if changed.any():
        maps[changed] = ext.fn(jittered[changed])
    # an unperturbed copy has exactly the clean response
    maps[~changed] = clean_map
    _, fh, fw = clean_map.shape
    sigma = np.empty(len(regions))
    for n, r in enumerate(regions):
        fr = map_to_feature_coords(r, ext.reduction, fh, fw)
        hats = [window_score(maps[n * cfg.M + m], fr) for m in range(cfg.M)]
        sigma[n] = abs(base[n] - sum(hats) / cfg.M)
    return RegionScores(sigma, "jitter")


# ---------------------------------------------------------------- selection

def select_underutilized(scores: RegionScores, P: int) -> list[int]:
    if not 0 <= P <= len(scores):
        raise ValueError(f"P={P} outside [0, {len(scores)}]")
    return [int(i) for i in scores.order()[:P]]


def vote_scores(activation: RegionScores, gradient: RegionScores, jitter: RegionScores, P: int) -> list[int]:
    """Each policy nominates its P lowest; rank by votes, then mean rank, then index."""
    n = len(activation)
    if len(gradient) != n or len(jitter) != n:
        raise ValueError("score vectors differ in length")
    votes = np.zeros(n, dtype=int)
    rank_sum = np.zeros(n)
    for s in (activation, gradient, jitter):
        order = s.order()
        votes[order[:P]] += 1
        rank_sum[order] += np.arange(n)
    key = sorted(range(n), key=lambda i: (-votes[i], rank_sum[i] / 3, i))
    return key[:P]


def select_regions(params: ModelParams, images: np.ndarray, label: int, regions: Sequence[RegionSpec],
                   cfg: PolicyConfig, rng_for: Callable[[int], np.random.Generator]) -> list[list[int]]:
    """Per-image selections for one class batch [IPC, ch, H, W]. ``rng_for(i)`` gives image i's
    jitter stream, so results do not depend on the order images are scored in."""
    k = len(images)
    if cfg.policy == "none" or cfg.P == 0:
        return [[] for _ in range(k)]
    ext = as_extractor(params)
    act = grad = None
    if cfg.policy in ("activation", "vote"):
        maps = ext.fn(images)
        act = [response_activation_scores(maps[i], regions, ext.reduction) for i in range(k)]
    if cfg.policy in ("gradient", "vote"):
        gx = input_gradients(params, images, [label] * k)
        grad = [response_gradient_scores(gx[i], regions) for i in range(k)]
    if cfg.policy in ("jitter", "vote"):
        jit = [jitter_scores(ext, images[i], regions, cfg, rng_for(i)) for i in range(k)]
    if cfg.policy == "activation":
        return [select_underutilized(s, cfg.P) for s in act]
    if cfg.policy == "gradient":
        return [select_underutilized(s, cfg.P) for s in grad]
    if cfg.policy == "jitter":
        return [select_underutilized(s, cfg.P) for s in jit]
    return [vote_scores(act[i], grad[i], jit[i], cfg.P) for i in range(k)]


def scheme_overlap(model, image: np.ndarray, regions: Sequence[RegionSpec], P: int) -> float:
    """Fraction of the bottom-P windows shared by the fast and the crop-then-forward schemes."""
    ext = as_extractor(model)
    fast = select_underutilized(response_activation_scores(ext.fn(image[None])[0], regions, ext.reduction), P)
    slow = select_underutilized(naive_activation_scores(ext, image, regions), P)
    return len(set(fast) & set(slow)) / P if P else 1.0


# ---------------------------------------------------------------- composition

def compose_training_set(syn: Node, selected: Sequence[Sequence[int]], regions: Sequence[RegionSpec]) -> list[Node]:
    """Originals followed by every selected window, cropped and upsampled back to full size.

    ``syn`` is the class's image node [IPC, ch, H, W]; every returned member is a graph node
    whose gradient reaches ``syn``.
    """
    g = syn.graph
    k, ch, H, W = syn.shape
    if len(selected) != k:
        raise ValueError(f"{len(selected)} selections for {k} images")
    members = [syn]
    for i, picks in enumerate(selected):
        if not picks:
            continue
        img = g.apply("slice", [syn], bounds=((i, i + 1), (0, ch), (0, H), (0, W)))
        for j in picks:
            members.append(upsample_to(crop_region(img, regions[j]), H, W))
    return members


def training_batch(members: Sequence[Node]) -> Node:
    return members[0] if len(members) == 1 else members[0].graph.apply("concat", list(members), axis=0)
