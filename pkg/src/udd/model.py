"""ConvNet-D: D blocks of [3x3 conv -> instance norm -> relu -> 2x2 avg pool] and a linear head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node


@dataclass
class ModelParams:
    depth: int
    width: int
    in_shape: tuple  # (ch, H, W)
    classes: int
    arrays: dict = field(default_factory=dict)  # name -> ndarray, insertion order = layer order

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.depth, self.width, tuple(self.in_shape), self.classes,
                           {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.depth, self.width, tuple(self.in_shape), self.classes,
                           {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def dtype(self):
        return self.arrays["fc.w"].dtype

    def graph(self) -> Graph:
        """Empty graph whose constants match the parameter precision."""
        return Graph(dtype=self.dtype)

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class ForwardOut:
    logits: Node        # [B, C]
    feature_map: Node   # [B, width, h, w], last block output
    embedding: Node     # [B, width], spatial mean of feature_map


def feature_hw(in_shape, depth: int) -> tuple[int, int]:
    h, w = in_shape[1], in_shape[2]
    for _ in range(depth):
        h, w = h // 2, w // 2
    return h, w


def init_convnet(depth: int, width: int, in_shape, classes: int, rng: np.random.Generator,
                 dtype=np.float64) -> ModelParams:
    """Fan-in scaled normal weights, zero biases."""
    ch, h, w = in_shape
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if h < 2 ** depth or w < 2 ** depth:
        raise ValueError(f"input {h}x{w} too small for depth {depth} (needs >= {2 ** depth})")
    arrays = {}
    cin = ch
    for i in range(depth):
        fan_in = cin * 9
        arrays[f"conv{i}.w"] = (rng.standard_normal((width, cin, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        arrays[f"conv{i}.b"] = np.zeros(width, dtype=dtype)
        cin = width
    fh, fw = feature_hw(in_shape, depth)
    feat = width * fh * fw
    arrays["fc.w"] = (rng.standard_normal((feat, classes)) * np.sqrt(1.0 / feat)).astype(dtype)
    arrays["fc.b"] = np.zeros(classes, dtype=dtype)
    return ModelParams(depth, width, tuple(in_shape), classes, arrays)


def attach(params: ModelParams, g: Graph, as_leaves: bool = True) -> dict[str, Node]:
    """Put the parameters into ``g``: bound leaves (differentiable) or constants."""
    if not as_leaves:
        return {k: g.constant(v) for k, v in params.arrays.items()}
    nodes = {k: g.leaf(k, v.shape) for k, v in params.arrays.items()}
    g.bind({nodes[k]: v for k, v in params.arrays.items()})
    return nodes


def trunk(params: ModelParams, nodes: Mapping[str, Node], images: Node) -> Node:
    """Conv blocks only; accepts any spatial size that survives ``depth`` poolings."""
    g = images.graph
    x = images
    for i in range(params.depth):
        w, b = nodes[f"conv{i}.w"], nodes[f"conv{i}.b"]
        x = g.apply("conv2d", [x, w], stride=1, padding=1)
        x = x + g.apply("reshape", [b], shape=(1, -1, 1, 1))
        x = g.apply("instance_norm", [x])
        x = g.apply("relu", [x])
        x = g.apply("avgpool2x2", [x])
    return x


def forward(params: ModelParams, nodes: Mapping[str, Node], images: Node) -> ForwardOut:
    g = images.graph
    expected = tuple(params.in_shape)
    if len(images.shape) != 4 or tuple(images.shape[1:]) != expected:
        raise ValueError(f"images shaped {images.shape}, model expects [B, {expected[0]}, {expected[1]}, {expected[2]}]")
    fmap = trunk(params, nodes, images)
    emb = g.apply("mean", [fmap], axes=(2, 3))
    logits = g.apply("flatten", [fmap]) @ nodes["fc.w"] + nodes["fc.b"]
    return ForwardOut(logits=logits, feature_map=fmap, embedding=emb)


def feature_maps(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Evaluated trunk output for a numpy batch of any sufficiently large spatial size."""
    g = params.graph()
    return g.eval(trunk(params, attach(params, g, as_leaves=False), g.constant(images)))


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Logits for a numpy batch, evaluated in chunks."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        g = params.graph()
        nodes = attach(params, g, as_leaves=False)
        x = g.constant(chunk)
        out.append(g.eval(forward(params, nodes, x).logits))
    return np.concatenate(out) if out else np.zeros((0, params.classes))


def save_params(params: ModelParams, path) -> None:
    from .data_io import save_tensors

    meta = {"depth": params.depth, "width": params.width, "in_shape": list(params.in_shape),
            "classes": params.classes}
    save_tensors(path, params.arrays, meta)


def load_params(path) -> ModelParams:
    from .data_io import load_tensors

    arrays, meta = load_tensors(path)
    return ModelParams(meta["depth"], meta["width"], tuple(meta["in_shape"]), meta["classes"], arrays)
