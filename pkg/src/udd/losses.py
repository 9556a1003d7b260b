"""Synthesis objectives: gradient matching, class-wise feature contrast, and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autodiff import Graph, Node
from .model import ForwardOut, ModelParams, attach, forward


@dataclass
class LossConfig:
    tau: float = 0.7
    alpha: float = 0.5
    w_g: float = 1.0
    w_c: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


class ClassFeatureBank:
    """Per-class moving-average embeddings, F <- alpha * F + (1 - alpha) * f."""

    def __init__(self, classes: int, dim: int, alpha: float = 0.5):
        self.alpha = float(alpha)
        self.means = np.zeros((classes, dim))
        self.initialized = np.zeros(classes, dtype=bool)

    @property
    def classes(self) -> int:
        return self.means.shape[0]

    def update(self, c: int, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        if value.shape != self.means.shape[1:]:
            raise ValueError(f"bank dim {self.means.shape[1]}, got {value.shape}")
        if self.initialized[c]:
            self.means[c] = self.alpha * self.means[c] + (1.0 - self.alpha) * value
        else:
            self.means[c] = value
            self.initialized[c] = True

    def ready_for(self, c: int) -> bool:
        """True when every class other than ``c`` has an entry."""
        return bool(np.delete(self.initialized, c).all())

    def reset(self) -> None:
        self.means[:] = 0.0
        self.initialized[:] = False

    def snapshot(self) -> "ClassFeatureBank":
        out = ClassFeatureBank(self.classes, self.means.shape[1], self.alpha)
        out.means = self.means.copy()
        out.initialized = self.initialized.copy()
        return out

    def state(self) -> dict:
        return {"bank.means": self.means.copy(), "bank.initialized": self.initialized.astype(np.float64),
                "bank.alpha": np.array(self.alpha)}

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray]) -> "ClassFeatureBank":
        means = state["bank.means"]
        bank = cls(means.shape[0], means.shape[1], float(state["bank.alpha"]))
        bank.means = means.copy()
        bank.initialized = state["bank.initialized"].astype(bool)
        return bank


def bank_update(bank: ClassFeatureBank, c: int, value: np.ndarray, alpha: Optional[float] = None) -> None:
    if alpha is not None:
        bank.alpha = float(alpha)
    bank.update(c, value)


def real_gradients(params: ModelParams, images: np.ndarray, labels) -> dict[str, np.ndarray]:
    """Evaluated d(CE)/d(theta) on a real batch; enters the matching loss as constants."""
    if len(images) == 0:
        raise ValueError("empty real batch")
    g = params.graph()
    nodes = attach(params, g)
    ce = g.apply("softmax_cross_entropy", [forward(params, nodes, g.constant(images)).logits],
                 labels=np.asarray(labels))
    names = params.names()
    grads = g.eval_many(g.derive(ce, [nodes[k] for k in names]))
    return dict(zip(names, grads))


def gradient_matching_loss(params: ModelParams, nodes: Mapping[str, Node], real_grads: Mapping[str, np.ndarray],
                           syn_batch: Node, syn_labels) -> tuple[Node, ForwardOut]:
    """Sum over all parameter tensors of (grad_real - grad_syn)^2.

    ``nodes`` must be parameter leaves of ``syn_batch``'s graph. The synthetic-side gradients
    stay symbolic, so the result can be differentiated with respect to ``syn_batch``.
    Returns the loss and the synthetic forward pass (reused for the feature loss).
    """
    if syn_batch.shape[0] == 0:
        raise ValueError("empty synthetic batch")
    g = syn_batch.graph
    out = forward(params, nodes, syn_batch)
    ce = g.apply("softmax_cross_entropy", [out.logits], labels=np.asarray(syn_labels))
    names = params.names()
    syn_grads = g.derive(ce, [nodes[k] for k in names])
    total = None
    for name, gs in zip(names, syn_grads):
        diff = g.constant(real_grads[name]) - gs
        term = g.apply("sum", [g.apply("square", [diff])])
        total = term if total is None else total + term
    return total, out


def cfc_loss(embeddings: Node, bank: ClassFeatureBank, c: int, cfg: LossConfig) -> Node:
    """-log( exp(sim(f, F_c)/tau) / sum_{i != c} exp(sim(f, F_i)/tau) ), f = batch-mean embedding.

    The positive pair is left out of the denominator. Bank entries are constants.
    """
    if embeddings.shape[0] == 0:
        raise ValueError("empty embedding batch")
    if not bank.initialized.all():
        missing = np.flatnonzero(~bank.initialized).tolist()
        raise ValueError(f"class bank entries {missing} not initialized")
    if np.any(np.linalg.norm(bank.means, axis=1) == 0):
        raise ValueError("zero-norm bank entry, cosine undefined")
    g = embeddings.graph
    C = bank.classes
    f = g.apply("mean", [embeddings], axes=(0,), keepdims=True)
    sims = g.apply("cosine_similarity", [f, g.constant(bank.means)]) * (1.0 / cfg.tau)
    pos = g.apply("slice", [sims], bounds=((c, c + 1),))
    mask = np.ones(C)
    mask[c] = 0.0
    neg = g.apply("sum", [g.apply("exp", [sims]) * g.constant(mask)])
    return g.apply("log", [neg]) - g.apply("sum", [pos])


def total_synthesis_loss(loss_g: Node, loss_c: Optional[Node], cfg: LossConfig) -> Node:
    total = loss_g * cfg.w_g
    if loss_c is not None and cfg.w_c != 0:
        total = total + loss_c * cfg.w_c
    return total
