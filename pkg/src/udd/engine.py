"""The distillation loop.

Each iteration: (re)initialize the network every ``reinit_every`` iterations;
for every class, score regions on the current synthetic images, build the
training batch (originals plus upsampled underutilized windows), take one SGD
step on the synthetic pixels against gradient matching plus feature contrast,
and fold the batch-mean embedding into the class bank; finally take one SGD
step on the network with a mixed-class real minibatch.

All randomness comes from labelled streams (see :mod:`udd.seeding`), so a run
resumed from a checkpoint follows exactly the same trajectory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Graph
from .data_io import (
    LabeledImages, METRICS_HEADER, SyntheticDataset, load_synthetic, load_tensors, read_csv,
    save_synthetic, save_tensors, write_csv,
)
from .losses import ClassFeatureBank, LossConfig, cfc_loss, gradient_matching_loss, real_gradients, total_synthesis_loss
from .model import ModelParams, attach, forward, init_convnet
from .policies import PolicyConfig, compose_training_set, select_regions, training_batch
from .regions import generate_candidates
from .seeding import stream

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, cls: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}, class {cls}")
        self.iteration = iteration
        self.cls = cls


@dataclass
class DistillConfig:
    ipc: int = 1
    iterations: int = 2000
    lr_syn: float = 0.005
    milestones: tuple = (1200, 1600, 1800)
    decay: float = 0.5
    lr_net: float = 0.01
    net_batch: int = 256
    net_steps: int = 1
    real_batch: int = 64
    reinit_every: int = 100
    depth: int = 3
    width: int = 128
    seed: int = 0
    checkpoint_every: int = 0
    precision: str = "float64"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        for name in ("lr_syn", "lr_net"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.ipc < 1 or self.real_batch < 1 or self.net_batch < 1 or self.reinit_every < 1:
            raise ValueError("ipc, real_batch, net_batch and reinit_every must be >= 1")
        if self.iterations < 0 or self.net_steps < 0:
            raise ValueError("iterations and net_steps must be >= 0")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing")
        if self.iterations and any(m >= self.iterations for m in self.milestones):
            log.debug("milestones %s at or beyond %d iterations", self.milestones, self.iterations)


def lr_at(t: int, cfg: DistillConfig) -> float:
    """Step decay: the base rate times ``decay`` for each milestone already reached."""
    if t < 0:
        raise ValueError("t must be >= 0")
    lr = cfg.lr_syn
    for m in cfg.milestones:
        if t >= m:
            lr *= cfg.decay
    return lr


def init_synthetic(real: LabeledImages, ipc: int, rng: np.random.Generator,
                   mean=None, std=None) -> SyntheticDataset:
    """IPC distinct real images per class, copied."""
    per_class = real.indices_by_class()
    picks = []
    for c, idx in enumerate(per_class):
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} images, need {ipc}")
        picks.append(real.images[np.sort(rng.choice(idx, ipc, replace=False))])
    ch = real.images.shape[1]
    mean = np.zeros(ch) if mean is None else np.asarray(mean, dtype=np.float64)
    std = np.ones(ch) if std is None else np.asarray(std, dtype=np.float64)
    return SyntheticDataset(np.stack(picks).astype(np.float64), mean, std)


@dataclass
class RunState:
    iteration: int
    params: ModelParams
    syn: SyntheticDataset
    bank: ClassFeatureBank
    metrics: list = field(default_factory=list)


def _new_network(cfg: DistillConfig, in_shape, classes: int, t: int) -> ModelParams:
    return init_convnet(cfg.depth, cfg.width, in_shape, classes,
                        stream(cfg.seed, f"net-init/cycle={t // cfg.reinit_every}"), dtype=cfg.precision)


def _sgd_network(params: ModelParams, images: np.ndarray, labels: np.ndarray, lr: float) -> float:
    g = params.graph()
    nodes = attach(params, g)
    ce = g.apply("softmax_cross_entropy", [forward(params, nodes, g.constant(images)).logits], labels=labels)
    names = params.names()
    vals = g.eval_many([ce] + g.derive(ce, [nodes[k] for k in names]))
    for k, gk in zip(names, vals[1:]):
        params.arrays[k] = params.arrays[k] - lr * gk
    return float(vals[0])


def _class_embedding_means(params: ModelParams, syn: SyntheticDataset) -> np.ndarray:
    g = params.graph()
    nodes = attach(params, g, as_leaves=False)
    out = []
    for c in range(syn.classes):
        emb = forward(params, nodes, g.constant(syn.images[c])).embedding
        out.append(g.eval(emb).mean(axis=0))
    return np.stack(out)


class Distiller:
    """Stateful runner; ``step`` advances one iteration, ``run`` goes to ``cfg.iterations``."""

    def __init__(self, cfg: DistillConfig, real: LabeledImages, state: RunState,
                 metrics_path: Optional[Path] = None, config_hash: str = "0" * 64):
        self.cfg = cfg
        dtype = np.dtype(cfg.precision)
        if real.images.dtype != dtype:
            real = LabeledImages(real.images.astype(dtype), real.labels, real.classes)
        state.syn.images = state.syn.images.astype(dtype, copy=False)
        state.params = state.params.astype(dtype)
        self.real = real
        self.state = state
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.config_hash = config_hash
        self.regions = generate_candidates(*real.images.shape[2:])
        self.by_class = real.indices_by_class()
        self.in_shape = tuple(real.images.shape[1:])

    @classmethod
    def fresh(cls, cfg: DistillConfig, real: LabeledImages, mean=None, std=None, **kw) -> "Distiller":
        syn = init_synthetic(real, cfg.ipc, stream(cfg.seed, "syn-init"), mean, std)
        syn.config_hash = kw.get("config_hash", syn.config_hash)
        params = _new_network(cfg, tuple(real.images.shape[1:]), real.classes, 0)
        dim = cfg.width
        return cls(cfg, real, RunState(0, params, syn, ClassFeatureBank(real.classes, dim, cfg.loss.alpha)), **kw)

    # ------------------------------------------------------------ one iteration

    def step(self) -> list[list]:
        cfg, st = self.cfg, self.state
        t = st.iteration
        classes = st.syn.classes
        if t % cfg.reinit_every == 0 and t > 0:
            st.params = _new_network(cfg, self.in_shape, classes, t)
            st.bank.reset()
        use_cfc = cfg.loss.w_c != 0
        if use_cfc and not st.bank.initialized.all():
            for c, v in enumerate(_class_embedding_means(st.params, st.syn)):
                st.bank.update(c, v)
        snapshot = st.bank.snapshot()
        lr = lr_at(t, cfg)
        rows = []
        new_means = {}
        for c in range(classes):
            rows.append(self._class_step(t, c, lr, snapshot if use_cfc else None, new_means))
        if use_cfc:
            for c in range(classes):
                st.bank.update(c, new_means[c])
        self._network_step(t)
        st.iteration = t + 1
        st.syn.iteration = st.iteration
        st.metrics.extend(rows)
        if self.metrics_path is not None:
            self._append_metrics(rows)
        return rows

    def _class_step(self, t: int, c: int, lr: float, bank: Optional[ClassFeatureBank], new_means: dict) -> list:
        cfg, st = self.cfg, self.state
        params = st.params
        idx = self.by_class[c]
        rng = stream(cfg.seed, f"real/t={t}/c={c}")
        take = rng.choice(idx, min(cfg.real_batch, len(idx)), replace=False)
        rgrads = real_gradients(params, self.real.images[take], np.full(len(take), c))

        images = st.syn.images[c]
        try:
            selected = select_regions(params, images, c, self.regions, cfg.policy,
                                      lambda i: stream(cfg.seed, f"policy/t={t}/c={c}/i={i}"))
        except FloatingPointError:
            raise DivergenceError(t, c, "region scores") from None
        g = params.graph()
        nodes = attach(params, g)
        x = g.leaf("x_syn", images.shape)
        g.bind({x: images})
        batch = training_batch(compose_training_set(x, selected, self.regions))
        labels = np.full(batch.shape[0], c)
        lg, out = gradient_matching_loss(params, nodes, rgrads, batch, labels)
        lc = cfc_loss(out.embedding, bank, c, cfg.loss) if bank is not None else None
        total = total_synthesis_loss(lg, lc, cfg.loss)
        (gx,) = g.derive(total, [x])
        fbar = g.apply("mean", [out.embedding], axes=(0,))
        targets = [lg, total, gx, fbar] + ([lc] if lc is not None else [])
        vals = g.eval_many(targets)
        lg_v, total_v, gx_v, fbar_v = float(vals[0]), float(vals[1]), vals[2], vals[3]
        lc_v = float(vals[4]) if lc is not None else 0.0
        if not np.isfinite(total_v):
            raise DivergenceError(t, c, "loss")
        if not np.all(np.isfinite(gx_v)):
            raise DivergenceError(t, c, "image gradient")
        st.syn.images[c] = images - lr * gx_v
        new_means[c] = fbar_v
        return [t, c, lg_v, lc_v, total_v, lr, cfg.policy.policy, cfg.seed]

    def _network_step(self, t: int) -> None:
        cfg, st = self.cfg, self.state
        for s in range(cfg.net_steps):
            rng = stream(cfg.seed, f"net-batch/t={t}/s={s}")
            take = rng.choice(len(self.real), min(cfg.net_batch, len(self.real)), replace=False)
            loss = _sgd_network(st.params, self.real.images[take], self.real.labels[take], cfg.lr_net)
            if not np.isfinite(loss):
                raise DivergenceError(t, -1, "network loss")

    # ------------------------------------------------------------ driver

    def run(self, until: Optional[int] = None, checkpoint_dir: Optional[Path] = None,
            progress: Optional[Callable[[RunState], None]] = None) -> SyntheticDataset:
        end = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        while self.state.iteration < end:
            self.step()
            it = self.state.iteration
            if checkpoint_dir is not None and self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir, self)
            if progress is not None:
                progress(self.state)
        return self.state.syn

    def _append_metrics(self, rows) -> None:
        from .data_io import append_csv

        append_csv(self.metrics_path, METRICS_HEADER, [_fmt_row(r) for r in rows], self.config_hash)


def _fmt_row(row):
    return [repr(v) if isinstance(v, float) else v for v in row]


def distill(cfg: DistillConfig, real: LabeledImages, mean=None, std=None, **kw) -> SyntheticDataset:
    return Distiller.fresh(cfg, real, mean, std, **kw).run()


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_SYN = "checkpoint.udds"
CHECKPOINT_STATE = "checkpoint.uddt"


def save_checkpoint(directory, runner: Distiller) -> None:
    """Synthetic set in UDDS plus a UDDT sidecar with network, bank and iteration."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    st = runner.state
    st.syn.config_hash = runner.config_hash
    save_synthetic(directory / CHECKPOINT_SYN, st.syn)
    tensors = {f"theta.{k}": v for k, v in st.params.arrays.items()}
    tensors.update(st.bank.state())
    meta = {"iteration": st.iteration, "config_hash": runner.config_hash,
            "model": {"depth": st.params.depth, "width": st.params.width,
                      "in_shape": list(st.params.in_shape), "classes": st.params.classes}}
    save_tensors(directory / CHECKPOINT_STATE, tensors, meta)


def load_checkpoint(directory, cfg: DistillConfig, real: LabeledImages, metrics_path=None,
                    config_hash: str = "0" * 64) -> Distiller:
    """Rebuild a runner from ``save_checkpoint`` output. Metric rows at or past the
    checkpoint iteration are dropped so the resumed run rewrites them."""
    directory = Path(directory)
    syn = load_synthetic(directory / CHECKPOINT_SYN, expected_hash=config_hash)
    tensors, meta = load_tensors(directory / CHECKPOINT_STATE)
    if meta["iteration"] != syn.iteration:
        raise ValueError(f"checkpoint pieces disagree: state at {meta['iteration']}, images at {syn.iteration}")
    m = meta["model"]
    arrays = {k[len("theta."):]: v for k, v in tensors.items() if k.startswith("theta.")}
    params = ModelParams(m["depth"], m["width"], tuple(m["in_shape"]), m["classes"], arrays)
    bank = ClassFeatureBank.from_state(tensors)
    syn.config_hash = config_hash
    rows = []
    if metrics_path is not None and Path(metrics_path).exists():
        digest, old = read_csv(metrics_path)
        kept = [[r[h] for h in METRICS_HEADER] for r in old if int(r["iter"]) < syn.iteration]
        write_csv(metrics_path, METRICS_HEADER, kept, digest)
        rows = kept
    state = RunState(syn.iteration, params, syn, bank, rows)
    return Distiller(cfg, real, state, metrics_path=metrics_path, config_hash=config_hash)


def config_to_dict(cfg: DistillConfig) -> dict:
    d = asdict(cfg)
    d["milestones"] = list(cfg.milestones)
    return d


def describe(cfg: DistillConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True)
