"""Supernet training: one uniformly sampled subnet per iteration.

Each iteration samples an architecture, runs one batch through its view, and
steps AdamW on exactly the sliced weights the view exposes (shared head/tail
tensors included, since every subnet uses them). Everything stochastic is
driven by named RNG streams derived from the config seed, so a (seed, config,
data) triple fully determines the log and the final store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import supernet as sn
from .errors import SpecError, TrainingAborted
from .space import ArchConfig, maximal_arch, minimal_arch, sample_uniform


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 5e-4
    warmup_epochs: int = 2
    weight_decay: float = 5e-2
    label_smoothing: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0   # epochs between mid-run checkpoints; 0 = final only
    probe_every: int = 1        # epochs between probe evaluations; 0 disables
    probe_count: int = 3        # seeded-random probes besides the min/max subnets
    eval_batch: int = 256

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise SpecError("epochs, batch_size and base_lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise SpecError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise SpecError("warmup_epochs must lie in [0, epochs]")

    KNOWN = ("epochs", "batch_size", "base_lr", "warmup_epochs", "weight_decay",
             "label_smoothing", "seed", "checkpoint_every", "probe_every",
             "probe_count", "eval_batch")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.KNOWN)
        if unknown:
            raise SpecError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)  # {"iter", "epoch", "arch", "loss", "lr"}
    epochs: list = field(default_factory=list)      # {"epoch", "mean_loss", "probes"}


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to exactly 0 at the end."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps + 1) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _rng_streams(seed):
    """Named, independent generators; probe stream is reconstructable on resume."""
    ss = np.random.SeedSequence(seed)
    arch_ss, data_ss, probe_ss, init_ss = ss.spawn(4)
    return {
        "arch": np.random.default_rng(arch_ss),
        "data": np.random.default_rng(data_ss),
        "probe": np.random.default_rng(probe_ss),
        "init": np.random.default_rng(init_ss),
    }


def init_seed_for(cfg: TrainConfig) -> int:
    """Store-init seed derived from the config seed (own stream)."""
    return int(_rng_streams(cfg.seed)["init"].integers(2**31))


def probe_archs(spec, cfg: TrainConfig):
    rng = _rng_streams(cfg.seed)["probe"]
    probes = [minimal_arch(spec), maximal_arch(spec)]
    probes += [sample_uniform(spec, rng) for _ in range(cfg.probe_count)]
    return probes


def _steps_per_epoch(n, batch_size):
    return (n + batch_size - 1) // batch_size


def _train_step(store, view, images, labels, opt, lr, smoothing):
    params = view.materialize(requires_grad=True)
    logits = sn.forward_params(params, view.arch, store.geom, images, store.gelu_form)
    loss = ag.cross_entropy(logits, labels, smoothing)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingAborted(-1, view.arch.key(), value)
    loss.backward()
    updates = [
        (slot, store.tensors[slot], region, params[name].grad, sn.decays(slot))
        for name, (slot, region) in view.entries.items()
    ]
    opt.step(updates, lr=lr)
    return value


class TrainerState:
    """Everything the loop needs to continue: optimizer + RNG streams + epoch."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.opt = ag.AdamW(beta1=0.9, beta2=0.999, eps=1e-8,
                            weight_decay=cfg.weight_decay)
        streams = _rng_streams(cfg.seed)
        self.arch_rng = streams["arch"]
        self.data_rng = streams["data"]
        self.epoch = 0

    def rng_states(self):
        return {
            "arch": self.arch_rng.bit_generator.state,
            "data": self.data_rng.bit_generator.state,
        }

    def restore_rng(self, states):
        self.arch_rng.bit_generator.state = states["arch"]
        self.data_rng.bit_generator.state = states["data"]


def train_supernet(store, spec, data, cfg: TrainConfig, *, state: TrainerState | None = None,
                   arch_for_all_steps: ArchConfig | None = None,
                   epoch_cb=None, stop_epoch: int | None = None) -> tuple[TrainLog, TrainerState]:
    """Run phase-1 training from state.epoch to cfg.epochs.

    data: (train, val) pair of objects with .images/.labels arrays. When
    `arch_for_all_steps` is given the sampler is bypassed and every iteration
    trains that single architecture (standalone / finetune reuse this loop).
    epoch_cb(epoch, state) fires after each epoch for checkpointing;
    stop_epoch interrupts after that many epochs without changing the
    schedule, so a resumed run is bit-identical to an uninterrupted one.
    """
    train_ds, val_ds = data
    if state is None:
        state = TrainerState(cfg)
    n = len(train_ds.images)
    if n < 1:
        raise SpecError("training split is empty")
    steps = _steps_per_epoch(n, cfg.batch_size)
    total_steps = steps * cfg.epochs
    warmup_steps = steps * cfg.warmup_epochs
    probes = probe_archs(spec, cfg) if (spec is not None and cfg.probe_every) else []
    last_epoch = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)

    log = TrainLog()
    for epoch in range(state.epoch, last_epoch):
        perm = state.data_rng.permutation(n)
        epoch_losses = []
        for b in range(steps):
            t = epoch * steps + b
            if arch_for_all_steps is not None:
                arch = arch_for_all_steps
            else:
                arch = sample_uniform(spec, state.arch_rng)
            view = sn.subnet_view(store, arch)
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(t, total_steps, warmup_steps, cfg.base_lr)
            try:
                value = _train_step(store, view, train_ds.images[idx],
                                    train_ds.labels[idx], state.opt, lr,
                                    cfg.label_smoothing)
            except TrainingAborted as e:
                raise TrainingAborted(t, arch.key(), e.loss) from None
            epoch_losses.append(value)
            log.iterations.append(
                {"iter": t, "epoch": epoch, "arch": arch.key(),
                 "loss": value, "lr": lr})

        record = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if probes and (epoch + 1) % cfg.probe_every == 0:
            record["probes"] = {
                p.key(): top1_accuracy(store, p, val_ds.images, val_ds.labels,
                                       cfg.eval_batch)
                for p in probes
            }
        log.epochs.append(record)
        state.epoch = epoch + 1
        if epoch_cb is not None:
            epoch_cb(epoch + 1, state)
    return log, state


def top1_accuracy(store, arch, images, labels, batch_size=256) -> float:
    """Batched top-1 accuracy with inherited weights, no gradient steps.

    Argmax ties resolve to the lowest class index.
    """
    view = sn.subnet_view(store, arch)
    correct = 0
    for i in range(0, len(images), batch_size):
        logits = sn.forward(view, images[i:i + batch_size]).data
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / len(images)


def train_standalone(arch: ArchConfig, geom, data, cfg: TrainConfig):
    """From-scratch baseline: independently initialized copy, no sharing."""
    store = sn.standalone_store(arch, geom, init_seed=init_seed_for(cfg))
    log, _ = train_supernet(store, None, data, cfg, arch_for_all_steps=arch)
    _, val_ds = data
    acc = top1_accuracy(store, arch, val_ds.images, val_ds.labels, cfg.eval_batch)
    return store, acc, log


def finetune(store, arch: ArchConfig, data, cfg: TrainConfig, epochs: int):
    """Continue training only arch's view for `epochs`; report accuracy
    before and after (a fresh optimizer, the supernet moments stay put)."""
    _, val_ds = data
    before = top1_accuracy(store, arch, val_ds.images, val_ds.labels, cfg.eval_batch)
    log = TrainLog()
    if epochs > 0:
        ft_cfg = replace(cfg, epochs=epochs,
                         warmup_epochs=min(cfg.warmup_epochs, epochs))
        log, _ = train_supernet(store, None, data, ft_cfg, arch_for_all_steps=arch)
    after = top1_accuracy(store, arch, val_ds.images, val_ds.labels, cfg.eval_batch)
    return {"before": before, "after": after, "log": log}
