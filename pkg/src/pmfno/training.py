"""Sequence-MSE training with AdamW, a 1-cycle schedule, and checkpointing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container
from .layers import ParamStore
from .models import Model, ModelConfig, NonFiniteRolloutError, rollout, rollout_backward

log = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, epoch, batch, detail=""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch, self.batch = epoch, batch


class CompatibilityError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    pct_start: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    steps: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be < lr_max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.pct_start < 1:
            raise ValueError("pct_start must lie in (0, 1)")


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def one_cycle_lr(step, total_steps, lr_min=1e-4, lr_max=1e-3, pct_start=0.3):
    """Cosine rise ``lr_min -> lr_max`` over ``pct_start`` of the steps, cosine decay back after."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = pct_start * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return lr_min + (lr_max - lr_min) * (1 - math.cos(math.pi * frac)) / 2
    frac = (step - peak) / (total_steps - peak)
    return lr_min + (lr_max - lr_min) * (1 + math.cos(math.pi * frac)) / 2


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.store = store
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            m, v = self.m[name], self.v[name]
            p *= 1 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads, moments, lr, config: TrainConfig):
    """Functional AdamW update on dicts of arrays; ``moments`` is ``(m, v, t)``."""
    m, v, t = moments
    t += 1
    out_p, out_m, out_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        mk = config.beta1 * m[k] + (1 - config.beta1) * g
        vk = config.beta2 * v[k] + (1 - config.beta2) * g * g
        mhat = mk / (1 - config.beta1 ** t)
        vhat = vk / (1 - config.beta2 ** t)
        out_p[k] = p * (1 - lr * config.weight_decay) - lr * mhat / (np.sqrt(vhat) + config.eps)
        out_m[k], out_v[k] = mk, vk
    return out_p, (out_m, out_v, t)


def clip_gradients(store: ParamStore, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in store.grads.values()))
    if norm > max_norm:
        for g in store.grads.values():
            g *= max_norm / norm
    return norm


def check_compatible(model: Model, dataset):
    want = (dataset.channels,) + tuple(dataset.grid_shape)
    have = (model.config.state_channels,) + tuple(model.config.grid)
    if want != have:
        raise CompatibilityError(f"dataset states/grid {list(want)} do not match model {list(have)}")


def sequence_mse(model: Model, batch, steps):
    pred = rollout(model, batch[:, 0], steps)
    return mse_loss(pred, batch[:, : steps + 1])[0]


def evaluate_loss(model: Model, samples, steps, batch_size=64):
    total, n = 0.0, 0
    for i in range(0, len(samples), batch_size):
        b = samples[i: i + batch_size]
        total += sequence_mse(model, b, steps) * len(b)
        n += len(b)
    return total / max(n, 1)


@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)
    lr_log: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: ParamStore | None = None
    grad_counts: np.ndarray | None = None


def new_state(model: Model, config: TrainConfig, n_samples):
    opt = AdamW(model.store, config.beta1, config.beta2, config.eps, config.weight_decay)
    return TrainState(model, opt, np.random.default_rng(config.seed), grad_counts=np.zeros(n_samples, dtype=np.int64))


def train(model: Model, dataset, config: TrainConfig, state: TrainState | None = None,
          checkpoint_dir=None, epochs=None, callback=None):
    """Train ``model`` with BPTT on ``dataset``; returns the final :class:`TrainState`.

    ``epochs`` limits how many epochs run in this call (for staged or resumed
    runs); the learning-rate schedule always spans ``config.epochs``.
    """
    check_compatible(model, dataset)
    K = config.steps or dataset.steps
    if K > dataset.steps:
        raise CompatibilityError(f"training horizon {K} exceeds dataset horizon {dataset.steps}")
    train_set = dataset.train
    val_set = dataset.validation
    n_train = len(train_set)
    per_epoch = math.ceil(n_train / config.batch_size)
    total = config.epochs * per_epoch
    state = state or new_state(model, config, len(dataset.samples))
    if state.grad_counts is None:
        state.grad_counts = np.zeros(len(dataset.samples), dtype=np.int64)
    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)

    while state.epoch < stop:
        epoch = state.epoch
        order = state.rng.permutation(n_train)
        loss_sum = 0.0
        for bi in range(per_epoch):
            idx = order[bi * config.batch_size: (bi + 1) * config.batch_size]
            batch = train_set[idx]
            model.store.zero_grad()
            try:
                pred, tape = rollout(model, batch[:, 0], K, keep_cache=True)
            except NonFiniteRolloutError as exc:
                raise NonFiniteLossError(epoch, bi, str(exc)) from exc
            loss, g = mse_loss(pred, batch[:, : K + 1])
            if not math.isfinite(loss):
                raise NonFiniteLossError(epoch, bi)
            rollout_backward(model, tape, g)
            state.grad_counts[idx] += 1
            if config.grad_clip:
                clip_gradients(model.store, config.grad_clip)
            lr = one_cycle_lr(epoch * per_epoch + bi, total, config.lr_min, config.lr_max, config.pct_start)
            state.optimizer.step(lr)
            state.lr_log.append(lr)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n_train
        val_loss = evaluate_loss(model, val_set, K) if len(val_set) else math.nan
        state.epoch += 1
        state.history.append({"epoch": state.epoch, "train_mse": train_loss, "val_mse": val_loss,
                              "lr": state.lr_log[-1]})
        improved = val_loss < state.best_val or (math.isnan(val_loss) and state.best_params is None)
        if improved:
            state.best_val = val_loss
            state.best_epoch = state.epoch
            state.best_params = model.store.copy()
        if checkpoint_dir is not None:
            save_training(checkpoint_dir, state, config, dataset, best_changed=improved)
        log.info("epoch %d train %.4e val %.4e", state.epoch, train_loss, val_loss)
        if callback is not None:
            callback(state)
    return state


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    manifest: dict
    m: dict | None = None
    v: dict | None = None

    @property
    def epoch(self):
        return self.manifest.get("epoch", 0)


def save_checkpoint(path, model: Model, optimizer: AdamW | None = None, **meta):
    """Write parameters (and optimizer moments) into a ``kind: checkpoint`` container."""
    names = model.store.names()
    arrays = [model.store[n].ravel() for n in names]
    if optimizer is not None:
        arrays += [optimizer.m[n].ravel() for n in names] + [optimizer.v[n].ravel() for n in names]
    manifest = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.store[n].shape)} for n in names],
        "has_moments": optimizer is not None,
        "optimizer_step": optimizer.t if optimizer is not None else 0,
        **meta,
    }
    flat = np.concatenate(arrays) if arrays else np.zeros(0)
    return container.write(path, manifest, flat, "f64le")


def load_checkpoint(path):
    manifest, flat = container.read(path)
    if manifest.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path}: not a checkpoint container (kind={manifest.get('kind')})")
    store = ParamStore()
    i = 0
    sizes = []
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"]))
        store.add(entry["name"], flat[i: i + size].reshape(entry["shape"]))
        sizes.append((entry["name"], entry["shape"], size))
        i += size
    m = v = None
    if manifest.get("has_moments"):
        m, v = {}, {}
        for target in (m, v):
            for name, shape, size in sizes:
                target[name] = flat[i: i + size].reshape(shape).astype(np.float64)
                i += size
    if i != flat.size:
        raise container.ShapeMismatchError(f"{path}: parameter table covers {i} values, blob has {flat.size}")
    cfg = ModelConfig(**manifest["model_config"])
    model = Model(cfg, store=store)
    expected = Model(cfg).store
    if expected.names() != store.names() or any(expected[n].shape != store[n].shape for n in store.names()):
        raise container.ShapeMismatchError(f"{path}: parameter table does not match {cfg.architecture} layout")
    return Checkpoint(model, manifest, m, v)


def save_training(path, state: TrainState, config: TrainConfig, dataset, best_changed=True):
    path = Path(path)
    meta = {
        "epoch": state.epoch,
        "train_config": asdict(config),
        "rng_state": state.rng.bit_generator.state,
        "dataset_scale": repr(float(dataset.scale)),
        "dataset_channel_scale": [repr(float(c)) for c in dataset.channel_scale],
        "system": dataset.system,
        "physical_params": dataset.physical_params,
        "train_steps": config.steps or dataset.steps,
        "history": state.history,
        "lr_log_length": len(state.lr_log),
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "best_epoch": state.best_epoch,
        "grad_counts": state.grad_counts.tolist() if state.grad_counts is not None else None,
    }
    save_checkpoint(path / "last", state.model, state.optimizer, **meta)
    if best_changed and state.best_params is not None:
        best = Model(state.model.config, store=state.best_params)
        save_checkpoint(path / "best", best, None, **{**meta, "epoch": state.best_epoch})
    write_loss_log(path / "loss_log.csv", state.history)


def write_loss_log(path, history):
    lines = ["epoch,train_mse,val_mse,lr"]
    for h in history:
        lines.append(f"{h['epoch']},{h['train_mse']!r},{h['val_mse']!r},{h['lr']!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resume_state(path, config: TrainConfig, n_samples):
    """Rebuild a :class:`TrainState` from a training directory's ``last`` checkpoint."""
    path = Path(path)
    ck = load_checkpoint(path / "last")
    if not ck.manifest.get("has_moments"):
        raise container.ContainerError(f"{path}/last: checkpoint has no optimizer moments")
    model = ck.model
    opt = AdamW(model.store, config.beta1, config.beta2, config.eps, config.weight_decay)
    opt.m, opt.v, opt.t = ck.m, ck.v, int(ck.manifest["optimizer_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.manifest["rng_state"]
    history = list(ck.manifest.get("history", []))
    best_params = None
    if (path / "best").exists():
        best_params = load_checkpoint(path / "best").model.store
    best_val = ck.manifest.get("best_val")
    counts = ck.manifest.get("grad_counts")
    per_epoch = math.ceil(_n_train(n_samples) / config.batch_size)
    total = config.epochs * per_epoch
    lr_log = [one_cycle_lr(s, total, config.lr_min, config.lr_max, config.pct_start)
              for s in range(int(ck.manifest.get("lr_log_length", 0)))]
    return TrainState(model, opt, rng, epoch=int(ck.manifest["epoch"]), history=history, lr_log=lr_log,
                      best_val=math.inf if best_val is None else float(best_val),
                      best_epoch=int(ck.manifest.get("best_epoch", -1)), best_params=best_params,
                      grad_counts=np.array(counts, dtype=np.int64) if counts is not None else None)


def _n_train(n_samples):
    return n_samples - n_samples // 10


def config_from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d or {}) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**(d or {}))
