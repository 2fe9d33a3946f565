"""Round-robin multi-task fine-tuning, single-task fine-tuning, pretraining.

The multi-task loop visits every task once per outer iteration, in a fixed
order, and applies an optimizer update right after each task's backward pass.
The shared SRE is excluded from updates (and from gradient computation) while
the iteration is below ``freeze_iters``, and for the whole run under the
``frozen_sre`` ablation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .data import KWS, SV
from .heads import EMBEDDING, HeadConfig, build_head
from .losses import AngularSoftmax, AngularSoftmaxConfig, CrossEntropy
from .tensor import Tensor

PRETRAIN, SINGLE_TASK, MULTI_TASK = "pretrain", "single_task", "multi_task"
NORMAL, RANDOM_SRE, FROZEN_SRE = "normal", "random_sre", "frozen_sre"


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, iteration, task, value):
        super().__init__(f"non-finite loss {value} at iteration {iteration}, task {task}")
        self.iteration = iteration
        self.task = task


@dataclass
class TrainConfig:
    max_iterations: int = 2000
    freeze_iters: int = 1000
    lr_head: float = 1e-4
    lr_sre: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_sizes: dict = field(default_factory=lambda: {KWS: 8, SV: 8})
    mode: str = MULTI_TASK
    ablation: str = NORMAL
    tasks: list = field(default_factory=lambda: [KWS, SV])
    pretrain_steps: int = 1000
    pretrain_lr: float = 5e-4
    pretrain_batch: int = 8
    pretrain_seconds: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.max_iterations < 0 or self.freeze_iters < 0 or self.pretrain_steps < 0:
            raise ValueError("train iteration counts must be non-negative")
        for name in ("lr_head", "lr_sre", "pretrain_lr", "eps", "pretrain_seconds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not self.lr_sre < self.lr_head:
            raise ValueError(f"train.lr_sre ({self.lr_sre}) must be below train.lr_head ({self.lr_head})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.mode not in (PRETRAIN, SINGLE_TASK, MULTI_TASK):
            raise ValueError(f"train.mode must be pretrain, single_task or multi_task, got {self.mode!r}")
        if self.ablation not in (NORMAL, RANDOM_SRE, FROZEN_SRE):
            raise ValueError(f"train.ablation must be normal, random_sre or frozen_sre, got {self.ablation!r}")
        if self.mode == SINGLE_TASK and len(self.tasks) != 1:
            raise ValueError(f"single_task mode needs exactly one task, got {self.tasks}")
        if self.mode != PRETRAIN and not self.tasks:
            raise ValueError("train.tasks must name at least one task")
        for task in self.tasks:
            if task not in (KWS, SV):
                raise ValueError(f"unknown task {task!r}; expected 'kws' or 'sv'")
            if self.batch_sizes.get(task, 0) < 1:
                raise ValueError(f"train.batch_sizes.{task} must be >= 1")
        if self.pretrain_batch < 1:
            raise ValueError("train.pretrain_batch must be >= 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- optimiser -------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with per-parameter step counts.

    ``step`` takes ``(params, lr)`` groups; every parameter listed must carry
    a gradient. Parameters not listed keep their values and moments.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.updates = 0

    def _slot(self, p):
        slot = self.state.get(id(p))
        if slot is None:
            slot = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            self.state[id(p)] = slot
        return slot

    def step(self, groups):
        for params, lr in groups:
            for p in params:
                if p.grad is None:
                    raise ValueError(f"trainable parameter of shape {p.shape} has no gradient")
        b1, b2 = self.beta1, self.beta2
        for params, lr in groups:
            for p in params:
                s = self._slot(p)
                g = p.grad
                s["t"] += 1
                s["m"] = b1 * s["m"] + (1 - b1) * g
                s["v"] = b2 * s["v"] + (1 - b2) * g * g
                m_hat = s["m"] / (1 - b1 ** s["t"])
                v_hat = s["v"] / (1 - b2 ** s["t"])
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.updates += 1


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update on raw arrays; returns new params and state."""
    state = state or {"m": [np.zeros_like(p) for p in params],
                      "v": [np.zeros_like(p) for p in params], "t": 0}
    t = state["t"] + 1
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            raise ValueError("trainable parameter has no gradient")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        ms.append(m)
        vs.append(v)
    return new_params, {"m": ms, "v": vs, "t": t}


# -- task bindings -------------------------------------------------------------------

class TaskHead(nn.Module):
    """A task's downstream network and its criterion."""

    def __init__(self, task, head, criterion):
        self.task = task
        self.head = head
        self.criterion = criterion

    def loss(self, c, labels, step):
        return self.criterion(self.head(c), labels, step)


def build_task_head(task, d_model, head_config: HeadConfig, seed, n_classes,
                    asoftmax: AngularSoftmaxConfig | None = None):
    rng = nn.make_rng(seed, "head", task)
    head = build_head(d_model, head_config, rng)
    if head_config.output == EMBEDDING:
        criterion = AngularSoftmax(head_config.n_out, n_classes,
                                   asoftmax or AngularSoftmaxConfig(), rng)
    else:
        criterion = CrossEntropy()
    return TaskHead(task, head, criterion)


@dataclass
class LogRecord:
    iteration: int
    task: str
    loss: float
    wall_ms: float

    def line(self):
        return f"{self.iteration},{self.task},{self.loss!r},{self.wall_ms:.3f}"


class MetricsLog:
    HEADER = "iter,task,loss,wall_ms"

    def __init__(self, sink=None):
        self.records = []
        self.sink = sink

    def add(self, iteration, task, loss, wall_ms):
        rec = LogRecord(iteration, task, loss, wall_ms)
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)
        return rec

    def losses(self, task):
        return [r.loss for r in self.records if r.task == task]

    def text(self):
        return "\n".join([self.HEADER] + [r.line() for r in self.records]) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.text())

    def deterministic_view(self):
        """Records without wall-clock timings, for reproducibility checks."""
        return [(r.iteration, r.task, r.loss) for r in self.records]


class FrozenFeatureCache:
    """C for (clip, slice start) keys, valid while the SRE does not change."""

    def __init__(self):
        self.store = {}
        self.hits = 0

    def get(self, sre, batch):
        missing = [i for i, k in enumerate(batch.keys) if k not in self.store]
        if missing:
            with nn.inference(sre):
                fresh = sre(batch.inputs[missing]).data
            for row, i in enumerate(missing):
                self.store[batch.keys[i]] = fresh[row]
        self.hits += len(batch.keys) - len(missing)
        return Tensor(np.stack([self.store[k] for k in batch.keys]))

    def clear(self):
        self.store.clear()


@dataclass
class TrainState:
    iteration: int = 0
    sre_frozen: bool = True
    optimizer: Adam = None
    updates: list = field(default_factory=list)


def _check(loss, iteration, task):
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(iteration, task, value)
    return value


def multitask_train(config: TrainConfig, sre, task_heads, loaders, log=None,
                    on_update=None, use_cache=True):
    """Algorithm-1 loop over ``config.tasks`` for ``max_iterations`` rounds.

    ``task_heads`` and ``loaders`` map task name to ``TaskHead`` and loader.
    ``on_update(state, task)`` is called after every optimizer update.
    Returns the final ``TrainState``; records go to ``log``.
    """
    log = log if log is not None else MetricsLog()
    tasks = list(config.tasks)
    for task in tasks:
        if task not in task_heads or task not in loaders:
            raise ValueError(f"task {task!r} needs both a head and a loader")
    always_frozen = config.ablation == FROZEN_SRE
    state = TrainState(optimizer=Adam(config.beta1, config.beta2, config.eps))
    sre_params = sre.finetune_parameters()
    cache = FrozenFeatureCache() if use_cache else None

    def set_frozen(frozen):
        state.sre_frozen = frozen
        sre.set_trainable(not frozen)

    set_frozen(True)
    try:
        for it in range(config.max_iterations):
            state.iteration = it
            frozen = always_frozen or it < config.freeze_iters
            if frozen != state.sre_frozen:
                set_frozen(frozen)
                if cache is not None:
                    cache.clear()
            for task in tasks:
                start = time.perf_counter()
                batch = loaders[task].next_batch()
                binding = task_heads[task]
                if frozen and cache is not None:
                    c = cache.get(sre, batch)
                else:
                    c = sre(batch.inputs)
                loss = binding.loss(c, batch.labels, it)
                value = _check(loss, it, task)
                binding.zero_grad()
                sre.zero_grad()
                loss.backward()
                groups = [(binding.parameters(), config.lr_head)]
                if not frozen:
                    groups.append((sre_params, config.lr_sre))
                state.optimizer.step(groups)
                state.updates.append((it, task))
                log.add(it, task, value, 1000.0 * (time.perf_counter() - start))
                if on_update is not None:
                    on_update(state, task)
        state.iteration = config.max_iterations
    finally:
        sre.set_trainable(True)
    return state


def pretrain(config: TrainConfig, sre, loader, seed, log=None, on_step=None):
    """Self-supervised pretraining of the SRE for ``pretrain_steps`` steps."""
    log = log if log is not None else MetricsLog()
    rng = nn.make_rng(seed, "pretrain")
    opt = Adam(config.beta1, config.beta2, config.eps)
    params = sre.parameters()
    sre.set_trainable(True)
    for step in range(config.pretrain_steps):
        start = time.perf_counter()
        batch = loader.next_batch()
        parts = sre.pretrain_loss(batch.inputs, rng, step)
        value = _check(parts.total, step, PRETRAIN)
        sre.zero_grad()
        parts.total.backward()
        opt.step([(params, config.pretrain_lr)])
        log.add(step, PRETRAIN, value, 1000.0 * (time.perf_counter() - start))
        if on_step is not None:
            on_step(step, parts)
    return log
