"""Epoch loop, test-set evaluation, metrics and checkpoints.

Per batch the order is fixed: forward, loss, backward, gradient clipping,
optimiser step, Lookahead sync check. After each epoch the whole test split
is evaluated in eval mode and the scheduler advances (per-batch for
onecycle).
"""

import csv
import logging
import math
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from budgetnet import checkpoint as ckpt_io
from budgetnet import config as cfg
from budgetnet import data
from budgetnet.errors import DataError, FormatError, NumericError, UsageError
from budgetnet.functional import softmax_cross_entropy
from budgetnet.init import InitScheme
from budgetnet.model import build, count_params
from budgetnet.optim import Lookahead, clip_grad_norm, global_norm, make_optimizer, make_schedule
from budgetnet.rng import RngStream

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
GRAD_NORMS_FILE = "grad_norms.csv"
LAST_CKPT = "last.bnet"
BEST_CKPT = "best.bnet"
EVAL_BATCH = 500

# independent streams derived from the run seed
INIT_STREAM, DATA_STREAM, DROPOUT_STREAM = 0, 1, 2


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float
    wall_seconds: float

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def cells(self):
        return [str(self.epoch)] + [repr(float(v)) for v in astuple(self)[1:]]


def evaluate(model, dataset, stats=None, batch_size=EVAL_BATCH, dtype=np.float32):
    """Mean cross-entropy and top-1 accuracy over ``dataset`` in eval mode."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    total_loss = 0.0
    correct = 0
    try:
        for x, labels in data.batches(dataset, batch_size, stats=stats, dtype=dtype):
            logits = model.forward(x)
            loss, _ = softmax_cross_entropy(logits, labels)
            total_loss += loss * len(labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    finally:
        model.set_training(was_training)
    n = len(dataset)
    return total_loss / n, correct / n


def load_datasets(config):
    directory = config.resolved_data_dir()
    if directory is None:
        raise DataError(f"no data directory: set data_dir in the config or ${cfg.DATA_DIR_ENV}")
    train_set, test_set = data.load_cifar10(directory)
    if config.subset:
        train_set, test_set = train_set.subset(config.subset), test_set.subset(config.subset)
    return train_set, test_set


class Trainer:
    """Owns the model, optimiser, Lookahead wrapper, rng streams and history.

    ``hooks`` are callables ``hook(event, info)`` invoked at each stage of a
    training step (``forward``, ``loss``, ``backward``, ``clip``, ``step``,
    ``lookahead``); used for instrumentation and tests.
    """

    def __init__(self, config, train_set, test_set, hooks=None):
        self.config = config
        self.train_set = train_set
        self.test_set = test_set
        self.hooks = list(hooks or [])
        m = config.model
        self.num_params = count_params(m)
        if config.enforce_budget and not self.num_params < cfg.PARAM_BUDGET:
            raise UsageError(f"model has {self.num_params:,} parameters, over the {cfg.PARAM_BUDGET:,} budget")
        self.init_rng = RngStream(config.seed, INIT_STREAM)
        self.data_rng = RngStream(config.seed, DATA_STREAM)
        self.dropout_rng = RngStream(config.seed, DROPOUT_STREAM)
        self.model = build(m, InitScheme(config.init, config.normal_std), self.init_rng,
                           dropout_rng=self.dropout_rng)
        params = self.model.parameters()
        self.optimizer = make_optimizer(config, params)
        self.lookahead = Lookahead(params, config.lookahead_k, config.lookahead_alpha) if config.lookahead else None
        self.stats = data.channel_stats(train_set) if config.normalize else data.NormStats.identity()
        self.steps_per_epoch = data.num_batches(len(train_set), config.batch_size)
        self.schedule = make_schedule(config.schedule, config.lr, config.epochs, self.steps_per_epoch)
        self.epoch = 0
        self.global_step = 0
        self.history = []
        self.grad_norms = []  # (epoch, step, pre_clip, post_clip)
        self.step_losses = []
        self.best_acc = -1.0
        self.best_epoch = 0

    def _emit(self, event, **info):
        for hook in self.hooks:
            hook(event, info)

    def _lr_for(self, epoch_index, step):
        return self.schedule.lr(step if self.schedule.per_batch else epoch_index)

    def train_epoch(self):
        cfg_ = self.config
        epoch_index = self.epoch
        self.model.train()
        start = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        epoch_lr = self._lr_for(epoch_index, self.global_step)
        params = self.model.parameters()
        for batch_idx, (x, labels) in enumerate(data.batches(
                self.train_set, cfg_.batch_size, shuffle=True, rng=self.data_rng, stats=self.stats,
                augment=cfg_.augment, workers=cfg_.workers)):
            self.optimizer.lr = self._lr_for(epoch_index, self.global_step)
            self.model.zero_grad()
            logits = self.model.forward(x)
            self._emit("forward", step=self.global_step)
            loss, grad = softmax_cross_entropy(logits, labels)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch_index + 1}, batch {batch_idx + 1}")
            self.step_losses.append(loss)
            self._emit("loss", step=self.global_step, loss=loss)
            self.model.backward(grad)
            self._emit("backward", step=self.global_step)
            if cfg_.grad_clip is not None:
                grads = [p.grad for p in params]
                pre = clip_grad_norm(grads, cfg_.grad_clip)
                post = global_norm(grads)
                self.grad_norms.append((epoch_index + 1, self.global_step, pre, post))
                self._emit("clip", step=self.global_step, pre=pre, post=post)
            self.optimizer.step()
            self._emit("step", step=self.global_step)
            if self.lookahead is not None:
                synced = self.lookahead.step()
                self._emit("lookahead", step=self.global_step, synced=synced)
            n = len(labels)
            total_loss += loss * n
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += n
            self.global_step += 1
        test_loss, test_acc = evaluate(self.model, self.test_set, self.stats)
        self.epoch += 1
        wall = time.perf_counter() - start if cfg_.wall_clock else 0.0
        row = MetricsRow(self.epoch, total_loss / seen, correct / seen, test_loss, test_acc, epoch_lr, wall)
        self.history.append(row)
        log.info("epoch %d: train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f lr %.5g",
                 row.epoch, row.train_loss, row.train_acc, row.test_loss, row.test_acc, row.lr)
        return row

    # --- persistence --------------------------------------------------------

    def to_checkpoint(self):
        tensors = {p.name: p.data for p in self.model.parameters()}
        tensors.update(self.model.buffers())
        tensors.update(self.optimizer.buffers())
        state = {"global_step": self.global_step, "best_acc": self.best_acc, "best_epoch": self.best_epoch,
                 "norm_mean": self.stats.mean.tolist(), "norm_std": self.stats.std.tolist()}
        state.update(self.optimizer.scalars())
        if self.lookahead is not None:
            tensors.update(self.lookahead.buffers())
            state.update(self.lookahead.scalars())
        for name, rng in (("data_rng", self.data_rng), ("dropout_rng", self.dropout_rng)):
            for k, v in rng.get_state().items():
                state[f"{name}.{k}"] = v
        for row in self.history:
            state[f"metrics.{row.epoch}"] = list(astuple(row))
        return ckpt_io.Checkpoint(self.config, self.epoch, tensors, state)

    def load_checkpoint(self, ck):
        targets = {p.name: p.data for p in self.model.parameters()}
        targets.update(self.model.buffers())
        targets.update(self.optimizer.buffers())
        if self.lookahead is not None:
            targets.update(self.lookahead.buffers())
        missing = [k for k in targets if k not in ck.tensors]
        if missing:
            raise FormatError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        for name, arr in targets.items():
            if ck.tensors[name].shape != arr.shape:
                raise FormatError(f"{name}: shape {ck.tensors[name].shape} != {arr.shape}")
            arr[...] = ck.tensors[name]
        st = ck.state
        self.epoch = ck.epoch
        self.global_step = int(st["global_step"])
        self.best_acc = float(st["best_acc"])
        self.best_epoch = int(st["best_epoch"])
        self.optimizer.load_scalars(st)
        if self.lookahead is not None:
            self.lookahead.load_scalars(st)
        for name, rng in (("data_rng", self.data_rng), ("dropout_rng", self.dropout_rng)):
            prefix = f"{name}."
            rng.set_state({k[len(prefix):]: v for k, v in st.items() if k.startswith(prefix)})
        self.history = []
        for e in range(1, self.epoch + 1):
            values = st[f"metrics.{e}"]
            self.history.append(MetricsRow(int(values[0]), *(float(v) for v in values[1:])))


def write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRow.header())
        for row in history:
            writer.writerow(row.cells())
        fh.flush()


def write_grad_norms(path, grad_norms):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "pre_clip_norm", "post_clip_norm"])
        for epoch, step, pre, post in grad_norms:
            writer.writerow([epoch, step, repr(pre), repr(post)])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in MetricsRow.header()[1:])) for r in rows]


def train(config, train_set=None, test_set=None, resume=None, until_epoch=None, hooks=None):
    """Run training and return the Trainer (history, model, paths on disk).

    ``resume`` is a checkpoint path; ``until_epoch`` stops early without
    changing the schedule horizon set by ``config.epochs``.
    """
    if resume is not None:
        ck = ckpt_io.load(resume)
        config = ck.config if config is None else config
    if train_set is None or test_set is None:
        train_set, test_set = load_datasets(config)
    trainer = Trainer(config, train_set, test_set, hooks=hooks)
    if resume is not None:
        trainer.load_checkpoint(ck)
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from exc
    log.info("model has %d trainable parameters", trainer.num_params)
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    while trainer.epoch < stop:
        row = trainer.train_epoch()
        write_metrics(out / METRICS_FILE, trainer.history)
        if config.grad_clip is not None:
            write_grad_norms(out / GRAD_NORMS_FILE, trainer.grad_norms)
        if row.test_acc > trainer.best_acc:
            trainer.best_acc, trainer.best_epoch = row.test_acc, row.epoch
            ck_now = trainer.to_checkpoint()
            ckpt_io.save(out / BEST_CKPT, ck_now)
        else:
            ck_now = trainer.to_checkpoint()
        ckpt_io.save(out / LAST_CKPT, ck_now)
    return trainer


def stats_from_checkpoint(ck):
    return data.NormStats(ck.state["norm_mean"], ck.state["norm_std"])


def model_from_checkpoint(ck):
    """Rebuild the model stored in ``ck`` (parameters and BN statistics)."""
    model = build(ck.config.model, InitScheme(ck.config.init, ck.config.normal_std), RngStream(ck.config.seed))
    targets = {p.name: p.data for p in model.parameters()}
    targets.update(model.buffers())
    for name, arr in targets.items():
        if name not in ck.tensors:
            raise FormatError(f"checkpoint lacks tensor {name}")
        arr[...] = ck.tensors[name]
    return model.eval()
