"""Training loop: cosine learning rate per step, staged condensation at
epoch boundaries, group-lasso regularization while condensing, per-epoch
logging, and restartable checkpoints.

Determinism contract: one PCG64 generator drives initialization,
shuffling, augmentation, and dropout, in that order. Its state is saved
in every checkpoint, so resuming from epoch E replays exactly the run
that never stopped, bit for bit.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .arch import LgcNet, ModelConfig, fc_condense
from .checkpoint import load_checkpoint, restore_model, save_model
from .data import Dataset, augment_batch, batch_indices
from .errors import ConfigError, TrainingDiverged
from .lgc import (CondensationSchedule, apply_group_lasso, condensation_tick,
                  cosine_lr)
from .optim import SGDNesterov
from .tensor import Tensor, no_grad, softmax_cross_entropy, tune_allocator

LOG_FIELDS = ("epoch", "lr", "train_loss", "test_error",
              "surviving_fraction", "seconds")
LASSO_WINDOWS = ("condensing", "always", "off")


@dataclass
class TrainSettings:
    epochs: int = 300
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_bn: bool = True
    lambda_lasso: float = 1e-5
    lasso_window: str = "condensing"
    fc_condense_epoch: int | None = None
    seed: int = 0
    dtype: str = "float32"
    augment: bool | None = None  # None: on for cifar10, off for mnist
    checkpoint_every: int = 1
    eval_every: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.lambda_lasso < 0:
            raise ConfigError("weight_decay and lambda_lasso must be >= 0")
        if self.lasso_window not in LASSO_WINDOWS:
            raise ConfigError(
                f"lasso_window {self.lasso_window!r} not in {LASSO_WINDOWS}"
            )
        if self.fc_condense_epoch is not None and self.fc_condense_epoch < 1:
            raise ConfigError("fc_condense_epoch must be >= 1 when set")
        if np.dtype(self.dtype) not in (np.dtype("float32"), np.dtype("float64")):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainSettings":
        return TrainSettings(**d)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    test_error: float
    surviving_fraction: float
    seconds: float


@dataclass
class TrainResult:
    model: LgcNet
    log: list[EpochStats]
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    prune_event: dict | None = None


def evaluate(model, dataset: Dataset, batch_size: int = 250) -> tuple[float, float]:
    """(mean cross-entropy, error rate) of a model on a dataset."""
    model.eval()
    dtype = np.dtype(model.dtype)
    loss_sum = 0.0
    wrong = 0
    n = len(dataset)
    with no_grad():
        for idx in batch_indices(n, batch_size):
            x = Tensor(dataset.images[idx].astype(dtype, copy=False))
            y = dataset.labels[idx]
            logits = model(x)
            loss_sum += softmax_cross_entropy(logits, y).item() * idx.size
            wrong += int((logits.data.argmax(axis=1) != y).sum())
    return loss_sum / n, wrong / n


def _check_data_shape(config: ModelConfig, dataset: Dataset):
    n, c, h, w = dataset.images.shape
    if c != config.in_channels:
        raise ConfigError(
            f"model expects {config.in_channels} input channels, data has {c}"
        )
    if h != config.input_resolution or w != h:
        raise ConfigError(
            f"model expects {config.input_resolution}x{config.input_resolution} "
            f"inputs, data is {h}x{w}"
        )


class _LogWriter:
    def __init__(self, path: Path | None, append: bool):
        self.path = path
        self._fh = None
        if path is not None:
            exists = path.exists() and append
            self._fh = open(path, "a" if append else "w", newline="")
            self._csv = csv.writer(self._fh)
            if not exists:
                self._csv.writerow(LOG_FIELDS)
                self._fh.flush()

    def write(self, row: EpochStats):
        if self._fh is None:
            return
        self._csv.writerow([row.epoch, f"{row.lr:.10g}", f"{row.train_loss:.10g}",
                            f"{row.test_error:.10g}",
                            f"{row.surviving_fraction:.10g}",
                            f"{row.seconds:.3f}"])
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _make_optimizer(model: LgcNet, settings: TrainSettings) -> SGDNesterov:
    no_decay = None if settings.decay_bn else model.bn_parameters()
    opt = SGDNesterov(model.trainable_parameters(), momentum=settings.momentum,
                      weight_decay=settings.weight_decay, no_decay=no_decay)
    for layer in model.lgc_layers():
        opt.attach_mask(layer.filter, layer.mask)
    if model.classifier.prunable:
        opt.attach_mask(model.classifier.weight, model.classifier.mask)
    return opt


def _trainable_names(model: LgcNet) -> list[str]:
    return [n for n, p in model.named_parameters() if p.requires_grad]


def _run_epochs(model: LgcNet, optimizer: SGDNesterov, rng: np.random.Generator,
                settings: TrainSettings, train_set: Dataset, test_set: Dataset,
                start_epoch: int, end_epoch: int, schedule: CondensationSchedule | None,
                log: list[EpochStats], writer: _LogWriter,
                ckpt_path: Path | None, epoch_offset: int = 0,
                fc_epoch: int | None = None, fc_factor: int = 1,
                sched_epochs: int | None = None, on_epoch=None) -> None:
    """Run epochs [start_epoch, end_epoch) of a phase whose cosine
    schedule spans sched_epochs epochs (end_epoch when omitted; a run
    stopped early passes the full plan here so the learning rate curve
    is unaffected). Epoch numbers in the log are offset by epoch_offset
    (used by the two-phase baseline)."""
    dtype = np.dtype(settings.dtype)
    n = len(train_set)
    spe = math.ceil(n / settings.batch_size)
    if sched_epochs is None:
        sched_epochs = end_epoch
    total_steps = sched_epochs * spe
    augment = settings.augment
    if augment is None:
        augment = train_set.name == "cifar10"
    flip = train_set.name != "mnist"
    lasso_on = settings.lambda_lasso > 0 and settings.lasso_window != "off"

    for epoch in range(start_epoch, end_epoch):
        t0 = time.monotonic()
        model.train()
        if settings.lasso_window == "condensing":
            lasso_now = lasso_on and schedule is not None \
                and epoch < schedule.condensing_epochs
        else:
            lasso_now = lasso_on
        lr_first = cosine_lr(epoch * spe, total_steps, settings.lr0)
        loss_sum = 0.0
        step = epoch * spe
        for idx in batch_indices(n, settings.batch_size, rng):
            xb = train_set.images[idx]
            if augment:
                xb = augment_batch(xb, rng, flip=flip)
            x = Tensor(xb.astype(dtype, copy=False))
            logits = model(x, rng)
            ce = softmax_cross_entropy(logits, train_set.labels[idx])
            ce_val = ce.item()
            if not math.isfinite(ce_val):
                raise TrainingDiverged(epoch_offset + epoch + 1, step, ce_val)
            loss = ce
            if lasso_now:
                loss = apply_group_lasso(ce, model.lgc_layers(),
                                         settings.lambda_lasso)
            optimizer.zero_grad()
            loss.backward()
            optimizer.lr = cosine_lr(step, total_steps, settings.lr0)
            optimizer.step()
            loss_sum += ce_val * idx.size
            step += 1

        completed = epoch + 1
        if schedule is not None:
            stage = condensation_tick(schedule, completed)
            if stage is not None:
                for layer in model.lgc_layers():
                    layer.condense_to_stage(stage)
        if fc_epoch is not None and completed == fc_epoch and fc_factor > 1:
            fc_condense(model.classifier, fc_factor)

        if completed % settings.eval_every == 0 or completed == end_epoch:
            test_loss, test_error = evaluate(model, test_set)
        else:
            test_error = float("nan")  # skipped this epoch, see eval_every
        row = EpochStats(epoch_offset + completed, lr_first, loss_sum / n,
                         test_error, model.surviving_fraction(),
                         time.monotonic() - t0)
        log.append(row)
        writer.write(row)
        if on_epoch is not None:
            on_epoch(row)

        if ckpt_path is not None and (
            completed % settings.checkpoint_every == 0 or completed == end_epoch
        ):
            save_model(
                ckpt_path, model, "train",
                optimizer=optimizer, optimizer_names=_trainable_names(model),
                epoch=completed, total_epochs=sched_epochs,
                epoch_offset=epoch_offset,
                rng_state=rng.bit_generator.state,
                train_settings=settings.to_dict(),
            )


def train(config: ModelConfig, settings: TrainSettings, train_set: Dataset,
          test_set: Dataset, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          stop_after: int | None = None, on_epoch=None) -> TrainResult:
    """Train a fresh model, or continue one from a training checkpoint.

    Writes train_log.csv and last.ckpt under out_dir when given. Resume
    requires the checkpoint's configuration and settings to match; the
    continued run is bit-identical to one that never stopped.

    stop_after ends the run once that many epochs are complete while the
    learning rate and condensation schedules keep spanning the full plan,
    so a later resume picks up mid-curve.
    """
    settings.validate()
    config.validate()
    _check_data_shape(config, train_set)
    _check_data_shape(config, test_set)
    tune_allocator()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "last.ckpt" if out is not None else None
    log_path = out / "train_log.csv" if out is not None else None

    schedule = None
    if config.condense_factor > 1:
        schedule = CondensationSchedule(settings.epochs, config.condense_factor)

    log: list[EpochStats] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.form != "train":
            raise ConfigError("can only resume from a training-form checkpoint")
        if ckpt.config != config:
            raise ConfigError("checkpoint was written for a different model config")
        saved = TrainSettings.from_dict(ckpt.header["train_settings"])
        # cadence knobs do not affect the math, so they may differ on resume
        relevant = lambda s: {k: v for k, v in s.to_dict().items()
                              if k not in ("checkpoint_every", "eval_every")}
        if relevant(saved) != relevant(settings):
            raise ConfigError(
                "checkpoint was written with different training settings"
            )
        model = restore_model(ckpt)
        rng = np.random.default_rng(settings.seed)
        rng.bit_generator.state = ckpt.header["rng_state"]
        start_epoch = int(ckpt.header["epoch"])
        optimizer = _make_optimizer(model, settings)
        optimizer.load_state_arrays(_trainable_names(model), ckpt.arrays)
    else:
        rng = np.random.default_rng(settings.seed)
        model = LgcNet(config, rng, dtype=np.dtype(settings.dtype))
        start_epoch = 0
        optimizer = _make_optimizer(model, settings)

    end_epoch = settings.epochs
    if stop_after is not None:
        if not start_epoch < stop_after <= settings.epochs:
            raise ConfigError(
                f"stop_after {stop_after} outside ({start_epoch}, {settings.epochs}]"
            )
        end_epoch = stop_after

    writer = _LogWriter(log_path, append=resume_from is not None)
    try:
        _run_epochs(model, optimizer, rng, settings, train_set, test_set,
                    start_epoch, end_epoch, schedule, log, writer,
                    ckpt_path, fc_epoch=settings.fc_condense_epoch,
                    fc_factor=config.fc_condense_factor,
                    sched_epochs=settings.epochs, on_epoch=on_epoch)
    finally:
        writer.close()
    return TrainResult(model, log, ckpt_path, log_path)


def traditional_prune_baseline(config: ModelConfig, settings: TrainSettings,
                               train_set: Dataset, test_set: Dataset,
                               out_dir: str | Path | None = None,
                               on_epoch=None) -> TrainResult:
    """Train dense, prune once, fine-tune: the conventional comparison.

    Phase one trains for settings.epochs with no condensation and no
    lasso. All pruning stages are then applied back to back (identical
    final cardinality to the staged schedule). Phase two fine-tunes the
    fixed structure for another settings.epochs with a fresh optimizer
    and a fresh cosine schedule. The log spans exactly 2 * epochs rows
    in the same format as train()."""
    settings.validate()
    config.validate()
    _check_data_shape(config, train_set)
    _check_data_shape(config, test_set)
    tune_allocator()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "baseline.ckpt" if out is not None else None
    log_path = out / "baseline_log.csv" if out is not None else None

    rng = np.random.default_rng(settings.seed)
    model = LgcNet(config, rng, dtype=np.dtype(settings.dtype))
    log: list[EpochStats] = []
    writer = _LogWriter(log_path, append=False)
    try:
        optimizer = _make_optimizer(model, settings)
        _run_epochs(model, optimizer, rng, settings, train_set, test_set,
                    0, settings.epochs, schedule=None, log=log, writer=writer,
                    ckpt_path=ckpt_path, on_epoch=on_epoch)

        pre_loss, pre_error = evaluate(model, test_set)
        for stage in range(1, config.condense_factor):
            for layer in model.lgc_layers():
                layer.condense_to_stage(stage)
        if config.fc_condense_factor > 1:
            fc_condense(model.classifier, config.fc_condense_factor)
        post_loss, post_error = evaluate(model, test_set)
        prune_event = {
            "pre_prune_loss": pre_loss, "post_prune_loss": post_loss,
            "pre_prune_error": pre_error, "post_prune_error": post_error,
        }

        optimizer = _make_optimizer(model, settings)  # fresh velocity
        _run_epochs(model, optimizer, rng, settings, train_set, test_set,
                    0, settings.epochs, schedule=None, log=log, writer=writer,
                    ckpt_path=ckpt_path, epoch_offset=settings.epochs,
                    on_epoch=on_epoch)
    finally:
        writer.close()
    return TrainResult(model, log, ckpt_path, log_path, prune_event=prune_event)
