"""Training loops: adversarial reweighted training, baselines, fine-tuning.

Every batch of a ``faal`` run goes through three phases: a PGD attack on the
inputs, an exact KL-ball solve for the worst-case class weights on the
attacked batch's margins, and one weighted SGD update (per-sample weight
``w[y_i] * m / B`` so uniform weights reduce to the plain batch mean). The
``at_baseline`` mode runs the same loop with the reweighting phase disabled
and ``erm`` additionally skips the attack.

Learning rate and the divergence budget change at epoch boundaries only,
driven by ``[(epoch, value), ...]`` milestone schedules.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dro, nn, tensor
from .attack import AttackConfig, pgd_attack
from .data import Dataset, batches

log = logging.getLogger(__name__)

MODES = ("faal", "at_baseline", "erm")

Schedule = list[tuple[int, float]]


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed or does not match the expected schema."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step record."""

    def __init__(self, message: str, record: "StepRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    attack: AttackConfig
    batch_size: int = 128
    lr_schedule: Schedule = field(default_factory=lambda: [(0, 0.1)])
    tau_schedule: Schedule = field(default_factory=lambda: [(0, 0.5)])
    mode: str = "faal"
    divergence_direction: str = "anchor_first"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    ema_start_epoch: int = 0
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.divergence_direction not in dro.DIRECTIONS:
            raise ValueError(f"divergence_direction must be one of {dro.DIRECTIONS}")
        for name, sched in (("lr_schedule", self.lr_schedule), ("tau_schedule", self.tau_schedule)):
            if not sched:
                raise ValueError(f"{name} must not be empty")
            epochs = [e for e, _ in sched]
            if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
                raise ValueError(f"{name} milestones must be strictly increasing")
            if epochs[0] != 0:
                raise ValueError(f"{name} must define a value from epoch 0")
            if any(v < 0 for _, v in sched):
                raise ValueError(f"{name} values must be >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")


@dataclass
class StepRecord:
    epoch: int
    batch: int
    tau: float
    loss: float
    achieved_divergence: float
    weights: np.ndarray  # (n_classes,), nan for classes absent from the batch


@dataclass
class TrainResult:
    model: nn.Mlp
    ema_model: nn.Mlp
    records: list[StepRecord]
    fallback_count: int = 0


def schedule_value(schedule: Schedule, epoch: int) -> float:
    """Value of the latest milestone at or before ``epoch``."""
    value = schedule[0][1]
    for e, v in schedule:
        if e <= epoch:
            value = v
    return value


def _uniform_weights(margins: nn.ClassMargins, tau: float, direction: str) -> dro.DroWeights:
    classes = np.flatnonzero(margins.present)
    m = classes.shape[0]
    w = np.full(m, 1.0 / m)
    return dro.DroWeights(
        classes=classes, weights=w, tau=tau, direction=direction,
        achieved_divergence=0.0,
        objective_value=float(np.mean(margins.present_values())),
    )


def train(model: nn.Mlp, train_ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Run the configured training loop; mutates and returns the model.

    Returns the final model, the EMA shadow model (a copy of the final model
    when EMA never activated), the per-step log, and the number of batches
    where the weight solver had to fall back to uniform (0 on sane runs).
    """
    n_classes = train_ds.n_classes
    if model.n_classes != n_classes or model.in_dim != train_ds.x.shape[1]:
        raise tensor.DimensionError("model and dataset shapes disagree")
    batch_rng = tensor.new_rng(cfg.seed, stream=1)
    attack_rng = tensor.new_rng(cfg.seed, stream=2)
    opt = nn.Sgd(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    ema: nn.Ema | None = None
    records: list[StepRecord] = []
    fallbacks = 0

    for epoch in range(cfg.epochs):
        lr = schedule_value(cfg.lr_schedule, epoch)
        tau = schedule_value(cfg.tau_schedule, epoch)
        if ema is None and epoch >= cfg.ema_start_epoch:
            ema = nn.Ema(model, cfg.ema_decay)
        for b, (xb, yb) in enumerate(batches(train_ds, cfg.batch_size, batch_rng)):
            if cfg.mode == "erm":
                x_adv = xb
            else:
                x_adv = pgd_attack(model, xb, yb, cfg.attack, rng=attack_rng)
            bundle = model.forward(x_adv)
            ce = nn.ce_loss_per_sample(bundle.softmax, yb)
            if cfg.mode == "faal":
                margins = nn.cw_margin_per_class(bundle.softmax, yb, n_classes)
                try:
                    w = dro.solve_kl_dro(margins, tau, cfg.divergence_direction)
                except (ValueError, FloatingPointError) as err:
                    log.warning("weight solve failed (%s); using uniform weights", err)
                    w = _uniform_weights(margins, tau, cfg.divergence_direction)
                    fallbacks += 1
                sample_weights = dro.expand_to_sample_weights(w, yb, n_classes) / xb.shape[0]
                record = StepRecord(
                    epoch=epoch, batch=b, tau=tau,
                    loss=float(sample_weights @ ce),
                    achieved_divergence=w.achieved_divergence,
                    weights=w.by_class(n_classes),
                )
            else:
                present = np.unique(yb)
                weights = np.full(n_classes, np.nan)
                weights[present] = 1.0 / present.shape[0]
                sample_weights = np.full(xb.shape[0], 1.0 / xb.shape[0])
                record = StepRecord(
                    epoch=epoch, batch=b, tau=0.0,
                    loss=float(sample_weights @ ce),
                    achieved_divergence=0.0, weights=weights,
                )
            if not np.isfinite(record.loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b}", record)
            model.backward(x_adv, yb, sample_weights)
            opt.step(model, lr)
            if ema is not None:
                ema.update(model)
            records.append(record)

    ema_model = ema.model() if ema is not None else model.clone()
    return TrainResult(model=model, ema_model=ema_model, records=records,
                       fallback_count=fallbacks)


def finetune(checkpoint_path, train_ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Load a checkpoint and continue training under ``cfg``.

    The EMA shadow warm-starts from the loaded parameters when
    ``cfg.ema_start_epoch`` is 0 (the fine-tuning default).
    """
    model, meta = load_checkpoint(checkpoint_path)
    if model.in_dim != train_ds.x.shape[1] or model.n_classes != train_ds.n_classes:
        raise CheckpointFormatError(
            f"checkpoint arch {meta.get('arch')} does not match the dataset")
    return train(model, train_ds, cfg)


def finetune_overrides(cfg: TrainConfig) -> TrainConfig:
    """Fine-tuning defaults: 2 epochs, lr 0.01 then 0.001, divergence budget 0.5."""
    return replace(
        cfg,
        epochs=2,
        lr_schedule=[(0, 0.01), (1, 0.001)],
        tau_schedule=[(0, 0.5)],
        mode="faal",
        ema_start_epoch=0,
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(model: nn.Mlp, path, epoch: int = 0, seed: int = 0) -> None:
    """Checkpoint as JSON with 17-significant-digit floats (lossless round-trip)."""
    layer_parts = []
    for l in model.layers:
        w = "[" + ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in l.w) + "]"
        b = "[" + ",".join(_fmt(v) for v in l.b) + "]"
        layer_parts.append('{"w":' + w + ',"b":' + b + "}")
    meta = json.dumps({"arch": model.dims, "epoch": int(epoch), "seed": int(seed)},
                      sort_keys=True, separators=(",", ":"))
    with open(path, "w", newline="") as f:
        f.write('{"layers":[' + ",".join(layer_parts) + '],"meta":' + meta + "}")


def load_checkpoint(path) -> tuple[nn.Mlp, dict]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as err:
        raise CheckpointFormatError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(doc, dict) or "layers" not in doc or "meta" not in doc:
        raise CheckpointFormatError(f"{path}: missing 'layers' or 'meta'")
    layers = []
    try:
        for part in doc["layers"]:
            w = tensor.as_matrix(part["w"])
            b = np.asarray(part["b"], dtype=np.float64)
            if b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise CheckpointFormatError(f"{path}: bias shape does not match weights")
            tensor.check_finite(b, "bias")
            layers.append(nn.Layer(w=w, b=b))
        model = nn.Mlp(layers)
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointFormatError(f"{path}: malformed layer data ({err})") from err
    meta = doc["meta"]
    if meta.get("arch") != model.dims:
        raise CheckpointFormatError(f"{path}: meta arch {meta.get('arch')} != {model.dims}")
    return model, meta


STEP_LOG_BASE_COLUMNS = ["epoch", "batch", "tau", "L_faal", "achieved_divergence"]


def write_step_log(records: list[StepRecord], path, n_classes: int) -> None:
    """Step log CSV; weight cells are empty for classes absent from a batch."""
    header = STEP_LOG_BASE_COLUMNS + [f"w_{c}" for c in range(n_classes)]
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for r in records:
            cells = [str(r.epoch), str(r.batch), _fmt(r.tau), _fmt(r.loss),
                     _fmt(r.achieved_divergence)]
            cells += ["" if np.isnan(w) else _fmt(w) for w in r.weights]
            f.write(",".join(cells) + "\n")


def read_step_log(path) -> list[StepRecord]:
    with open(path, newline="") as f:
        header = f.readline().strip().split(",")
        n_classes = len(header) - len(STEP_LOG_BASE_COLUMNS)
        out = []
        for line in f:
            cells = line.rstrip("\n").split(",")
            weights = np.array([float(c) if c else np.nan for c in cells[5:]])
            out.append(StepRecord(
                epoch=int(cells[0]), batch=int(cells[1]), tau=float(cells[2]),
                loss=float(cells[3]), achieved_divergence=float(cells[4]),
                weights=weights))
        assert all(r.weights.shape[0] == n_classes for r in out)
    return out
