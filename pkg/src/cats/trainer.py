"""Training loop: patch sampling, augmentation, Dice loss, Adam, checkpoints.

Every step draws from its own generator seeded by ``(seed, step)``, so a
run resumed from a checkpoint sees the same batches, crops and augmentations
as the uninterrupted run.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .inference import predict_labels
from .metrics import dice_loss, dice_score
from .model import CatsConfig, ablate_transformer, forward, init_params, is_transformer_param
from .optim import AdamState, adam_step
from .params import ParameterSet
from .phantoms import SyntheticPhantomSpec, generate_phantoms
from .preprocess import AugmentConfig, augment, crop_or_pad

log = logging.getLogger(__name__)

__all__ = ["AdamState", "adam_step", "SyntheticPhantomSpec", "generate_phantoms", "TrainConfig",
           "TrainResult", "NonFiniteLossError", "train", "write_loss_tsv", "read_loss_tsv"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    max_steps: int = 400
    val_interval: int = 50
    seed: int = 0
    checkpoint_dir: str | None = None
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    foreground_prob: float = 0.5
    # zero the transformer path and keep it out of the optimizer
    freeze_transformer: bool = False
    val_overlap: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"lr must be a finite value >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.val_interval < 1:
            raise ValueError("need max_steps >= 0 and val_interval >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)


@dataclass
class TrainResult:
    params: ParameterSet
    adam: AdamState
    # (step, loss, val_dice); val_dice is NaN between validations
    history: list[tuple[int, float, float]]
    best_dice: float
    best_step: int


def _arrays(pair):
    image, label = pair
    return (np.asarray(getattr(image, "data", image), dtype=np.float32),
            np.asarray(getattr(label, "data", label)).astype(np.int64))


def sample_batch(data, step: int, cfg: CatsConfig, tcfg: TrainConfig):
    rng = np.random.default_rng([tcfg.seed, step])
    n = len(data)
    if n >= tcfg.batch_size:
        idx = rng.permutation(n)[:tcfg.batch_size]
    else:
        idx = rng.integers(0, n, tcfg.batch_size)
    images, labels = [], []
    for i in idx:
        img, lab = crop_or_pad(*data[i], cfg.input_size, rng, "random", tcfg.foreground_prob)
        if tcfg.augment is not None:
            img, lab = augment(img, lab, tcfg.augment, rng)
        images.append(img)
        labels.append(lab)
    return np.stack(images)[:, None], np.stack(labels)


def validate(data, ps: ParameterSet, cfg: CatsConfig, overlap: float = 0.5) -> float:
    """Mean over cases and foreground classes of the Dice of the argmax prediction."""
    scores = []
    for image, label in data:
        pred = predict_labels(image, ps, cfg, overlap=overlap)
        scores.extend(dice_score(pred, label, c) for c in range(1, cfg.num_classes))
    return float(np.mean(scores))


def write_loss_tsv(history, path) -> None:
    lines = ["step\tloss\tval_dice"]
    for step, loss, val in history:
        lines.append(f"{step}\t{loss!r}\t{'nan' if math.isnan(val) else repr(val)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_tsv(path) -> list[tuple[int, float, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        s, loss, val = row.split("\t")
        out.append((int(s), float(loss), float(val)))
    return out


def train(cfg: CatsConfig, data, tcfg: TrainConfig, val_data=None,
          params: ParameterSet | None = None, resume=None, meta: dict | None = None) -> TrainResult:
    """Run ``tcfg.max_steps`` optimizer steps in total (resumed steps count).

    ``data`` and ``val_data`` are sequences of (image, label) pairs, either
    arrays or volumes, already intensity-normalised.  Validation defaults
    to the training set.  ``meta`` is stored verbatim in every checkpoint.
    """
    data = [_arrays(p) for p in data]
    if not data:
        raise ValueError("training set is empty")
    val_data = data if val_data is None else [_arrays(p) for p in val_data]
    if cfg.unet.norm and tcfg.batch_size < 2:
        raise ValueError("batch norm in training mode needs batch_size >= 2")

    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config is not None and CatsConfig.from_dict(ck.config) != cfg:
            raise ValueError(f"{resume}: checkpoint config does not match the model config")
        ps, adam = ck.params, ck.adam or AdamState(lr=tcfg.lr)
        adam.lr = tcfg.lr
        start = int(ck.meta.get("step", 0))
        history = [tuple(r) for r in ck.meta.get("history", [])]
        best_dice = float(ck.meta.get("best_dice", -math.inf))
        best_step = int(ck.meta.get("best_step", 0))
    else:
        ps = params if params is not None else init_params(cfg, tcfg.seed)
        if tcfg.freeze_transformer:
            ps = ablate_transformer(ps)
        adam = AdamState(lr=tcfg.lr)
        start, history, best_dice, best_step = 0, [], -math.inf, 0

    trainable = [n for n in ps.names()
                 if not (tcfg.freeze_transformer and is_transformer_param(n))]

    def checkpoint(step: int, name: str):
        state = dict(meta or {})
        state.update(step=step, history=[list(r) for r in history], best_dice=best_dice,
                     best_step=best_step, seed=tcfg.seed)
        save_checkpoint(ckpt_dir / name, ps, cfg.to_dict(), adam, state)

    for step in range(start + 1, tcfg.max_steps + 1):
        x, y = sample_batch(data, step, cfg, tcfg)
        loss = dice_loss(forward(x, ps, cfg, training=True), y)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at step {step}")
        loss.backward()
        adam_step(ps, adam, trainable)
        ps.zero_grad()

        val = math.nan
        if step % tcfg.val_interval == 0 or step == tcfg.max_steps:
            val = validate(val_data, ps, cfg, tcfg.val_overlap)
            log.info("step %d loss %.5f val_dice %.4f", step, value, val)
        else:
            log.debug("step %d loss %.5f", step, value)
        history.append((step, value, val))
        if not math.isnan(val):
            improved = val > best_dice
            if improved:
                best_dice, best_step = val, step
            if ckpt_dir is not None:
                if improved:
                    checkpoint(step, "best.ckpt")
                checkpoint(step, "last.ckpt")
                write_loss_tsv(history, ckpt_dir / "loss.tsv")

    return TrainResult(ps, adam, history, best_dice, best_step)
