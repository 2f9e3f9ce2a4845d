"""Experiment configuration, the training loop and repeated train/eval runs."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import ImageDataset, load_dataset
from .masks import Ensemble, build_mask_set, keep_probability, MaskSet, sample_train_mask
from .metrics import DetectionReport, ScoringOptions, aggregate, misclassification_detection, ood_detection
from .rng import stream
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

MODES = ("sdc", "baseline", "mc")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    ood_images: str = ""
    rho: int = 10
    epochs: int = 40
    batch_size: int = 256
    lr: float = 7.5e-4
    seed: int = 0
    repeats: int = 5
    mode: str = "sdc"
    mc_samples: int = 10
    num_classes: int = 10
    train_limit: int = 0  # 0 = use the whole training set
    train_scale: bool = True
    test_scale: bool = True
    postprocess: bool = False
    denominator: str = "classes"
    entropy: str = "mean"

    def validate(self) -> ExperimentConfig:
        for name in ("rho", "epochs", "batch_size", "repeats", "mc_samples", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.rho < 2:
            raise ConfigError("rho must be at least 2")
        if self.mc_samples < 2:
            raise ConfigError("mc_samples must be at least 2")
        if self.seed < 0 or self.train_limit < 0:
            raise ConfigError("seed and train_limit must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.denominator not in ("classes", "dense"):
            raise ConfigError("denominator must be 'classes' or 'dense'")
        if self.entropy not in ("mean", "expected"):
            raise ConfigError("entropy must be 'mean' or 'expected'")
        return self

    @property
    def scoring(self) -> ScoringOptions:
        return ScoringOptions(self.postprocess, self.denominator, self.entropy)

    def lines(self) -> list[str]:
        """``key=value`` lines in field order; parsing them gives the same config back."""
        return [f"{f.name}={_format_value(getattr(self, f.name))}" for f in fields(self)]

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(kind, text: str):
    text = text.strip()
    if kind in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    changes = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in types:
            raise ConfigError(f"line {n}: expected key=value with a known key, got {raw!r}")
        try:
            changes[key] = _parse_value(types[key], value)
        except ValueError as e:
            raise ConfigError(f"line {n}: {e}") from None
    return dataclasses.replace(base or ExperimentConfig(), **changes)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    specs: list
    state: nn.ModelState
    mask_set: MaskSet
    log_rows: list[tuple[int, float, float]]


def train(
    config: ExperimentConfig,
    train_set: ImageDataset,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Train LeNet5 with DropConnect (keep probability 1 - 1/rho) on the fc layers."""
    if train_set.labels is None:
        raise ConfigError("training set needs labels")
    cfg = config
    specs, state = nn.build_lenet5(cfg.num_classes, cfg.seed)
    state.training_mode = True
    adam = nn.AdamState(lr=cfg.lr)
    p = keep_probability(cfg.rho)
    scale = 1.0 / p if cfg.train_scale else 1.0
    dc_layers = nn.dropconnect_layers(specs)
    shuffle_rng = stream(cfg.seed, "shuffle")
    mask_rng = stream(cfg.seed, "trainmask")
    x_all, y_all = train_set.images, train_set.labels
    if cfg.train_limit:
        x_all, y_all = x_all[: cfg.train_limit], y_all[: cfg.train_limit]
    n = len(x_all)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = Tensor(x_all[idx]), y_all[idx]
            # fresh mask per batch and layer
            factors = {i: sample_train_mask(specs[i].weight_shape(), p, mask_rng) * scale for i in dc_layers}
            with GradTape() as tape:
                logits = nn.forward(specs, state, xb, weight_factors=factors)
                loss = nn.cross_entropy(logits, yb)
            tape.backward(loss)
            nn.adam_step(adam, state.parameters())
            state.zero_grad()
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        row = (epoch, loss_sum / n, correct / n)
        rows.append(row)
        log.info("epoch %d loss %.6f train_acc %.4f", *row)
        if progress:
            progress(*row)
    state.training_mode = False
    mask_set = build_mask_set(specs, cfg.rho, stream(cfg.seed, "split"), seed=cfg.seed)
    return TrainResult(specs, state, mask_set, rows)


def make_ensemble(config: ExperimentConfig, specs, state, mask_set: MaskSet | None) -> Ensemble:
    return Ensemble(
        specs,
        state,
        mode=config.mode,
        mask_set=mask_set,
        mc_samples=config.mc_samples,
        keep_p=keep_probability(config.rho),
        seed=config.seed,
        rescale=config.test_scale,
    )


def load_sets(config: ExperimentConfig, need_train: bool = True, need_ood: bool = False):
    k = config.num_classes
    train_set = None
    if need_train:
        train_set = load_dataset(config.train_images, config.train_labels, num_classes=k, split="train")
    test_set = load_dataset(config.test_images, config.test_labels, num_classes=k, split="test")
    ood_set = load_dataset(config.ood_images, None, split="ood") if need_ood else None
    return train_set, test_set, ood_set


def repeat_runs(config: ExperimentConfig, repeats: int | None = None) -> dict[str, DetectionReport]:
    """Train and evaluate ``repeats`` times with seeds seed, seed+1, ...; aggregate per task."""
    r_total = config.repeats if repeats is None else repeats
    if r_total < 1:
        raise ConfigError("repeats must be >= 1")
    want_ood = bool(config.ood_images)
    train_set, test_set, ood_set = load_sets(config, need_ood=want_ood)
    per_task: dict[str, list[DetectionReport]] = {}
    for r in range(r_total):
        cfg = config.replace(seed=config.seed + r)
        result = train(cfg, train_set)
        ens = make_ensemble(cfg, result.specs, result.state, result.mask_set)
        rep, _ = misclassification_detection(ens, test_set, cfg.scoring, seed=cfg.seed)
        per_task.setdefault(rep.task, []).append(rep)
        if want_ood:
            rep, _ = ood_detection(ens, test_set, ood_set, cfg.scoring, seed=cfg.seed)
            per_task.setdefault(rep.task, []).append(rep)
    return {task: aggregate(reps) for task, reps in per_task.items()}


def evaluate_accuracy(specs, state, test_set: ImageDataset) -> float:
    preds = Ensemble(specs, state, mode="baseline").outputs(test_set.images)[:, 0].argmax(axis=1)
    return float(np.mean(preds == test_set.labels))
