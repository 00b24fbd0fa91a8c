"""Desk-scale efficacy experiment shared by the acceptance suite and scripts/."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data import Dataset, generate_synthetic
from .evaluation import extract_features, knn_eval
from .trainer import TrainConfig, TrainingAborted, init_state, pretrain, with_dataset_stats

# micro-ViT: 16px images, 4px patches, 2 blocks of width 64
DESK = dict(image_size=16, patch_size=4, embed_dim=64, depth=2, heads=4, mlp_ratio=4.0,
            head_hidden=128, head_out=32, batch_size=64, epochs=100, warmup_epochs=5,
            r_choices=(1, 2), S=2, tau=0.2)
TRAIN_SIZE, TEST_SIZE, CLASSES = 2000, 600, 3


@dataclass
class RunResult:
    seed: int
    losses: tuple[str, ...]
    knn: float | None  # None when training aborted
    random_init_knn: float
    seconds: float
    first_epoch_loss: float | None = None
    last_epoch_loss: float | None = None
    aborted: str | None = None
    curve: list[float] = field(default_factory=list)  # per-epoch mean l_total


def desk_data(size: int = 16) -> tuple[Dataset, Dataset]:
    return (generate_synthetic(TRAIN_SIZE, CLASSES, size, seed=0),
            generate_synthetic(TEST_SIZE, CLASSES, size, seed=1))


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    return TrainConfig(**{**DESK, "seed": seed, **overrides})


def features_knn(train: Dataset, test: Dataset, state, cfg: TrainConfig, k: int = 20) -> float:
    return knn_eval(extract_features(train, state, cfg), extract_features(test, state, cfg), k=k)


def efficacy_run(seed: int, losses=("m2s", "m2m", "s2s"), data=None, **overrides) -> RunResult:
    """Pretrain one seed and score kNN on held-out images, next to its own random init."""
    train, test = data or desk_data()
    cfg = with_dataset_stats(desk_config(seed, losses=tuple(losses), **overrides), train).validate()
    base = features_knn(train, test, init_state(cfg), cfg)
    t0 = time.time()
    try:
        state, records = pretrain(train, cfg)
    except TrainingAborted as exc:
        return RunResult(seed, tuple(losses), None, base, time.time() - t0, aborted=str(exc))
    per = len(records) // cfg.epochs if cfg.epochs else 0
    curve = [sum(r["l_total"] for r in records[e * per:(e + 1) * per]) / per for e in range(cfg.epochs)]
    knn = features_knn(train, test, state, cfg)
    return RunResult(seed, tuple(losses), knn, base, time.time() - t0,
                     curve[0] if curve else None, curve[-1] if curve else None, curve=curve)
