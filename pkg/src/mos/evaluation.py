"""Frozen-feature evaluation: feature extraction, weighted kNN and a linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import to_chw
from .checkpoint import read_container, write_container
from .data import Dataset
from .trainer import ConfigError, TrainConfig, TrainState, load_checkpoint


@dataclass(frozen=True)
class FeatureMatrix:
    features: np.ndarray  # (n, embed_dim)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")


@torch.no_grad()
def extract_features(ds: Dataset, checkpoint: str | TrainState, cfg: TrainConfig | None = None,
                     batch_size: int = 256) -> FeatureMatrix:
    """CLS embeddings of the base encoder (heads excluded); normalization is the only transform."""
    if isinstance(checkpoint, str):
        state, cfg = load_checkpoint(checkpoint)
    else:
        state = checkpoint
        if cfg is None:
            raise ValueError("cfg is required with an in-memory state")
    if ds.image_size != cfg.image_size:
        raise ConfigError(f"dataset images are {ds.image_size}px, encoder expects {cfg.image_size}px")
    model = state.model
    model.eval()
    dtype = next(model.parameters()).dtype
    mean = torch.tensor(cfg.normalize_mean or (0.0, 0.0, 0.0), dtype=dtype).view(1, -1, 1, 1)
    std = torch.tensor(cfg.normalize_std or (1.0, 1.0, 1.0), dtype=dtype).view(1, -1, 1, 1)
    out = []
    for start in range(0, len(ds), batch_size):
        x = to_chw(ds.images[start:start + batch_size]).to(dtype)
        out.append(model.base((x - mean) / std))
    model.train()
    feats = torch.cat(out).numpy() if out else np.zeros((0, cfg.embed_dim), np.float32)
    return FeatureMatrix(feats, np.asarray(ds.labels))


def knn_predict(train: FeatureMatrix, test: FeatureMatrix, k: int = 20, knn_tau: float = 0.07,
                chunk: int = 1024) -> np.ndarray:
    if k > len(train.labels) or k < 1:
        raise ConfigError(f"k={k} must be in 1..{len(train.labels)}")
    if train.features.shape[1] != test.features.shape[1]:
        raise ConfigError("train and test features differ in dimension")
    bank = F.normalize(torch.as_tensor(train.features, dtype=torch.float64), dim=1)
    bank_labels = torch.as_tensor(np.array(train.labels), dtype=torch.long)
    classes = int(max(train.labels.max(), test.labels.max() if len(test.labels) else 0)) + 1
    preds = []
    for start in range(0, len(test.labels), chunk):
        q = F.normalize(torch.as_tensor(test.features[start:start + chunk], dtype=torch.float64), dim=1)
        sim, idx = (q @ bank.T).topk(k, dim=1)
        votes = torch.zeros(q.shape[0], classes, dtype=torch.float64)
        votes.scatter_add_(1, bank_labels[idx], torch.exp(sim / knn_tau))
        preds.append(votes.argmax(1))  # first maximum, i.e. the smaller class id on ties
    return torch.cat(preds).numpy() if preds else np.zeros(0, np.int64)


def knn_eval(train: FeatureMatrix, test: FeatureMatrix, k: int = 20, knn_tau: float = 0.07) -> float:
    """Accuracy of an exp(sim/knn_tau)-weighted vote over the k most cosine-similar training rows."""
    pred = knn_predict(train, test, k, knn_tau)
    return float((pred == test.labels).mean()) if len(pred) else 0.0


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, epochs: int = 100, lr: float = 0.1,
                 seed: int = 0, batch_size: int = 256, weight_decay: float = 0.0) -> float:
    """Best test accuracy of a softmax-regression head trained on frozen, standardized features."""
    if not len(train.labels) or not len(test.labels):
        raise ValueError("linear probe needs non-empty splits")
    xtr = torch.as_tensor(train.features, dtype=torch.float32)
    xte = torch.as_tensor(test.features, dtype=torch.float32)
    mu, sd = xtr.mean(0), xtr.std(0).clamp_min(1e-6)
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    ytr = torch.as_tensor(np.array(train.labels), dtype=torch.long)
    yte = torch.as_tensor(np.array(test.labels), dtype=torch.long)
    classes = int(max(ytr.max(), yte.max())) + 1
    gen = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(xtr.shape[1], classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay)

    def accuracy() -> float:
        with torch.no_grad():
            return float((head(xte).argmax(1) == yte).float().mean())

    best = accuracy()
    for _ in range(epochs):
        order = torch.randperm(len(ytr), generator=gen)
        for start in range(0, len(ytr), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(head(xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        best = max(best, accuracy())
    return best


def save_features(fm: FeatureMatrix, path: str) -> None:
    write_container(path, {"features": fm.features, "labels": fm.labels.astype(np.float32)},
                    {"kind": "features"})


def load_features(path: str) -> FeatureMatrix:
    tensors, _ = read_container(path)
    return FeatureMatrix(tensors["features"], tensors["labels"].astype(np.int64))
