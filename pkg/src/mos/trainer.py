"""Pretraining loop: four views, stitching, forward, loss, AdamW step, EMA update."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from . import augment
from .checkpoint import CheckpointShapeError, read_container, write_container
from .data import Dataset, channel_stats
from .encoder import EncoderState, HeadConfig, NumericError, ViTConfig, ema_update, forward_all
from .losses import LOSS_TERMS, LossReport, total_loss
from .rng import KIND_BATCH, KIND_SAMPLE, KIND_SHUFFLE, RngStream
from .stitching import StitchConfig, build_view_grids, m2m_targets, stitch_batch

log = logging.getLogger(__name__)

# view slots inside a sample's stream path
VIEW_SLOTS = (1, 2, 3, 4)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 64
    lr_base: float = 1e-3
    lr_final: float = 0.0
    wd_base: float = 0.04
    wd_final: float = 0.4
    mu_base: float = 0.99
    mu_final: float = 1.0
    tau: float = 0.2
    r_choices: tuple[int, ...] = (1, 2)
    S: int = 2
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    deterministic: bool = True
    losses: tuple[str, ...] = LOSS_TERMS
    # backbone and heads
    image_size: int = 32
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden: int = 128
    head_out: int = 32
    head_norm: str = "layer"
    drop_path: float = 0.0
    # augmentation
    solarize_threshold: float = 0.5
    normalize_mean: tuple[float, ...] | None = None
    normalize_std: tuple[float, ...] | None = None
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self):
        for name in ("r_choices", "betas", "losses", "normalize_mean", "normalize_std"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))

    def validate(self) -> "TrainConfig":
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not self.r_choices or min(self.r_choices) < 1 or self.S < 1:
            raise ConfigError("r_choices and S must be positive")
        need = 2 * max(self.r_choices) ** 2 - 1
        if self.batch_size < need:
            raise ConfigError(f"batch_size {self.batch_size} < 2*max(r)^2-1 = {need}")
        if self.epochs < 0 or not 0 <= self.warmup_epochs:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if set(self.losses) - set(LOSS_TERMS) or not self.losses:
            raise ConfigError(f"losses must be a non-empty subset of {LOSS_TERMS}")
        for r in self.r_choices:
            StitchConfig(r, self.S, self.image_size)  # raises on divisibility
        self.vit_config()
        self.head_config()
        return self

    def vit_config(self) -> ViTConfig:
        return ViTConfig(self.image_size, self.patch_size, self.embed_dim, self.depth, self.heads,
                         self.mlp_ratio, 3, 0.0 if self.deterministic else self.drop_path)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.head_hidden, self.head_out, self.head_norm)

    def policies(self) -> tuple[augment.AugmentationPolicy, ...]:
        mean = self.normalize_mean or (0.0, 0.0, 0.0)
        std = self.normalize_std or (1.0, 1.0, 1.0)
        makers = (augment.t1_policy, augment.t2_policy, augment.t3_policy, augment.t4_policy)
        return tuple(replace(m(self.image_size), solarize_threshold=self.solarize_threshold)
                     .with_stats(mean, std) for m in makers)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def schedule_value(base: float, final: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base``, then half-cosine from ``base`` to ``final``."""
    if step < warmup_steps:
        return base * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    if frac == 0.0:
        return base
    if frac == 1.0:
        return final
    return final + (base - final) * (1 + math.cos(math.pi * frac)) / 2


@dataclass
class TrainState:
    model: EncoderState
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0  # next epoch to run


@dataclass(frozen=True)
class Batch:
    images: torch.Tensor  # (N, C, H, W), raw [0, 1]
    ids: tuple[int, ...]  # dataset indices, key the sample streams
    index: int  # batch position within its epoch


def _param_groups(model: EncoderState):
    decay, no_decay = [], []
    for name, p in model.trainable():
        # weight matrices only; biases, norms, cls token, positions are exempt
        is_matrix = p.dim() >= 2 and not name.endswith(("cls_token", "pos_embed"))
        (decay if is_matrix else no_decay).append(p)
    return [{"params": decay, "weight_decay": 0.0, "decay": True},
            {"params": no_decay, "weight_decay": 0.0, "decay": False}]


def init_state(cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    model = EncoderState(cfg.vit_config(), cfg.head_config(), seed=cfg.seed, dtype=dtype)
    opt = torch.optim.AdamW(_param_groups(model), lr=0.0, betas=cfg.betas, eps=cfg.adam_eps)
    return TrainState(model, opt)


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return n // cfg.batch_size


def schedules(cfg: TrainConfig, step: int, per_epoch: int) -> tuple[float, float, float]:
    total = max(1, cfg.epochs * per_epoch)
    warm = cfg.warmup_epochs * per_epoch
    return (schedule_value(cfg.lr_base, cfg.lr_final, step, total, warm),
            schedule_value(cfg.wd_base, cfg.wd_final, step, total, 0),
            schedule_value(cfg.mu_base, cfg.mu_final, step, total, 0))


def make_views(batch: Batch, cfg: TrainConfig, rng: RngStream, policies=None):
    """The four views of one batch plus stitching metadata.

    ``rng`` is the epoch stream. Sample streams are keyed by dataset id and
    view slot; the grid factor ``r`` is drawn once per batch from a batch stream
    and shared by both stitched views.
    """
    p1, p2, p3, p4 = policies or cfg.policies()
    r = int(rng.child(KIND_BATCH, batch.index).generator().choice(cfg.r_choices))
    scfg = StitchConfig(r, cfg.S, cfg.image_size)
    stitched = []
    for slot, pol in ((1, p1), (2, p2)):
        rngs = [rng.child(KIND_SAMPLE, i, slot) for i in batch.ids]
        grids = build_view_grids(batch.images, batch.ids, scfg, pol, rngs)
        stitched.append(stitch_batch(grids, scfg))
    singles = []
    for slot, pol in ((3, p3), (4, p4)):
        params = [augment.sample_params(rng.child(KIND_SAMPLE, i, slot).generator(),
                                        cfg.image_size, cfg.image_size, pol) for i in batch.ids]
        singles.append(augment.augment_views(batch.images, params, pol))
    return stitched[0], stitched[1], singles[0], singles[1], scfg


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig, rng: RngStream,
               per_epoch: int, policies=None) -> tuple[LossReport, dict]:
    """One optimization step; the EMA update runs strictly after the optimizer step."""
    lr, wd, mu = schedules(cfg, state.step, per_epoch)
    s1, s2, x3, x4, scfg = make_views(batch, cfg, rng, policies)
    n = batch.images.shape[0]
    dtype = next(state.model.parameters()).dtype
    try:
        bundle = forward_all(s1.images.to(dtype), s2.images.to(dtype), x3.to(dtype), x4.to(dtype),
                             state.model)
        targets = m2m_targets(n, scfg.M) if "m2m" in cfg.losses else None
        report = total_loss(bundle, s1.y_m2s, targets, cfg.tau, cfg.losses)
    except NumericError as exc:
        raise TrainingAborted(state.step, exc) from exc
    for g in state.optimizer.param_groups:
        g["lr"] = lr
        g["weight_decay"] = wd if g["decay"] else 0.0
    state.optimizer.zero_grad(set_to_none=True)
    report.l_total.backward()
    state.optimizer.step()
    ema_update(state.model.momentum, state.model.base, mu)
    record = {"step": state.step, "epoch": state.epoch, "r": scfg.r, "lr": lr, "wd": wd, "mu": mu,
              **report.metrics()}
    state.step += 1
    return report, record


def with_dataset_stats(cfg: TrainConfig, ds: Dataset) -> TrainConfig:
    if cfg.normalize_mean is not None and cfg.normalize_std is not None:
        return cfg
    mean, std = channel_stats(ds)
    return replace(cfg, normalize_mean=mean, normalize_std=std)


def run_epoch(ds: Dataset, state: TrainState, cfg: TrainConfig, images: torch.Tensor | None = None):
    """Yield metrics records for one epoch (shuffled, last partial batch dropped)."""
    epoch = state.epoch
    rng = RngStream(cfg.seed).child(epoch)
    order = rng.child(KIND_SHUFFLE).generator().permutation(len(ds))
    per_epoch = steps_per_epoch(len(ds), cfg)
    if images is None:
        images = augment.to_chw(ds.images)
    policies = cfg.policies()
    for b in range(per_epoch):
        ids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        batch = Batch(images[torch.from_numpy(ids)], tuple(int(i) for i in ids), b)
        _, record = train_step(batch, state, cfg, rng, per_epoch, policies)
        yield record
    state.epoch += 1


def pretrain(ds: Dataset, cfg: TrainConfig, out_dir: str | None = None,
             resume: str | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.epochs`` epochs; returns the final state and every metrics record.

    With ``out_dir`` set, records are appended to ``metrics.jsonl`` and
    checkpoints written at the configured cadence plus ``final.ckpt``.
    """
    if len(ds) == 0:
        raise ConfigError("dataset is empty")
    if ds.image_size != cfg.image_size:
        raise ConfigError(f"dataset images are {ds.image_size}px, config expects {cfg.image_size}px")
    cfg = with_dataset_stats(cfg, ds).validate()
    if steps_per_epoch(len(ds), cfg) == 0 and cfg.epochs:
        raise ConfigError(f"dataset of {len(ds)} images has no full batch of {cfg.batch_size}")
    state = load_checkpoint(resume)[0] if resume else init_state(cfg)
    metrics: list[dict] = []
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a" if resume else "w")
    images = augment.to_chw(ds.images)
    try:
        while state.epoch < cfg.epochs:
            for record in run_epoch(ds, state, cfg, images):
                metrics.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
            if log_fh:
                log_fh.flush()
            last = metrics[-1] if metrics else {}
            log.info("epoch %d done, l_total %.4f", state.epoch - 1, last.get("l_total", float("nan")))
            if out_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(state, cfg, os.path.join(out_dir, f"epoch{state.epoch:04d}.ckpt"))
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(state, cfg, os.path.join(out_dir, "final.ckpt"))
    return state, metrics


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt_steps = {}
    for name, p in state.model.named_parameters():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        tensors[f"optim.exp_avg.{name}"] = st["exp_avg"].detach().numpy()
        tensors[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().numpy()
        opt_steps[name] = int(st["step"])
    meta = {"step": state.step, "epoch": state.epoch, "config": cfg.to_dict(),
            "optimizer_steps": opt_steps}
    write_container(path, tensors, meta)


def load_checkpoint(path: str) -> tuple[TrainState, TrainConfig]:
    tensors, meta = read_container(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    model_sd = state.model.state_dict()
    for name, ref in model_sd.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise CheckpointShapeError(
                f"{name}: checkpoint shape {tuple(tensors[name].shape)} != model {tuple(ref.shape)}")
    state.model.load_state_dict({k: torch.from_numpy(tensors[k].copy()) for k in model_sd})
    params = dict(state.model.named_parameters())
    for name, step in meta.get("optimizer_steps", {}).items():
        p = params[name]
        state.optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(tensors[f"optim.exp_avg.{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim.exp_avg_sq.{name}"].copy()),
        }
    state.step, state.epoch = int(meta["step"]), int(meta["epoch"])
    return state, cfg


# --- finite-difference gradient check -----------------------------------------

MICRO = dict(image_size=8, patch_size=2, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0,
             head_hidden=32, head_out=16, r_choices=(2,), S=1, batch_size=8)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    checked: int
    momentum_grads_zero: bool
    passed: bool


def _base_predictions(model: EncoderState, I1, x3):
    emb = model.base(torch.cat([I1, x3]))
    return model.predictor(model.projector(emb))


@torch.no_grad()
def _reinit_for_check(model: EncoderState, gen: torch.Generator) -> None:
    # The 0.02-std init puts LayerNorm inputs near zero variance, where the
    # loss is so curved that a 1e-4 central difference is dominated by
    # truncation error. Check at a well-conditioned random point instead.
    def draw(p, scale, shift=0.0):
        p.copy_(shift + scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))

    for name, p in model.named_parameters():
        if name.startswith("momentum."):
            continue
        if p.dim() == 2:
            draw(p, p.shape[1] ** -0.5)
        elif name.endswith(("cls_token", "pos_embed")):
            draw(p, 1.0)
        elif "norm" in name and name.endswith("weight") or _is_head_norm(model, name):
            draw(p, 0.1, 1.0)
        else:
            draw(p, 0.1)
    for pm, pb in zip(model.momentum.parameters(), model.base.parameters()):
        pm.copy_(pb + 0.05 * torch.randn(pb.shape, generator=gen, dtype=pb.dtype))


def _is_head_norm(model: EncoderState, name: str) -> bool:
    if not name.endswith("weight"):
        return False
    mod = model.get_submodule(name.rsplit(".", 1)[0])
    return isinstance(mod, (torch.nn.LayerNorm, torch.nn.BatchNorm1d))


@torch.no_grad()
def _kink_distance(model: EncoderState, I1, x3) -> float:
    seen = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: seen.append(float(inp[0].abs().min())))
             for m in model.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        _base_predictions(model, I1, x3)
    finally:
        for hk in hooks:
            hk.remove()
    return min(seen, default=float("inf"))


def grad_check(cfg: TrainConfig | None = None, tolerance: float = 1e-4, h: float = 1e-4,
               seed: int = 0, floor: float = 1e-6, kink_margin: float = 1e-3,
               max_draws: int = 100) -> GradCheckResult:
    """Compare autograd against central differences for ``l_total`` in double precision.

    Stop-gradient means the momentum-branch outputs ``z`` are constants of the
    objective, so the finite-difference side recomputes only the base branch
    and reuses the ``z`` computed at the unperturbed point.
    """
    cfg = cfg or TrainConfig(**MICRO)
    count = sum(p.numel() for _, p in init_state(cfg).model.trainable())
    if count > 50_000:
        raise ConfigError(f"{count} parameters is too many for a finite-difference check")
    model = EncoderState(cfg.vit_config(), cfg.head_config(), seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    n, size = cfg.batch_size, cfg.image_size
    # ReLU is not differentiable at 0: redraw until no head pre-activation sits
    # close enough to the kink for a +-h perturbation to cross it
    for _ in range(max_draws):
        views = [torch.randn(n, 3, size, size, generator=gen, dtype=torch.float64) for _ in range(4)]
        _reinit_for_check(model, gen)
        if _kink_distance(model, views[0], views[2]) >= kink_margin:
            break
    else:
        raise RuntimeError(f"no kink-free check point in {max_draws} draws")
    M = max(cfg.r_choices) ** 2
    from .stitching import m2s_labels
    y = m2s_labels(n, M)
    targets = m2m_targets(n, M)

    for p in model.momentum.parameters():
        p.requires_grad_(True)
    bundle = forward_all(*views, model)
    report = total_loss(bundle, y, targets, cfg.tau, cfg.losses)
    report.l_total.backward()
    momentum_zero = all(p.grad is None or not p.grad.any() for p in model.momentum.parameters())
    for p in model.momentum.parameters():
        p.requires_grad_(False)

    z = (bundle.z_mul2.detach(), bundle.z3.detach(), bundle.z4.detach())

    def objective() -> float:
        with torch.no_grad():
            p = _base_predictions(model, views[0], views[2])
            b = type(bundle)(p[:n], p[n:], *z)
            return float(total_loss(b, y, targets, cfg.tau, cfg.losses).l_total)

    worst, worst_name, checked = 0.0, "", 0
    for name, p in model.trainable():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        ga = analytic.view(-1)
        for k in range(flat.numel()):
            orig = float(flat[k])
            flat[k] = orig + h
            up = objective()
            flat[k] = orig - h
            down = objective()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            a = float(ga[k])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{k}]"
    return GradCheckResult(worst, worst_name, checked, momentum_zero,
                           worst < tolerance and momentum_zero)
