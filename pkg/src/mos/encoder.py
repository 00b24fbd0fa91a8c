"""Small Vision Transformer backbone, MLP heads and the base/momentum pair."""

from __future__ import annotations

from dataclasses import dataclass
import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3
    drop_path: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 128
    out_dim: int = 32
    norm: str = "layer"  # or "batch"

    def __post_init__(self):
        if self.norm not in ("layer", "batch"):
            raise ValueError(f"unknown head norm {self.norm!r}")


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, (H/p)*(W/p), p*p*C) tokens.

    Patches are taken row-major; inside a token values run over
    (row, column, channel), channel fastest.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images[None]
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.view(n, c, h // patch, patch, w // patch, patch)
    x = x.permute(0, 2, 4, 3, 5, 1).reshape(n, (h // patch) * (w // patch), patch * patch * c)
    return x[0] if squeeze else x


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, t, d = x.shape
        qkv = self.qkv(x).view(n, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, t, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, drop_path: float = 0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop_path = drop_path

    def _drop(self, branch):
        if not self.training or self.drop_path == 0.0:
            return branch
        keep = 1.0 - self.drop_path
        mask = branch.new_empty(branch.shape[0], 1, 1).bernoulli_(keep)
        return branch * mask / keep

    def forward(self, x):
        x = x + self._drop(self.attn(self.norm1(x)))
        return x + self._drop(self.fc2(F.gelu(self.fc1(self.norm2(x)))))


class ViT(nn.Module):
    """Pre-norm ViT with learnable CLS token and positional embeddings; returns the CLS output."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size ** 2 * cfg.channels, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio, cfg.drop_path) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.check_finite = True
        init_weights(self)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px images, got {tuple(images.shape[-2:])}")
        x = self.patch_embed(patchify(images, self.cfg.patch_size))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], 1) + self.pos_embed
        for k, blk in enumerate(self.blocks):
            x = blk(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after block {k}")
        return self.norm(x[:, 0])


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.BatchNorm1d)) and m.weight is not None:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def mlp_head(in_dim: int, hidden: int, out_dim: int, layers: int, norm: str = "layer") -> nn.Sequential:
    """``layers`` affine maps; hidden ones are followed by normalization and ReLU."""
    mods: list[nn.Module] = []
    for k in range(layers):
        d_in = in_dim if k == 0 else hidden
        d_out = out_dim if k == layers - 1 else hidden
        mods.append(nn.Linear(d_in, d_out))
        if k < layers - 1:
            mods.append(nn.LayerNorm(d_out) if norm == "layer" else nn.BatchNorm1d(d_out))
            mods.append(nn.ReLU())
    head = nn.Sequential(*mods)
    init_weights(head)
    return head


def project_head(cfg: ViTConfig, head: HeadConfig) -> nn.Sequential:
    return mlp_head(cfg.embed_dim, head.hidden_dim, head.out_dim, 3, head.norm)


def predict_head(head: HeadConfig) -> nn.Sequential:
    return mlp_head(head.out_dim, head.hidden_dim, head.out_dim, 2, head.norm)


class EncoderState(nn.Module):
    """Base encoder, its momentum copy, and the shared projector / base-only predictor."""

    def __init__(self, vit: ViTConfig, head: HeadConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.vit_cfg, self.head_cfg = vit, head
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.base = ViT(vit)
            self.projector = project_head(vit, head)
            self.predictor = predict_head(head)
            self.momentum = ViT(vit)
        self.momentum.load_state_dict(self.base.state_dict())
        for p in self.momentum.parameters():
            p.requires_grad_(False)
        self.to(dtype)

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("momentum.")]

    def project(self, emb):
        return self.projector(emb)

    def predict(self, z):
        return self.predictor(z)


def encode(images: torch.Tensor, vit: ViT) -> torch.Tensor:
    return vit(images)


def _tensors(obj) -> list[torch.Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    return list(obj)


@torch.no_grad()
def ema_update(xi, theta, mu: float):
    """In place ``xi <- mu * xi + (1 - mu) * theta``; ``theta`` is left untouched."""
    xs, ts = _tensors(xi), _tensors(theta)
    if len(xs) != len(ts) or any(a.shape != b.shape for a, b in zip(xs, ts)):
        raise ValueError("momentum and base parameters differ in structure")
    for x, t in zip(xs, ts):
        x.mul_(mu).add_(t, alpha=1.0 - mu)
    return xi


@dataclass
class EmbeddingBundle:
    p_mul1: torch.Tensor
    p3: torch.Tensor
    z_mul2: torch.Tensor
    z3: torch.Tensor
    z4: torch.Tensor


def forward_all(I1, I2, x3, x4, state: EncoderState) -> EmbeddingBundle:
    """Base path encode->project->predict on (I1, x3); momentum path encode->project on (I2, x3, x4).

    The momentum path runs without autograd, so its outputs are constants.
    """
    n = I1.shape[0]
    if not (I2.shape[0] == x3.shape[0] == x4.shape[0] == n):
        raise ValueError("all four view batches must have the same size")
    def base(*xs):
        return state.predict(state.project(encode(torch.cat(xs), state.base)))

    def momentum(*xs):
        return state.project(encode(torch.cat(xs), state.momentum))

    # one fused pass per branch unless batch statistics would mix the views
    fused = state.head_cfg.norm == "layer"
    p = base(I1, x3) if fused else torch.cat([base(I1), base(x3)])
    with torch.no_grad():
        z = momentum(I2, x3, x4) if fused else torch.cat([momentum(I2), momentum(x3), momentum(x4)])
    return EmbeddingBundle(p[:n], p[n:], z[:n], z[n:2 * n], z[2 * n:])
