"""Multiple object stitching.

A batch of ``N`` single-object images is turned into ``N`` multi-object
images. Each source image yields ``M = r*r`` tiles (a tile is itself an
``s x s`` stitch of smaller crops of that image). Synthesized image ``i`` takes
grid slot ``j`` from source ``u(i, j) = (i + j) mod N``. With tiles flattened
as ``t = i*M + j``, the same gather is ``I = V[q]`` with
``q_t = (t + (t mod M) * M) mod (N*M)``.

Targets:

* multiple-to-single labels ``y_m2s[i, j] = (i + j) mod N``
* multiple-to-multiple labels ``y_m2m[i, l] = (i - M + 1 + l) mod N`` for
  ``l`` in ``0..2M-2`` with overlap scores ``1 - |M - 1 - l| / M``.

Tiles and sub-views are placed row-major throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .augment import AugParams, AugmentationPolicy, augment_views, sample_params, to_chw
from .rng import RngStream


class StitchConfigError(ValueError):
    pass


class StitchShapeError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class StitchConfig:
    r: int
    S: int
    base_size: int

    def __post_init__(self):
        if self.r < 1 or self.S < 1:
            raise StitchConfigError("r and S must be >= 1")
        for s in range(1, self.S + 1):
            if self.base_size % (self.r * s):
                raise StitchConfigError(
                    f"image size {self.base_size} not divisible by r*s = {self.r * s}")

    @property
    def M(self) -> int:
        return self.r * self.r

    @property
    def tile_size(self) -> int:
        return self.base_size // self.r


@dataclass(frozen=True)
class CropRecord:
    top: int
    left: int
    height: int
    width: int


@dataclass
class ViewGrid:
    """The ``r*r`` tiles built from one source image."""

    tiles: torch.Tensor  # (M, C, tile, tile)
    scales: tuple[int, ...]
    crops: tuple[tuple[CropRecord, ...], ...]  # s*s records per tile
    source: int


@dataclass(frozen=True)
class StitchPermutation:
    N: int
    M: int
    t: np.ndarray
    q: np.ndarray

    @property
    def T(self) -> int:
        return self.N * self.M


@dataclass(frozen=True)
class TileProvenance:
    sample: int  # position in the batch
    source: int  # id of the source image (e.g. dataset index)
    slot: int
    scale: int


@dataclass
class StitchedBatch:
    images: torch.Tensor  # (N, C, H, W)
    y_m2s: np.ndarray  # (N, M)
    permutation: StitchPermutation
    provenance: tuple[tuple[TileProvenance, ...], ...]  # [image][slot]


@dataclass(frozen=True)
class CorrespondenceTargets:
    y_m2m: np.ndarray  # (N, 2M-1) int64
    w_m2m: np.ndarray  # (N, 2M-1) float64


def _check_divisible(size: int, r: int, s: int) -> None:
    if size % (r * s):
        raise StitchConfigError(f"image size {size} not divisible by s*r = {s * r}")


def stitch_group(group: Sequence[torch.Tensor] | torch.Tensor, s: int) -> torch.Tensor:
    """Place ``s*s`` equal square views on an ``s x s`` grid, row-major.

    Views are (C, h, h); the result is (C, s*h, s*h).
    """
    views = torch.stack(list(group)) if not isinstance(group, torch.Tensor) else group
    if views.shape[0] != s * s:
        raise StitchShapeError(f"expected {s * s} views for s={s}, got {views.shape[0]}")
    if views.dim() != 4 or views.shape[-1] != views.shape[-2]:
        raise StitchShapeError(f"views must be square (C, h, h), got {tuple(views.shape[1:])}")
    c, h = views.shape[1], views.shape[2]
    return views.view(s, s, c, h, h).permute(2, 0, 3, 1, 4).reshape(c, s * h, s * h)


def _stitch_many(views: torch.Tensor, s: int) -> torch.Tensor:
    """Batched stitch_group: (B, s*s, C, h, h) -> (B, C, s*h, s*h)."""
    b, _, c, h, _ = views.shape
    return views.view(b, s, s, c, h, h).permute(0, 3, 1, 4, 2, 5).reshape(b, c, s * h, s * h)


def multi_view_augment(img: np.ndarray, r: int, s: int, policy: AugmentationPolicy,
                       rng: RngStream) -> torch.Tensor:
    """``(s*r)**2`` independent augmented crops of ``img``, each ``H/(s*r)`` square.

    Returns a (views, C, h, h) tensor.
    """
    height, width = img.shape[:2]
    _check_divisible(height, r, s)
    size = height // (s * r)
    gen = rng.generator()
    params = [sample_params(gen, height, width, policy) for _ in range((s * r) ** 2)]
    src = to_chw(img)[None].expand(len(params), -1, -1, -1)
    return augment_views(src, params, policy, out_size=size)


def _plan(gen: np.random.Generator, height: int, width: int, cfg: StitchConfig,
          policy: AugmentationPolicy) -> tuple[list[int], list[list[AugParams]]]:
    # per tile: draw its scale, then exactly the crops it needs
    scales, params = [], []
    for _ in range(cfg.M):
        s = int(gen.integers(1, cfg.S + 1))
        scales.append(s)
        params.append([sample_params(gen, height, width, policy) for _ in range(s * s)])
    return scales, params


def build_view_grids(images: torch.Tensor, sources: Sequence[int], cfg: StitchConfig,
                     policy: AugmentationPolicy, rngs: Sequence[RngStream]) -> list[ViewGrid]:
    """Build one :class:`ViewGrid` per row of ``images`` (N, C, H, W).

    Each grid draws from its own stream, so results do not depend on what else
    is in the batch. All crops of one scale are augmented in a single call.
    """
    n, c, height, width = images.shape
    if height != cfg.base_size:
        raise StitchConfigError(f"image size {height} does not match config {cfg.base_size}")
    plans = [_plan(rng.generator(), height, width, cfg, policy) for rng in rngs]
    tile = cfg.tile_size
    out = torch.empty(n, cfg.M, c, tile, tile, dtype=images.dtype)
    for s in range(1, cfg.S + 1):
        where = [(i, j) for i, (scales, _) in enumerate(plans) for j, sj in enumerate(scales) if sj == s]
        if not where:
            continue
        params = [p for i, j in where for p in plans[i][1][j]]
        rows = torch.tensor([i for i, _ in where]).repeat_interleave(s * s)
        views = augment_views(images[rows], params, policy, out_size=tile // s)
        tiles = _stitch_many(views.view(len(where), s * s, c, tile // s, tile // s), s)
        ii = torch.tensor([i for i, _ in where])
        jj = torch.tensor([j for _, j in where])
        out[ii, jj] = tiles
    grids = []
    for i, (scales, params) in enumerate(plans):
        crops = tuple(tuple(CropRecord(*p.crop) for p in ps) for ps in params)
        grids.append(ViewGrid(out[i], tuple(scales), crops, int(sources[i])))
    return grids


def build_view_grid(img: np.ndarray, cfg: StitchConfig, policy: AugmentationPolicy,
                    rng: RngStream, source: int = 0) -> ViewGrid:
    return build_view_grids(to_chw(img)[None], [source], cfg, policy, [rng])[0]


def stitch_permutation(N: int, M: int) -> StitchPermutation:
    if N < 1 or M < 1:
        raise ValueError("N and M must be >= 1")
    t = np.arange(N * M, dtype=np.int64)
    q = (t + (t % M) * M) % (N * M)
    return StitchPermutation(N, M, t, q)


def m2s_labels(N: int, M: int) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    return (np.arange(N)[:, None] + np.arange(M)[None, :]) % N


def m2m_targets(N: int, M: int) -> CorrespondenceTargets:
    if N < 2 * M - 1:
        raise BatchTooSmallError(f"batch size {N} < 2M-1 = {2 * M - 1}; m2m labels would repeat")
    offsets = np.arange(2 * M - 1)
    labels = (np.arange(N)[:, None] - M + 1 + N + offsets[None, :]) % N
    scores = (M - np.abs(M - 1 - offsets)) / M
    return CorrespondenceTargets(labels.astype(np.int64), np.tile(scores, (N, 1)))


def overlap_oracle(i: int, l: int, N: int, M: int) -> int:
    """Number of source images shared by stitched images ``i`` and ``l``, by set intersection."""
    return len({(i + j) % N for j in range(M)} & {(l + j) % N for j in range(M)})


def stitch_batch(grids: Sequence[ViewGrid], cfg: StitchConfig) -> StitchedBatch:
    """Stitch ``N`` view grids into ``N`` multi-object images via ``I = V[q]``."""
    if not grids:
        raise StitchShapeError("need at least one view grid")
    shapes = {tuple(g.tiles.shape) for g in grids}
    if len(shapes) != 1:
        raise StitchShapeError(f"mixed tile shapes {sorted(shapes)}")
    n, m = len(grids), cfg.M
    if grids[0].tiles.shape[0] != m:
        raise StitchShapeError(f"grids hold {grids[0].tiles.shape[0]} tiles, config expects {m}")
    perm = stitch_permutation(n, m)
    flat = torch.cat([g.tiles for g in grids])  # (T, C, tile, tile)
    placed = flat[torch.from_numpy(perm.q)]
    c, tile = placed.shape[1], placed.shape[2]
    images = _stitch_many(placed.view(n, m, c, tile, tile), cfg.r)
    prov = tuple(
        tuple(TileProvenance(q // m, grids[q // m].source, q % m, grids[q // m].scales[q % m])
              for q in perm.q[i * m:(i + 1) * m].tolist())
        for i in range(n))
    return StitchedBatch(images, m2s_labels(n, m), perm, prov)


def verify_index_math(max_n: int = 32, ms: Sequence[int] = (1, 4, 9)) -> dict:
    """Compare the closed forms against brute force for every valid (N, M).

    Checks that ``q`` is a bijection that reproduces the nested-loop source
    assignment ``u(i, j)``, and that ``M * w_m2m`` equals set-intersection
    overlaps. Returns counts of comparisons and mismatches.
    """
    compared = mismatched = 0
    for M in ms:
        for N in range(2 * M - 1, max_n + 1):
            q = stitch_permutation(N, M).q
            loops = [((i + j) % N) * M + j for i in range(N) for j in range(M)]
            compared += 2
            mismatched += int(sorted(q.tolist()) != list(range(N * M)))
            mismatched += int(q.tolist() != loops)
            t = m2m_targets(N, M)
            for i in range(N):
                for k in range(2 * M - 1):
                    compared += 1
                    mismatched += int(t.w_m2m[i, k] * M != overlap_oracle(i, int(t.y_m2m[i, k]), N, M))
    return {"max_n": max_n, "ms": list(ms), "compared": compared, "mismatched": mismatched}
