"""Stitched-batch previews: binary PPM images plus a JSON sidecar.

The sidecar alone is enough to rebuild the batch targets: ``q``, ``y_m2s``,
``y_m2m``/``w_m2m`` (null when the batch is too small for them) and, for every
slot of every stitched image, which batch sample and which of its tiles was
placed there. Source tiles are exported too, so slot pixels can be matched.
"""

from __future__ import annotations

import json
import os
from dataclasses import astuple, replace
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPolicy, t1_policy, to_chw
from .data import Dataset
from .rng import KIND_SAMPLE, RngStream
from .stitching import (
    BatchTooSmallError,
    StitchConfig,
    build_view_grids,
    m2m_targets,
    stitch_batch,
)


class PPMError(ValueError):
    pass


def to_bytes(img: np.ndarray) -> np.ndarray:
    """HWC floats in [0, 1] -> uint8 (values outside are clipped)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    pix = img if img.dtype == np.uint8 else to_bytes(img)
    if pix.ndim != 3 or pix.shape[2] != 3:
        raise PPMError(f"expected an HxWx3 image, got {pix.shape}")
    h, w = pix.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pix).tobytes())


def _tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos)
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated header")
        out.append(blob[start:pos])
    return out, pos + 1  # one whitespace byte ends the header


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(blob, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise PPMError(f"{path}: not an 8-bit binary PPM")
    w, h = int(w), int(h)
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise PPMError(f"{path}: pixel data truncated")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def preview_policy(size: int) -> AugmentationPolicy:
    """Default preview augmentation: the first stitched view's policy, unnormalized."""
    return replace(t1_policy(size), normalize_mean=(0.0, 0.0, 0.0), normalize_std=(1.0, 1.0, 1.0))


def _hwc(t: torch.Tensor) -> np.ndarray:
    return t.movedim(0, -1).numpy()


def export_preview(ds: Dataset, out_dir: str | os.PathLike, n: int, r: int, S: int, seed: int = 0,
                   policy: AugmentationPolicy | None = None) -> dict:
    """Stitch the first ``n`` images of ``ds`` once and write the preview files.

    Writes ``stitched_XXX.ppm``, ``tiles/sample_XXX_slot_YY.ppm`` and
    ``batch.json``; returns the sidecar document.
    """
    if n < 1 or n > len(ds):
        raise ValueError(f"need 1 <= n <= {len(ds)}, got {n}")
    cfg = StitchConfig(r, S, ds.image_size)
    policy = policy or preview_policy(ds.image_size)
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    rng = RngStream(seed)
    ids = list(range(n))
    grids = build_view_grids(to_chw(ds.images[:n]), ids, cfg, policy,
                             [rng.child(KIND_SAMPLE, i, 1) for i in ids])
    batch = stitch_batch(grids, cfg)
    for i in range(n):
        write_ppm(out / f"stitched_{i:03d}.ppm", _hwc(batch.images[i]))
        for j in range(cfg.M):
            write_ppm(out / "tiles" / f"sample_{i:03d}_slot_{j:02d}.ppm", _hwc(grids[i].tiles[j]))
    try:
        t = m2m_targets(n, cfg.M)
        y_m2m, w_m2m = t.y_m2m.tolist(), t.w_m2m.tolist()
    except BatchTooSmallError:
        y_m2m = w_m2m = None
    sidecar = {
        "N": n, "M": cfg.M, "r": r, "S": S, "tile_size": cfg.tile_size, "image_size": ds.image_size,
        "seed": seed,
        "q": batch.permutation.q.tolist(),
        "y_m2s": batch.y_m2s.tolist(),
        "y_m2m": y_m2m,
        "w_m2m": w_m2m,
        "provenance": [
            [{"sample": p.sample, "source": p.source, "tile": p.slot, "scale": p.scale,
              "crops": [list(astuple(c)) for c in grids[p.sample].crops[p.slot]]}
             for p in row]
            for row in batch.provenance],
    }
    tmp = out / "batch.json.tmp"
    tmp.write_text(json.dumps(sidecar, indent=1))
    os.replace(tmp, out / "batch.json")
    return sidecar


def rederive_m2s(sidecar: dict) -> np.ndarray:
    """y_m2s rebuilt purely from per-slot provenance."""
    return np.array([[slot["sample"] for slot in row] for row in sidecar["provenance"]], dtype=np.int64)


def slot_pixel_mismatches(out_dir: str | os.PathLike) -> int:
    """Count slots whose stitched pixels differ from the tile the sidecar says was placed there."""
    out = Path(out_dir)
    side = json.loads((out / "batch.json").read_text())
    r, t = side["r"], side["tile_size"]
    bad = 0
    for i, row in enumerate(side["provenance"]):
        img = read_ppm(out / f"stitched_{i:03d}.ppm")
        for j, slot in enumerate(row):
            tile = read_ppm(out / "tiles" / f"sample_{slot['sample']:03d}_slot_{slot['tile']:02d}.ppm")
            y, x = (j // r) * t, (j % r) * t
            bad += int(not np.array_equal(img[y:y + t, x:x + t], tile))
    return bad
