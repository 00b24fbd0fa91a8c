"""Cosine-similarity contrastive objectives.

All three losses share one form: for each prediction row ``P_i``, a softmax
over its temperature-scaled cosine similarities to every target row ``Z_k``,
then a (weighted) negative log-likelihood at the labelled columns. Only the
normalizer and the label/weight layout differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoder import EmbeddingBundle, NumericError
from .stitching import CorrespondenceTargets

EPS = 1e-12
LOSS_TERMS = ("m2s", "m2m", "s2s")


def cosine_similarity(h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Pairwise ``h_i . z_k / (|h_i| |z_k| + eps)``; 1-D inputs give a scalar."""
    if h.dim() == 1 and z.dim() == 1:
        return h @ z / (h.norm() * z.norm() + EPS)
    return (h @ z.T) / (h.norm(dim=1, keepdim=True) * z.norm(dim=1)[None, :] + EPS)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _weighted_nce(P, Z, labels, weights, tau, norm):
    _check_tau(tau)
    logp = torch.log_softmax(cosine_similarity(P, Z) / tau, dim=1)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    picked = logp.gather(1, labels)
    if weights is not None:
        picked = picked * torch.as_tensor(np.asarray(weights), dtype=P.dtype)
    return -picked.sum() / norm


def loss_m2s(P, Z, y, tau: float):
    """Multiple-to-single: each stitched image vs the sources of its ``M`` tiles."""
    n, m = np.shape(y)
    return _weighted_nce(P, Z, y, None, tau, n * m)


def loss_m2m(P, Z, y, w, tau: float):
    """Multiple-to-multiple: each stitched image vs the ``2M-1`` overlapping stitched images."""
    n, k = np.shape(y)
    m = (k + 1) // 2
    return _weighted_nce(P, Z, y, w, tau, n * m)


def loss_s2s(P, Z, tau: float):
    """Single-to-single instance discrimination."""
    n = P.shape[0]
    return _weighted_nce(P, Z, np.arange(n)[:, None], None, tau, n)


@dataclass
class LossReport:
    l_m2s: torch.Tensor
    l_m2m: torch.Tensor
    l_s2s: torch.Tensor
    l_total: torch.Tensor
    tau: float

    def metrics(self) -> dict[str, float]:
        return {"l_m2s": self.l_m2s.item(), "l_m2m": self.l_m2m.item(),
                "l_s2s": self.l_s2s.item(), "l_total": self.l_total.item()}


def total_loss(bundle: EmbeddingBundle, y_m2s, targets: CorrespondenceTargets | None,
               tau: float, terms=LOSS_TERMS) -> LossReport:
    """Sum of the enabled terms; disabled terms are reported as 0.

    Gradients reach only the prediction outputs: every ``z`` is detached.
    """
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown or not terms:
        raise ValueError(f"bad loss terms {terms}")
    zero = bundle.p_mul1.new_zeros(())
    l_m2s = loss_m2s(bundle.p_mul1, bundle.z3.detach(), y_m2s, tau) if "m2s" in terms else zero
    if "m2m" in terms:
        if targets is None:
            raise ValueError("m2m term needs correspondence targets")
        l_m2m = loss_m2m(bundle.p_mul1, bundle.z_mul2.detach(), targets.y_m2m, targets.w_m2m, tau)
    else:
        l_m2m = zero
    l_s2s = loss_s2s(bundle.p3, bundle.z4.detach(), tau) if "s2s" in terms else zero
    total = l_m2s + l_m2m + l_s2s
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss (m2s={float(l_m2s)}, m2m={float(l_m2m)}, s2s={float(l_s2s)})")
    return LossReport(l_m2s, l_m2m, l_s2s, total, tau)
