"""2-D loss-landscape scans around trained parameters and a flatness score."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .netmodel import InternalClassifier, ic_forward
from .numcore import Tensor, cross_entropy


@dataclass
class LandscapeGrid:
    offsets: np.ndarray  # shared axis values in [-radius, radius]
    losses: np.ndarray  # losses[i, j] at offsets[i] * d1 + offsets[j] * d2
    radius: float
    center_loss: float
    normalization: str
    directions: tuple[dict[str, np.ndarray], dict[str, np.ndarray]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("alpha", "beta", "loss"))
        for i, a in enumerate(self.offsets):
            for j, b in enumerate(self.offsets):
                w.writerow((repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))))
        return buf.getvalue()


def _inner(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    return float(sum(np.vdot(a[k], b[k]) for k in a))


def random_directions(
    params: Mapping[str, np.ndarray], seed: int, normalization: str = "filter"
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Two orthogonal random directions in parameter space.

    ``"filter"``: each tensor's slice of a direction is rescaled to that tensor's
    norm, and the second direction is orthogonalized against the first tensor by
    tensor (so the directions are also globally orthogonal). Zero tensors get a
    zero slice. ``"unit"``: plain Gram-Schmidt to two unit vectors.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 41])))
    names = sorted(params)
    d1 = {k: rng.standard_normal(params[k].shape) for k in names}
    d2 = {k: rng.standard_normal(params[k].shape) for k in names}
    if normalization == "unit":
        n1 = np.sqrt(_inner(d1, d1))
        d1 = {k: v / n1 for k, v in d1.items()}
        proj = _inner(d2, d1)
        d2 = {k: d2[k] - proj * d1[k] for k in names}
        n2 = np.sqrt(_inner(d2, d2))
        d2 = {k: v / n2 for k, v in d2.items()}
    elif normalization == "filter":
        for k in names:
            scale = np.linalg.norm(params[k])
            if scale == 0.0:
                d1[k] = np.zeros_like(d1[k])
                d2[k] = np.zeros_like(d2[k])
                continue
            d1[k] *= scale / np.linalg.norm(d1[k])
            d2[k] -= (np.vdot(d2[k], d1[k]) / np.vdot(d1[k], d1[k])) * d1[k]
            d2[k] *= scale / np.linalg.norm(d2[k])
    else:
        raise ValueError(f"unknown normalization {normalization!r}; expected 'filter' or 'unit'")
    return d1, d2


def scan_landscape(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[], float],
    radius: float = 1.0,
    n: int = 21,
    seed: int = 0,
    normalization: str = "filter",
) -> LandscapeGrid:
    """Evaluate ``loss_fn`` on an ``n x n`` grid spanned by two random directions.

    Parameters are restored to the original arrays afterwards, even on error.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if n < 1 or n % 2 == 0:
        raise ValueError(f"grid resolution must be odd so the center is a grid point, got {n}")
    originals = {k: p.data for k, p in params.items()}
    d1, d2 = random_directions(originals, seed, normalization)
    offsets = np.linspace(-radius, radius, n)
    mid = n // 2
    offsets[mid] = 0.0
    losses = np.empty((n, n))
    try:
        for i, a in enumerate(offsets):
            for j, b in enumerate(offsets):
                for k, p in params.items():
                    p.data = originals[k] if i == mid and j == mid else originals[k] + a * d1[k] + b * d2[k]
                losses[i, j] = loss_fn()
    finally:
        for k, p in params.items():
            p.data = originals[k]
    return LandscapeGrid(offsets, losses, float(radius), float(losses[mid, mid]), normalization, (d1, d2))


@dataclass(frozen=True)
class FlatnessScore:
    radius: float
    score: float
    cells: int


def flatness(grid: LandscapeGrid, radius: float | None = None) -> FlatnessScore:
    """Mean loss increase over the cells within ``radius`` of the center."""
    radius = grid.radius if radius is None else radius
    if radius > grid.radius + 1e-12:
        raise ValueError(f"radius {radius} exceeds grid extent {grid.radius}")
    a, b = np.meshgrid(grid.offsets, grid.offsets, indexing="ij")
    mask = np.hypot(a, b) <= radius + 1e-12
    return FlatnessScore(radius, float((grid.losses[mask] - grid.center_loss).mean()), int(mask.sum()))


def ic_loss_fn(ic: InternalClassifier, features: np.ndarray, labels: np.ndarray) -> Callable[[], float]:
    """CE loss of one IC on fixed backbone features."""
    feats = Tensor(features)

    def loss() -> float:
        return cross_entropy(ic_forward(ic, feats), labels).item()

    return loss
