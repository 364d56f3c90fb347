"""Weak/strong augmentation for grayscale images in [0, 1].

Strong augmentation follows CTAugment: two registry ops drawn uniformly, each
with a magnitude bin sampled in proportion to its learned weight, then a
Cutout square of a quarter of the image side.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

MIRROR_PROB = 0.5
BIN_COUNT = 17
DECAY = 0.99
SAMPLING_FLOOR = 0.05
CUTOUT_FILL = 0.5


class AugmentError(ValueError):
    pass


def _blend(x: np.ndarray, y: np.ndarray, m: float) -> np.ndarray:
    return x + m * (y - x)


def _enhance(x: np.ndarray, degenerate: np.ndarray | float, m: float) -> np.ndarray:
    # PIL-style enhancement factor in [0.1, 1.9]; m = 0.5 is a no-op
    return degenerate + (0.1 + 1.8 * m) * (x - degenerate)


def _autocontrast(x, m):
    lo, hi = x.min(), x.max()
    stretched = (x - lo) / (hi - lo) if hi > lo else x
    return _blend(x, stretched, m)


def _equalize(x, m):
    q = np.round(x * 255).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    cdf = hist.cumsum()
    nonzero = cdf[hist > 0]
    if len(nonzero) < 2:
        return x
    lut = (cdf - nonzero[0]) / max(cdf[-1] - nonzero[0], 1)
    return _blend(x, np.clip(lut[q], 0, 1), m)


def _posterize(x, m):
    bits = 1 + int(round(m * 7))
    levels = 2**bits
    return np.floor(x * (levels - 1) + 0.5) / (levels - 1)


def _rescale(x, m):
    side = x.shape[0]
    zoom = 1.0 + 0.5 * m
    big = ndimage.zoom(x, zoom, order=1)
    off = (big.shape[0] - side) // 2
    return big[off:off + side, off:off + side]


def _rotate(x, m):
    # 180 degrees only; 90-degree turns would put domain-1 stripes upright
    return x[::-1, ::-1] if m >= 0.5 else x


def _smooth3(x):
    return ndimage.uniform_filter(x, size=3, mode="reflect")


def _shear(x, m, axis):
    s = (2 * m - 1) * 0.3
    side = x.shape[0]
    c = (side - 1) / 2
    matrix = np.eye(2)
    if axis == 1:
        matrix[1, 0] = s  # shear x: column shifts with row
    else:
        matrix[0, 1] = s
    offset = np.array([c, c]) - matrix @ np.array([c, c])
    return ndimage.affine_transform(x, matrix, offset=offset, order=1, mode="reflect")


def _translate(x, m, axis):
    shift = [0.0, 0.0]
    shift[axis] = (2 * m - 1) * 0.25 * x.shape[0]
    return ndimage.shift(x, shift, order=1, mode="reflect")


def _registry_cutout(x, m, rng):
    size = max(1, int(round(m * x.shape[0] / 4)))
    return _cut(x, size, rng)


def _cut(x, size, rng):
    side = x.shape[0]
    y0 = rng.integers(0, side - size + 1)
    x0 = rng.integers(0, side - size + 1)
    out = x.copy()
    out[y0:y0 + size, x0:x0 + size] = CUTOUT_FILL
    return out


OPS: dict[str, Callable] = {
    "autocontrast": lambda x, m, rng: _autocontrast(x, m),
    "brightness": lambda x, m, rng: _enhance(x, 0.0, m),
    "color": lambda x, m, rng: _enhance(x, x.mean(), m),
    "contrast": lambda x, m, rng: _enhance(x, 0.5, m),
    "cutout": _registry_cutout,
    "equalize": lambda x, m, rng: _equalize(x, m),
    "invert": lambda x, m, rng: _blend(x, 1.0 - x, m),
    "identity": lambda x, m, rng: x,
    "posterize": lambda x, m, rng: _posterize(x, m),
    "rescale": lambda x, m, rng: _rescale(x, m),
    "rotate": lambda x, m, rng: _rotate(x, m),
    "sharpness": lambda x, m, rng: _enhance(x, _smooth3(x), m),
    "shear_x": lambda x, m, rng: _shear(x, m, axis=1),
    "shear_y": lambda x, m, rng: _shear(x, m, axis=0),
    "smooth": lambda x, m, rng: _blend(x, ndimage.gaussian_filter(x, 1.0, mode="reflect"), m),
    "solarize": lambda x, m, rng: np.where(x < m, x, 1.0 - x),
    "translate_x": lambda x, m, rng: _translate(x, m, axis=1),
    "translate_y": lambda x, m, rng: _translate(x, m, axis=0),
}


@dataclass
class CTAugmentState:
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    decay: float = DECAY
    bin_count: int = BIN_COUNT
    floor: float = SAMPLING_FLOOR

    @classmethod
    def uniform(cls, ops=None, bin_count: int = BIN_COUNT, decay: float = DECAY) -> "CTAugmentState":
        ops = list(OPS) if ops is None else list(ops)
        return cls({op: np.ones(bin_count) for op in ops}, decay=decay, bin_count=bin_count)

    def copy(self) -> "CTAugmentState":
        return CTAugmentState({k: v.copy() for k, v in self.weights.items()}, self.decay, self.bin_count, self.floor)

    def magnitude(self, bin_index: int) -> float:
        return bin_index / (self.bin_count - 1)

    def sample_bin(self, op: str, rng: np.random.Generator) -> int:
        w = self.weights[op]
        p = np.where(w > self.floor, w, 0.0)
        if p.sum() == 0:
            # every bin fell below the floor; fall back to the best ones
            p = (w == w.max()).astype(float)
        return int(rng.choice(len(w), p=p / p.sum()))

    def to_text(self) -> str:
        lines = ["op,bin_index,weight"]
        for op, w in self.weights.items():
            lines.extend(f"{op},{i},{float(v)!r}" for i, v in enumerate(w))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, decay: float = DECAY) -> "CTAugmentState":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        bins: dict[str, dict[int, float]] = {}
        for op, i, v in rows:
            bins.setdefault(op, {})[int(i)] = float(v)
        bin_count = len(next(iter(bins.values())))
        weights = {op: np.array([b[i] for i in range(bin_count)]) for op, b in bins.items()}
        return cls(weights, decay=decay, bin_count=bin_count)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "CTAugmentState":
        return cls.from_text(Path(path).read_text())


def weak_augment(pixels: np.ndarray, rng: np.random.Generator, mirror_prob: float = MIRROR_PROB) -> np.ndarray:
    if rng.random() < mirror_prob:
        return pixels[:, ::-1].copy()
    return pixels.copy()


def cutout(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fill one (side/4)^2 square, fully inside the image, with mid-gray."""
    side = pixels.shape[0]
    if side < 8 or side % 4:
        raise AugmentError(f"cutout needs a side divisible by 4 and >= 8, got {side}")
    return _cut(pixels, side // 4, rng)


def strong_augment(pixels: np.ndarray, state: CTAugmentState,
                   rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[str, int]]]:
    ops = list(state.weights)
    if not ops:
        raise AugmentError("empty augmentation registry")
    chosen = rng.choice(len(ops), size=2, replace=len(ops) < 2)
    applied = []
    x = pixels.astype(np.float64)
    for k in chosen:
        op = ops[k]
        b = state.sample_bin(op, rng)
        x = np.clip(OPS[op](x, state.magnitude(b), rng), 0.0, 1.0)
        applied.append((op, b))
    x = cutout(x, rng)
    applied.append(("cutout", -1))
    return x.astype(pixels.dtype), applied


def ct_update(state: CTAugmentState, applied_ops: list[tuple[str, int]], match_score: float) -> CTAugmentState:
    """Move the weight of every applied (op, bin) toward ``match_score``.

    The trailing fixed Cutout (bin -1) carries no learnable magnitude.
    """
    if not 0.0 <= match_score <= 1.0:
        raise AugmentError(f"match_score must lie in [0, 1], got {match_score}")
    for op, b in applied_ops:
        if b < 0:
            continue
        w = state.weights[op]
        w[b] = state.decay * w[b] + (1 - state.decay) * match_score
    return state


def match_score(probs: np.ndarray, label: int) -> float:
    """1 - mean absolute error between a predicted distribution and the one-hot label."""
    onehot = np.zeros_like(probs)
    onehot[label] = 1.0
    return float(1.0 - np.abs(probs - onehot).mean())
