"""Procedural three-domain SEM-like defect dataset.

Domain 0 has a plain noisy background, domain 1 horizontal stripes and
domain 2 rectangles of random size and position. Every image carries exactly
one defect: a bright irregular ``particle`` blob (class 0) or a small
Gaussian ``point`` dot (class 1).
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

PARTICLE, POINT = 0, 1
CLASS_NAMES = ("particle", "point")
DOMAINS = (0, 1, 2)
SPLITS = ("train", "val", "test")
DEFAULT_SIDE = 128

# per-class (particle, point) counts of the three product technologies
DEFAULT_COUNTS = {0: (1706, 1516), 1: (639, 503), 2: (577, 1196)}

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("filename", "domain", "class", "split", "sha256")


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    domain: int
    split: str = "train"


@dataclass
class DomainDataset:
    """All images of one domain, stored as stacked arrays.

    ``pixels`` is ``(n, side, side)`` float32 in [0, 1]; ``splits`` holds one
    of ``SPLITS`` per image.
    """

    pixels: np.ndarray
    labels: np.ndarray
    domain: int
    seed: int
    splits: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.splits is None:
            self.splits = np.full(len(self.labels), "train", dtype=object)
        else:
            self.splits = np.asarray(self.splits, dtype=object)
        if not (len(self.pixels) == len(self.labels) == len(self.splits)):
            raise DatasetError("pixels, labels and splits must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]), self.domain, str(self.splits[i]))

    @property
    def images(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def side(self) -> int:
        return int(self.pixels.shape[-1])

    def class_counts(self, split: str | None = None) -> tuple[int, int]:
        labels = self.labels if split is None else self.labels[self.splits == split]
        return int((labels == PARTICLE).sum()), int((labels == POINT).sum())

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.flatnonzero(self.splits == split)
        return self.pixels[idx], self.labels[idx]


def _check_side(side: int) -> None:
    if side < 32 or side & (side - 1):
        raise DatasetError(f"side must be a power of two >= 32, got {side}")


def _image_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, domain, index]))


# --- backgrounds -----------------------------------------------------------------


def _background(domain: int, side: int, rng: np.random.Generator) -> np.ndarray:
    scale = side / DEFAULT_SIDE
    base = rng.uniform(0.30, 0.40)
    img = np.full((side, side), base)
    if domain == 0:
        noise = ndimage.gaussian_filter(rng.normal(size=(side, side)), sigma=2.0 * scale)
        img += 0.04 * noise / (noise.std() + 1e-8)
    elif domain == 1:
        period = rng.uniform(10.0, 18.0) * scale
        phase = rng.uniform(0, 2 * np.pi)
        amplitude = rng.uniform(0.12, 0.18)
        rows = np.arange(side)[:, None]
        img += amplitude * np.sin(2 * np.pi * rows / period + phase)
    elif domain == 2:
        for _ in range(rng.integers(4, 9)):
            h, w = (rng.uniform(12, 56, size=2) * scale).astype(int) + 1
            y, x = rng.integers(-h // 2, side - h // 2), rng.integers(-w // 2, side - w // 2)
            img[max(y, 0):y + h, max(x, 0):x + w] += rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.2)
        img = ndimage.gaussian_filter(img, sigma=0.7 * scale)
    else:
        raise DatasetError(f"invalid domain id {domain}")
    img += rng.normal(0.0, 0.02, size=(side, side))
    return img


# --- defects ---------------------------------------------------------------------


def _particle_mask(side: int, rng: np.random.Generator) -> np.ndarray:
    """Random-walk blob covering 30-200 px at side 128 (area scales with side)."""
    scale2 = (side / DEFAULT_SIDE) ** 2
    area = max(4, int(round(rng.uniform(30, 200) * scale2)))
    margin = max(4, side // 8)
    y, x = rng.integers(margin, side - margin, size=2)
    mask = np.zeros((side, side), dtype=bool)
    mask[y, x] = True
    filled = 1
    steps = ((0, 1), (0, -1), (1, 0), (-1, 0))
    while filled < area:
        dy, dx = steps[rng.integers(4)]
        y = int(np.clip(y + dy, 1, side - 2))
        x = int(np.clip(x + dx, 1, side - 2))
        if not mask[y, x]:
            mask[y, x] = True
            filled += 1
    return ndimage.binary_closing(mask, iterations=1) | mask


def _point_layer(side: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian dot whose visible radius (3 sigma) is 3-9 px at side 128."""
    scale = side / DEFAULT_SIDE
    sigma = rng.uniform(3.0, 9.0) * scale / 3.0
    margin = max(4, side // 8)
    cy, cx = rng.uniform(margin, side - margin, size=2)
    yy, xx = np.mgrid[0:side, 0:side]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def render_defect(label: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Additive defect layer in [0, amplitude]."""
    amplitude = rng.uniform(0.35, 0.5)
    if label == PARTICLE:
        layer = _particle_mask(side, rng).astype(float)
        layer = ndimage.gaussian_filter(layer, sigma=0.5 * side / DEFAULT_SIDE)
        layer /= layer.max()
    elif label == POINT:
        layer = _point_layer(side, rng)
    else:
        raise DatasetError(f"invalid class id {label}")
    return amplitude * layer


def render_image(domain: int, label: int, side: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (pixels, defect_layer) for one image."""
    background = _background(domain, side, rng)
    defect = render_defect(label, side, rng)
    return np.clip(background + defect, 0.0, 1.0).astype(np.float32), defect


def defect_pixel_count(defect_layer: np.ndarray) -> int:
    """Size of the defect region: pixels at or above half the defect peak."""
    return int((defect_layer >= 0.5 * defect_layer.max()).sum())


def _check_counts(counts: Sequence[int]) -> tuple[int, int]:
    if len(counts) != 2 or min(counts) <= 0:
        raise DatasetError(f"counts must be two positive integers, got {counts}")
    return int(counts[0]), int(counts[1])


def _labels_in_order(counts: tuple[int, int], domain: int, seed: int) -> np.ndarray:
    labels = np.repeat([PARTICLE, POINT], counts)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, domain, 2**31 - 1]))
    return labels[order_rng.permutation(len(labels))]


def generate_domain(
    domain: int, counts: Sequence[int] | None = None, seed: int = 0, side: int = DEFAULT_SIDE
) -> DomainDataset:
    if domain not in DOMAINS:
        raise DatasetError(f"invalid domain id {domain}")
    _check_side(side)
    counts = _check_counts(DEFAULT_COUNTS[domain] if counts is None else counts)
    labels = _labels_in_order(counts, domain, seed)
    pixels = np.empty((len(labels), side, side), dtype=np.float32)
    for i, label in enumerate(labels):
        pixels[i], _ = render_image(domain, int(label), side, _image_rng(seed, domain, i))
    return DomainDataset(pixels=pixels, labels=labels, domain=domain, seed=seed)


def defect_layers(ds: DomainDataset) -> np.ndarray:
    """Re-render the defect layers of a generated dataset (diagnostics only)."""
    layers = np.empty(ds.pixels.shape, dtype=np.float32)
    for i, label in enumerate(ds.labels):
        rng = _image_rng(ds.seed, ds.domain, i)
        _background(ds.domain, ds.side, rng)
        layers[i] = render_defect(int(label), ds.side, rng)
    return layers


# --- splits and scenarios --------------------------------------------------------


def stratified_pick(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting round(fraction * n) samples spread over classes.

    Per-class quotas are the floors of the exact proportional shares, with the
    remainder handed to the classes with the largest fractional parts.
    """
    n_pick = int(round(fraction * len(labels)))
    classes = np.unique(labels)
    exact = np.array([fraction * (labels == c).sum() for c in classes])
    quota = np.floor(exact).astype(int)
    for j in np.argsort(-(exact - quota), kind="stable")[: n_pick - quota.sum()]:
        quota[j] += 1
    picked = np.zeros(len(labels), dtype=bool)
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(labels == c)
        picked[rng.choice(idx, size=q, replace=False)] = True
    return picked


def split_dataset(ds: DomainDataset, test_fraction: float = 0.2, seed: int = 0) -> DomainDataset:
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, ds.domain, 7]))
    is_test = stratified_pick(ds.labels, test_fraction, rng)
    splits = np.where(is_test, "test", "train").astype(object)
    return DomainDataset(pixels=ds.pixels, labels=ds.labels, domain=ds.domain, seed=ds.seed, splits=splits)


@dataclass(frozen=True)
class ScenarioSpec:
    source: int
    target: int
    mode: str = "uda"
    target_label_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.source == self.target:
            raise DatasetError("source and target domain must differ")
        if self.mode not in ("uda", "ssda"):
            raise DatasetError(f"mode must be 'uda' or 'ssda', got {self.mode!r}")
        if self.mode == "uda" and self.target_label_fraction != 0:
            raise DatasetError("UDA scenarios expose no target labels")
        if self.mode == "ssda" and not 0 < self.target_label_fraction < 1:
            raise DatasetError("SSDA target_label_fraction must lie in (0, 1)")

    @property
    def name(self) -> str:
        return f"{self.source}->{self.target}"


class SealedLabels:
    """Ground truth of the unlabeled target pool, readable only via ``reveal``.

    Every call to ``reveal`` is counted so tests can audit that no training
    path touched the labels.
    """

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64).copy()
        self._labels.setflags(write=False)
        self.reads = 0

    def __len__(self) -> int:
        return len(self._labels)

    def __repr__(self) -> str:
        return f"SealedLabels(n={len(self)}, reads={self.reads})"

    def reveal(self) -> np.ndarray:
        self.reads += 1
        return self._labels


@dataclass
class ScenarioData:
    spec: ScenarioSpec
    source_x: np.ndarray
    source_y: np.ndarray
    target_labeled_x: np.ndarray
    target_labeled_y: np.ndarray
    target_unlabeled_x: np.ndarray
    sealed: SealedLabels
    test: dict[int, tuple[np.ndarray, np.ndarray]]

    @property
    def labeled_x(self) -> np.ndarray:
        """SL and TL stacked; the pool every supervised loss draws from."""
        return np.concatenate([self.source_x, self.target_labeled_x])

    @property
    def labeled_y(self) -> np.ndarray:
        return np.concatenate([self.source_y, self.target_labeled_y])

    @property
    def target_train_x(self) -> np.ndarray:
        return np.concatenate([self.target_labeled_x, self.target_unlabeled_x])


def make_scenario(spec: ScenarioSpec, datasets: Mapping[int, DomainDataset]) -> ScenarioData:
    for d in (spec.source, spec.target):
        if d not in datasets:
            raise DatasetError(f"no dataset for domain {d}")
    src, tgt = datasets[spec.source], datasets[spec.target]
    if src.side != tgt.side:
        raise DatasetError("source and target image sides differ")
    sx, sy = src.subset("train")
    tx, ty = tgt.subset("train")
    if spec.mode == "uda":
        exposed = np.zeros(len(ty), dtype=bool)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.source, spec.target, 11]))
        exposed = stratified_pick(ty, spec.target_label_fraction, rng)
    test = {d: ds.subset("test") for d, ds in datasets.items()}
    return ScenarioData(
        spec=spec,
        source_x=sx,
        source_y=sy,
        target_labeled_x=tx[exposed],
        target_labeled_y=ty[exposed],
        target_unlabeled_x=tx[~exposed],
        sealed=SealedLabels(ty[~exposed]),
        test=test,
    )


# --- on-disk format --------------------------------------------------------------


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(quantize(pixels), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(ds: DomainDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    per_class = [0, 0]
    rows = []
    for i in range(len(ds)):
        label = int(ds.labels[i])
        name = f"{ds.domain}_{label}_{per_class[label]}.png"
        per_class[label] += 1
        data = _png_bytes(ds.pixels[i])
        (directory / name).write_bytes(data)
        rows.append((name, ds.domain, label, ds.splits[i], hashlib.sha256(data).hexdigest()))
    tmp = directory / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    tmp.replace(directory / MANIFEST_NAME)
    (directory / "seed.txt").write_text(f"{ds.seed}\n")
    return directory


def load_dataset(directory: str | Path) -> DomainDataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise ManifestError(f"missing {manifest}")
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != MANIFEST_HEADER:
            raise ManifestError(f"bad manifest header {header}")
        rows = list(reader)
    pngs = sorted(p.name for p in directory.glob("*.png"))
    if len(rows) != len(pngs) or sorted(r[0] for r in rows) != pngs:
        raise ManifestError(f"manifest lists {len(rows)} rows but directory holds {len(pngs)} images")
    domains = {int(r[1]) for r in rows}
    if len(domains) != 1:
        raise ManifestError(f"manifest mixes domains {sorted(domains)}")
    pixels, labels, splits = [], [], []
    for name, _, label, split, digest in rows:
        data = (directory / name).read_bytes()
        if hashlib.sha256(data).hexdigest() != digest:
            raise ManifestError(f"checksum mismatch for {name}")
        if int(label) not in (PARTICLE, POINT) or split not in SPLITS:
            raise ManifestError(f"invalid row for {name}")
        pixels.append(np.asarray(Image.open(io.BytesIO(data)), dtype=np.float32) / 255.0)
        labels.append(int(label))
        splits.append(split)
    seed_file = directory / "seed.txt"
    seed = int(seed_file.read_text()) if seed_file.exists() else 0
    return DomainDataset(
        pixels=np.stack(pixels), labels=np.array(labels), domain=domains.pop(), seed=seed, splits=np.array(splits, dtype=object)
    )
