"""Labelled image datasets: IDX files on disk plus two synthetic generators.

``make_patches`` cuts grayscale crops out of the sample photographs bundled with
scikit-image (one class per photograph). ``make_glyphs`` draws seven-segment digits
and needs nothing beyond numpy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import FLOAT, SeededRng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    class_count: int
    split: str = "test"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, self.split)


def _read_header(data: bytes, magic: int, ndim: int, path) -> tuple:
    need = 4 * (1 + ndim)
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: file shorter than its {need}-byte header")
    found, *dims = struct.unpack(f">{1 + ndim}I", data[:need])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return dims, need


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (count, rows, cols), off = _read_header(data, IMAGES_MAGIC, 3, path)
    n = count * rows * cols
    if len(data) - off < n:
        raise IdxTruncatedError(f"{path}: payload has {len(data) - off} bytes, header promises {n}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (count,), off = _read_header(data, LABELS_MAGIC, 1, path)
    if len(data) - off < count:
        raise IdxTruncatedError(f"{path}: payload has {len(data) - off} bytes, header promises {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path, class_count: int | None = None, split: str = "test") -> LabeledDataset:
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise IdxCountMismatchError(f"{len(raw)} images but {len(labels)} labels")
    images = (raw.astype(FLOAT) / FLOAT(255))[:, None]
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(images, labels, class_count, split)


def write_idx(images_u8, labels, images_path, labels_path) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


def to_bytes(images) -> np.ndarray:
    """Quantise [0, 1] floats of shape (N, 1, H, W) to IDX bytes."""
    images = np.asarray(images)
    return np.rint(np.clip(images[:, 0], 0, 1) * 255).astype(np.uint8)


def load_dataset_dir(directory, class_count: int = 10):
    directory = Path(directory)
    return tuple(load_idx(directory / a, directory / b, class_count, split)
                 for split, (a, b) in SPLIT_FILES.items())


def save_dataset_dir(directory, train: LabeledDataset, test: LabeledDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ds, (a, b) in ((train, SPLIT_FILES["train"]), (test, SPLIT_FILES["test"])):
        write_idx(to_bytes(ds.images), ds.labels, directory / a, directory / b)


def correctly_classified(dataset: LabeledDataset, models) -> np.ndarray:
    """Indices of images every model labels correctly."""
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= m.classify(dataset.images) == dataset.labels
    return np.flatnonzero(ok)


def evaluation_subset(dataset: LabeledDataset, models, k: int | None, rng: SeededRng) -> LabeledDataset:
    """Sample up to ``k`` images that all ``models`` classify correctly."""
    idx = correctly_classified(dataset, models)
    if k is not None and k < len(idx):
        idx = np.sort(idx[rng.choice(len(idx), k, replace=False)])
    return dataset.subset(idx)


# -- synthetic glyphs --------------------------------------------------------

# Seven-segment layout on a unit box: (x0, y0, x1, y1), y grows downwards.
_SEGMENTS = {
    "a": (0.0, 0.0, 1.0, 0.0), "b": (1.0, 0.0, 1.0, 0.5), "c": (1.0, 0.5, 1.0, 1.0),
    "d": (0.0, 1.0, 1.0, 1.0), "e": (0.0, 0.5, 0.0, 1.0), "f": (0.0, 0.0, 0.0, 0.5),
    "g": (0.0, 0.5, 1.0, 0.5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _render(segments, size, rng: SeededRng, contrast_range, noise_std):
    cx, cy = size / 2 + rng.uniform(-1.5, 1.5), size / 2 + rng.uniform(-1.5, 1.5)
    gw = size * rng.uniform(0.38, 0.5)
    gh = size * rng.uniform(0.6, 0.75)
    slant = rng.uniform(-0.25, 0.25)
    width = rng.uniform(0.7, 1.4)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.full((size, size), np.inf)
    for s in segments:
        x0, y0, x1, y1 = _SEGMENTS[s]
        pts = []
        for px, py in ((x0, y0), (x1, y1)):
            py_c = (py - 0.5) * gh
            pts.append((cx + (px - 0.5) * gw - slant * py_c, cy + py_c))
        (ax, ay), (bx, by) = pts
        vx, vy = bx - ax, by - ay
        tt = np.clip(((xx - ax) * vx + (yy - ay) * vy) / (vx * vx + vy * vy), 0, 1)
        dist = np.minimum(dist, np.hypot(xx - ax - tt * vx, yy - ay - tt * vy))
    ink = np.clip(width + 0.5 - dist, 0, 1)
    base = rng.uniform(0.2, 0.6)
    gx, gy = rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)
    background = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    contrast = rng.uniform(*contrast_range) * (1 if rng.uniform() < 0.5 else -1)
    img = background + contrast * ink + rng.normal(0, noise_std, size=(size, size))
    return np.clip(img, 0, 1)


def make_glyphs(n: int, rng: SeededRng, size: int = 16, contrast_range=(0.2, 0.45),
                noise_std: float = 0.04, split: str = "train") -> LabeledDataset:
    """Jittered seven-segment digits on textured backgrounds, ``(n, 1, size, size)``.

    Images pass through 8-bit quantisation so they survive an IDX round trip unchanged.
    """
    labels = rng.integers(0, 10, size=n)
    images = np.stack([_render(_DIGITS[y], size, rng.substream(i), contrast_range, noise_std)
                       for i, y in enumerate(labels)])
    images = np.rint(images * 255).astype(FLOAT) / FLOAT(255)
    return LabeledDataset(images[:, None], labels, 10, split)


# -- natural-image patches ---------------------------------------------------

PATCH_SOURCES = ("brick", "grass", "gravel", "camera", "moon", "coins", "text", "astronaut", "coffee",
                 "hubble_deep_field")


def _source_images(names):
    import skimage.data
    from skimage.color import rgb2gray

    out = []
    for name in names:
        im = getattr(skimage.data, name)()
        im = rgb2gray(im[..., :3]) if im.ndim == 3 else im / 255.0
        out.append(np.asarray(im, dtype=np.float64))
    return out


def _patch_split(sources, n, rng: SeededRng, size, split, train_frac, gain):
    from .transforms import resize_bilinear

    labels = rng.integers(0, len(sources), size=n)
    images = []
    for i, y in enumerate(labels):
        r = rng.substream(i)
        src = sources[y]
        h, w = src.shape
        crop = int(r.integers(size, 2 * size + 1))
        # train crops come from the left columns, test crops from the right, so they never overlap
        boundary = int(w * train_frac)
        lo, hi = (0, boundary - crop) if split == "train" else (boundary, w - crop)
        x0 = int(r.integers(lo, hi + 1))
        y0 = int(r.integers(0, h - crop + 1))
        p = resize_bilinear(src[y0:y0 + crop, x0:x0 + crop], size, size).astype(np.float64)
        p = p * r.uniform(*gain)
        if r.uniform() < 0.5:
            p = p[:, ::-1]
        if r.uniform() < 0.5:
            p = p[::-1, :]
        images.append(np.rint(np.clip(p, 0, 1) * 255))
    images = (np.stack(images).astype(FLOAT) / FLOAT(255))[:, None]
    return LabeledDataset(images, labels, len(sources), split)


def make_patches(n_train: int, n_test: int, rng: SeededRng, size: int = 16, sources=PATCH_SOURCES,
                 train_frac: float = 0.75, gain=(0.6, 1.2)):
    """Random square crops (``size`` to ``2*size`` px, resized to ``size``) labelled by source photo.

    Each crop gets a random brightness gain and random flips. Pixels are rounded to
    multiples of 1/255 in the same float32 form ``load_idx`` produces, so an IDX round
    trip is exact. Needs scikit-image.
    """
    srcs = _source_images(sources)
    for name, im in zip(sources, srcs):
        if min(im.shape[0], im.shape[1] * (1 - train_frac)) < 2 * size:
            raise ValueError(f"source {name!r} is too small for {size}px patches")
    return (_patch_split(srcs, n_train, rng.substream(1), size, "train", train_frac, gain),
            _patch_split(srcs, n_test, rng.substream(2), size, "test", train_frac, gain))
