"""Dataset ingestion: IDX files, image directories with a CSV index, and builtin sets.

Images come back as float64 ``(N, H, W, C)`` arrays in ``[0, 1]`` and labels
as int64 vectors. Conversion from/to 8-bit pixels happens only here and in the
corpus writer.
"""

from __future__ import annotations

import csv
import gzip
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import BadMagicError, CountMismatchError, DatasetError, TruncatedFileError, UsageError

FORMATS = ("idx", "image_dir_csv", "builtin_synthetic")
BUILTIN = ("digits", "signs")

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def to_uint8(images) -> np.ndarray:
    return np.round(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_bytes(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedFileError(f"IDX header needs 4 bytes, file has {len(data)}")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise BadMagicError(f"bad IDX magic {data[:4].hex()}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError("IDX dimension header is truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header < need:
        raise TruncatedFileError(f"IDX payload has {len(data) - header} bytes, expected {need}")
    if len(data) - header > need:
        raise DatasetError("IDX file has trailing bytes")
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims).copy()


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        return read_idx_bytes(fh.read())


def write_idx_bytes(array) -> bytes:
    array = np.asarray(array)
    code = next(
        (c for c, dt in _IDX_DTYPES.items()
         if dt.kind == array.dtype.kind and dt.itemsize == array.dtype.itemsize),
        None,
    )
    if code is None:
        raise UsageError(f"dtype {array.dtype} has no IDX encoding")
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_IDX_DTYPES[code]).tobytes()


def write_idx(path, array) -> None:
    path = Path(path)
    data = write_idx_bytes(array)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def _idx_pair(images_path: Path, labels_path: Path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise DatasetError(f"unexpected IDX ranks {images.ndim} and {labels.ndim}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = images[..., None]
    return from_uint8(images), labels.astype(np.int64)


def load_idx_dir(directory):
    """MNIST-style directory: ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    train = _idx_pair(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    test = _idx_pair(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    return train, test


def load_image_dir_csv(directory):
    """Directory with ``labels.csv`` rows ``file,label,split`` (split is train or test)."""
    d = Path(directory)
    index = d / "labels.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    parts = {"train": ([], []), "test": ([], [])}
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            split = row.get("split", "train").strip()
            if split not in parts:
                raise DatasetError(f"unknown split {split!r} in {index}")
            img = np.asarray(Image.open(d / row["file"]))
            if img.ndim == 2:
                img = img[..., None]
            parts[split][0].append(from_uint8(img))
            parts[split][1].append(int(row["label"]))
    out = []
    for split in ("train", "test"):
        X, y = parts[split]
        if X and len({x.shape for x in X}) != 1:
            raise DatasetError(f"images in the {split} split differ in shape")
        out.append((np.stack(X) if X else np.zeros((0, 1, 1, 1)), np.asarray(y, dtype=np.int64)))
    return tuple(out)


def _bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float64)


def make_digits(seed: int = 0, size: int = 16, jitter_copies: int = 1, test_fraction: float = 0.2):
    """Handwritten digits (scikit-learn's bundled 8x8 set) upsampled to ``size``.

    Originals are split into train/test first, then each split gets
    ``jitter_copies`` randomly warped copies per image, so no test image is a
    warp of a training image.
    """
    from sklearn.datasets import load_digits

    from .transforms import random_affine, warp_affine

    raw = load_digits()
    imgs = np.stack([_bilinear_resize(im / 16.0, size) for im in raw.images])
    imgs = np.clip(imgs, 0.0, 1.0)[..., None]
    labels = raw.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(imgs))
    n_test = int(round(test_fraction * len(imgs)))
    splits = []
    for idx in (order[n_test:], order[:n_test]):
        X, y = [imgs[idx]], [labels[idx]]
        for _ in range(jitter_copies):
            X.append(np.stack([
                warp_affine(im, random_affine(rng, im.shape, rotation=12.0, shift=0.08, zoom=(0.9, 1.1)))
                for im in imgs[idx]
            ]))
            y.append(labels[idx])
        splits.append((np.concatenate(X), np.concatenate(y)))
    return splits[0], splits[1]


_SIGN_COLORS = np.array([
    [0.85, 0.10, 0.10], [0.10, 0.30, 0.85], [0.95, 0.80, 0.10], [0.10, 0.65, 0.20],
    [0.95, 0.50, 0.05], [0.60, 0.15, 0.70], [0.85, 0.10, 0.10], [0.10, 0.30, 0.85],
    [0.95, 0.80, 0.10], [0.90, 0.90, 0.90],
])


def _sign_glyph(draw: ImageDraw.ImageDraw, cls: int, cx: float, cy: float, r: float, fill):
    def poly(n, phase):
        ang = phase + 2 * np.pi * np.arange(n) / n
        return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]

    box = (cx - r, cy - r, cx + r, cy + r)
    if cls == 0:
        draw.ellipse(box, fill=fill)
    elif cls == 1:
        draw.polygon(poly(3, -np.pi / 2), fill=fill)
    elif cls == 2:
        draw.polygon(poly(3, np.pi / 2), fill=fill)
    elif cls == 3:
        draw.rectangle((cx - 0.8 * r, cy - 0.8 * r, cx + 0.8 * r, cy + 0.8 * r), fill=fill)
    elif cls == 4:
        draw.polygon(poly(4, 0.0), fill=fill)
    elif cls == 5:
        draw.polygon(poly(8, np.pi / 8), fill=fill)
    elif cls == 6:
        draw.ellipse(box, outline=fill, width=max(1, int(r / 3)))
    elif cls == 7:
        w = max(1, int(r / 2.5))
        draw.line((cx - r, cy - r, cx + r, cy + r), fill=fill, width=w)
        draw.line((cx - r, cy + r, cx + r, cy - r), fill=fill, width=w)
    elif cls == 8:
        w = max(1, int(r / 2.5))
        draw.line((cx - r, cy, cx + r, cy), fill=fill, width=w)
        draw.line((cx, cy - r, cx, cy + r), fill=fill, width=w)
    else:
        draw.ellipse(box, fill=fill)
        draw.rectangle((cx - 0.75 * r, cy - 0.2 * r, cx + 0.75 * r, cy + 0.2 * r), fill=(255, 255, 255))


def make_signs(seed: int = 0, size: int = 16, n_train: int = 3000, n_test: int = 1000):
    """Synthetic traffic-sign stand-in: ten glyph classes with colour and pose jitter."""
    rng = np.random.default_rng(seed)
    scale = 4
    big = size * scale

    def sample(n):
        X = np.empty((n, size, size, 3))
        y = rng.integers(0, 10, size=n)
        for i, cls in enumerate(y):
            bg = rng.uniform(0.1, 0.6, size=3)
            canvas = Image.new("RGB", (big, big), tuple(int(255 * v) for v in bg))
            draw = ImageDraw.Draw(canvas)
            color = np.clip(_SIGN_COLORS[cls] + rng.normal(0, 0.08, 3), 0, 1)
            r = big * rng.uniform(0.28, 0.42)
            cx = big / 2 + rng.uniform(-0.1, 0.1) * big
            cy = big / 2 + rng.uniform(-0.1, 0.1) * big
            _sign_glyph(draw, int(cls), cx, cy, r, tuple(int(255 * v) for v in color))
            small = canvas.resize((size, size), Image.BILINEAR)
            img = np.asarray(small, dtype=np.float64) / 255.0
            img = img * rng.uniform(0.7, 1.2) + rng.normal(0, 0.03, img.shape)
            X[i] = np.clip(img, 0.0, 1.0)
        return X, y.astype(np.int64)

    return sample(n_train), sample(n_test)


def load_builtin(name: str, seed: int = 0):
    """Builtin set quantised to 8-bit levels, like any dataset read from disk."""
    if name == "digits":
        train, test = make_digits(seed)
    elif name == "signs":
        train, test = make_signs(seed)
    else:
        raise UsageError(f"unknown builtin dataset {name!r}; choose from {', '.join(BUILTIN)}")
    return tuple((from_uint8(to_uint8(X)), y) for X, y in (train, test))


def load_dataset(path, format: str = "idx", seed: int = 0):
    """Return ``((train_images, train_labels), (test_images, test_labels))``.

    For ``builtin_synthetic`` the path is the set's name (``digits`` or ``signs``).
    """
    if format not in FORMATS:
        raise UsageError(f"unknown dataset format {format!r}; choose from {', '.join(FORMATS)}")
    if format == "builtin_synthetic":
        return load_builtin(str(path), seed)
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"dataset path {path} does not exist")
    if format == "idx":
        return load_idx_dir(path)
    return load_image_dir_csv(path)
