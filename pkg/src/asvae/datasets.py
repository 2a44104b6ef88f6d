"""Synthetic datasets, tensor/image file formats, and a probe classifier.

Two generated datasets cover the two decoder heads: a 2-D Gaussian ring
mixture (continuous, easy to visualize and to histogram) and noisy 8x8
glyph digits (near-binary, labeled, enough structure for a classifier
probe). Both are pure functions of their seed.

Files: ``.atns`` is a minimal checksummed tensor container (float64 or
uint8, any rank >= 1); image grids are written as binary PGM so they
open anywhere without a plotting stack.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_mod
from . import networks as net
from .autodiff import Tensor
from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    FormatError,
    ShapeError,
    TrainingError,
    TruncationError,
    VersionError,
)
from .rng import RngStream

# --------------------------------------------------------------------------
# Datasets.
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    """Feature matrix plus optional labels and pixel provenance.

    ``scale`` is "raw" for unbounded features and "unit" for values in
    [0, 1]. ``pixels`` keeps the original uint8 array when the features
    were derived from quantized pixels, for likelihoods that work on
    bins rather than densities.
    """

    name: str
    features: np.ndarray
    labels: np.ndarray | None = None
    scale: str = "raw"
    pixels: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"features must be [n, d], got {self.features.shape}")
        if self.scale not in ("raw", "unit"):
            raise ContractError(f"scale must be 'raw' or 'unit', got '{self.scale}'")
        if self.labels is not None and self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must be one int per row")


def _balanced_labels(n: int, k: int, stream: RngStream) -> np.ndarray:
    """n labels over k classes with counts within one of each other."""
    return (np.arange(n, dtype=np.int64) % k)[stream.permutation(n)]


def gen_mixture2d(k: int, separation: float, n: int, seed: int) -> Dataset:
    """Gaussian ring mixture: k components on a circle of radius separation.

    Component j sits at angle 2 pi j / k with isotropic variance
    0.05 * separation, so the modes widen with the ring and stay
    distinct at any k that fits it. Labels are the component indices,
    balanced to within one count.
    """
    if k < 1 or n < 1 or separation <= 0:
        raise ContractError("need k >= 1, n >= 1, separation > 0")
    stream = RngStream(seed)
    labels = _balanced_labels(n, k, stream)
    angles = 2.0 * np.pi * labels / k
    centers = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points = centers + np.sqrt(0.05 * separation) * stream.normal((n, 2))
    return Dataset(name="mixture2d", features=points, labels=labels, scale="raw")


_DIGIT_GLYPHS = [
    "..####.."
    ".#....#."
    ".#....#."
    ".#....#."
    ".#....#."
    ".#....#."
    "..####.."
    "........",
    "...##..."
    "..###..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "..####.."
    "........",
    "..####.."
    ".#....#."
    "......#."
    ".....#.."
    "...##..."
    "..#....."
    ".######."
    "........",
    "..####.."
    ".#....#."
    "......#."
    "...###.."
    "......#."
    ".#....#."
    "..####.."
    "........",
    "....##.."
    "...#.#.."
    "..#..#.."
    ".#...#.."
    ".######."
    ".....#.."
    ".....#.."
    "........",
    ".######."
    ".#......"
    ".#####.."
    "......#."
    "......#."
    ".#....#."
    "..####.."
    "........",
    "..####.."
    ".#......"
    ".#......"
    ".#####.."
    ".#....#."
    ".#....#."
    "..####.."
    "........",
    ".######."
    "......#."
    ".....#.."
    "....#..."
    "...#...."
    "...#...."
    "...#...."
    "........",
    "..####.."
    ".#....#."
    ".#....#."
    "..####.."
    ".#....#."
    ".#....#."
    "..####.."
    "........",
    "..####.."
    ".#....#."
    ".#....#."
    "..#####."
    "......#."
    "......#."
    "..####.."
    "........",
]


def digit_templates() -> np.ndarray:
    """[10, 64] binary glyphs, one 8x8 digit per row."""
    out = np.zeros((10, 64))
    for digit, glyph in enumerate(_DIGIT_GLYPHS):
        if len(glyph) != 64 or set(glyph) - {"#", "."}:
            raise ContractError(f"glyph {digit} is not an 8x8 #/. bitmap")
        out[digit] = np.array([1.0 if c == "#" else 0.0 for c in glyph])
    return out


def gen_toy_digits(n: int, seed: int, flip_rate: float = 0.05) -> Dataset:
    """Noisy 8x8 digits: glyph templates with iid pixel flips.

    Values are exactly 0.0 or 1.0; labels are the source digits,
    balanced to within one count.
    """
    if n < 1 or not 0.0 <= flip_rate < 0.5:
        raise ContractError("need n >= 1 and flip_rate in [0, 0.5)")
    stream = RngStream(seed)
    labels = _balanced_labels(n, 10, stream)
    base = digit_templates()[labels]
    flips = stream.uniform((n, 64)) < flip_rate
    return Dataset(
        name="digits",
        features=np.abs(base - flips),
        labels=labels,
        scale="unit",
    )


# --------------------------------------------------------------------------
# Tensor file format.
# --------------------------------------------------------------------------

_ATNS_MAGIC = b"ATNS"
_ATNS_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype(np.uint8)}


def tensor_file_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype not in _DTYPE_CODES:
        raise ContractError(f"tensor files hold float64 or uint8, not {arr.dtype}")
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise ContractError(f"tensor files need rank >= 1 and no zero dims, got {arr.shape}")
    body = _ATNS_MAGIC + struct.pack(
        "<BBB", _ATNS_VERSION, _DTYPE_CODES[arr.dtype], arr.ndim
    )
    body += b"".join(struct.pack("<Q", d) for d in arr.shape)
    data = np.ascontiguousarray(arr)
    body += data.astype("<f8").tobytes() if arr.dtype == np.float64 else data.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_tensor_file(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_file_bytes(arr))


def parse_tensor_file(blob: bytes) -> np.ndarray:
    if len(blob) < 7 + 4:
        raise TruncationError(f"file too short to be a tensor file ({len(blob)} bytes)")
    if blob[:4] != _ATNS_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {_ATNS_MAGIC!r}")
    version, dtype_code, rank = struct.unpack("<BBB", blob[4:7])
    if version != _ATNS_VERSION:
        raise VersionError(f"unsupported tensor file version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if rank < 1:
        raise FormatError("tensor files require rank >= 1")
    body, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("tensor file checksum mismatch")
    pos = 7
    if pos + 8 * rank > len(body):
        raise TruncationError("dimension list runs past end of file")
    dims = [struct.unpack("<Q", body[pos + 8 * i : pos + 8 * (i + 1)])[0] for i in range(rank)]
    pos += 8 * rank
    if any(d < 1 for d in dims):
        raise FormatError(f"zero-sized dimension in {dims}")
    dtype = _CODE_DTYPES[dtype_code]
    count = math.prod(dims)
    need = count * dtype.itemsize
    if pos + need > len(body):
        raise TruncationError("tensor payload runs past end of file")
    if pos + need != len(body):
        raise FormatError(f"{len(body) - pos - need} trailing bytes after tensor payload")
    data = np.frombuffer(body[pos : pos + need], dtype=dtype)
    out = data.reshape(dims)
    return out.astype(np.float64) if dtype_code == 1 else out.copy()


def load_tensor_file(path: str | Path) -> np.ndarray:
    return parse_tensor_file(Path(path).read_bytes())


def load_dataset_file(path: str | Path) -> Dataset:
    """Wrap a rank-2 tensor file as a dataset.

    float64 files are raw features; uint8 files are pixel data, exposed
    as mid-bin unit floats (i + 0.5) / 256 with the original bytes kept
    in ``pixels``.
    """
    arr = load_tensor_file(path)
    if arr.ndim != 2:
        raise ContractError(f"dataset files must be rank 2, got rank {arr.ndim}")
    name = Path(path).stem
    if arr.dtype == np.uint8:
        return Dataset(
            name=name,
            features=(arr.astype(np.float64) + 0.5) / 256.0,
            scale="unit",
            pixels=arr,
        )
    return Dataset(name=name, features=arr, scale="raw")


# --------------------------------------------------------------------------
# PGM image grids.
# --------------------------------------------------------------------------

_SEPARATOR_GRAY = 128


def write_image_grid(
    path: str | Path,
    images: np.ndarray,
    cols: int,
    height: int | None = None,
    width: int | None = None,
) -> None:
    """Tile [n, h*w] unit-scale images into one binary PGM (P5) file.

    Tiles are laid out row-major with 1-pixel mid-gray separators;
    unused cells in the last row stay separator-gray. Values are mapped
    by round-half-up to bytes (0.5 becomes 128) and clipped to [0, 255].
    Square images infer their side; anything else needs height/width.
    """
    if images.ndim != 2 or images.shape[0] < 1:
        raise ShapeError(f"images must be [n, pixels], got {images.shape}")
    if cols < 1:
        raise ContractError(f"cols must be positive, got {cols}")
    n, d = images.shape
    if height is None or width is None:
        side = math.isqrt(d)
        if side * side != d:
            raise ContractError(
                f"{d} pixels is not square; pass height and width explicitly"
            )
        height = width = side
    if height * width != d:
        raise ShapeError(f"height {height} x width {width} != {d} pixels")
    rows = math.ceil(n / cols)
    canvas_h = rows * height + (rows - 1)
    canvas_w = cols * width + (cols - 1)
    canvas = np.full((canvas_h, canvas_w), _SEPARATOR_GRAY, dtype=np.uint8)
    tiles = np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        top, left = r * (height + 1), c * (width + 1)
        canvas[top : top + height, left : left + width] = tiles[i].reshape(height, width)
    header = f"P5\n{canvas_w} {canvas_h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + canvas.tobytes())


# --------------------------------------------------------------------------
# Probe classifier for the generated-sample score.
# --------------------------------------------------------------------------


@dataclass
class ToyClassifier:
    """Small softmax MLP probe; prediction is pure numpy, no tape."""

    mlp: net.Mlp
    n_classes: int

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = net.mlp_forward(net.detach_mlp(self.mlp), Tensor(x)).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict_proba(x).argmax(axis=1) == labels))


def train_toy_classifier(
    data: Dataset,
    seed: int = 1234,
    hidden: tuple[int, ...] = (64,),
    batch_size: int = 128,
    learning_rate: float = 1e-3,
    max_epochs: int = 80,
    target_accuracy: float = 0.95,
) -> ToyClassifier:
    """Fit the probe until held-out accuracy reaches the target.

    Trains with Adam on softmax cross-entropy over an 80/20 split and
    stops at the first epoch whose held-out accuracy meets the target;
    raises :class:`~asvae.errors.TrainingError` if max_epochs pass
    without reaching it.
    """
    from .trainer import AdamState, adam_step, init_adam  # no circular import at module load

    if data.labels is None:
        raise ContractError("classifier training needs a labeled dataset")
    n, d = data.features.shape
    n_classes = int(data.labels.max()) + 1
    stream = RngStream(seed)
    perm = stream.permutation(n)
    n_val = max(1, n // 5)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    x_tr, y_tr = data.features[tr_idx], data.labels[tr_idx]
    x_val, y_val = data.features[val_idx], data.labels[val_idx]

    mlp = net.build_mlp(net.MlpSpec((d, *hidden, n_classes), "tanh"), stream)
    clf = ToyClassifier(mlp=mlp, n_classes=n_classes)
    opt: AdamState = init_adam(mlp.params)
    onehot_full = np.eye(n_classes)[y_tr]

    with ad.unchecked():
        for _ in range(max_epochs):
            order = stream.permutation(x_tr.shape[0])
            for start in range(0, x_tr.shape[0] - batch_size + 1, batch_size):
                idx = order[start : start + batch_size]
                logits = net.mlp_forward(mlp, Tensor(x_tr[idx]))
                picked = (logits * Tensor(onehot_full[idx])).sum(axis=-1)
                loss = -(picked - ad.logsumexp_last(logits)).mean()
                ad.backward(loss)
                mlp.params = adam_step(
                    mlp.params, _grads_dict(mlp.params), opt, learning_rate
                )
            if clf.accuracy(x_val, y_val) >= target_accuracy:
                return clf
    raise TrainingError(
        f"classifier stalled below {target_accuracy:.0%} held-out accuracy "
        f"after {max_epochs} epochs"
    )


def _grads_dict(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def save_classifier(path: str | Path, clf: ToyClassifier) -> None:
    ckpt = ckpt_mod.Checkpoint(
        config={
            "kind": "toy_classifier",
            "widths": ",".join(str(w) for w in clf.mlp.spec.widths),
            "activation": clf.mlp.spec.activation,
            "n_classes": str(clf.n_classes),
        },
        params={k: p.data for k, p in clf.mlp.params.items()},
    )
    ckpt_mod.save_checkpoint(path, ckpt)


def load_classifier(path: str | Path) -> ToyClassifier:
    ckpt = ckpt_mod.load_checkpoint(path)
    if ckpt.config.get("kind") != "toy_classifier":
        raise FormatError("checkpoint does not hold a classifier")
    spec = net.MlpSpec(
        tuple(int(w) for w in ckpt.config["widths"].split(",")),
        ckpt.config["activation"],
    )
    mlp = net.Mlp(
        spec=spec, params={k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
    )
    return ToyClassifier(mlp=mlp, n_classes=int(ckpt.config["n_classes"]))
