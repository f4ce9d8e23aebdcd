"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and
deterministic synthetic stand-in corpora written in those exact formats.

The parsers are bit-exact about the on-disk formats:

  * IDX images: big-endian magic 0x00000803, then count/rows/cols and raw
    uint8 pixels; labels use magic 0x00000801.
  * CIFAR-10 binary batches: 3073-byte records, 1 label byte followed by
    3072 channel-major (R, G, B planes) pixels of a 32x32 image.

Real corpora are not redistributable here, so ``generate_digits_corpus`` and
``generate_shapes_corpus`` synthesize drop-in replacements (glyph renderings
with affine jitter and noise; parametric shape scenes) and write them through
the same file formats, which keeps every loader code path exercised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073

# Channel statistics applied by load_cifar10 (standard CIFAR-10 constants).
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    """Malformed dataset or container file."""


@dataclass
class DatasetHandle:
    name: str
    train_x: np.ndarray  # (N, C, H, W) float32
    train_y: np.ndarray  # (N,) int64
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int = 10


# -- IDX (MNIST layout) ------------------------------------------------------


def _read_idx_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path.name}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise FormatError(f"{path.name}: bad image magic 0x{magic:08x}")
    expect = 16 + count * rows * cols
    if len(raw) != expect:
        raise FormatError(f"{path.name}: size {len(raw)} != expected {expect}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path.name}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != MNIST_LABEL_MAGIC:
        raise FormatError(f"{path.name}: bad label magic 0x{magic:08x}")
    if len(raw) != 8 + count:
        raise FormatError(f"{path.name}: size {len(raw)} != expected {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", MNIST_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", MNIST_LABEL_MAGIC, len(labels)))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def load_mnist(data_dir) -> DatasetHandle:
    """Load an IDX-format image corpus: pixels normalized to [0, 1]."""
    d = Path(data_dir)
    tx = _read_idx_images(d / MNIST_FILES["train_images"])
    ty = _read_idx_labels(d / MNIST_FILES["train_labels"])
    vx = _read_idx_images(d / MNIST_FILES["test_images"])
    vy = _read_idx_labels(d / MNIST_FILES["test_labels"])
    if len(tx) != len(ty) or len(vx) != len(vy):
        raise FormatError("mnist: image/label count mismatch")
    return DatasetHandle(
        name="mnist",
        train_x=(tx.astype(np.float32) / 255.0)[:, None, :, :],
        train_y=ty,
        test_x=(vx.astype(np.float32) / 255.0)[:, None, :, :],
        test_y=vy,
    )


# -- CIFAR-10 binary -----------------------------------------------------------


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(f"{path.name}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise FormatError(f"{path.name}: label > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_cifar_batch(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    n = len(labels)
    rec = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels.astype(np.uint8)
    rec[:, 1:] = np.ascontiguousarray(images, dtype=np.uint8).reshape(n, 3072)
    path.write_bytes(rec.tobytes())


def load_cifar10(data_dir, subset_train: int = 0, subset_test: int = 0) -> DatasetHandle:
    """Load CIFAR-10 binary batches; per-channel mean/std normalization.

    ``subset_train``/``subset_test`` > 0 keep only the first n records
    (deterministic desk-scale option).
    """
    d = Path(data_dir)
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        x, y = _read_cifar_batch(d / name)
        xs.append(x)
        ys.append(y)
    tx = np.concatenate(xs)
    ty = np.concatenate(ys)
    vx, vy = _read_cifar_batch(d / CIFAR_TEST_FILE)
    if subset_train:
        tx, ty = tx[:subset_train], ty[:subset_train]
    if subset_test:
        vx, vy = vx[:subset_test], vy[:subset_test]

    def norm(x):
        x = x.astype(np.float32) / 255.0
        return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]

    return DatasetHandle(name="cifar10", train_x=norm(tx), train_y=ty,
                         test_x=norm(vx), test_y=vy)


# -- synthetic digit corpus (IDX layout) -----------------------------------------

_GLYPHS = {
    0: (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    1: ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    2: (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    3: (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    4: ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    5: ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    6: ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    7: ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    8: (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    9: (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows],
                    dtype=np.float64)


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    glyph = _glyph_array(digit)
    gh, gw = glyph.shape
    theta = rng.uniform(-0.26, 0.26)
    sy = rng.uniform(2.3, 3.0)
    sx = rng.uniform(2.3, 3.0)
    shear = rng.uniform(-0.15, 0.15)
    ty = rng.uniform(-2.5, 2.5)
    tx = rng.uniform(-2.5, 2.5)
    c, s = np.cos(theta), np.sin(theta)
    fwd = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) \
        @ np.array([[sy, 0.0], [0.0, sx]])
    inv = np.linalg.inv(fwd)
    center_out = np.array([14.0 + ty, 14.0 + tx])
    center_in = np.array([(gh - 1) / 2.0, (gw - 1) / 2.0])
    offset = center_in - inv @ center_out
    img = ndimage.affine_transform(glyph, inv, offset=offset, output_shape=(28, 28),
                                   order=1, mode="constant", cval=0.0)
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.4, 0.8))
    img *= rng.uniform(0.75, 1.0) / max(img.max(), 1e-6)
    img += rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_digits_corpus(out_dir, n_train: int = 12000, n_test: int = 2000,
                           seed: int = 7) -> None:
    """Write a synthetic digit corpus as MNIST-layout IDX files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for n, img_name, lab_name in ((n_train, "train_images", "train_labels"),
                                  (n_test, "test_images", "test_labels")):
        labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
        images = np.empty((n, 28, 28), dtype=np.uint8)
        for i, lab in enumerate(labels):
            images[i] = np.round(_render_digit(int(lab), rng) * 255.0).astype(np.uint8)
        write_idx_images(out / MNIST_FILES[img_name], images)
        write_idx_labels(out / MNIST_FILES[lab_name], labels)


# -- synthetic shape corpus (CIFAR-10 binary layout) ------------------------------


def _shape_mask(cls: int, rng: np.random.Generator) -> np.ndarray:
    """Binary 32x32 foreground mask for one of ten shape classes."""
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    cy = 15.5 + rng.uniform(-5, 5)
    cx = 15.5 + rng.uniform(-5, 5)
    r = rng.uniform(6.0, 9.5)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = c * (xx - cx) + s * (yy - cy)
    v = -s * (xx - cx) + c * (yy - cy)
    if cls == 0:    # disk
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == 1:    # ring
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if cls == 2:    # filled square (rotated)
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if cls == 3:    # square outline
        a = 0.85 * r
        inside = (np.abs(u) <= a) & (np.abs(v) <= a)
        inner = (np.abs(u) <= 0.55 * a) & (np.abs(v) <= 0.55 * a)
        return inside & ~inner
    if cls == 4:    # triangle (half-plane construction)
        h = 0.95 * r
        return (v >= -h * 0.6) & (v <= h) & (np.abs(u) <= (h - v) * 0.6)
    if cls == 5:    # plus / cross
        w = 0.33 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if cls == 6:    # horizontal bars
        return (np.abs(yy - cy) <= r) & (np.mod(yy - cy, 6.0) < 2.8) & (np.abs(xx - cx) <= r)
    if cls == 7:    # vertical bars
        return (np.abs(xx - cx) <= r) & (np.mod(xx - cx, 6.0) < 2.8) & (np.abs(yy - cy) <= r)
    if cls == 8:    # single thick diagonal stripe
        return (np.abs(u) <= 0.34 * r) & (np.abs(v) <= 1.4 * r)
    if cls == 9:    # two small disks
        dx = 0.62 * r
        d1 = (xx - (cx - dx)) ** 2 + (yy - cy) ** 2 <= (0.45 * r) ** 2
        d2 = (xx - (cx + dx)) ** 2 + (yy - cy) ** 2 <= (0.45 * r) ** 2
        return d1 | d2
    raise ValueError(f"unknown shape class {cls}")


def _render_shape(cls: int, rng: np.random.Generator) -> np.ndarray:
    mask = _shape_mask(cls, rng).astype(np.float64)
    mask = ndimage.gaussian_filter(mask, sigma=0.6)
    bg = rng.uniform(0.05, 0.55, size=3)
    fg = rng.uniform(0.0, 1.0, size=3)
    while np.abs(fg - bg).sum() < 0.55:  # keep the shape visible
        fg = rng.uniform(0.0, 1.0, size=3)
    img = np.empty((3, 32, 32), dtype=np.float64)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(32, 32)), sigma=3.0)
    texture = texture / max(np.abs(texture).max(), 1e-6) * 0.12
    for ch in range(3):
        img[ch] = bg[ch] + texture + mask * (fg[ch] - bg[ch])
    img += rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shapes_corpus(out_dir, n_train: int = 10000, n_test: int = 2000,
                           seed: int = 7) -> None:
    """Write a synthetic 10-class shape corpus as CIFAR-10 binary batches."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def make(n):
        labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
        images = np.empty((n, 3, 32, 32), dtype=np.uint8)
        for i, lab in enumerate(labels):
            images[i] = np.round(_render_shape(int(lab), rng) * 255.0).astype(np.uint8)
        return images, labels

    train_images, train_labels = make(n_train)
    per = n_train // 5
    for b in range(5):
        lo = b * per
        hi = (b + 1) * per if b < 4 else n_train
        write_cifar_batch(out / CIFAR_TRAIN_FILES[b], train_images[lo:hi], train_labels[lo:hi])
    test_images, test_labels = make(n_test)
    write_cifar_batch(out / CIFAR_TEST_FILE, test_images, test_labels)


# -- batching and augmentation -----------------------------------------------------


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a seeded permutation of range(n)."""
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def augment_batch(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) plus 4-pixel pad-and-crop, per image."""
    n, c, h, w = xb.shape
    out = np.empty_like(xb)
    flips = rng.random(n) < 0.5
    oy = rng.integers(0, 9, size=n)
    ox = rng.integers(0, 9, size=n)
    padded = np.pad(xb, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="constant")
    for i in range(n):
        img = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out
