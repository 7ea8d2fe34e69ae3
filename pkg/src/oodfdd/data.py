"""Dataset ingestion and generation.

Three sources: the UCI ann-thyroid text format, MNIST idx files, and a
seeded chiller-style surrogate with graded fault severities.  Loaded
datasets carry a per-example group tag (normal, fault:k,
incipient:k:severity, unknown) that drives evaluation; incipient and
unknown rows never enter a training split.

The sandbox this package ships in has no network access, so seeded
surrogate writers for the thyroid and MNIST file formats are included as
well.  They emit files in the exact on-disk formats the loaders parse, with
the well-known class proportions preserved, so every pipeline exercises the
real parsing path.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .nncore import make_rng
from .model import PathwayNetwork

THYROID_CONTINUOUS_COLS = (0, 16, 17, 18, 19, 20)
THYROID_N_COLS = 21
# class-balance guards from the dataset's documented composition: about 92%
# normal overall and about 67% subnormal among the non-normal rows
THYROID_NORMAL_RANGE = (0.88, 0.96)
THYROID_SUBNORMAL_RANGE = (0.55, 0.80)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class FeatureStats:
    """Per-feature mean and standard deviation, fitted on training normals."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureStats":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)  # constant features pass through
        return cls(mean=x.mean(axis=0), std=std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass
class LabeledDataset:
    """Features, integer labels, group tags, and optional feature stats.

    Label 0 is normal; 1..n are fault classes.  Rows in the unknown group
    carry label 0 as a placeholder: their class is outside the label space
    and evaluation keys off the tag alone.
    """

    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    feature_stats: FeatureStats | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.group = np.asarray(self.group)
        if not (len(self.X) == len(self.y) == len(self.group)):
            raise ValueError("X, y, and group must have equal length")

    def __len__(self) -> int:
        return len(self.X)

    def select(self, mask) -> "LabeledDataset":
        mask = np.asarray(mask)
        return replace(self, X=self.X[mask], y=self.y[mask], group=self.group[mask])

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        header = ",".join([f"feature_{j}" for j in range(d)] + ["label", "group"])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(len(self)):
                cells = [f"{v:.6f}" for v in self.X[i]]
                fh.write(",".join(cells + [str(self.y[i]), str(self.group[i])]) + "\n")


def is_ood_tag(tag: str) -> bool:
    return tag.startswith("incipient:") or tag == "unknown"


def concat(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Stack two datasets row-wise; feature stats carry over from the first."""
    if a.X.shape[1] != b.X.shape[1]:
        raise ValueError(f"feature width mismatch: {a.X.shape[1]} vs {b.X.shape[1]}")
    return LabeledDataset(
        X=np.vstack([a.X, b.X]),
        y=np.concatenate([a.y, b.y]),
        group=np.concatenate([a.group, b.group]),
        feature_stats=a.feature_stats,
    )


# ---------------------------------------------------------------------------
# UCI ann-thyroid


def load_thyroid(path, stats: FeatureStats | None = None) -> LabeledDataset:
    """Parse one ann-thyroid whitespace file (21 features + class code).

    Keeps only the 6 continuous columns, z-scored with the given stats or,
    when none are passed, with stats fitted on this file's own normal rows.
    Class codes map as 3 = normal, 1 = diseased (fault 1), 2 = subnormal
    (an incipient form of the disease, tagged out-of-distribution).  The
    file's class balance is verified against the dataset's documented
    proportions; a mismatch raises rather than silently proceeding.
    """
    rows, codes = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != THYROID_N_COLS + 1:
                raise ValueError(
                    f"{path} line {lineno}: expected {THYROID_N_COLS + 1} columns, "
                    f"got {len(tokens)}"
                )
            try:
                values = [float(tok) for tok in tokens[:-1]]
                code = int(tokens[-1])
            except ValueError as exc:
                raise ValueError(f"{path} line {lineno}: non-numeric value") from exc
            if code not in (1, 2, 3):
                raise ValueError(f"{path} line {lineno}: unknown class code {code}")
            rows.append(values)
            codes.append(code)
    if not rows:
        raise ValueError(f"{path}: empty file")
    raw = np.asarray(rows, dtype=np.float64)
    codes = np.asarray(codes)

    binary_cols = [j for j in range(THYROID_N_COLS) if j not in THYROID_CONTINUOUS_COLS]
    bad = ~np.isin(raw[:, binary_cols], (0.0, 1.0))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(
            f"{path}: column {binary_cols[j]} should be binary, "
            f"row {i + 1} has {raw[i, binary_cols[j]]}"
        )

    n = len(raw)
    n_normal = int(np.sum(codes == 3))
    n_sub = int(np.sum(codes == 2))
    lo, hi = THYROID_NORMAL_RANGE
    if not lo <= n_normal / n <= hi:
        raise ValueError(
            f"{path}: normal fraction {n_normal / n:.3f} outside [{lo}, {hi}]; "
            "not the expected thyroid class balance"
        )
    lo, hi = THYROID_SUBNORMAL_RANGE
    if not lo <= n_sub / (n - n_normal) <= hi:
        raise ValueError(
            f"{path}: subnormal fraction among non-normal {n_sub / (n - n_normal):.3f} "
            f"outside [{lo}, {hi}]; not the expected thyroid class balance"
        )

    x = raw[:, THYROID_CONTINUOUS_COLS]
    y = np.where(codes == 3, 0, 1)
    group = np.where(
        codes == 3, "normal", np.where(codes == 1, "fault:1", "incipient:1:1")
    )
    if stats is None:
        stats = FeatureStats.fit(x[codes == 3])
    return LabeledDataset(X=stats.apply(x), y=y, group=group, feature_stats=stats)


# ---------------------------------------------------------------------------
# MNIST idx


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read one big-endian idx file (magic 2051 images or 2049 labels)."""
    with _open_maybe_gzip(path) as fh:
        header = fh.read(4)
        if len(header) != 4:
            raise ValueError(f"{path}: truncated header")
        (magic,) = struct.unpack(">i", header)
        if magic == IDX_IMAGES_MAGIC:
            n, h, w = struct.unpack(">iii", fh.read(12))
            data = fh.read(n * h * w)
            if len(data) != n * h * w:
                raise ValueError(f"{path}: truncated image payload")
            return np.frombuffer(data, dtype=np.uint8).reshape(n, h, w)
        if magic == IDX_LABELS_MAGIC:
            (n,) = struct.unpack(">i", fh.read(4))
            data = fh.read(n)
            if len(data) != n:
                raise ValueError(f"{path}: truncated label payload")
            return np.frombuffer(data, dtype=np.uint8)
        raise ValueError(f"{path}: bad idx magic {magic}")


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def avg_pool2(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling; needs even height and width."""
    n, h, w = images.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dims {h}x{w} not divisible by 2")
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def load_mnist(
    images_path,
    labels_path,
    normal_digit: int = 0,
    fault_digits: tuple = (5, 6, 8, 9),
    unknown_digits: tuple = (1, 2, 3, 4, 7),
) -> LabeledDataset:
    """Load an idx image/label pair into the fault-detection label scheme.

    Pixels are scaled to [0,1] and downscaled by 2x2 average pooling; the
    normal digit becomes label 0, fault digits get labels 1.. in sorted
    order, unknown digits keep placeholder label 0 under the unknown tag.
    Digits in none of the three sets are dropped.
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: not an image file")
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: not a label file")
    if len(images) != len(labels):
        raise ValueError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    overlap = {normal_digit} & set(fault_digits) | {normal_digit} & set(unknown_digits)
    overlap |= set(fault_digits) & set(unknown_digits)
    if overlap:
        raise ValueError(f"digit sets overlap: {sorted(overlap)}")

    fault_order = {d: k + 1 for k, d in enumerate(sorted(fault_digits))}
    keep = np.isin(labels, [normal_digit, *fault_digits, *unknown_digits])
    images, labels = images[keep], labels[keep]

    pooled = avg_pool2(images.astype(np.float64) / 255.0)
    x = pooled.reshape(len(pooled), -1)
    y = np.zeros(len(labels), dtype=np.int64)
    group = np.empty(len(labels), dtype=object)
    for i, digit in enumerate(labels):
        if digit == normal_digit:
            group[i] = "normal"
        elif digit in fault_order:
            y[i] = fault_order[digit]
            group[i] = f"fault:{fault_order[digit]}"
        else:
            group[i] = "unknown"
    return LabeledDataset(X=x, y=y, group=group.astype(str))


# ---------------------------------------------------------------------------
# generated examples


def gen_ambiguous(
    net: PathwayNetwork,
    x_normal: np.ndarray,
    x_fault: np.ndarray,
    t_values=(0.4, 0.5, 0.6),
    fault_label: int = 1,
) -> LabeledDataset:
    """Decode latent interpolations between paired normal and fault inputs.

    z(t) = (1-t) * enc(x_normal) + t * enc(x_fault), decoded with dropout
    off.  Rows are paired; the output stacks all pairs per t value, tagged
    incipient:<fault_label>:<t>.
    """
    if net.decoder is None:
        raise ValueError(f"{net.kind.value} model has no decoder")
    x_normal = np.atleast_2d(np.asarray(x_normal, dtype=np.float64))
    x_fault = np.atleast_2d(np.asarray(x_fault, dtype=np.float64))
    if x_normal.shape != x_fault.shape:
        raise ValueError(
            f"paired inputs must share a shape: {x_normal.shape} vs {x_fault.shape}"
        )
    z_normal = net.encoder.forward(x_normal)
    z_fault = net.encoder.forward(x_fault)
    xs, tags = [], []
    for t in t_values:
        z = (1.0 - t) * z_normal + t * z_fault
        xs.append(net.decoder.forward(z))
        tags.extend([f"incipient:{fault_label}:{t:g}"] * len(z))
    x = np.vstack(xs)
    return LabeledDataset(
        X=x, y=np.full(len(x), fault_label, dtype=np.int64), group=np.asarray(tags)
    )


def gen_chiller_surrogate(
    seed: int,
    n_per_class: int,
    d: int = 16,
    n_faults: int = 7,
    severities=(1, 2, 3, 4),
) -> LabeledDataset:
    """Severity-graded Gaussian clusters mimicking the chiller experiment.

    Normal data is a standard Gaussian at the origin.  Each fault k gets a
    seeded random direction of length 6; severity s places that fault's
    cluster mean at (s/4) of the way out, with unit isotropic noise, so the
    severest level sits 6.0 from the origin and the slightest 1.5.  The
    last fault index is tagged unknown at every severity.  Fully
    deterministic in the seed.
    """
    if n_faults < 2:
        raise ValueError("need at least two faults (one becomes the unknown)")
    rng = make_rng(seed)
    directions = rng.normal(0.0, 1.0, (n_faults, d))
    directions *= 6.0 / np.linalg.norm(directions, axis=1, keepdims=True)

    xs = [rng.normal(0.0, 1.0, (n_per_class, d))]
    ys = [np.zeros(n_per_class, dtype=np.int64)]
    tags = ["normal"] * n_per_class
    max_sev = max(severities)
    for k in range(1, n_faults + 1):
        for s in sorted(severities):
            center = (s / max_sev) * directions[k - 1]
            xs.append(center + rng.normal(0.0, 1.0, (n_per_class, d)))
            if k == n_faults:
                ys.append(np.zeros(n_per_class, dtype=np.int64))
                tags.extend(["unknown"] * n_per_class)
            elif s == max_sev:
                ys.append(np.full(n_per_class, k, dtype=np.int64))
                tags.extend([f"fault:{k}"] * n_per_class)
            else:
                ys.append(np.full(n_per_class, k, dtype=np.int64))
                tags.extend([f"incipient:{k}:{s}"] * n_per_class)
    return LabeledDataset(
        X=np.vstack(xs), y=np.concatenate(ys), group=np.asarray(tags)
    )


# ---------------------------------------------------------------------------
# splitting and standardization


def split(
    dataset: LabeledDataset, train_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split; out-of-distribution rows always go to test.

    In-distribution rows are permuted and divided per label so both sides
    keep the class balance.  A label with fewer than 2 in-distribution rows
    cannot be stratified and raises.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = make_rng(seed)
    ood = np.asarray([is_ood_tag(str(g)) for g in dataset.group])
    train_idx, test_idx = [], []
    in_idx = np.nonzero(~ood)[0]
    for label in np.unique(dataset.y[in_idx]):
        members = in_idx[dataset.y[in_idx] == label]
        if len(members) < 2:
            raise ValueError(f"label {label} has {len(members)} rows; cannot stratify")
        perm = members[rng.permutation(len(members))]
        n_train = int(round(train_fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(perm[:n_train])
        test_idx.extend(perm[n_train:])
    test_idx.extend(np.nonzero(ood)[0])
    return dataset.select(np.sort(train_idx)), dataset.select(np.sort(test_idx))


def standardize_pair(
    train: LabeledDataset, test: LabeledDataset
) -> tuple[LabeledDataset, LabeledDataset]:
    """Fit stats on the training normals, apply to both sides."""
    stats = FeatureStats.fit(train.X[train.y == 0])
    return (
        replace(train, X=stats.apply(train.X), feature_stats=stats),
        replace(test, X=stats.apply(test.X), feature_stats=stats),
    )


# ---------------------------------------------------------------------------
# surrogate file writers (real formats, generated content)

THYROID_TRAIN_COUNTS = {"normal": 3488, "subnormal": 191, "diseased": 93}
THYROID_TEST_COUNTS = {"normal": 3178, "subnormal": 177, "diseased": 73}


def write_thyroid_surrogate(dir_path, seed: int = 0) -> dict[str, str]:
    """Emit ann-train.data / ann-test.data in the UCI text format.

    The continuous block is a rank-3 factor model over an orthonormal basis:
    two dominant physiological factors carry most of the variance, a third
    carries a quarter of their scale, and a little per-column noise sits on
    top.  Disease displaces rows along the weak third factor, so the signal
    hides in the direction a capacity-2 reconstruction is most tempted to
    discard; the subnormal cluster sits at 30% of that displacement, an
    incipient version of the same deviation.  Binary columns are constant
    indicators, carrying no class signal.  Class counts replicate the real
    files, preserving the documented 92% / 67% proportions.
    """
    rng = make_rng(seed)
    k = len(THYROID_CONTINUOUS_COLS)
    basis, _ = np.linalg.qr(rng.normal(0.0, 1.0, (k, 3)))
    loadings, weak = basis[:, :2], basis[:, 2]
    shift = 0.22 * weak
    sub_shift = 0.30 * shift
    b_const = (rng.random(THYROID_N_COLS - k) < 0.4).astype(np.float64)

    def make_rows(code: int, n: int) -> np.ndarray:
        factors = rng.normal(0.0, 1.0, (n, 2))
        weak_factor = rng.normal(0.0, 1.0, n)
        cont = (0.5 + 0.04 * factors @ loadings.T + 0.02 * np.outer(weak_factor, weak)
                + 0.01 * rng.normal(0.0, 1.0, (n, k)))
        if code == 1:
            cont = cont + shift
        elif code == 2:
            cont = cont + sub_shift
        cont = np.clip(cont, 0.001, 0.999)
        rows = np.empty((n, THYROID_N_COLS + 1))
        cont_cols = list(THYROID_CONTINUOUS_COLS)
        bin_cols = [j for j in range(THYROID_N_COLS) if j not in THYROID_CONTINUOUS_COLS]
        rows[:, cont_cols] = cont
        rows[:, bin_cols] = np.tile(b_const, (n, 1))
        rows[:, -1] = code
        return rows

    paths = {}
    for name, counts in (("ann-train.data", THYROID_TRAIN_COUNTS),
                         ("ann-test.data", THYROID_TEST_COUNTS)):
        blocks = np.vstack([
            make_rows(3, counts["normal"]),
            make_rows(2, counts["subnormal"]),
            make_rows(1, counts["diseased"]),
        ])
        blocks = blocks[rng.permutation(len(blocks))]
        path = os.path.join(dir_path, name)
        with open(path, "w") as fh:
            for row in blocks:
                cells = [f"{v:.4f}" if j in THYROID_CONTINUOUS_COLS else f"{int(v)}"
                         for j, v in enumerate(row[:-1])]
                fh.write(" ".join(cells + [str(int(row[-1]))]) + "\n")
        paths[name] = path
    return paths


# 7x7 digit glyphs, upscaled 4x to 28x28 for the image surrogate
_GLYPHS = {
    0: (".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####."),
    1: ("...#...", "..##...", "...#...", "...#...", "...#...", "...#...", "..###.."),
    2: (".#####.", "#.....#", "......#", "...###.", "..#....", ".#.....", "#######"),
    3: (".#####.", "......#", "......#", "..####.", "......#", "......#", ".#####."),
    4: ("#....#.", "#....#.", "#....#.", "#######", ".....#.", ".....#.", ".....#."),
    5: ("#######", "#......", "#......", "######.", "......#", "......#", "######."),
    6: (".#####.", "#......", "#......", "######.", "#.....#", "#.....#", ".#####."),
    7: ("#######", "......#", ".....#.", "....#..", "...#...", "..#....", "..#...."),
    8: (".#####.", "#.....#", "#.....#", ".#####.", "#.....#", "#.....#", ".#####."),
    9: (".#####.", "#.....#", "#.....#", ".######", "......#", "......#", ".#####."),
}


def _glyph_image(digit: int) -> np.ndarray:
    mask = np.array([[c == "#" for c in row] for row in _GLYPHS[digit]], dtype=np.float64)
    return np.kron(mask, np.ones((4, 4)))


def write_mnist_surrogate(
    dir_path,
    n_train_per_digit: int = 400,
    n_test_per_digit: int = 80,
    seed: int = 0,
) -> dict[str, str]:
    """Emit idx files of jittered glyph digits under the standard names.

    Each sample is its digit's 28x28 glyph with a random 2-pixel shift,
    per-sample intensity, and pixel noise, so classes are learnable but not
    trivially separable.
    """
    rng = make_rng(seed)
    paths = {}
    for prefix, n_per in (("train", n_train_per_digit), ("t10k", n_test_per_digit)):
        images = np.empty((10 * n_per, 28, 28), dtype=np.uint8)
        labels = np.empty(10 * n_per, dtype=np.uint8)
        i = 0
        for digit in range(10):
            base = _glyph_image(digit)
            for _ in range(n_per):
                img = base * rng.uniform(0.7, 1.0)
                img = np.roll(img, rng.integers(-2, 3), axis=0)
                img = np.roll(img, rng.integers(-2, 3), axis=1)
                img = img + rng.normal(0.0, 0.08, img.shape)
                images[i] = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
                labels[i] = digit
                i += 1
        perm = rng.permutation(len(images))
        images, labels = images[perm], labels[perm]
        img_path = os.path.join(dir_path, f"{prefix}-images-idx3-ubyte")
        lab_path = os.path.join(dir_path, f"{prefix}-labels-idx1-ubyte")
        write_idx_images(img_path, images)
        write_idx_labels(lab_path, labels)
        paths[f"{prefix}-images"] = img_path
        paths[f"{prefix}-labels"] = lab_path
    return paths
