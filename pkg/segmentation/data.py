"""
Synthetic cardiac-rings dataset: geometry, scribble synthesis, intensity
normalization and the NST tensor file format.

NST layout (little-endian throughout):

    4 bytes   magic "NST1"
    1 byte    dtype, 0 = f32, 1 = u8
    1 byte    ndim
    ndim x u32 extents
    payload   row-major values
"""

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import DatasetError, DegenerateInputError, NSTFormatError, ShapeError
from .tensor_core import RngStream, Tensor

logger = logging.getLogger(__name__)

UNLABELED = 255
NUM_CLASSES = 4
CLASS_NAMES = ('background', 'RV', 'MYO', 'LV')
DEFAULT_COVERAGE = (0.034, 0.277, 0.313, 0.241)
SPLITS = ('train', 'val', 'test')
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MANIFEST_NAME = 'manifest.tsv'
MANIFEST_HEADER = ('id', 'split', 'image', 'scribble', 'mask')

NST_MAGIC = b'NST1'
NST_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('u1')}
NST_MAX_NDIM = 8
NST_MAX_ELEMENTS = 2 ** 31 - 1

# 4-connectivity
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class DenseMask:
    """Gold-standard per-pixel classes, every value < K."""

    classes: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ShapeError('DenseMask', 'ndim', 2, self.classes.ndim)
        if self.classes.size and int(self.classes.max()) >= self.num_classes:
            raise DatasetError(f"mask value {int(self.classes.max())} outside 0..{self.num_classes - 1}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    def one_hot(self) -> np.ndarray:
        return (np.arange(self.num_classes)[:, None, None] == self.classes[None]).astype(np.float64)

    def as_scribble(self) -> 'ScribbleLabel':
        """Every pixel labeled; used for fully supervised training."""
        return ScribbleLabel(self.classes.copy(), self.num_classes)


@dataclass
class SoftTarget:
    """Per-pixel class weights with an explicit mask of annotated pixels."""

    weights: np.ndarray
    labeled: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if self.weights.shape[1:] != self.labeled.shape:
            raise ShapeError('SoftTarget', 'H,W', self.labeled.shape, self.weights.shape[1:])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labeled.shape

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def labeled_count(self) -> int:
        return int(self.labeled.sum())

    def to_target(self) -> 'SoftTarget':
        return self


@dataclass
class ScribbleLabel:
    """
    Per-pixel classes with UNLABELED (255) for pixels without annotation.

    `coverage_warnings` lists the classes whose scribble could not reach its
    coverage target during synthesis.
    """

    classes: np.ndarray
    num_classes: int = NUM_CLASSES
    coverage_warnings: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ShapeError('ScribbleLabel', 'ndim', 2, self.classes.ndim)
        labeled = self.classes[self.classes != UNLABELED]
        if labeled.size and int(labeled.max()) >= self.num_classes:
            raise DatasetError(f"scribble value {int(labeled.max())} outside 0..{self.num_classes - 1}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    @property
    def labeled(self) -> np.ndarray:
        return self.classes != UNLABELED

    def labeled_count(self) -> int:
        return int(self.labeled.sum())

    def one_hot(self) -> np.ndarray:
        """(K, H, W) one-hot, all zeros on unlabeled pixels."""
        return (np.arange(self.num_classes)[:, None, None] == self.classes[None]).astype(np.float64)

    def to_target(self) -> SoftTarget:
        return SoftTarget(self.one_hot(), self.labeled)

    def coverage(self, mask: DenseMask) -> np.ndarray:
        """Fraction of each class region in `mask` that carries a scribble."""
        if mask.shape != self.shape:
            raise ShapeError('coverage', 'H,W', mask.shape, self.shape)
        fractions = np.zeros(self.num_classes)
        for k in range(self.num_classes):
            region = mask.classes == k
            if region.any():
                fractions[k] = (self.classes[region] == k).sum() / region.sum()
        return fractions


@dataclass
class Sample:
    id: str
    image: Tensor
    scribble: ScribbleLabel
    mask: Optional[DenseMask]
    split: str


@dataclass
class ManifestEntry:
    id: str
    split: str
    image: str
    scribble: str
    mask: str


# NST encoding

def encode_nst(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = 1
    elif array.dtype.kind == 'f':
        code = 0
    else:
        raise NSTFormatError('<memory>', f"unsupported dtype {array.dtype}")
    if array.ndim > NST_MAX_NDIM or any(extent > 0xFFFFFFFF for extent in array.shape):
        raise NSTFormatError('<memory>', 'dim overflow')
    header = NST_MAGIC + struct.pack('<BB', code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=NST_DTYPES[code]).tobytes()
    return header + payload


def decode_nst(buffer: bytes, offset: int = 0, source='<memory>') -> Tuple[np.ndarray, int]:
    """Decode one NST record starting at `offset`; returns (array, next offset)."""
    view = memoryview(buffer)
    if len(view) - offset < 6:
        raise NSTFormatError(source, 'truncated payload')
    if bytes(view[offset:offset + 4]) != NST_MAGIC:
        raise NSTFormatError(source, 'bad magic')
    code, ndim = struct.unpack_from('<BB', view, offset + 4)
    if code not in NST_DTYPES:
        raise NSTFormatError(source, f"unknown dtype {code}")
    if ndim > NST_MAX_NDIM:
        raise NSTFormatError(source, 'dim overflow')
    cursor = offset + 6
    if len(view) - cursor < 4 * ndim:
        raise NSTFormatError(source, 'truncated payload')
    shape = struct.unpack_from(f"<{ndim}I", view, cursor)
    cursor += 4 * ndim
    count = math.prod(shape)
    if count > NST_MAX_ELEMENTS:
        raise NSTFormatError(source, 'dim overflow')
    dtype = NST_DTYPES[code]
    nbytes = count * dtype.itemsize
    if len(view) - cursor < nbytes:
        raise NSTFormatError(source, 'truncated payload')
    array = np.frombuffer(view[cursor:cursor + nbytes], dtype=dtype).reshape(shape).copy()
    return array, cursor + nbytes


def write_nst(path, value: Union[Tensor, ScribbleLabel, DenseMask, np.ndarray]) -> Path:
    if isinstance(value, Tensor):
        array = value.data.astype('<f4')
    elif isinstance(value, (ScribbleLabel, DenseMask)):
        array = value.classes
    else:
        array = np.asarray(value)
    path = Path(path)
    try:
        path.write_bytes(encode_nst(array))
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return path


def read_nst(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    array, end = decode_nst(raw, 0, source=path)
    if end != len(raw):
        raise NSTFormatError(path, f"{len(raw) - end} trailing bytes")
    return array


# Generation

def _largest_component(region: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(region, structure=CROSS)
    if count <= 1:
        return region.copy()
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def gen_rings_sample(rng: RngStream, size: int, num_classes: int = NUM_CLASSES) -> Tuple[Tensor, DenseMask]:
    """
    One synthetic short-axis slice: background, RV crescent, MYO annulus, LV disk.

    Returns the raw (un-normalized) image of shape (1, size, size) and its mask.
    """
    if num_classes != NUM_CLASSES:
        raise ShapeError('gen_rings_sample', 'K', NUM_CLASSES, num_classes)
    if size < 32 or size % 4:
        raise ShapeError('gen_rings_sample', 'size', '>= 32 and divisible by 4', size)

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    r_lv = rng.uniform(0.09, 0.12) * size
    r_myo = r_lv + rng.uniform(0.07, 0.09) * size
    theta = np.pi + rng.uniform(-0.5, 0.5)
    offset = rng.uniform(0.75, 0.9) * r_myo
    r_rv = rng.uniform(0.85, 1.0) * r_myo
    rv_cy = cy + offset * np.sin(theta)
    rv_cx = cx + offset * np.cos(theta)

    dist = np.hypot(yy - cy, xx - cx)
    dist_rv = np.hypot(yy - rv_cy, xx - rv_cx)
    classes = np.zeros((size, size), dtype=np.uint8)
    classes[dist_rv <= r_rv] = 1
    classes[dist <= r_myo] = 2
    classes[dist <= r_lv] = 3
    for k in (1, 2, 3):
        region = classes == k
        classes[region & ~_largest_component(region)] = 0

    means = np.array([
        rng.uniform(0.15, 0.25),
        rng.uniform(0.70, 0.80),
        rng.uniform(0.40, 0.50),
        rng.uniform(0.90, 1.00),
    ])
    image = ndimage.gaussian_filter(means[classes], sigma=0.6)
    bias = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 4, mode='wrap')
    bias = 0.15 * bias / max(np.abs(bias).max(), 1e-12)
    image = image * (1.0 + bias) + rng.normal(0.0, 0.1, size=(size, size))

    return Tensor(image[None]), DenseMask(classes, num_classes)


_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _random_walk(allowed: np.ndarray, target: int, rng: RngStream) -> Tuple[np.ndarray, bool]:
    """
    Grow a connected curvilinear path inside `allowed` until it covers `target`
    pixels. Unvisited neighbours are preferred, and the walk keeps its heading
    with probability 0.7. Returns (path, reached).
    """
    h, w = allowed.shape
    visited = np.zeros_like(allowed, dtype=bool)
    coords = np.argwhere(allowed)
    y, x = coords[int(rng.integers(len(coords)))]
    visited[y, x] = True
    count = 1
    heading = int(rng.integers(4))
    max_steps = 200 * target + 1000
    steps = 0
    while count < target and steps < max_steps:
        steps += 1
        options = []
        fresh = []
        for d, (dy, dx) in enumerate(_STEPS):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and allowed[ny, nx]:
                options.append(d)
                if not visited[ny, nx]:
                    fresh.append(d)
        pool = fresh or options
        if not pool:
            break
        if heading in pool and rng.random() < 0.7:
            d = heading
        else:
            d = pool[int(rng.integers(len(pool)))]
        y, x = y + _STEPS[d][0], x + _STEPS[d][1]
        if not visited[y, x]:
            visited[y, x] = True
            count += 1
        heading = d
    return visited, count >= target


def gen_scribble(
    mask: DenseMask,
    rng: RngStream,
    coverage_targets: Sequence[float] = DEFAULT_COVERAGE,
) -> ScribbleLabel:
    """
    One random-walk scribble per class, kept one pixel away from the class
    boundary, sized to the requested fraction of the class region.
    """
    if len(coverage_targets) != mask.num_classes:
        raise ShapeError('gen_scribble', 'coverage targets', mask.num_classes, len(coverage_targets))

    classes = np.full(mask.shape, UNLABELED, dtype=np.uint8)
    shrunk = set()
    for k, fraction in enumerate(coverage_targets):
        region = mask.classes == k
        if not region.any():
            raise DatasetError(f"class {k} absent from mask")
        eroded = ndimage.binary_erosion(region, structure=CROSS, border_value=0)
        if not eroded.any():
            shrunk.add(k)
            logger.warning(f"class {k}: eroded region is empty, no scribble drawn")
            continue
        allowed = _largest_component(eroded)
        wanted = max(1, int(math.floor(fraction * region.sum() + 0.5)))
        target = min(wanted, int(allowed.sum()))
        path, reached = _random_walk(allowed, target, rng.derive('class', k))
        if target < wanted or not reached:
            shrunk.add(k)
            logger.warning(
                f"class {k}: coverage target {fraction:.3f} shrunk to "
                f"{path.sum() / region.sum():.3f}"
            )
        classes[path] = k
    return ScribbleLabel(classes, mask.num_classes, frozenset(shrunk))


def normalize_image(raw: Tensor) -> Tensor:
    """Zero mean, unit variance over all pixels."""
    values = raw.data.astype(np.float64)
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise DegenerateInputError('normalize_image: image has zero variance')
    return Tensor((values - mean) / std)


def split_counts(n: int) -> Tuple[int, int, int]:
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n + 0.5))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n + 0.5))
    return n_train, n_val, n - n_train - n_val


def build_dataset(
    out_dir,
    n: int,
    size: int = 64,
    seed: int = 0,
    coverage_targets: Sequence[float] = DEFAULT_COVERAGE,
) -> List[ManifestEntry]:
    """Generate n samples, write NST files and manifest.tsv; split 70/15/15."""
    if n < 10:
        raise DatasetError(f"need at least 10 samples, got {n}")
    out_dir = Path(out_dir)
    try:
        for sub in ('images', 'scribbles', 'masks'):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    root = RngStream(seed)
    n_train, n_val, _ = split_counts(n)
    order = root.derive('split').permutation(n)
    split_of = {}
    for rank, index in enumerate(order):
        split_of[int(index)] = 'train' if rank < n_train else ('val' if rank < n_train + n_val else 'test')

    entries = []
    shrunk_total = 0
    for i in range(n):
        sample_id = f"ring{i:04d}"
        raw, mask = gen_rings_sample(root.derive('sample', sample_id), size)
        scribble = gen_scribble(mask, root.derive('scribble', sample_id), coverage_targets)
        shrunk_total += len(scribble.coverage_warnings)
        entry = ManifestEntry(
            id=sample_id,
            split=split_of[i],
            image=f"images/{sample_id}.nst",
            scribble=f"scribbles/{sample_id}.nst",
            mask=f"masks/{sample_id}.nst",
        )
        write_nst(out_dir / entry.image, normalize_image(raw))
        write_nst(out_dir / entry.scribble, scribble)
        write_nst(out_dir / entry.mask, mask)
        entries.append(entry)

    write_manifest(out_dir, entries)
    if shrunk_total:
        logger.warning(f"{shrunk_total} scribble(s) fell short of their coverage target")
    logger.info(f"Wrote {n} samples ({n_train}/{n_val}/{n - n_train - n_val}) to {out_dir}")
    return entries


def write_manifest(out_dir, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    try:
        with path.open('w', encoding='utf-8', newline='') as fh:
            writer = csv.writer(fh, delimiter='\t', lineterminator='\n')
            writer.writerow(MANIFEST_HEADER)
            for e in entries:
                writer.writerow((e.id, e.split, e.image, e.scribble, e.mask))
    except OSError as exc:
        raise DatasetError(f"cannot write manifest {path}: {exc}") from exc
    return path


def read_manifest(data_dir) -> List[ManifestEntry]:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        with path.open(encoding='utf-8', newline='') as fh:
            rows = list(csv.reader(fh, delimiter='\t'))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise DatasetError(f"{path}: unexpected header {rows[0] if rows else None}")
    entries = []
    for row in rows[1:]:
        if len(row) != len(MANIFEST_HEADER):
            raise DatasetError(f"{path}: malformed row {row}")
        entries.append(ManifestEntry(*row))
    return entries


def load_sample(data_dir, entry: ManifestEntry, num_classes: int = NUM_CLASSES, require_mask: bool = False) -> Sample:
    data_dir = Path(data_dir)
    image = read_nst(data_dir / entry.image).astype(np.float32)
    scribble = ScribbleLabel(read_nst(data_dir / entry.scribble), num_classes)
    mask_path = data_dir / entry.mask
    if mask_path.exists():
        mask = DenseMask(read_nst(mask_path), num_classes)
    elif require_mask:
        raise DatasetError(f"missing mask for {entry.id}: {mask_path}")
    else:
        mask = None
    if image.ndim == 2:
        image = image[None]
    if image.shape[1:] != scribble.shape:
        raise ShapeError('load_sample', 'H,W', image.shape[1:], scribble.shape)
    return Sample(entry.id, Tensor(image), scribble, mask, entry.split)


def load_split(data_dir, split: str, num_classes: int = NUM_CLASSES, require_mask: bool = False) -> List[Sample]:
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    samples = [
        load_sample(data_dir, e, num_classes, require_mask)
        for e in read_manifest(data_dir)
        if e.split == split
    ]
    if not samples:
        raise DatasetError(f"split {split!r} in {data_dir} is empty")
    return samples
