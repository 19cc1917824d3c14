"""
Mix augmentation: the saliency-driven block mix M(a1, a2), random occlusion,
and the MixUp / CutMix / Cutout comparison strategies.

A block mix plan realizes

    M(a1, a2) = (1 - z) * P1^T a1 + z * P2^T a2

with a block-constant binary z and block permutations P1, P2. Because z is
binary and the transports are permutations, every mixed pixel is a copy of
one source pixel, so scribbles (including the UNLABELED sentinel) mix the
same way images do.

All strategies share one small interface (`mix_array`, `mix_tensor`,
`mix_labels`, `to_text`) so the training step and the global consistency
loss do not care which one produced the pair.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import UNLABELED, DenseMask, ScribbleLabel, SoftTarget
from .exceptions import DegenerateInputError, MixPlanError, ShapeError
from .losses import partial_ce
from .segmentor import SegmentorParams, forward
from .tensor_core import Function, RngStream, Tensor

logger = logging.getLogger(__name__)

Label = Union[ScribbleLabel, SoftTarget]

DEFAULT_BLOCK_SIZE = 8
DEFAULT_WINDOW_RADIUS = 1
DEFAULT_N_ITER = 4
DEFAULT_SIDE_FRAC = 0.15
EXHAUSTIVE_MAX_BLOCKS = 9


@dataclass
class SaliencyMap:
    """s(x): per-pixel l2 norm of the input gradient, shape (H, W)."""

    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def compute_saliency(params: SegmentorParams, x: Tensor, y: Label) -> SaliencyMap:
    """
    Input-gradient saliency of the partial cross-entropy on x's own scribbles.

    The parameters are used read-only: the forward pass runs on detached
    copies, so no parameter gradient is touched.
    """
    target = y.to_target()
    if target.labeled_count() == 0:
        raise DegenerateInputError('compute_saliency: label has no annotated pixels')
    tracked = Tensor(x.data, requires_grad=True)
    loss = partial_ce(forward(params.detached(), tracked), target)
    loss.backward()
    grad = tracked.grad.astype(np.float64)
    if not np.isfinite(grad).all():
        raise DegenerateInputError('compute_saliency: non-finite input gradient')
    return SaliencyMap(np.sqrt((grad * grad).sum(axis=0)))


# Block mix plans

def _grid_shape(shape: Tuple[int, int], block_size: int) -> Tuple[int, int]:
    h, w = shape
    if block_size < 1 or h % block_size:
        raise MixPlanError(f"block_size {block_size} does not divide H={h}")
    if w % block_size:
        raise MixPlanError(f"block_size {block_size} does not divide W={w}")
    return h // block_size, w // block_size


def block_sums(values: np.ndarray, block_size: int) -> np.ndarray:
    gh, gw = _grid_shape(values.shape, block_size)
    return values.reshape(gh, block_size, gw, block_size).sum(axis=(1, 3)).ravel().astype(np.float64)


def window_mask(grid: Tuple[int, int], window_radius: int) -> np.ndarray:
    """allowed[t, s]: block s may be transported to block t."""
    gh, gw = grid
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return (
        (np.abs(rows[:, None] - rows[None, :]) <= window_radius)
        & (np.abs(cols[:, None] - cols[None, :]) <= window_radius)
    )


@dataclass
class MixPlan:
    """
    z, P1 and P2 at block resolution.

    pi1[t] is the source block of a1 placed at target block t (likewise pi2);
    z[t] == 1 takes block t from the transported a2.
    """

    block_size: int
    grid: Tuple[int, int]
    z: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    objective: float = 0.0
    history: List[float] = field(default_factory=list)

    @classmethod
    def identity(cls, shape: Tuple[int, int], block_size: int, z: Optional[np.ndarray] = None) -> 'MixPlan':
        grid = _grid_shape(shape, block_size)
        n = grid[0] * grid[1]
        z = np.zeros(n, dtype=np.uint8) if z is None else np.asarray(z, dtype=np.uint8).ravel()
        return cls(block_size, grid, z, np.arange(n), np.arange(n))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid[0] * self.block_size, self.grid[1] * self.block_size

    @property
    def num_blocks(self) -> int:
        return self.grid[0] * self.grid[1]

    def pixel_sources(self):
        """Per-pixel (take_from_a2, rows1, cols1, rows2, cols2) index arrays."""
        gh, gw = self.grid
        bs = self.block_size
        h, w = self.shape
        yy, xx = np.mgrid[0:h, 0:w]
        target = (yy // bs) * gw + (xx // bs)
        within_y, within_x = yy % bs, xx % bs
        src1 = self.pi1[target]
        src2 = self.pi2[target]
        rows1 = (src1 // gw) * bs + within_y
        cols1 = (src1 % gw) * bs + within_x
        rows2 = (src2 // gw) * bs + within_y
        cols2 = (src2 % gw) * bs + within_x
        return self.z[target].astype(bool), rows1, cols1, rows2, cols2

    def mix_array(self, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
        _check_pair('apply_mix', a1.shape, a2.shape, self.shape)
        take2, r1, c1, r2, c2 = self.pixel_sources()
        return np.where(take2, a2[..., r2, c2], a1[..., r1, c1])

    def mix_tensor(self, t1: Tensor, t2: Tensor) -> Tensor:
        _check_pair('apply_mix', t1.shape, t2.shape, self.shape)
        return PlanMix.apply(t1, t2, plan=self)

    def mix_labels(self, y1: Label, y2: Label) -> Label:
        if isinstance(y1, ScribbleLabel) and isinstance(y2, ScribbleLabel):
            return ScribbleLabel(self.mix_array(y1.classes, y2.classes), y1.num_classes)
        t1, t2 = y1.to_target(), y2.to_target()
        return SoftTarget(self.mix_array(t1.weights, t2.weights), self.mix_array(t1.labeled, t2.labeled))

    def to_text(self) -> str:
        return plan_to_text(self)


class PlanMix(Function):
    """Differentiable block mix; transports are bijections, so backward is a scatter."""

    op_name = 'plan_mix'

    def forward(self, a1, a2, plan):
        self.sources = plan.pixel_sources()
        take2, r1, c1, r2, c2 = self.sources
        return np.where(take2, a2[..., r2, c2], a1[..., r1, c1])

    def backward(self, grad):
        take2, r1, c1, r2, c2 = self.sources
        d1 = np.zeros_like(grad)
        d2 = np.zeros_like(grad)
        d1[..., r1, c1] = np.where(take2, 0, grad)
        d2[..., r2, c2] = np.where(take2, grad, 0)
        return d1, d2


def _check_pair(op, shape1, shape2, expected_hw):
    if tuple(shape1) != tuple(shape2):
        raise ShapeError(op, 'shape', tuple(shape1), tuple(shape2))
    if tuple(shape1[-2:]) != tuple(expected_hw):
        raise ShapeError(op, 'H,W', tuple(expected_hw), tuple(shape1[-2:]))


def plan_objective(plan: MixPlan, s1: SaliencyMap, s2: SaliencyMap) -> float:
    """Sum over blocks of (1 - z) * transported s1 + z * transported s2."""
    sal1 = block_sums(s1.values, plan.block_size)
    sal2 = block_sums(s2.values, plan.block_size)
    z = plan.z.astype(np.float64)
    return float(((1 - z) * sal1[plan.pi1] + z * sal2[plan.pi2]).sum())


def _best_z(moved1: np.ndarray, moved2: np.ndarray) -> np.ndarray:
    # ties stay with source 1
    return (moved2 > moved1).astype(np.uint8)


def _best_transport(sal: np.ndarray, weight: np.ndarray, allowed: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Maximum-weight windowed block assignment; keeps `current` unless strictly better."""
    forbidden = -1e6 * (np.abs(sal).sum() + 1.0)
    gain = np.where(allowed, weight[:, None] * sal[None, :], forbidden)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    candidate = np.empty_like(current)
    candidate[rows] = cols
    best = gain[np.arange(len(current)), candidate].sum()
    now = gain[np.arange(len(current)), current].sum()
    if best > now + 1e-12 * max(1.0, abs(now)):
        return candidate
    return current


def _pair_leftovers(sal: np.ndarray, idle: np.ndarray, current: np.ndarray, partner: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """
    Rearrange the blocks parked on rows that do not take from this source:
    the largest leftover goes next to the weakest block of the other source,
    so the next z update sees the most promising swaps. The objective is
    unchanged; `partner` holds the other source's transported block sums.
    """
    rows = np.flatnonzero(idle)
    if len(rows) < 2:
        return current
    cols = current[rows]
    forbidden = -1e6 * (np.abs(sal).sum() * np.abs(partner).sum() + 1.0)
    gain = np.where(allowed[np.ix_(rows, cols)], -partner[rows][:, None] * sal[cols][None, :], forbidden)
    r, c = linear_sum_assignment(gain, maximize=True)
    best = gain[r, c].sum()
    now = np.trace(gain)
    if best > now + 1e-12 * max(1.0, abs(now)):
        candidate = current.copy()
        candidate[rows[r]] = cols[c]
        return candidate
    return current


def optimize_mix_plan(
    s1: SaliencyMap,
    s2: SaliencyMap,
    block_size: int = DEFAULT_BLOCK_SIZE,
    window_radius: int = DEFAULT_WINDOW_RADIUS,
    n_iter: int = DEFAULT_N_ITER,
) -> MixPlan:
    """
    Alternating maximization of the mixed saliency.

    Starts from identity transports, sets z block-wise to the dominant source,
    then repeats: solve both transports for the current z (Hungarian method on
    the windowed block graph), re-pair the blocks each source leaves unused,
    re-derive z. Each stage is an exact maximization of its own variables, so
    the objective never decreases. When the window admits every permutation
    the first round already reaches the global optimum.
    """
    if s1.shape != s2.shape:
        raise ShapeError('optimize_mix_plan', 'H,W', s1.shape, s2.shape)
    if n_iter < 1:
        raise MixPlanError(f"n_iter must be >= 1, got {n_iter}")
    if window_radius < 0:
        raise MixPlanError(f"window_radius must be >= 0, got {window_radius}")

    plan = MixPlan.identity(s1.shape, block_size)
    sal1 = block_sums(s1.values, block_size)
    sal2 = block_sums(s2.values, block_size)
    allowed = window_mask(plan.grid, window_radius)

    def objective():
        z = plan.z.astype(np.float64)
        return float(((1 - z) * sal1[plan.pi1] + z * sal2[plan.pi2]).sum())

    plan.z = _best_z(sal1[plan.pi1], sal2[plan.pi2])
    plan.history.append(objective())
    for _ in range(n_iter):
        z = plan.z.astype(np.float64)
        plan.pi1 = _best_transport(sal1, 1 - z, allowed, plan.pi1)
        plan.pi2 = _best_transport(sal2, z, allowed, plan.pi2)
        plan.pi1 = _pair_leftovers(sal1, plan.z == 1, plan.pi1, sal2[plan.pi2], allowed)
        plan.pi2 = _pair_leftovers(sal2, plan.z == 0, plan.pi2, sal1[plan.pi1], allowed)
        plan.z = _best_z(sal1[plan.pi1], sal2[plan.pi2])
        plan.history.append(objective())
    plan.objective = plan.history[-1]
    logger.debug(f"mix plan objective history {plan.history}")
    return plan


def windowed_permutations(grid: Tuple[int, int], window_radius: int) -> np.ndarray:
    allowed = window_mask(grid, window_radius)
    n = grid[0] * grid[1]
    perms = [
        p for p in itertools.permutations(range(n))
        if all(allowed[t, p[t]] for t in range(n))
    ]
    return np.array(perms, dtype=np.int64)


def exhaustive_mix_plan(
    s1: SaliencyMap,
    s2: SaliencyMap,
    block_size: int = DEFAULT_BLOCK_SIZE,
    window_radius: int = DEFAULT_WINDOW_RADIUS,
) -> MixPlan:
    """
    Global optimum by enumeration of every binary z and windowed permutation.

    For a fixed z the two transports are independent, so each is maximized
    over the permutation list separately. The first optimum in enumeration
    order (z lexicographic, identity permutation first) is returned.
    """
    if s1.shape != s2.shape:
        raise ShapeError('exhaustive_mix_plan', 'H,W', s1.shape, s2.shape)
    plan = MixPlan.identity(s1.shape, block_size)
    n = plan.num_blocks
    if n > EXHAUSTIVE_MAX_BLOCKS:
        raise MixPlanError(f"exhaustive search limited to {EXHAUSTIVE_MAX_BLOCKS} blocks, got {n}")

    sal1 = block_sums(s1.values, block_size)
    sal2 = block_sums(s2.values, block_size)
    perms = windowed_permutations(plan.grid, window_radius)
    moved1 = sal1[perms]
    moved2 = sal2[perms]

    best = -math.inf
    for bits in itertools.product((0, 1), repeat=n):
        z = np.array(bits, dtype=np.float64)
        gains1 = moved1 @ (1 - z)
        gains2 = moved2 @ z
        i1 = int(np.argmax(gains1))
        i2 = int(np.argmax(gains2))
        total = gains1[i1] + gains2[i2]
        if total > best:
            best = total
            plan.z = np.array(bits, dtype=np.uint8)
            plan.pi1 = perms[i1].copy()
            plan.pi2 = perms[i2].copy()
    plan.objective = float(best)
    plan.history = [plan.objective]
    return plan


def apply_mix(plan, a1, a2):
    """M(a1, a2) for arrays, tensors (differentiable when tracked) or labels."""
    if type(a1) is not type(a2):
        raise ShapeError('apply_mix', 'kind', type(a1).__name__, type(a2).__name__)
    if isinstance(a1, Tensor):
        if a1.requires_grad or a2.requires_grad:
            return plan.mix_tensor(a1, a2)
        return Tensor(plan.mix_array(a1.data, a2.data))
    if isinstance(a1, (ScribbleLabel, SoftTarget)):
        return plan.mix_labels(a1, a2)
    if isinstance(a1, DenseMask):
        return DenseMask(plan.mix_array(a1.classes, a2.classes), a1.num_classes)
    return plan.mix_array(np.asarray(a1), np.asarray(a2))


def plan_to_text(plan: MixPlan) -> str:
    gh, gw = plan.grid
    lines = [
        '# block mix plan',
        f"block_size {plan.block_size}",
        f"grid {gh} {gw}",
        'z',
    ]
    z = plan.z.reshape(gh, gw)
    lines.extend(' '.join(str(int(v)) for v in row) for row in z)
    lines.append('pi1 ' + ' '.join(str(int(v)) for v in plan.pi1))
    lines.append('pi2 ' + ' '.join(str(int(v)) for v in plan.pi2))
    lines.append(f"objective {plan.objective!r}")
    return '\n'.join(lines) + '\n'


def plan_from_text(text: str) -> MixPlan:
    lines = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith('#')]
    try:
        block_size = int(lines[0].split()[1])
        gh, gw = (int(v) for v in lines[1].split()[1:3])
        if lines[2] != 'z':
            raise ValueError('missing z section')
        z = np.array([[int(v) for v in lines[3 + r].split()] for r in range(gh)], dtype=np.uint8)
        rest = lines[3 + gh:]
        pi1 = np.array([int(v) for v in rest[0].split()[1:]], dtype=np.int64)
        pi2 = np.array([int(v) for v in rest[1].split()[1:]], dtype=np.int64)
        objective = float(rest[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise MixPlanError(f"malformed mix plan text: {exc}") from exc
    n = gh * gw
    if z.shape != (gh, gw) or sorted(pi1) != list(range(n)) or sorted(pi2) != list(range(n)):
        raise MixPlanError('mix plan text does not describe block permutations on its grid')
    return MixPlan(block_size, (gh, gw), z.ravel(), pi1, pi2, objective, [objective])


# Random occlusion

@dataclass
class OcclusionMask:
    """Binary raster of a rotated rectangle (1 = occluded) plus its parameters."""

    raster: np.ndarray
    center: Tuple[float, float] = (0.0, 0.0)
    width: float = 0.0
    height: float = 0.0
    angle: float = 0.0

    @classmethod
    def empty(cls, h: int, w: int) -> 'OcclusionMask':
        return cls(np.zeros((h, w), dtype=np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.raster.shape

    @property
    def area(self) -> int:
        return int(self.raster.sum())

    @property
    def keep(self) -> np.ndarray:
        """1 - 1_O as floats."""
        return 1.0 - self.raster.astype(np.float64)


def rasterize_rectangle(h: int, w: int, center, width: float, height: float, angle: float) -> np.ndarray:
    """
    Pixel-centre inclusion test in the rectangle's own frame.

    Intervals are half-open, so an axis-aligned square of side n centred on a
    grid point covers exactly n x n pixels.
    """
    raster = np.zeros((h, w), dtype=np.uint8)
    if width <= 0 or height <= 0:
        return raster
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy = yy - center[0]
    dx = xx - center[1]
    cos, sin = math.cos(angle), math.sin(angle)
    u = dx * cos + dy * sin
    v = -dx * sin + dy * cos
    inside = (u >= -width / 2) & (u < width / 2) & (v >= -height / 2) & (v < height / 2)
    raster[inside] = 1
    return raster


def sample_occlusion(rng: RngStream, h: int, w: int, side_frac: float = DEFAULT_SIDE_FRAC) -> OcclusionMask:
    """Square of side round(side_frac * min(H, W)), uniform centre, rotation in [0, pi)."""
    if not 0 < side_frac < 1:
        raise ShapeError('sample_occlusion', 'side_frac', '(0, 1)', side_frac)
    side = float(math.floor(side_frac * min(h, w) + 0.5))
    center = (float(rng.uniform(0, h)), float(rng.uniform(0, w)))
    angle = float(rng.uniform(0, math.pi))
    raster = rasterize_rectangle(h, w, center, side, side, angle)
    return OcclusionMask(raster, center, side, side, angle)


def apply_occlusion(mask: OcclusionMask, x: Tensor, y: Label, label_mode: str = 'background'):
    """
    x_o = (1 - 1_O) * x; occluded label pixels become background (class 0).

    With label_mode='zero' the occluded pixels stay annotated with an all-zero
    target: they add nothing to a summed cross-entropy but still count towards
    the annotated pixels a mean divides by. The result is then a SoftTarget.
    """
    if label_mode not in ('background', 'zero'):
        raise ShapeError('apply_occlusion', 'label_mode', 'background|zero', label_mode)
    if tuple(x.shape[-2:]) != mask.shape:
        raise ShapeError('apply_occlusion', 'H,W', mask.shape, tuple(x.shape[-2:]))
    if y.shape != mask.shape:
        raise ShapeError('apply_occlusion', 'label H,W', mask.shape, y.shape)

    occluded = mask.raster.astype(bool)
    image = np.where(occluded, 0, x.data).astype(x.data.dtype)
    if isinstance(y, ScribbleLabel) and label_mode == 'background':
        classes = y.classes.copy()
        classes[occluded] = 0
        return Tensor(image), ScribbleLabel(classes, y.num_classes)

    target = y.to_target()
    weights = target.weights.copy()
    labeled = target.labeled.copy()
    weights[:, occluded] = 0.0
    labeled[occluded] = True
    if label_mode == 'background':
        weights[0, occluded] = 1.0
    return Tensor(image), SoftTarget(weights, labeled)


# Comparison strategies

def _box_raster(shape, box) -> np.ndarray:
    y0, y1, x0, x1 = box
    raster = np.zeros(shape, dtype=bool)
    raster[y0:y1, x0:x1] = True
    return raster


@dataclass
class LinearMix:
    """MixUp: lam * a1 + (1 - lam) * a2."""

    lam: float
    shape: Tuple[int, int]

    def mix_array(self, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
        _check_pair('mixup_linear', a1.shape, a2.shape, self.shape)
        return (self.lam * a1 + (1 - self.lam) * a2).astype(a1.dtype)

    def mix_tensor(self, t1: Tensor, t2: Tensor) -> Tensor:
        _check_pair('mixup_linear', t1.shape, t2.shape, self.shape)
        return t1.scale(self.lam) + t2.scale(1 - self.lam)

    def mix_labels(self, y1: Label, y2: Label) -> SoftTarget:
        """
        A pixel is annotated if either source annotates it; its target is the
        lam-weighted sum of the available one-hots, so its total weight is the
        available mixing mass.
        """
        t1, t2 = y1.to_target(), y2.to_target()
        w1 = self.lam * t1.labeled
        w2 = (1 - self.lam) * t2.labeled
        weights = w1[None] * t1.weights + w2[None] * t2.weights
        return SoftTarget(weights, (w1 + w2) > 0)

    def to_text(self) -> str:
        return f"# mixup\nlambda {self.lam!r}\n"


@dataclass
class BoxMix:
    """CutMix: the box (y0, y1, x0, x1) comes from a2, the rest from a1."""

    box: Tuple[int, int, int, int]
    shape: Tuple[int, int]

    @property
    def raster(self) -> np.ndarray:
        return _box_raster(self.shape, self.box)

    def mix_array(self, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
        _check_pair('cutmix', a1.shape, a2.shape, self.shape)
        return np.where(self.raster, a2, a1)

    def mix_tensor(self, t1: Tensor, t2: Tensor) -> Tensor:
        _check_pair('cutmix', t1.shape, t2.shape, self.shape)
        inside = np.broadcast_to(self.raster, t1.shape).astype(np.float64)
        return t1.mask(1 - inside) + t2.mask(inside)

    def mix_labels(self, y1: Label, y2: Label) -> Label:
        if isinstance(y1, ScribbleLabel) and isinstance(y2, ScribbleLabel):
            return ScribbleLabel(self.mix_array(y1.classes, y2.classes), y1.num_classes)
        t1, t2 = y1.to_target(), y2.to_target()
        return SoftTarget(np.where(self.raster, t2.weights, t1.weights), self.mix_array(t1.labeled, t2.labeled))

    def to_text(self) -> str:
        return '# cutmix\nbox {} {} {} {}\n'.format(*self.box)


@dataclass
class CutoutMix:
    """Cutout: the box of a1 is dropped (zero image, no supervision); a2 is unused."""

    box: Tuple[int, int, int, int]
    shape: Tuple[int, int]

    @property
    def raster(self) -> np.ndarray:
        return _box_raster(self.shape, self.box)

    def mix_array(self, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
        _check_pair('cutout', a1.shape, a2.shape, self.shape)
        return np.where(self.raster, np.zeros_like(a1), a1)

    def mix_tensor(self, t1: Tensor, t2: Tensor) -> Tensor:
        _check_pair('cutout', t1.shape, t2.shape, self.shape)
        inside = np.broadcast_to(self.raster, t1.shape).astype(np.float64)
        return t1.mask(1 - inside)

    def mix_labels(self, y1: Label, y2: Label) -> Label:
        if isinstance(y1, ScribbleLabel):
            classes = y1.classes.copy()
            classes[self.raster] = UNLABELED
            return ScribbleLabel(classes, y1.num_classes)
        t1 = y1.to_target()
        weights = t1.weights.copy()
        weights[:, self.raster] = 0.0
        return SoftTarget(weights, t1.labeled & ~self.raster)

    def to_text(self) -> str:
        return '# cutout\nbox {} {} {} {}\n'.format(*self.box)


@dataclass
class MixResult:
    image: Tensor
    label: Label
    mixer: object
    lam: Optional[float] = None


def mixup_linear(rng: RngStream, x1: Tensor, y1: Label, x2: Tensor, y2: Label,
                 alpha: float = 1.0, lam: Optional[float] = None) -> MixResult:
    """lam ~ Beta(alpha, alpha) unless given."""
    if alpha <= 0:
        raise ShapeError('mixup_linear', 'alpha', '> 0', alpha)
    if lam is None:
        lam = rng.beta(alpha, alpha)
    mixer = LinearMix(float(lam), tuple(x1.shape[-2:]))
    image = Tensor(mixer.mix_array(x1.data, x2.data))
    return MixResult(image, mixer.mix_labels(y1, y2), mixer, mixer.lam)


def sample_box(rng: RngStream, h: int, w: int, low: float = 0.1, high: float = 0.5) -> Tuple[int, int, int, int]:
    """Axis-aligned box, fully inside the image, area fraction ~ U(low, high)."""
    fraction = rng.uniform(low, high)
    bh = min(h, int(math.floor(h * math.sqrt(fraction) + 0.5)))
    bw = min(w, int(math.floor(w * math.sqrt(fraction) + 0.5)))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, y0 + bh, x0, x0 + bw


def cutmix(rng: RngStream, x1: Tensor, y1: Label, x2: Tensor, y2: Label,
           box: Optional[Tuple[int, int, int, int]] = None) -> MixResult:
    shape = tuple(x1.shape[-2:])
    if box is None:
        box = sample_box(rng, *shape)
    mixer = BoxMix(tuple(int(v) for v in box), shape)
    image = Tensor(mixer.mix_array(x1.data, x2.data))
    return MixResult(image, mixer.mix_labels(y1, y2), mixer)


def cutout(rng: RngStream, x1: Tensor, y1: Label, side_frac: float = 0.25,
           box: Optional[Tuple[int, int, int, int]] = None) -> MixResult:
    """Square of side round(side_frac * min(H, W)) centred uniformly, clipped at borders."""
    h, w = x1.shape[-2:]
    if box is None:
        side = int(math.floor(side_frac * min(h, w) + 0.5))
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        box = (max(0, cy - side // 2), min(h, cy - side // 2 + side),
               max(0, cx - side // 2), min(w, cx - side // 2 + side))
    mixer = CutoutMix(tuple(int(v) for v in box), (h, w))
    image = Tensor(mixer.mix_array(x1.data, x1.data))
    return MixResult(image, mixer.mix_labels(y1, y1), mixer)


def puzzle_mix(params: SegmentorParams, x1: Tensor, y1: Label, x2: Tensor, y2: Label,
               block_size: int = DEFAULT_BLOCK_SIZE, window_radius: int = DEFAULT_WINDOW_RADIUS,
               n_iter: int = DEFAULT_N_ITER, saliency: Optional[Sequence[SaliencyMap]] = None) -> MixResult:
    """Saliency-maximizing block mix of (x1, y1) with (x2, y2)."""
    if saliency is None:
        saliency = (compute_saliency(params, x1, y1), compute_saliency(params, x2, y2))
    plan = optimize_mix_plan(saliency[0], saliency[1], block_size, window_radius, n_iter)
    image = Tensor(plan.mix_array(x1.data, x2.data))
    return MixResult(image, plan.mix_labels(y1, y2), plan)
