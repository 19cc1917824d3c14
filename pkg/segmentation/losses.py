"""
Loss terms: scribble partial cross-entropy, the unmixed and mixed supervision
terms, negative cosine similarity, global and local consistency, and the
Dice metric used for evaluation.
"""

import functools
import logging
import operator
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .data import CROSS, DenseMask, ScribbleLabel, SoftTarget
from .exceptions import ConfigError, DegenerateInputError, ShapeError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

CE_EPS = 1e-12
NORM_EPS = 1e-12


def _probs(pred) -> Tensor:
    """Accept a Prediction or a bare (K, H, W) probability tensor."""
    return getattr(pred, 'probs', pred)


def _tensor_sum(terms: Sequence[Tensor]) -> Tensor:
    return functools.reduce(operator.add, terms)


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.05
    lambda4: float = 1.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value >= 0:
                raise ConfigError({name: [f"must be >= 0, got {value}."]})

    def as_dict(self) -> Dict[str, float]:
        return {
            'lambda1': self.lambda1,
            'lambda2': self.lambda2,
            'lambda3': self.lambda3,
            'lambda4': self.lambda4,
        }

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.lambda1, self.lambda2, self.lambda3, self.lambda4


@dataclass
class LossBreakdown:
    """
    Scalar values of every term and their weighted total.

    `objective` is the differentiable total; terms whose weight is zero are
    reported here but left out of it.
    """

    unmix: float = 0.0
    mix: float = 0.0
    con_g: float = 0.0
    con_l: float = 0.0
    total: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)

    FIELDS = ('unmix', 'mix', 'con_g', 'con_l', 'total')

    def recompose(self, weights: LossWeights) -> float:
        w1, w2, w3, w4 = weights.as_tuple()
        return w1 * self.unmix + w2 * self.mix + w3 * self.con_g + w4 * self.con_l

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.FIELDS)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values()).all())


def partial_ce(pred, target: Union[ScribbleLabel, SoftTarget], reduction: str = 'sum', eps: float = CE_EPS) -> Tensor:
    """
    -sum over annotated pixels i of sum_k y[i, k] * log(p[i, k] + eps).

    reduction='mean' divides by the annotated pixel count; no annotation gives 0 either way.
    """
    probs = _probs(pred)
    target = target.to_target()
    if probs.data.ndim != 3:
        raise ShapeError('partial_ce', 'ndim', 3, probs.data.ndim)
    if probs.shape[0] != target.num_classes:
        raise ShapeError('partial_ce', 'K', target.num_classes, probs.shape[0])
    if probs.shape[1:] != target.shape:
        raise ShapeError('partial_ce', 'H,W', target.shape, probs.shape[1:])
    if reduction not in ('sum', 'mean'):
        raise ShapeError('partial_ce', 'reduction', 'sum|mean', reduction)

    weights = -target.weights * target.labeled[None]
    loss = probs.shift(eps).log().mask(weights).sum()
    count = target.labeled_count()
    if reduction == 'mean' and count > 0:
        loss = loss.scale(1.0 / count)
    return loss


def loss_unmix(pred1, y1, pred2, y2, reduction: str = 'sum') -> Tensor:
    return (partial_ce(pred1, y1, reduction) + partial_ce(pred2, y2, reduction)).scale(0.5)


def loss_mix(pred_o12, y_o12, pred_o21, y_o21, reduction: str = 'sum') -> Tensor:
    """Symmetric: the two directions come from two different plans."""
    return (partial_ce(pred_o12, y_o12, reduction) + partial_ce(pred_o21, y_o21, reduction)).scale(0.5)


def _cosine(p: Tensor, q: Tensor) -> Tensor:
    norm_p = float(np.sqrt((p.data.astype(np.float64) ** 2).sum()))
    norm_q = float(np.sqrt((q.data.astype(np.float64) ** 2).sum()))
    if norm_p <= NORM_EPS or norm_q <= NORM_EPS:
        raise DegenerateInputError('ncs: zero-norm input')
    dot = (p * q).sum()
    norms = (p * p).sum().sqrt() * (q * q).sum().sqrt()
    return dot / norms


def ncs(p, q, per_class: bool = False) -> Tensor:
    """
    Negative cosine similarity of two tensors flattened to single vectors.

    With per_class=True the cosine is taken per channel and averaged over the
    channels where both sides are non-zero.
    """
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ShapeError('ncs', 'shape', p.shape, q.shape)
    if not per_class:
        return -_cosine(p, q)

    cosines = []
    for k in range(p.shape[0]):
        pk, qk = p.channel(k), q.channel(k)
        if np.abs(pk.data).sum() > NORM_EPS and np.abs(qk.data).sum() > NORM_EPS:
            cosines.append(_cosine(pk, qk))
    if not cosines:
        raise DegenerateInputError('ncs: no channel is non-zero on both sides')
    return -_tensor_sum(cosines).scale(1.0 / len(cosines))


def _mixed_prediction(mixer, occlusion, first: Tensor, second: Tensor, stopgrad: bool) -> Tensor:
    if stopgrad:
        first, second = first.detach(), second.detach()
    mixed = mixer.mix_tensor(first, second)
    if occlusion is None or occlusion.area == 0:
        return mixed
    keep = np.broadcast_to(occlusion.keep, mixed.shape).copy()
    return mixed.mask(keep)


def global_consistency(
    mixers,
    occlusions,
    pred1,
    pred2,
    pred_o12,
    pred_o21,
    stopgrad: bool = False,
    per_class: bool = False,
) -> Tensor:
    """
    Mixing the segmentations must agree with segmenting the mix.

    `mixers` and `occlusions` are the (1,2) and (2,1) pairs used to build the
    mixed inputs; an occlusion may be None. The occlusion-masked mix of the
    two predictions is compared with the prediction on the occluded mix by
    negative cosine similarity, and the two directions are averaged.
    """
    p1, p2 = _probs(pred1), _probs(pred2)
    occ12, occ21 = occlusions if occlusions is not None else (None, None)
    p12 = _mixed_prediction(mixers[0], occ12, p1, p2, stopgrad)
    p21 = _mixed_prediction(mixers[1], occ21, p2, p1, stopgrad)
    return (ncs(p12, pred_o12, per_class) + ncs(p21, pred_o21, per_class)).scale(0.5)


def largest_component(region: np.ndarray) -> np.ndarray:
    """
    Largest 4-connected component of a boolean raster.

    Equal sizes go to the component whose first pixel in scan order comes
    first.
    """
    labels, count = ndimage.label(region, structure=CROSS)
    if count <= 1:
        return region.astype(bool)
    index = np.arange(1, count + 1)
    sizes = ndimage.sum_labels(np.ones(region.shape), labels, index)
    first = ndimage.minimum(np.arange(region.size).reshape(region.shape), labels, index)
    winner = index[np.lexsort((first, -sizes))[0]]
    return labels == winner


def largest_cc_target(pred) -> Tuple[DenseMask, np.ndarray]:
    """
    Keep each foreground class's largest component of argmax(pred), send the
    rest to background. Returns the mask and its one-hot (K, H, W) array.
    """
    probs = _probs(pred)
    num_classes = probs.shape[0]
    if num_classes < 2:
        raise ShapeError('largest_cc_target', 'K', '>= 2', num_classes)
    classes = np.argmax(probs.data, axis=0).astype(np.uint8)
    for k in range(1, num_classes):
        region = classes == k
        if region.any():
            classes[region & ~largest_component(region)] = 0
    mask = DenseMask(classes, num_classes)
    return mask, mask.one_hot()


def local_consistency(pred1, pred2, per_class: bool = False) -> Tensor:
    """Pull each unmixed prediction toward its own largest-component mask, held constant."""
    terms = []
    for pred in (pred1, pred2):
        _, target = largest_cc_target(pred)
        terms.append(ncs(_probs(pred), Tensor(target), per_class))
    return (terms[0] + terms[1]).scale(0.5)


def _value(term) -> float:
    if term is None:
        return 0.0
    if isinstance(term, Tensor):
        return term.item()
    return float(term)


def total_loss(
    unmix,
    mix=None,
    con_g=None,
    con_l=None,
    weights: Optional[LossWeights] = None,
    counts: Optional[Dict[str, int]] = None,
) -> LossBreakdown:
    """
    Weighted sum of the four terms. Missing terms count as 0; tensor terms
    with a non-zero weight are combined into the differentiable objective.
    """
    weights = weights or LossWeights()
    breakdown = LossBreakdown(
        unmix=_value(unmix),
        mix=_value(mix),
        con_g=_value(con_g),
        con_l=_value(con_l),
        counts=dict(counts or {}),
    )
    breakdown.total = breakdown.recompose(weights)

    graph_terms = [
        term.scale(w)
        for term, w in zip((unmix, mix, con_g, con_l), weights.as_tuple())
        if isinstance(term, Tensor) and w != 0
    ]
    if graph_terms:
        breakdown.objective = _tensor_sum(graph_terms)
    return breakdown


@dataclass
class DiceScores:
    """Dice per foreground class (index 0 is class 1) and their mean."""

    per_class: Tuple[float, ...]
    mean: float


def dice_score(pred_mask: DenseMask, gold: DenseMask, num_classes: Optional[int] = None) -> DiceScores:
    """2|A n B| / (|A| + |B|) per class k >= 1; two empty sets score 1."""
    if pred_mask.shape != gold.shape:
        raise ShapeError('dice_score', 'H,W', gold.shape, pred_mask.shape)
    num_classes = num_classes or gold.num_classes
    scores = []
    for k in range(1, num_classes):
        a = pred_mask.classes == k
        b = gold.classes == k
        denominator = int(a.sum()) + int(b.sum())
        if denominator == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * int((a & b).sum()) / denominator)
    return DiceScores(tuple(scores), float(np.mean(scores)))
