"""
Finite-difference gradient suite over every differentiable operation, the
segmentor and every loss term. Each case reduces its output to a scalar with
fixed random weights and is checked on several random instances in 64-bit
mode; the reported error is the worst instance.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import losses, mix_engine
from .data import UNLABELED, ScribbleLabel
from .segmentor import forward, init_segmentor
from .tensor_core import (
    RngStream,
    Tensor,
    channel_softmax,
    check_mode,
    concat_channels,
    conv2d,
    finite_diff_gradcheck,
    maxpool2,
    relu,
    upsample2_nearest,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_INSTANCES = 5
K = 4
SIZE = 8


@dataclass
class GradcheckRow:
    name: str
    error: float
    passed: bool


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return out.mask(weights).sum()


def _scribble(rng: RngStream, shape=(SIZE, SIZE), fraction=0.4) -> ScribbleLabel:
    classes = rng.integers(0, K, size=shape).astype(np.uint8)
    classes[rng.random(shape) > fraction] = UNLABELED
    classes[0, 0] = 1
    return ScribbleLabel(classes, K)


def _probs(rng: RngStream) -> Tensor:
    return channel_softmax(Tensor(rng.normal(size=(K, SIZE, SIZE))))


def _plan(rng: RngStream) -> mix_engine.MixPlan:
    plan = mix_engine.MixPlan.identity((SIZE, SIZE), 4)
    plan.z = rng.integers(0, 2, size=plan.num_blocks).astype(np.uint8)
    plan.pi1 = rng.permutation(plan.num_blocks)
    plan.pi2 = rng.permutation(plan.num_blocks)
    return plan


def _unary(op: Callable[[Tensor], Tensor], shape, low=-1.0, high=1.0):
    def case(rng: RngStream):
        x = Tensor(rng.uniform(low, high, size=shape))
        weights = rng.normal(size=op(x).shape)
        return (lambda t: _weighted(op(t), weights)), x
    return case


def _binary(op, shape, position: int, low=-1.0, high=1.0):
    """Gradient with respect to one operand, the other held fixed."""
    def case(rng: RngStream):
        a = Tensor(rng.uniform(low, high, size=shape))
        b = Tensor(rng.uniform(low, high, size=shape))
        weights = rng.normal(size=op(a, b).shape)
        if position == 0:
            return (lambda t: _weighted(op(t, b), weights)), a
        return (lambda t: _weighted(op(a, t), weights)), b
    return case


def _conv(position: int, k: int = 3):
    def case(rng: RngStream):
        operands = [
            Tensor(rng.normal(size=(2, 6, 6))),
            Tensor(rng.normal(size=(3, 2, k, k))),
            Tensor(rng.normal(size=(3,))),
        ]
        weights = rng.normal(size=(3, 6, 6))

        def f(t):
            args = list(operands)
            args[position] = t
            return _weighted(conv2d(*args), weights)
        return f, operands[position]
    return case


def _segmentor(layer: Optional[str]):
    def case(rng: RngStream):
        params = init_segmentor(K, 4, rng.derive('init'))
        x = Tensor(rng.normal(size=(1, SIZE, SIZE)))
        weights = rng.normal(size=(K, SIZE, SIZE))
        if layer is None:
            return (lambda t: _weighted(forward(params, t).probs, weights)), x
        name = f"{layer}.weight"

        def f(t):
            params.tensors[name] = t
            return _weighted(forward(params, x).probs, weights)
        return f, Tensor(params.tensors[name].data)
    return case


def _from_logits(loss: Callable[[Tensor, RngStream], Callable[[Tensor], Tensor]]):
    """Loss cases differentiate through a softmax so probabilities stay valid."""
    def case(rng: RngStream):
        logits = Tensor(rng.normal(size=(K, SIZE, SIZE)))
        inner = loss(logits, rng)
        return (lambda t: inner(channel_softmax(t))), logits
    return case


def _partial_ce(logits, rng):
    y = _scribble(rng)
    return lambda p: losses.partial_ce(p, y)


def _loss_unmix(logits, rng):
    y1, y2 = _scribble(rng), _scribble(rng)
    other = _probs(rng)
    return lambda p: losses.loss_unmix(p, y1, other, y2)


def _loss_mix(logits, rng):
    plan = _plan(rng)
    y1, y2 = _scribble(rng), _scribble(rng)
    other = _probs(rng)
    y12, y21 = plan.mix_labels(y1, y2), plan.mix_labels(y2, y1)
    return lambda p: losses.loss_mix(p, y12, other, y21)


def _ncs(per_class: bool):
    def build(logits, rng):
        q = _probs(rng)
        return lambda p: losses.ncs(p, q, per_class=per_class)
    return build


def _global_consistency(logits, rng):
    plans = (_plan(rng), _plan(rng))
    occlusions = tuple(mix_engine.sample_occlusion(rng, SIZE, SIZE, 0.4) for _ in range(2))
    pred2, pred_o12, pred_o21 = _probs(rng), _probs(rng), _probs(rng)
    return lambda p: losses.global_consistency(plans, occlusions, p, pred2, pred_o12, pred_o21)


def _global_consistency_mixed(logits, rng):
    plans = (_plan(rng), _plan(rng))
    pred1, pred2, pred_o21 = _probs(rng), _probs(rng), _probs(rng)
    return lambda p: losses.global_consistency(plans, None, pred1, pred2, p, pred_o21)


def _local_consistency(logits, rng):
    other = _probs(rng)
    return lambda p: losses.local_consistency(p, other)


def _mix_strategy(mixer_factory):
    def build(logits, rng):
        mixer = mixer_factory(rng)
        other = _probs(rng)
        weights = rng.normal(size=(K, SIZE, SIZE))
        return lambda p: _weighted(mixer.mix_tensor(p, other), weights)
    return build


CASES: Dict[str, Callable] = {
    'add': _binary(lambda a, b: a + b, (2, 3, 3), 0),
    'sub': _binary(lambda a, b: a - b, (2, 3, 3), 1),
    'mul.a': _binary(lambda a, b: a * b, (2, 3, 3), 0),
    'mul.b': _binary(lambda a, b: a * b, (2, 3, 3), 1),
    'div.a': _binary(lambda a, b: a / b, (2, 3, 3), 0, 0.5, 2.0),
    'div.b': _binary(lambda a, b: a / b, (2, 3, 3), 1, 0.5, 2.0),
    'scale': _unary(lambda t: t.scale(-2.5), (2, 3, 3)),
    'shift': _unary(lambda t: t.shift(0.75), (2, 3, 3)),
    'sum': _unary(lambda t: t.sum(), (2, 3, 3)),
    'log': _unary(lambda t: t.log(), (2, 3, 3), 0.5, 2.0),
    'sqrt': _unary(lambda t: t.sqrt(), (2, 3, 3), 0.5, 2.0),
    'reshape': _unary(lambda t: t.reshape(3, 6), (2, 3, 3)),
    'channel': _unary(lambda t: t.channel(1), (3, 4, 4)),
    'conv2d.x': _conv(0),
    'conv2d.kernel': _conv(1),
    'conv2d.bias': _conv(2),
    'conv2d.1x1': _conv(1, k=1),
    'relu': _unary(relu, (2, 4, 4)),
    'channel_softmax': _unary(channel_softmax, (4, 3, 3), -2.0, 2.0),
    'maxpool2': _unary(maxpool2, (2, 4, 4)),
    'upsample2_nearest': _unary(upsample2_nearest, (2, 3, 3)),
    'concat_channels.a': _binary(concat_channels, (2, 3, 3), 0),
    'concat_channels.b': _binary(concat_channels, (2, 3, 3), 1),
    'segmentor.input': _segmentor(None),
    'segmentor.enc1_a': _segmentor('enc1_a'),
    'segmentor.bottleneck_b': _segmentor('bottleneck_b'),
    'segmentor.head': _segmentor('head'),
    'partial_ce': _from_logits(_partial_ce),
    'loss_unmix': _from_logits(_loss_unmix),
    'loss_mix': _from_logits(_loss_mix),
    'ncs': _from_logits(_ncs(False)),
    'ncs.per_class': _from_logits(_ncs(True)),
    'global_consistency.unmixed': _from_logits(_global_consistency),
    'global_consistency.mixed': _from_logits(_global_consistency_mixed),
    'local_consistency': _from_logits(_local_consistency),
    'mix.plan': _from_logits(_mix_strategy(_plan)),
    'mix.mixup': _from_logits(_mix_strategy(lambda rng: mix_engine.LinearMix(float(rng.uniform(0, 1)), (SIZE, SIZE)))),
    'mix.cutmix': _from_logits(_mix_strategy(lambda rng: mix_engine.BoxMix(mix_engine.sample_box(rng, SIZE, SIZE), (SIZE, SIZE)))),
    'mix.cutout': _from_logits(_mix_strategy(lambda rng: mix_engine.CutoutMix((2, 5, 1, 4), (SIZE, SIZE)))),
}


def run_gradcheck(
    names: Optional[Iterable[str]] = None,
    seed: int = 0,
    instances: int = DEFAULT_INSTANCES,
    tolerance: float = DEFAULT_TOLERANCE,
) -> List[GradcheckRow]:
    """Run the selected cases (all by default) and return one row per case."""
    selected = list(CASES) if names is None else list(names)
    unknown = [n for n in selected if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")

    root = RngStream(seed)
    rows = []
    with check_mode():
        for name in selected:
            worst = 0.0
            for instance in range(instances):
                f, x = CASES[name](root.derive('gradcheck', name, instance))
                worst = max(worst, finite_diff_gradcheck(f, x))
            rows.append(GradcheckRow(name, worst, worst < tolerance))
            logger.debug(f"gradcheck {name}: {worst:.3e}")
    return rows
