"""
The mini encoder-decoder that maps a grayscale image to per-pixel class
probabilities.

Topology, with c base channels:

    encoder     [conv3x3+relu]x2 @ c,  maxpool2, [conv3x3+relu]x2 @ 2c, maxpool2
    bottleneck  [conv3x3+relu]x2 @ 4c
    decoder     upsample2, concat skip, [conv3x3+relu]x2 @ 2c,
                upsample2, concat skip, [conv3x3+relu]x2 @ c
    head        conv1x1 -> K, channel_softmax
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data
from .exceptions import CheckpointError, DegenerateInputError, ShapeError
from .tensor_core import (
    RngStream,
    Tensor,
    channel_softmax,
    concat_channels,
    conv2d,
    maxpool2,
    parameter_grads,
    relu,
    upsample2_nearest,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 'scribblemix-ckpt'
CHECKPOINT_VERSION = 'v1'
INIT_SCHEME = 'he_uniform'


def architecture(num_classes: int, base_channels: int) -> List[Tuple[str, int, int, int]]:
    """(layer name, C_out, C_in, kernel size) for every conv layer, in order."""
    c = base_channels
    return [
        ('enc1_a', c, 1, 3),
        ('enc1_b', c, c, 3),
        ('enc2_a', 2 * c, c, 3),
        ('enc2_b', 2 * c, 2 * c, 3),
        ('bottleneck_a', 4 * c, 2 * c, 3),
        ('bottleneck_b', 4 * c, 4 * c, 3),
        ('dec2_a', 2 * c, 4 * c + 2 * c, 3),
        ('dec2_b', 2 * c, 2 * c, 3),
        ('dec1_a', c, 2 * c + c, 3),
        ('dec1_b', c, c, 3),
        ('head', num_classes, c, 1),
    ]


def parameter_count(num_classes: int, base_channels: int) -> int:
    return sum(
        c_out * c_in * k * k + c_out
        for _, c_out, c_in, k in architecture(num_classes, base_channels)
    )


@dataclass
class SegmentorParams:
    """Segmentor weights, one kernel and one bias per layer."""

    num_classes: int
    base_channels: int
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    init_seed: Optional[int] = None
    init_scheme: str = INIT_SCHEME

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def kernel(self, layer: str) -> Tensor:
        return self.tensors[f"{layer}.weight"]

    def bias(self, layer: str) -> Tensor:
        return self.tensors[f"{layer}.bias"]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return parameter_grads(self.tensors)

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def detached(self) -> 'SegmentorParams':
        """Same weights, no gradient tracking (for saliency and evaluation)."""
        return self._rebuild(lambda t: Tensor(t.data, requires_grad=False))

    def copy(self, requires_grad: bool = True) -> 'SegmentorParams':
        """Deep copy in the current default precision."""
        return self._rebuild(lambda t: Tensor(np.array(t.data), requires_grad=requires_grad))

    def _rebuild(self, convert) -> 'SegmentorParams':
        return SegmentorParams(
            num_classes=self.num_classes,
            base_channels=self.base_channels,
            tensors={name: convert(t) for name, t in self.tensors.items()},
            init_seed=self.init_seed,
            init_scheme=self.init_scheme,
        )


@dataclass
class Prediction:
    """Class probabilities of shape (K, H, W)."""

    probs: Tensor

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def to_mask(self) -> data.DenseMask:
        # np.argmax returns the first maximum, so ties go to the lowest class
        classes = np.argmax(self.probs.data, axis=0).astype(np.uint8)
        return data.DenseMask(classes, self.num_classes)


def init_segmentor(num_classes: int, base_channels: int, rng: RngStream) -> SegmentorParams:
    """Fan-in scaled uniform kernels, zero biases."""
    if num_classes < 2:
        raise ShapeError('init_segmentor', 'K', '>= 2', num_classes)
    if base_channels < 4:
        raise ShapeError('init_segmentor', 'base_channels', '>= 4', base_channels)

    tensors = {}
    for name, c_out, c_in, k in architecture(num_classes, base_channels):
        bound = np.sqrt(6.0 / (c_in * k * k))
        weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        tensors[f"{name}.weight"] = Tensor(weight, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    params = SegmentorParams(
        num_classes=num_classes,
        base_channels=base_channels,
        tensors=tensors,
        init_seed=rng.seed,
    )
    logger.debug(f"Initialized segmentor K={num_classes} c={base_channels} ({params.parameter_count()} parameters)")
    return params


def _block(params: SegmentorParams, x: Tensor, first: str, second: str) -> Tensor:
    x = relu(conv2d(x, params.kernel(first), params.bias(first)))
    return relu(conv2d(x, params.kernel(second), params.bias(second)))


def forward(params: SegmentorParams, x: Tensor) -> Prediction:
    """Segment a (1, H, W) image; the graph is kept for backward."""
    if x.data.ndim != 3:
        raise ShapeError('forward', 'ndim', 3, x.data.ndim)
    if x.shape[0] != 1:
        raise ShapeError('forward', 'channels', 1, x.shape[0])
    if x.shape[1] % 4:
        raise ShapeError('forward', 'H', 'divisible by 4', x.shape[1])
    if x.shape[2] % 4:
        raise ShapeError('forward', 'W', 'divisible by 4', x.shape[2])
    if not np.isfinite(x.data).all():
        raise DegenerateInputError('forward: input contains non-finite values')

    skip1 = _block(params, x, 'enc1_a', 'enc1_b')
    skip2 = _block(params, maxpool2(skip1), 'enc2_a', 'enc2_b')
    bottom = _block(params, maxpool2(skip2), 'bottleneck_a', 'bottleneck_b')

    up2 = concat_channels(upsample2_nearest(bottom), skip2)
    dec2 = _block(params, up2, 'dec2_a', 'dec2_b')
    up1 = concat_channels(upsample2_nearest(dec2), skip1)
    dec1 = _block(params, up1, 'dec1_a', 'dec1_b')

    logits = conv2d(dec1, params.kernel('head'), params.bias('head'))
    return Prediction(channel_softmax(logits))


def predict_mask(params: SegmentorParams, image: Tensor) -> data.DenseMask:
    return forward(params.detached(), image.detach()).to_mask()


def checkpoint_header(params: SegmentorParams) -> str:
    return f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} K={params.num_classes} c={params.base_channels}"


def save_checkpoint(params: SegmentorParams, path) -> Path:
    """Header line followed by one NST record per parameter, in layer order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytearray((checkpoint_header(params) + '\n').encode('utf-8'))
    for name, _, _, _ in architecture(params.num_classes, params.base_channels):
        for suffix in ('weight', 'bias'):
            array = params.tensors[f"{name}.{suffix}"].data.astype('<f4')
            payload += data.encode_nst(array)
    path.write_bytes(bytes(payload))
    logger.info(f"Checkpoint saved to {path}")
    return path


def _parse_header(line: str, path) -> Tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (header {line!r})")
    if parts[1] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {parts[1]}")
    try:
        num_classes = int(parts[2].removeprefix('K='))
        base_channels = int(parts[3].removeprefix('c='))
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed header {line!r}") from exc
    return num_classes, base_channels


def load_checkpoint(path) -> SegmentorParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc

    newline = raw.find(b'\n')
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    num_classes, base_channels = _parse_header(raw[:newline].decode('utf-8', 'replace'), path)

    offset = newline + 1
    tensors = {}
    for name, c_out, c_in, k in architecture(num_classes, base_channels):
        for suffix, shape in (('weight', (c_out, c_in, k, k)), ('bias', (c_out,))):
            array, offset = data.decode_nst(raw, offset, source=path)
            if array.shape != shape:
                raise CheckpointError(f"{path}: {name}.{suffix} has shape {array.shape}, expected {shape}")
            tensors[f"{name}.{suffix}"] = Tensor(array, requires_grad=True)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return SegmentorParams(num_classes=num_classes, base_channels=base_channels, tensors=tensors)
