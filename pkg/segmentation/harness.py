"""
Training, evaluation, the ablation matrix and the mix preview.

One training step takes a pair of samples, segments both, builds the two
mixed (and optionally occluded) inputs M(x1, x2) and M(x2, x1), segments
those, and combines the supervision and consistency terms into one Adam
update. Pairs are formed per epoch by shuffling the training ids and taking
consecutive ids.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import data, losses, mix_engine
from .config import TrainConfig, write_config
from .exceptions import ConfigError, DatasetError, TrainingDivergedError
from .segmentor import SegmentorParams, forward, init_segmentor, load_checkpoint, predict_mask, save_checkpoint
from .tensor_core import AdamState, RngStream, Tensor, adam_step

logger = logging.getLogger(__name__)

TRACE_NAME = 'trace.csv'
REPORT_NAME = 'report.json'
CONFIG_NAME = 'config.txt'
BEST_CKPT = 'best.ckpt'
FINAL_CKPT = 'final.ckpt'
TRACE_HEADER = ('epoch', 'unmix', 'mix', 'con_g', 'con_l', 'total', 'val_dice')

ABLATION_ROWS = {
    1: {'lambda1': 1.0, 'lambda2': 0.0, 'lambda3': 0.0, 'lambda4': 0.0, 'mix_strategy': 'none', 'occlusion': False},
    2: {'lambda1': 1.0, 'lambda2': 1.0, 'lambda3': 0.0, 'lambda4': 0.0, 'mix_strategy': 'puzzle', 'occlusion': False},
    3: {'lambda1': 1.0, 'lambda2': 1.0, 'lambda3': 0.05, 'lambda4': 0.0, 'mix_strategy': 'puzzle', 'occlusion': False},
    4: {'lambda1': 1.0, 'lambda2': 1.0, 'lambda3': 0.05, 'lambda4': 0.0, 'mix_strategy': 'puzzle', 'occlusion': True},
    5: {'lambda1': 1.0, 'lambda2': 1.0, 'lambda3': 0.05, 'lambda4': 1.0, 'mix_strategy': 'puzzle', 'occlusion': True},
}
ACCEPT_BASELINE_DICE = 0.55
ACCEPT_MARGIN = 0.02


def _fmt(value: Optional[float]) -> str:
    return '' if value is None else f"{value:.6f}"


# Dice tables

@dataclass
class DiceTable:
    """Per-image foreground Dice for one split."""

    ids: List[str]
    scores: List[losses.DiceScores]
    class_names: Tuple[str, ...] = data.CLASS_NAMES[1:]

    def _matrix(self) -> np.ndarray:
        return np.array([s.per_class for s in self.scores], dtype=np.float64)

    @property
    def per_class_mean(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self._matrix().mean(axis=0))

    @property
    def per_class_std(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self._matrix().std(axis=0))

    @property
    def mean(self) -> float:
        return float(np.mean([s.mean for s in self.scores]))

    @property
    def std(self) -> float:
        return float(np.std([s.mean for s in self.scores]))

    def to_dict(self) -> Dict:
        return {
            'images': len(self.ids),
            'per_class_mean': dict(zip(self.class_names, self.per_class_mean)),
            'per_class_std': dict(zip(self.class_names, self.per_class_std)),
            'mean': self.mean,
            'std': self.std,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open('w', encoding='utf-8', newline='') as fh:
                writer = csv.writer(fh, lineterminator='\n')
                writer.writerow(('id',) + tuple(self.class_names) + ('mean',))
                for sample_id, score in zip(self.ids, self.scores):
                    writer.writerow((sample_id,) + tuple(_fmt(v) for v in score.per_class) + (_fmt(score.mean),))
        except OSError as exc:
            raise DatasetError(f"cannot write report {path}: {exc}") from exc
        return path


def evaluate_params(params: SegmentorParams, samples: Sequence[data.Sample]) -> DiceTable:
    ids, scores = [], []
    for sample in samples:
        if sample.mask is None:
            raise DatasetError(f"missing mask for {sample.id}")
        predicted = predict_mask(params, sample.image)
        ids.append(sample.id)
        scores.append(losses.dice_score(predicted, sample.mask, params.num_classes))
    names = tuple(
        data.CLASS_NAMES[k] if k < len(data.CLASS_NAMES) else f"class{k}"
        for k in range(1, params.num_classes)
    )
    return DiceTable(ids, scores, names)


def evaluate(checkpoint, data_dir, split: str = 'test', report_path=None) -> DiceTable:
    """Dice of a checkpoint's argmax predictions against the dense masks of a split."""
    params = load_checkpoint(checkpoint)
    samples = data.load_split(data_dir, split, params.num_classes, require_mask=True)
    table = evaluate_params(params, samples)
    if report_path:
        table.write_csv(report_path)
        logger.info(f"Evaluation report written to {report_path}")
    return table


# Training

def label_of(sample: data.Sample, cfg: TrainConfig) -> data.ScribbleLabel:
    if cfg.supervision == 'mask':
        if sample.mask is None:
            raise DatasetError(f"mask supervision requested but {sample.id} has no mask")
        return sample.mask.as_scribble()
    return sample.scribble


@dataclass
class MixedPair:
    """Both mixing directions, before and after occlusion."""

    mixers: Tuple
    occlusions: Tuple
    mixed_images: Tuple[Tensor, Tensor]
    mixed_labels: Tuple
    images: Tuple[Tensor, Tensor]
    labels: Tuple

    def plan_text(self) -> str:
        return ''.join(f"# direction {tag}\n{mixer.to_text()}" for tag, mixer in zip(('12', '21'), self.mixers))


def _mix_direction(cfg: TrainConfig, rng: RngStream, params, first, second, saliency):
    (x1, y1), (x2, y2) = first, second
    if cfg.mix_strategy == 'puzzle':
        return mix_engine.puzzle_mix(
            params, x1, y1, x2, y2,
            block_size=cfg.block_size,
            window_radius=cfg.window_radius,
            n_iter=cfg.n_iter,
            saliency=saliency,
        )
    if cfg.mix_strategy == 'mixup':
        return mix_engine.mixup_linear(rng, x1, y1, x2, y2, alpha=cfg.mixup_alpha)
    if cfg.mix_strategy == 'cutmix':
        return mix_engine.cutmix(rng, x1, y1, x2, y2)
    return mix_engine.cutout(rng, x1, y1)


def build_mixed_pair(params: SegmentorParams, pair, cfg: TrainConfig, rng: RngStream) -> Optional[MixedPair]:
    """None when the strategy is 'none'."""
    if cfg.mix_strategy == 'none':
        return None
    (x1, y1), (x2, y2) = pair
    saliency = (None, None)
    if cfg.mix_strategy == 'puzzle':
        saliency = (mix_engine.compute_saliency(params, x1, y1), mix_engine.compute_saliency(params, x2, y2))

    h, w = x1.shape[-2:]
    parts = {'mixers': [], 'occlusions': [], 'mixed_images': [], 'mixed_labels': [], 'images': [], 'labels': []}
    directions = (
        ('12', (x1, y1), (x2, y2), saliency),
        ('21', (x2, y2), (x1, y1), saliency[::-1]),
    )
    for tag, first, second, sal in directions:
        result = _mix_direction(cfg, rng.derive('mix', tag), params, first, second, sal)
        image, label = result.image, result.label
        occlusion = None
        if cfg.occlusion:
            occlusion = mix_engine.sample_occlusion(rng.derive('occlusion', tag), h, w, cfg.side_frac)
            image, label = mix_engine.apply_occlusion(occlusion, image, label, cfg.occlusion_label)
        if label.labeled_count() == 0:
            logger.warning(f"mixed sample {tag} carries no labeled pixels")
        parts['mixers'].append(result.mixer)
        parts['occlusions'].append(occlusion)
        parts['mixed_images'].append(result.image)
        parts['mixed_labels'].append(result.label)
        parts['images'].append(image)
        parts['labels'].append(label)
    return MixedPair(**{key: tuple(values) for key, values in parts.items()})


def train_step(
    params: SegmentorParams,
    pair,
    cfg: TrainConfig,
    rng: RngStream,
    state: Optional[AdamState] = None,
) -> Tuple[SegmentorParams, losses.LossBreakdown]:
    """
    One Adam update on ((x1, y1), (x2, y2)).

    `state` carries the optimizer moments between steps and is updated in
    place; a fresh one is used when omitted.
    """
    state = state if state is not None else AdamState()
    (x1, y1), (x2, y2) = pair
    mixed = build_mixed_pair(params, pair, cfg, rng)

    pred1 = forward(params, x1)
    pred2 = forward(params, x2)
    unmix = losses.loss_unmix(pred1, y1, pred2, y2, cfg.ce_reduction)
    counts = {'unmix': y1.labeled_count() + y2.labeled_count()}

    mix = con_g = None
    if mixed is not None:
        pred_o12 = forward(params, mixed.images[0])
        pred_o21 = forward(params, mixed.images[1])
        mix = losses.loss_mix(pred_o12, mixed.labels[0], pred_o21, mixed.labels[1], cfg.ce_reduction)
        con_g = losses.global_consistency(
            mixed.mixers, mixed.occlusions, pred1, pred2, pred_o12, pred_o21,
            stopgrad=cfg.stopgrad,
            per_class=cfg.per_class_cosine,
        )
        counts['mix'] = mixed.labels[0].labeled_count() + mixed.labels[1].labeled_count()
    con_l = losses.local_consistency(pred1, pred2, per_class=cfg.per_class_cosine)

    breakdown = losses.total_loss(unmix, mix, con_g, con_l, cfg.weights, counts)
    objective = breakdown.objective
    if not breakdown.is_finite() or (objective is not None and not np.isfinite(objective.data).all()):
        plan_text = mixed.plan_text() if mixed is not None else ''
        logger.error(f"Non-finite loss {breakdown.values()}; mix plans:\n{plan_text}")
        raise TrainingDivergedError(f"non-finite loss {breakdown.values()}", plan_text)

    if objective is not None:
        params.zero_grad()
        objective.backward()
        adam_step(params.tensors, params.grads(), state, lr=cfg.lr)
    logger.debug(f"step breakdown {breakdown.values()}")
    return params, breakdown


def epoch_pairs(ids_count: int, rng: RngStream) -> List[Tuple[int, int]]:
    """Shuffle, then pair consecutive indices; an odd one out is skipped."""
    order = [int(i) for i in rng.permutation(ids_count)]
    if len(order) % 2:
        logger.warning(f"odd training split, sample index {order[-1]} sits out this epoch")
    return [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]


def mean_breakdown(items: Sequence[losses.LossBreakdown]) -> losses.LossBreakdown:
    values = np.array([b.values() for b in items], dtype=np.float64).mean(axis=0)
    return losses.LossBreakdown(*(float(v) for v in values))


@dataclass
class EpochRecord:
    epoch: int
    breakdown: losses.LossBreakdown
    val_dice: Optional[float] = None

    def row(self) -> Tuple[str, ...]:
        return (str(self.epoch),) + tuple(_fmt(v) for v in self.breakdown.values()) + (_fmt(self.val_dice),)


@dataclass
class RunReport:
    config: TrainConfig
    trace: List[EpochRecord]
    val: DiceTable
    test: DiceTable
    best_epoch: int
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_dict(self) -> Dict:
        """Everything except wall-clock time, so reruns serialize identically."""
        return {
            'seed': self.seed,
            'config': self.config.as_mapping(),
            'best_epoch': self.best_epoch,
            'trace': [
                dict(zip(TRACE_HEADER, (r.epoch,) + r.breakdown.values() + (r.val_dice,)))
                for r in self.trace
            ],
            'val': self.val.to_dict(),
            'test': self.test.to_dict(),
        }


def write_trace(path, trace: Sequence[EpochRecord]) -> Path:
    path = Path(path)
    with path.open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(TRACE_HEADER)
        for record in trace:
            writer.writerow(record.row())
    return path


def train(cfg: TrainConfig, out_dir) -> RunReport:
    """Full training run; writes trace, report, config and checkpoints to out_dir."""
    if not cfg.data_dir:
        raise ConfigError({'data_dir': ['a data directory is required.']})
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out_dir}: {exc}") from exc

    started = time.perf_counter()
    K = cfg.num_classes
    train_set = data.load_split(cfg.data_dir, 'train', K, require_mask=cfg.supervision == 'mask')
    val_set = data.load_split(cfg.data_dir, 'val', K, require_mask=True)
    if len(train_set) < 2:
        raise DatasetError(f"training split needs at least 2 samples, got {len(train_set)}")

    root = RngStream(cfg.seed)
    params = init_segmentor(K, cfg.base_channels, root.derive('init'))
    state = AdamState()
    labeled = [(s.image, label_of(s, cfg)) for s in train_set]
    write_config(cfg, out_dir / CONFIG_NAME)

    trace = []
    best_val = -1.0
    best_params = params.copy()
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        steps = []
        for index, (i, j) in enumerate(epoch_pairs(len(labeled), root.derive('epoch', epoch))):
            params, breakdown = train_step(params, (labeled[i], labeled[j]), cfg, root.derive('step', epoch, index), state)
            steps.append(breakdown)
        record = EpochRecord(epoch, mean_breakdown(steps))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record.val_dice = evaluate_params(params, val_set).mean
            if record.val_dice > best_val:
                best_val, best_epoch = record.val_dice, epoch
                best_params = params.copy()
        trace.append(record)
        logger.info(
            f"epoch {epoch}/{cfg.epochs} total={record.breakdown.total:.4f} "
            f"unmix={record.breakdown.unmix:.4f} val_dice={_fmt(record.val_dice) or '-'}"
        )

    save_checkpoint(best_params, out_dir / BEST_CKPT)
    save_checkpoint(params, out_dir / FINAL_CKPT)
    write_trace(out_dir / TRACE_NAME, trace)
    test_set = data.load_split(cfg.data_dir, 'test', K, require_mask=True)
    report = RunReport(
        config=cfg,
        trace=trace,
        val=evaluate_params(best_params, val_set),
        test=evaluate_params(best_params, test_set),
        best_epoch=best_epoch,
        wall_clock=time.perf_counter() - started,
    )
    (out_dir / REPORT_NAME).write_text(json.dumps(report.to_dict(), indent=2) + '\n', encoding='utf-8')
    logger.info(
        f"Training finished in {report.wall_clock:.1f}s, best epoch {best_epoch}, "
        f"test Dice {report.test.mean:.4f}"
    )
    return report


# Ablation

def parse_rows(text: str) -> List[int]:
    """'1-5', '1,3,5' or a mix of both."""
    rows = set()
    try:
        for part in str(text).split(','):
            part = part.strip()
            if '-' in part:
                low, high = (int(v) for v in part.split('-', 1))
                rows.update(range(low, high + 1))
            elif part:
                rows.add(int(part))
    except ValueError as exc:
        raise ConfigError({'rows': [f"cannot parse {text!r}."]}) from exc
    if not rows or not rows <= set(ABLATION_ROWS):
        raise ConfigError({'rows': [f"rows must be a non-empty subset of 1-{len(ABLATION_ROWS)}, got {text!r}."]})
    return sorted(rows)


def ablation_config(base: TrainConfig, row: int, seed: int) -> TrainConfig:
    return base.replace(seed=seed, **ABLATION_ROWS[row])


@dataclass
class AblationResult:
    row: int
    seed: int
    config: TrainConfig
    per_class: Tuple[float, ...]
    mean: float


@dataclass
class AblationReport:
    results: List[AblationResult]
    check_passed: Optional[bool] = None

    def row_means(self) -> Dict[int, float]:
        rows = sorted({r.row for r in self.results})
        return {row: float(np.mean([r.mean for r in self.results if r.row == row])) for row in rows}

    def row_stds(self) -> Dict[int, float]:
        rows = sorted({r.row for r in self.results})
        return {row: float(np.std([r.mean for r in self.results if r.row == row])) for row in rows}


def _run_ablation_job(job) -> Tuple[Tuple[float, ...], float]:
    cfg, run_dir = job
    report = train(cfg, run_dir)
    return report.test.per_class_mean, report.test.mean


def ablate(
    base: TrainConfig,
    rows: Sequence[int],
    seeds: int,
    out_dir,
    workers: int = 1,
    check: bool = False,
) -> AblationReport:
    """
    Train every (row, seed) configuration of the ablation matrix and compare
    mean test Dice. With check=True, rows 1 and 5 must be present and the
    desk-scale acceptance thresholds are evaluated.
    """
    if seeds < 1:
        raise ConfigError({'seeds': ['at least one seed is required.']})
    if check and not {1, 5} <= set(rows):
        raise ConfigError({'rows': ['the acceptance check compares rows 1 and 5.']})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for row in rows:
        for offset in range(seeds):
            cfg = ablation_config(base, row, base.seed + offset)
            jobs.append((row, cfg, out_dir / f"row{row}_seed{cfg.seed}"))

    payload = [(cfg, run_dir) for _, cfg, run_dir in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_ablation_job, payload))
    else:
        outcomes = [_run_ablation_job(job) for job in payload]

    results = []
    for (row, cfg, _), (per_class, mean) in zip(jobs, outcomes):
        results.append(AblationResult(row, cfg.seed, cfg, per_class, mean))
        logger.info(f"ablation row #{row} seed {cfg.seed}: test Dice {mean:.4f}")

    report = AblationReport(results)
    if check:
        means = report.row_means()
        report.check_passed = means[1] >= ACCEPT_BASELINE_DICE and means[5] >= means[1] + ACCEPT_MARGIN
    write_ablation(out_dir, report)
    return report


def write_ablation(out_dir, report: AblationReport):
    out_dir = Path(out_dir)
    echo = ('lambda1', 'lambda2', 'lambda3', 'lambda4', 'mix_strategy', 'occlusion')
    with (out_dir / 'ablation.csv').open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(('row', 'seed') + echo + tuple(data.CLASS_NAMES[1:]) + ('mean',))
        for r in report.results:
            mapping = r.config.as_mapping()
            writer.writerow(
                (r.row, r.seed) + tuple(mapping[k] for k in echo)
                + tuple(_fmt(v) for v in r.per_class) + (_fmt(r.mean),)
            )
    means, stds = report.row_means(), report.row_stds()
    with (out_dir / 'ablation_summary.csv').open('w', encoding='utf-8', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(('row',) + echo + ('seeds', 'mean', 'std'))
        for row, mean in means.items():
            cfg = next(r.config for r in report.results if r.row == row)
            mapping = cfg.as_mapping()
            seeds = sum(1 for r in report.results if r.row == row)
            writer.writerow((row,) + tuple(mapping[k] for k in echo) + (seeds, _fmt(mean), _fmt(stds[row])))


# Mix preview

def write_pgm(path, array: np.ndarray, rescale: bool = True) -> Path:
    """8-bit PGM; by default a linear rescale of [min, max] to [0, 255]."""
    values = np.asarray(array, dtype=np.float64).squeeze()
    if rescale:
        low, high = values.min(), values.max()
        if high > low:
            values = (values - low) / (high - low) * 255.0
        else:
            values = np.zeros_like(values)
    pixels = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(pixels).save(path, format='PPM')
    return path


def label_classes(label) -> np.ndarray:
    """Hard per-pixel classes of a label, UNLABELED where nothing is annotated."""
    if isinstance(label, data.ScribbleLabel):
        return label.classes
    classes = np.argmax(label.weights, axis=0).astype(np.uint8)
    classes[~label.labeled | (label.weights.sum(axis=0) == 0)] = data.UNLABELED
    return classes


def label_preview(label, num_classes: int) -> np.ndarray:
    classes = label_classes(label)
    levels = np.rint((np.arange(num_classes) + 1) * 255.0 / num_classes)
    preview = np.zeros(classes.shape)
    labeled = classes != data.UNLABELED
    preview[labeled] = levels[classes[labeled]]
    return preview


@dataclass
class DemoResult:
    files: List[Path]
    plan_text: str


def mix_demo(data_dir, out_dir, seed: int = 0, strategy: str = 'puzzle',
             cfg: Optional[TrainConfig] = None, checkpoint=None) -> DemoResult:
    """
    Write x1, x2, the mix x_m12 and its occluded form x_o12, with their labels,
    as NST tensors and PGM previews, plus the plan text.
    """
    cfg = cfg or TrainConfig()
    # cutout has no occlusion stage
    cfg = cfg.replace(
        mix_strategy=strategy, seed=seed, data_dir=str(data_dir),
        occlusion=cfg.occlusion and strategy != 'cutout',
    )
    samples = data.load_split(data_dir, 'train', cfg.num_classes)
    if len(samples) < 2:
        raise DatasetError('the mix demo needs at least 2 training samples')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = RngStream(seed)
    i, j = (int(v) for v in rng.derive('demo', 'pair').permutation(len(samples))[:2])
    if checkpoint:
        params = load_checkpoint(checkpoint)
    else:
        params = init_segmentor(cfg.num_classes, cfg.base_channels, rng.derive('init'))
    x1, y1 = samples[i].image, label_of(samples[i], cfg)
    x2, y2 = samples[j].image, label_of(samples[j], cfg)

    mixed = build_mixed_pair(params, ((x1, y1), (x2, y2)), cfg, rng.derive('demo', 'mix'))
    if mixed is None:
        xm, ym, xo, yo = x1, y1, x1, y1
        plan_text = '# no mixing\n'
    else:
        xm, ym = mixed.mixed_images[0], mixed.mixed_labels[0]
        xo, yo = mixed.images[0], mixed.labels[0]
        plan_text = mixed.mixers[0].to_text()

    files = []
    for name, image, label in (('x1', x1, y1), ('x2', x2, y2), ('xm12', xm, ym), ('xo12', xo, yo)):
        label_name = 'y' + name[1:]
        files.append(data.write_nst(out_dir / f"{name}.nst", image))
        files.append(data.write_nst(out_dir / f"{label_name}.nst", label_classes(label)))
        files.append(write_pgm(out_dir / f"{name}.pgm", image.data))
        files.append(write_pgm(out_dir / f"{label_name}.pgm", label_preview(label, cfg.num_classes), rescale=False))
    plan_path = out_dir / 'plan.txt'
    plan_path.write_text(plan_text, encoding='utf-8')
    files.append(plan_path)
    logger.info(f"Mix demo ({strategy}) of {samples[i].id} and {samples[j].id} written to {out_dir}")
    return DemoResult(files, plan_text)
