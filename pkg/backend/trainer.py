"""
backend/trainer.py
Ground-truth preparation, augmentation and the min-max training loop.

Each mini-batch:
  1. forward every sample and compute its E1, E2
  2. batch means -> lambda (EMA towards lambda* per batch, or once per epoch)
  3. backward on alpha * E1 + beta * E2 with alpha, beta held constant
  4. one Adam step
The learning rate is multiplied by the decay factor after every epoch.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from backend.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from backend.errors import DataError, NonFiniteError, NonFiniteLossError
from backend.losses import TaskWeights, combined_energy, task_losses, weighted_energy
from backend.network import ModelParams, build, forward
from backend.optim import Adam
from backend.tensorgrid import Tape, TensorGrid, backward
from backend.utils import storage
from schemas.config import AugmentConfig, RunConfig, TrainConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TRAIN_LOG_NAME = "train_log.csv"


# ============================================================================
# GROUND TRUTH
# ============================================================================

def edge_groundtruth(g: np.ndarray, sigma: float) -> np.ndarray:
    """Gradient magnitude of the Gaussian-smoothed binary mask, max rescaled to 1.

    Raises:
        ValueError: ``g`` is not binary or ``sigma`` is not positive
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    g = np.asarray(g)
    if g.dtype != bool and not np.isin(g, (0, 1)).all():
        raise ValueError("edge ground truth needs a binary mask")
    blurred = ndimage.gaussian_filter(g.astype(np.float64), sigma, mode="nearest")
    gy, gx = np.gradient(blurred)
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max() if magnitude.size else 0.0
    if peak < 1e-12:
        return np.zeros_like(blurred)
    return magnitude / peak


def instance_edge_groundtruth(labels: np.ndarray, sigma: float) -> np.ndarray:
    """Pixelwise max of the per-instance edge maps; marks boundaries between touching cells too."""
    labels = np.asarray(labels)
    edges = np.zeros(labels.shape, dtype=np.float64)
    for label in np.unique(labels):
        if label == 0:
            continue
        np.maximum(edges, edge_groundtruth(labels == label, sigma), out=edges)
    return edges


def normalize_image(image: np.ndarray) -> np.ndarray:
    """1st-99th percentile stretch to [0, 1]; a flat image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [1.0, 99.0])
    if hi - lo < 1e-12:
        return np.zeros_like(image)
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


class TrainSample(NamedTuple):
    image: np.ndarray
    region: np.ndarray
    edge: np.ndarray
    labels: np.ndarray


def make_sample(image: np.ndarray, labels: np.ndarray, sigma: float, normalize: bool = True) -> TrainSample:
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise DataError(f"image {image.shape} and mask {labels.shape} differ in size")
    return TrainSample(
        image=normalize_image(image) if normalize else image,
        region=(labels > 0).astype(np.float64),
        edge=instance_edge_groundtruth(labels, sigma),
        labels=labels,
    )


def load_samples(data_dir: PathLike, split: str, sigma: float) -> List[TrainSample]:
    """Samples of one split of a gen-data style dataset directory."""
    data_dir = Path(data_dir)
    samples = []
    for entry in storage.read_manifest(data_dir, split=split):
        image = storage.read_image(data_dir / entry.image)
        labels = storage.read_labels(data_dir / entry.mask)
        samples.append(make_sample(image, labels, sigma))
    if not samples:
        raise DataError(f"no '{split}' samples listed in {data_dir / storage.MANIFEST_NAME}")
    logger.info(f"Loaded {len(samples)} {split} samples from {data_dir}")
    return samples


# ============================================================================
# AUGMENTATION
# ============================================================================

def flip_sample(sample: TrainSample, horizontal: bool = False, vertical: bool = False) -> TrainSample:
    def flip(a):
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1, :]
        return np.ascontiguousarray(a)
    return TrainSample(*(flip(a) for a in sample))


def adjust_intensity(image: np.ndarray, gain: float = 1.0, offset: float = 0.0, gamma: float = 1.0) -> np.ndarray:
    """clip(gain * x + offset) ** gamma, kept in [0, 1]."""
    out = np.clip(gain * np.asarray(image, dtype=np.float64) + offset, 0.0, 1.0)
    if gamma != 1.0:
        out = out ** gamma
    return np.clip(out, 0.0, 1.0)


def augment(sample: TrainSample, rng: np.random.Generator, config: AugmentConfig) -> TrainSample:
    """Random flips (all arrays) and intensity scaling (image only)."""
    if not config.enabled:
        return sample
    horizontal = config.flip_horizontal and rng.random() < 0.5
    vertical = config.flip_vertical and rng.random() < 0.5
    gain, offset, gamma = 1.0, 0.0, 1.0
    if config.affine:
        gain = rng.uniform(config.gain_min, config.gain_max)
        offset = rng.uniform(-config.offset_max, config.offset_max)
    if config.gamma:
        gamma = rng.uniform(config.gamma_min, config.gamma_max)
    flipped = flip_sample(sample, horizontal, vertical)
    return flipped._replace(image=adjust_intensity(flipped.image, gain, offset, gamma))


# ============================================================================
# GRADIENTS
# ============================================================================

class SamplePass(NamedTuple):
    tape: Tape
    e1: TensorGrid
    e2: TensorGrid


def forward_sample(params: ModelParams, sample: TrainSample, epsilon: float) -> SamplePass:
    tape = Tape()
    f_r, f_e = forward(params, sample.image, tape=tape)
    e1, e2 = task_losses(f_r, f_e, sample.region, sample.edge, epsilon)
    return SamplePass(tape, e1, e2)


def backward_sample(sample_pass: SamplePass, alpha: float, beta: float) -> Dict[str, np.ndarray]:
    energy = weighted_energy(sample_pass.e1, sample_pass.e2, alpha, beta)
    return backward(energy, sample_pass.tape)


def _reduce(per_sample: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Sum gradients in sample order so the result is independent of scheduling."""
    totals = {name: g.copy() for name, g in per_sample[0].items()}
    for grads in per_sample[1:]:
        for name, g in grads.items():
            totals[name] += g
    return totals


def forward_batch(params: ModelParams, batch: Sequence[TrainSample], epsilon: float,
                  pool: Optional[ThreadPoolExecutor] = None) -> List[SamplePass]:
    mapper = pool.map if pool is not None else map
    return list(mapper(lambda s: forward_sample(params, s, epsilon), batch))


def backward_batch(passes: Sequence[SamplePass], alpha: float, beta: float,
                   pool: Optional[ThreadPoolExecutor] = None) -> Dict[str, np.ndarray]:
    """Gradient of mean(alpha * E1 + beta * E2) over the batch of ``passes``."""
    mapper = pool.map if pool is not None else map
    m = len(passes)
    return _reduce(list(mapper(lambda p: backward_sample(p, alpha / m, beta / m), passes)))


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    weights: TaskWeights
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


@dataclass
class EpochStats:
    epoch: int
    e1: float
    e2: float
    energy: float
    lambdas: List[float] = field(default_factory=list)
    rows: List[tuple] = field(default_factory=list)


def init_state(run: RunConfig) -> TrainState:
    train = run.train
    lam = train.fixed_lambda if train.fixed_lambda is not None else train.lambda_init
    return TrainState(
        params=build(run.net, seed=train.seed),
        optimizer=Adam(lr=train.learning_rate, beta1=train.adam_beta1, beta2=train.adam_beta2, eps=train.adam_eps),
        weights=TaskWeights(lam=lam),
        rng=np.random.default_rng([train.seed, 1]),
    )


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return TrainState(ckpt.params, ckpt.optimizer, ckpt.weights, rng, ckpt.epoch, ckpt.step)


def state_to_checkpoint(state: TrainState, run: RunConfig) -> Checkpoint:
    return Checkpoint(
        params=state.params,
        optimizer=state.optimizer,
        weights=state.weights,
        epoch=state.epoch,
        step=state.step,
        rng_state=state.rng.bit_generator.state,
        extra={"train": run.train.model_dump()},
    )


def train_epoch(state: TrainState, data: Sequence[TrainSample], config: TrainConfig,
                augment_config: Optional[AugmentConfig] = None,
                pool: Optional[ThreadPoolExecutor] = None) -> EpochStats:
    """One pass over ``data``; mutates ``state`` and returns the epoch's statistics.

    Raises:
        DataError: ``data`` is empty
        NonFiniteLossError: a batch produced NaN/Inf (carries the batch index)
    """
    if not data:
        raise DataError("training data is empty")
    augment_config = augment_config or AugmentConfig(enabled=False)
    frozen = config.fixed_lambda is not None
    per_batch = config.lambda_cadence == "batch"
    epoch = state.epoch + 1
    order = state.rng.permutation(len(data))
    stats = EpochStats(epoch=epoch, e1=0.0, e2=0.0, energy=0.0)
    all_e1: List[float] = []
    all_e2: List[float] = []

    for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
        batch = [augment(data[i], state.rng, augment_config) for i in order[start:start + config.batch_size]]
        m = len(batch)
        try:
            passes = forward_batch(state.params, batch, config.dice_epsilon, pool)
        except NonFiniteError as exc:
            raise NonFiniteLossError(batch_index, str(exc)) from exc
        e1s = [float(p.e1.values) for p in passes]
        e2s = [float(p.e2.values) for p in passes]
        e1, e2 = sum(e1s) / m, sum(e2s) / m
        if not np.isfinite(e1) or not np.isfinite(e2):
            raise NonFiniteLossError(batch_index, f"E1={e1}, E2={e2}")

        state.step += 1
        if per_batch or frozen:
            state.weights.update(state.step, e1, e2, ema=config.lambda_ema, frozen=frozen)
        alpha, beta = state.weights.alpha, state.weights.beta

        try:
            grads = backward_batch(passes, alpha, beta, pool)
        except NonFiniteError as exc:
            raise NonFiniteLossError(batch_index, str(exc)) from exc
        lr = state.optimizer.lr
        state.params = state.params.replace(state.optimizer.step(state.params.arrays, grads))

        energy = combined_energy(e1, e2, state.weights.lam)
        stats.rows.append((epoch, state.step, state.weights.lam, e1, e2, energy, lr))
        stats.lambdas.append(state.weights.lam)
        all_e1.extend(e1s)
        all_e2.extend(e2s)
        logger.debug("Batch done", extra={"epoch": epoch, "step": state.step, "lambda": state.weights.lam})

    stats.e1 = sum(all_e1) / len(all_e1)
    stats.e2 = sum(all_e2) / len(all_e2)
    per_epoch = not per_batch and not frozen
    if per_epoch:
        state.weights.update(state.step, stats.e1, stats.e2, ema=0.0)
        stats.lambdas.append(state.weights.lam)
    stats.energy = combined_energy(stats.e1, stats.e2, state.weights.lam)
    if per_epoch:
        # closing row: epoch-mean losses under the updated lambda
        stats.rows.append((epoch, state.step, state.weights.lam, stats.e1, stats.e2, stats.energy,
                           state.optimizer.lr))
    state.optimizer.decay(config.lr_decay)
    state.epoch = epoch
    logger.info(f"Epoch {epoch}: E1={stats.e1:.4f} E2={stats.e2:.4f} E={stats.energy:.4f}",
                extra={"epoch": epoch, "lambda": state.weights.lam})
    return stats


def evaluate_losses(params: ModelParams, data: Sequence[TrainSample], epsilon: float) -> Tuple[float, float]:
    """Mean E1 and E2 over ``data`` without recording anything."""
    if not data:
        raise DataError("evaluation data is empty")
    e1s, e2s = [], []
    for sample in data:
        f_r, f_e = forward(params, sample.image)
        e1, e2 = task_losses(f_r, f_e, sample.region, sample.edge, epsilon)
        e1s.append(float(e1.values))
        e2s.append(float(e2.values))
    return sum(e1s) / len(e1s), sum(e2s) / len(e2s)


def checkpoint_path(out_dir: PathLike, epoch: int) -> Path:
    return Path(out_dir) / f"checkpoint_{epoch:04d}.ckpt"


def _truncate_log(log_path: Path, last_epoch: int):
    """Drop log rows written after ``last_epoch`` (rows are kept verbatim)."""
    if not log_path.exists():
        return
    rows = storage.read_csv(log_path, storage.TRAIN_LOG_HEADER)
    kept = [[row[k] for k in storage.TRAIN_LOG_HEADER] for row in rows if int(row["epoch"]) <= last_epoch]
    storage.write_csv(log_path, storage.TRAIN_LOG_HEADER, kept)


def fit(run: RunConfig, data: Sequence[TrainSample], out_dir: PathLike,
        resume: Optional[PathLike] = None) -> TrainState:
    """Train for ``run.train.epochs`` epochs, logging and checkpointing into ``out_dir``.

    A fresh run writes checkpoint_0000 before the first epoch; a resumed run
    continues the epoch counter and appends to the existing log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = run.train
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume, expected=run.net))
        logger.info(f"Resuming from {resume} at epoch {state.epoch}")
        _truncate_log(out_dir / TRAIN_LOG_NAME, state.epoch)
    else:
        state = init_state(run)
        save_checkpoint(checkpoint_path(out_dir, 0), state_to_checkpoint(state, run))
        # a fresh run owns the log
        (out_dir / TRAIN_LOG_NAME).unlink(missing_ok=True)

    log_path = out_dir / TRAIN_LOG_NAME
    pool = ThreadPoolExecutor(max_workers=train.workers) if train.workers > 1 else None
    try:
        while state.epoch < train.epochs:
            stats = train_epoch(state, data, train, run.augment, pool)
            storage.append_csv(log_path, storage.TRAIN_LOG_HEADER, stats.rows)
            periodic = train.checkpoint_every and state.epoch % train.checkpoint_every == 0
            if periodic or state.epoch == train.epochs:
                save_checkpoint(checkpoint_path(out_dir, state.epoch), state_to_checkpoint(state, run))
    finally:
        if pool is not None:
            pool.shutdown()
    return state
