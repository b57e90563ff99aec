"""
schemas/config.py
Typed configuration for every stage of the pipeline.

All models forbid unknown fields, so a typo in a config file is an error
rather than a silently ignored key. RunConfig groups the sections that the
flat ``section.field = value`` files address.
"""

import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ============================================================================
# NETWORK
# ============================================================================

class NetConfig(_Section):
    """Shape of the twin encoder-decoder."""
    depth: int = Field(default=3, ge=1, le=6, description="Number of down/up-sampling levels")
    base_channels: int = Field(default=8, ge=1, description="Channels of the top-level blocks")
    input_size: int = Field(default=64, ge=2, description="Input height = width in pixels")
    precision: Literal["float64", "float32"] = Field(
        default="float64", description="float64 for oracle/test runs, float32 allowed for training")

    @model_validator(mode="after")
    def _size_fits_depth(self):
        levels = 2 ** self.depth
        if self.input_size % levels:
            raise ValueError(f"input_size {self.input_size} is not divisible by 2**depth = {levels}")
        return self


# ============================================================================
# TRAINING
# ============================================================================

class AugmentConfig(_Section):
    """Flips plus linear (gain/offset) and gamma intensity scaling."""
    enabled: bool = Field(default=True, description="Master switch for augmentation")
    flip_horizontal: bool = Field(default=True, description="Random left-right flip")
    flip_vertical: bool = Field(default=True, description="Random up-down flip")
    affine: bool = Field(default=True, description="Random gain/offset a*x + b")
    gain_min: float = Field(default=0.8, gt=0, description="Lower bound of the gain a")
    gain_max: float = Field(default=1.2, gt=0, description="Upper bound of the gain a")
    offset_max: float = Field(default=0.1, ge=0, description="Offset b drawn from [-offset_max, offset_max]")
    gamma: bool = Field(default=True, description="Random gamma x**g")
    gamma_min: float = Field(default=0.7, gt=0, description="Lower bound of the gamma exponent")
    gamma_max: float = Field(default=1.5, gt=0, description="Upper bound of the gamma exponent")

    @model_validator(mode="after")
    def _ordered_ranges(self):
        if self.gain_min > self.gain_max:
            raise ValueError("gain_min must not exceed gain_max")
        if self.gamma_min > self.gamma_max:
            raise ValueError("gamma_min must not exceed gamma_max")
        return self


class TrainConfig(_Section):
    """Mini-batch loop, optimizer and task-weight schedule."""
    epochs: int = Field(default=300, ge=0, description="Number of epochs n (0 writes the initial checkpoint only)")
    batch_size: int = Field(default=10, ge=1, description="Mini-batch size m")
    learning_rate: float = Field(default=1e-4, ge=0, description="Initial Adam learning rate l_r")
    lr_decay: float = Field(default=0.99, gt=0, le=1, description="Learning-rate factor applied after each epoch")
    adam_beta1: float = Field(default=0.9, ge=0, lt=1, description="Adam first-moment decay")
    adam_beta2: float = Field(default=0.999, ge=0, lt=1, description="Adam second-moment decay")
    adam_eps: float = Field(default=1e-8, gt=0, description="Adam denominator epsilon")
    lambda_cadence: Literal["batch", "epoch"] = Field(
        default="batch", description="Update lambda every batch or once per epoch")
    lambda_ema: float = Field(default=0.9, ge=0, le=1, description="EMA weight on the previous lambda (batch cadence)")
    lambda_init: float = Field(default=1 / math.sqrt(2), gt=0, lt=1, description="Initial lambda")
    fixed_lambda: Optional[float] = Field(
        default=None, gt=0, lt=1, description="Freeze lambda at this value (fixed-weight baseline)")
    edge_sigma: float = Field(default=1.5, gt=0, description="Gaussian sigma of the edge ground truth")
    dice_epsilon: float = Field(default=1.0, ge=0, description="Dice regulariser used for training")
    seed: int = Field(default=0, ge=0, description="Seed for initialisation, data order and augmentation")
    workers: int = Field(default=1, ge=1, description="Threads for per-sample forward/backward")
    checkpoint_every: int = Field(default=50, ge=0, description="Write a checkpoint every k epochs (0 = final only)")


# ============================================================================
# SYNTHETIC DATA
# ============================================================================

class SceneSpec(_Section):
    """Parameters of one synthetic brightfield-like scene."""
    image_size: int = Field(default=64, ge=16, description="Scene height = width in pixels")
    cell_count_min: int = Field(default=1, ge=0, description="Fewest cells per scene")
    cell_count_max: int = Field(default=3, ge=0, description="Most cells per scene")
    radius_min: float = Field(default=6.0, ge=3, description="Smallest mean cell radius (px)")
    radius_max: float = Field(default=10.0, ge=3, description="Largest mean cell radius (px)")
    perturbation: float = Field(default=0.15, ge=0, lt=0.5, description="Boundary perturbation, fraction of radius")
    harmonics_min: int = Field(default=3, ge=1, description="Lowest Fourier harmonic of the outline")
    harmonics_max: int = Field(default=6, ge=1, description="Highest Fourier harmonic of the outline")
    touching_probability: float = Field(default=0.5, ge=0, le=1, description="Chance a new cell is placed against an existing one")
    touch_spacing_min: float = Field(default=0.70, gt=0, description="Touching centroid spacing, min fraction of r1 + r2")
    touch_spacing_max: float = Field(default=0.82, gt=0, description="Touching centroid spacing, max fraction of r1 + r2")
    separation_min: float = Field(default=1.3, gt=0, description="Non-touching centroid spacing, min fraction of r1 + r2")
    background: float = Field(default=0.35, ge=0, le=1, description="Background intensity level")
    contrast_gap: float = Field(default=0.25, gt=0, le=1, description="Foreground minus background intensity")
    contrast_jitter: float = Field(default=0.2, ge=0, description="Per-cell relative jitter of the contrast gap (upwards)")
    illumination_amplitude: float = Field(default=0.06, ge=0, description="Peak-to-peak amplitude of the linear illumination ramp")
    halo_amplitude: float = Field(default=0.08, ge=0, description="Depth of the dark ring just outside each cell")
    noise_std: float = Field(default=0.03, ge=0, description="Gaussian noise standard deviation")
    edge_sigma: float = Field(default=1.5, gt=0, description="Gaussian sigma of the emitted edge ground truth")
    max_retries: int = Field(default=200, ge=1, description="Placement attempts per cell before giving up")
    seed: int = Field(default=0, ge=0, description="Scene seed")

    @model_validator(mode="after")
    def _consistent(self):
        if self.cell_count_min > self.cell_count_max:
            raise ValueError("cell_count_min must not exceed cell_count_max")
        if self.radius_min > self.radius_max:
            raise ValueError("radius_min must not exceed radius_max")
        if self.harmonics_min > self.harmonics_max:
            raise ValueError("harmonics_min must not exceed harmonics_max")
        if self.touch_spacing_min > self.touch_spacing_max:
            raise ValueError("touch_spacing_min must not exceed touch_spacing_max")
        if self.touch_spacing_max >= 1:
            raise ValueError("touch_spacing_max must be < 1 so touching cells overlap before clipping")
        if self.touch_spacing_max > 1 - self.perturbation:
            raise ValueError("touch_spacing_max must not exceed 1 - perturbation or touching cells may not meet")
        if self.separation_min <= 1 + self.perturbation:
            raise ValueError("separation_min must exceed 1 + perturbation so separate cells cannot touch")
        if self.contrast_gap <= self.noise_std:
            raise ValueError(f"contrast_gap {self.contrast_gap} must exceed noise_std {self.noise_std}")
        return self


class DatasetConfig(_Section):
    """Train/test split sizes for gen-data."""
    train_count: int = Field(default=245, ge=0, description="Training scenes")
    test_count: int = Field(default=50, ge=0, description="Held-out scenes")
    seed: int = Field(default=2020, ge=0, description="Root seed; per-scene seeds derive from it")


# ============================================================================
# SEGMENTATION
# ============================================================================

class SegmenterParams(_Section):
    """Seed detection, coupled contour numerics and rasterisation."""
    method: Literal["contours", "components"] = Field(
        default="contours", description="contours = coupled active contours, components = region-only labelling")
    threshold: float = Field(default=0.5, gt=0, lt=1, description="Region-map threshold")
    erosion_radius: int = Field(default=2, ge=0, description="Disk radius of the seed erosion")
    min_seed_area: int = Field(default=4, ge=1, description="Smallest eroded component kept as a seed (px)")
    peak_separation: float = Field(default=5.0, gt=0, description="Distance-transform peaks closer than this are merged (px)")
    neck_ratio: float = Field(default=0.85, gt=0, le=1, description="Split only if the ridge between peaks dips below this fraction")
    seed_radius_factor: float = Field(default=0.6, gt=0, le=1, description="Initial radius as a fraction of the inscribed distance")
    edge_cut: float = Field(default=0.5, gt=0, le=1, description="Edge-map level that separates seed regions")
    snap_range: float = Field(default=2.0, ge=0, description="How far a converged vertex may move onto an edge ridge (px); 0 disables")
    snap_level: float = Field(default=0.5, ge=0, le=1, description="Weakest edge ridge a vertex snaps to")
    step: float = Field(default=0.4, gt=0, description="Explicit Euler step of the balloon force (px)")
    curvature_weight: float = Field(default=0.2, ge=0, lt=0.5, description="Weight of the Laplacian smoothing displacement")
    spacing: float = Field(default=2.0, gt=0, description="Resampling arc-length spacing h (px)")
    stop_threshold: float = Field(default=0.1, ge=0, description="Vertices freeze where the force drops below this")
    d_min: float = Field(default=2.0, gt=0, description="Coupling distance between contours (px)")
    tol: float = Field(default=0.05, gt=0, description="Convergence tolerance on vertex displacement (px)")
    window: int = Field(default=10, ge=1, description="Iterations the displacement must stay below tol")
    max_iterations: int = Field(default=500, ge=1, description="Hard cap on contour iterations")
    min_vertices: int = Field(default=8, ge=8, description="Fewest vertices of a contour")
    min_cell_area: int = Field(default=30, ge=0, description="Labels smaller than this are discarded (px)")


# ============================================================================
# RUN CONFIG
# ============================================================================

class RunConfig(_Section):
    """Everything a command needs, addressed as ``section.field``."""
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    segment: SegmenterParams = Field(default_factory=SegmenterParams)

    @model_validator(mode="after")
    def _sizes_agree(self):
        if self.scene.image_size != self.net.input_size:
            raise ValueError(
                f"scene.image_size {self.scene.image_size} must equal net.input_size {self.net.input_size}")
        return self
