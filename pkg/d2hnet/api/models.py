"""
Pydantic models for the run configuration, manifests and reports.
"""
import json
import logging
import math
import sys
import zlib
from pathlib import Path
from typing import ClassVar, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from d2hnet import config
from d2hnet.utils.errors import ConfigError

logger = logging.getLogger(__name__)


class SectionModel(BaseModel):
    """Base for config sections: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid", frozen=True)


class SamplingPolicy(SectionModel):
    """How exposure windows are picked from each source video."""
    stride: int = Field(config.DEFAULT_WINDOW_STRIDE, ge=1, description="Source frames between window starts")
    jitter: int = Field(0, ge=0, description="Max random shift of each window start, in interpolated frames")
    max_windows: Optional[int] = Field(None, ge=1, description="Cap on windows per video")
    val_fraction: float = Field(config.DEFAULT_VAL_FRACTION, ge=0.0, lt=1.0, description="Share of windows held out for validation")


class SynthConfig(SectionModel):
    """Exposure synthesis settings."""
    interp_factor: int = Field(config.DEFAULT_INTERP_FACTOR, ge=1, description="Frames inserted per source interval (plus one)")
    long_frames: int = Field(config.DEFAULT_LONG_FRAMES, ge=1, description="Interpolated frames averaged into l")
    short_frames: int = Field(config.DEFAULT_SHORT_FRAMES, ge=1, description="Interpolated frames averaged into s")
    gap_frames: int = Field(config.DEFAULT_GAP_FRAMES, ge=0, description="Readout gap between l and s")
    exposure_ratio: Optional[int] = Field(config.DEFAULT_EXPOSURE_RATIO, ge=1, description="Required long:short ratio (unset disables the check)")
    source_fps: float = Field(config.DEFAULT_SOURCE_FPS, gt=0.0, description="Nominal fps of the source frames")
    burst_count: int = Field(config.DEFAULT_BURST_COUNT, ge=1, description="Short exposures per burst")
    window_stride: int = Field(config.DEFAULT_WINDOW_STRIDE, ge=1, description="Source frames between window starts")
    window_jitter: int = Field(0, ge=0, description="Max seeded shift of window starts (interpolated frames)")
    max_windows: Optional[int] = Field(None, ge=1, description="Cap on windows per video")
    val_fraction: float = Field(config.DEFAULT_VAL_FRACTION, ge=0.0, lt=1.0, description="Share of windows written to the validation manifest")

    @model_validator(mode="after")
    def check_ratio(self):
        if self.exposure_ratio is not None and self.long_frames != self.exposure_ratio * self.short_frames:
            raise ValueError(
                f"long_frames ({self.long_frames}) must equal exposure_ratio x short_frames "
                f"({self.exposure_ratio} x {self.short_frames})"
            )
        return self

    @property
    def window_length(self) -> int:
        return self.long_frames + self.gap_frames + self.short_frames

    @property
    def burst_length(self) -> int:
        """Frames spanned by the long window plus burst_count short exposures."""
        return self.window_length + (self.burst_count - 1) * (self.short_frames + self.gap_frames)

    def policy(self) -> SamplingPolicy:
        return SamplingPolicy(
            stride=self.window_stride,
            jitter=self.window_jitter,
            max_windows=self.max_windows,
            val_fraction=self.val_fraction,
        )


class IspConfig(SectionModel):
    """Camera pipeline constants used for unprocessing and processing."""
    gamma: float = Field(config.DEFAULT_GAMMA, gt=0.0, description="Gamma of the sRGB encoding")
    wr_range: tuple[float, float] = Field(config.WB_RED_RANGE, description="Red gain sampling range")
    wb_range: tuple[float, float] = Field(config.WB_BLUE_RANGE, description="Blue gain sampling range")
    bayer: Literal["RGGB"] = Field("RGGB", description="Mosaic pattern")

    @field_validator("wr_range", "wb_range")
    @classmethod
    def check_gain_range(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] <= 0 or v[0] > v[1]:
            raise ValueError(f"gain range must be positive and ordered, got {v}")
        return v


class IspParams(BaseModel):
    """White balance and gamma of one tuple (shared by l and s)."""
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(config.DEFAULT_GAMMA, gt=0.0)
    wr: float = Field(2.0, gt=0.0)
    wb: float = Field(1.7, gt=0.0)


class NoiseParams(SectionModel):
    """ISO-indexed sensor noise description (signal-referred, [0, 1] scale)."""
    k_iso: float = Field(config.DEFAULT_K_ISO, ge=0.0, description="System gain per ISO unit")
    r0: float = Field(config.DEFAULT_READ_R0, ge=0.0, description="Read noise sigma intercept")
    r1: float = Field(config.DEFAULT_READ_R1, ge=0.0, description="Read noise sigma slope per ISO")
    row0: float = Field(config.DEFAULT_ROW_R0, ge=0.0, description="Row noise sigma intercept")
    row1: float = Field(config.DEFAULT_ROW_R1, ge=0.0, description="Row noise sigma slope per ISO")
    bit_depth: int = Field(config.DEFAULT_BIT_DEPTH, ge=1, le=16, description="ADC bit depth")
    black_level: float = Field(config.DEFAULT_BLACK_LEVEL, ge=0.0, lt=1.0, description="Black level (fraction of full scale)")
    quant_step: Optional[float] = Field(None, ge=0.0, description="Quantization step (unset: 1 / (2^bit_depth - 1))")
    iso_long_range: tuple[float, float] = Field(config.ISO_LONG_RANGE, description="ISO range of the long exposure")
    iso_short_range: tuple[float, float] = Field(config.ISO_SHORT_RANGE, description="ISO range of the short exposure")
    iso_sensor_range: tuple[float, float] = Field(config.ISO_SENSOR_RANGE, description="ISO range the sensor supports")
    poisson_normal_threshold: float = Field(config.POISSON_NORMAL_THRESHOLD, gt=0.0, description="x/K above which shot noise is drawn from a normal")

    @model_validator(mode="after")
    def check_iso_ranges(self):
        for name in ("iso_long_range", "iso_short_range", "iso_sensor_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or lo > hi:
                raise ValueError(f"{name} must be positive and non-empty, got {(lo, hi)}")
        if self.iso_short_range[0] < self.iso_long_range[0] or self.iso_short_range[1] <= self.iso_long_range[1]:
            raise ValueError("iso_short_range must lie above iso_long_range")
        lo, hi = self.iso_sensor_range
        for name in ("iso_long_range", "iso_short_range"):
            r = getattr(self, name)
            if r[0] < lo or r[1] > hi:
                raise ValueError(f"{name} {r} exceeds iso_sensor_range {(lo, hi)}")
        return self

    @property
    def q(self) -> float:
        if self.quant_step is not None:
            return self.quant_step
        return 1.0 / (2 ** self.bit_depth - 1)

    def gain(self, iso: float) -> float:
        return self.k_iso * iso

    def read_sigma(self, iso: float) -> float:
        return self.r0 + self.r1 * iso

    def row_sigma(self, iso: float) -> float:
        return self.row0 + self.row1 * iso


class AugmentConfig(SectionModel):
    """Training-data schemes and their probabilities."""
    p_ia: float = Field(config.P_ILLUMINATION, ge=0.0, le=1.0, description="Illumination adjustment probability")
    p_ca: float = Field(config.P_COLOR, ge=0.0, le=1.0, description="Color adjustment probability")
    p_cutnoise: float = Field(config.P_CUTNOISE, ge=0.0, le=1.0, description="CutNoise probability")
    ia_gammas: tuple[float, ...] = Field(config.IA_GAMMAS, min_length=1, description="Illumination gamma choices")
    ca_a_range: tuple[float, float] = Field(config.CA_A_RANGE, description="Color gain range")
    ca_b_range: tuple[float, float] = Field(config.CA_B_RANGE, description="Color offset range")
    cutnoise_ratio: float = Field(config.CUTNOISE_RATIO, ge=0.0, le=1.0, description="CutNoise side relative to the crop side")
    crop_size: int = Field(config.DEFAULT_CROP_SIZE, ge=4, description="Training crop side")
    noise: bool = Field(True, description="Simulate sensor noise on l and s")
    varmap_window: int = Field(config.VARMAP_WINDOW, ge=1, description="Variance map cell side k")
    selection_percentile: float = Field(config.SELECTION_PERCENTILE, ge=0.0, le=100.0, description="Blur threshold percentile")
    samples_per_map: int = Field(config.SAMPLES_PER_MAP, ge=1, description="Squares sampled per variance map")
    selection_square: int = Field(config.SELECTION_SQUARE, ge=1, description="Selection square side")

    @field_validator("ia_gammas")
    @classmethod
    def check_gammas(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if any(g <= 1.0 for g in v):
            raise ValueError(f"illumination gammas must be > 1, got {v}")
        return v

    @model_validator(mode="after")
    def check_selection_square(self):
        if self.selection_square < self.crop_size:
            raise ValueError(
                f"selection_square ({self.selection_square}) must be at least crop_size ({self.crop_size})"
            )
        return self

    @property
    def cutnoise_side(self) -> int:
        return int(round(self.cutnoise_ratio * self.crop_size))


class ModelConfig(SectionModel):
    """Architecture hyperparameters and ablation switches."""
    deblur_base_width: int = Field(config.DEBLUR_BASE_WIDTH, ge=1, description="DeblurNet base channel width")
    enhance_base_width: int = Field(config.ENHANCE_BASE_WIDTH, ge=1, description="EnhanceNet base channel width")
    deblur_resolution: int = Field(config.DEBLUR_RESOLUTION, ge=16, description="Fixed DeblurNet resolution R at inference")
    train_downsample: int = Field(config.TRAIN_DOWNSAMPLE, ge=1, description="Training pooling factor (alpha = 1 / value)")
    leaky_slope: float = Field(config.LEAKY_SLOPE, ge=0.0, lt=1.0, description="Leaky ReLU slope")
    residual_layers: int = Field(config.RESIDUAL_LAYERS, ge=1, description="Residual layers per residual block")
    pyramid_levels: int = Field(config.PYRAMID_LEVELS, ge=2, le=6, description="EnhanceNet pyramid levels")
    ablations: tuple[str, ...] = Field((), description="Ablation flags: " + ", ".join(config.ABLATION_FLAGS))

    @field_validator("deblur_resolution")
    @classmethod
    def check_resolution(cls, v: int) -> int:
        if v % 16:
            raise ValueError(f"deblur_resolution must be divisible by 16, got {v}")
        return v

    @field_validator("ablations")
    @classmethod
    def check_ablations(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [flag for flag in v if flag not in config.ABLATION_FLAGS]
        if unknown:
            raise ValueError(f"unknown ablation flags {unknown}")
        return tuple(sorted(set(v)))

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def enhance_divisor(self) -> int:
        return 2 ** (self.pyramid_levels - 1)


class TrainSchedule(SectionModel):
    """Optimization schedule of both stages."""
    deblur_epochs: int = Field(config.DEBLUR_EPOCHS, ge=0, description="DeblurNet epochs")
    enhance_epochs: int = Field(config.ENHANCE_EPOCHS, ge=0, description="EnhanceNet epochs")
    deblur_lr: float = Field(config.DEBLUR_LR, ge=0.0, description="DeblurNet initial learning rate")
    enhance_lr: float = Field(config.ENHANCE_LR, ge=0.0, description="EnhanceNet initial learning rate")
    halving_period: int = Field(config.LR_HALVING_PERIOD, ge=1, description="Epochs between learning-rate halvings")
    batch_size: int = Field(config.BATCH_SIZE, ge=1, description="Samples per step")
    steps_per_epoch: Optional[int] = Field(None, ge=1, description="Steps per epoch (unset: one pass over the manifest)")
    beta1: float = Field(config.ADAM_BETA1, ge=0.0, lt=1.0, description="Adam beta1")
    beta2: float = Field(config.ADAM_BETA2, ge=0.0, lt=1.0, description="Adam beta2")
    eps: float = Field(config.ADAM_EPSILON, gt=0.0, description="Adam epsilon")
    loss_smoothing: int = Field(config.LOSS_SMOOTHING, ge=1, description="Window of the smoothed loss")

    def epochs(self, stage: str) -> int:
        return self.deblur_epochs if stage == "deblur" else self.enhance_epochs

    def lr0(self, stage: str) -> float:
        return self.deblur_lr if stage == "deblur" else self.enhance_lr

    def lr_at(self, stage: str, epoch: int) -> float:
        """lr0 * 0.5 ** floor(epoch / halving_period)."""
        return self.lr0(stage) * 0.5 ** (epoch // self.halving_period)


class EvalConfig(SectionModel):
    """Evaluation settings."""
    upscale_factors: tuple[int, ...] = Field((1,), min_length=1, description="Nearest-neighbor upscales of the validation set")
    clamp: bool = Field(True, description="Clamp outputs to [0, 1]")
    psnr_peak: float = Field(config.PSNR_PEAK, gt=0.0, description="PSNR peak value")

    @field_validator("upscale_factors")
    @classmethod
    def check_factors(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if any(f < 1 for f in v):
            raise ValueError(f"upscale factors must be >= 1, got {v}")
        return v


class RunConfig(SectionModel):
    """Whole-run configuration loaded from one TOML file."""
    seed: int = Field(config.DEFAULT_SEED, ge=0, description="Master seed")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    isp: IspConfig = Field(default_factory=IspConfig)
    noise: NoiseParams = Field(default_factory=NoiseParams)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSchedule = Field(default_factory=TrainSchedule)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def canonical_json(self, section: Optional[str] = None) -> str:
        data = self.model_dump(mode="json")
        if section is not None:
            data = data[section]
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        """CRC32 of the canonical form, as 8 hex digits."""
        return f"{zlib.crc32(self.canonical_json().encode('utf-8')):08x}"

    def model_fingerprint(self) -> str:
        return f"{zlib.crc32(self.canonical_json('model').encode('utf-8')):08x}"

    def with_overrides(self, seed: Optional[int] = None, ablations: Optional[tuple[str, ...]] = None) -> "RunConfig":
        updates: dict = {}
        if seed is not None:
            updates["seed"] = seed
        if ablations is not None:
            updates["model"] = ModelConfig.model_validate(
                {**self.model.model_dump(), "ablations": tuple(ablations)}
            )
        return self.model_copy(update=updates)


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    loc = ".".join(str(part) for part in err["loc"]) or "<root>"
    return f"{loc}: {err['msg']}"


def load_config(path: str) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    try:
        with open(file_path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_first_error(e)}") from e

    logger.debug(f"Loaded config {path} (fingerprint {cfg.fingerprint()})")
    return cfg


PROFILE_KEYS = {
    "k_iso": ("noise", "k_iso"),
    "r0": ("noise", "r0"),
    "r1": ("noise", "r1"),
    "row0": ("noise", "row0"),
    "row1": ("noise", "row1"),
    "q": ("noise", "quant_step"),
    "bit_depth": ("noise", "bit_depth"),
    "black_level": ("noise", "black_level"),
    "iso_long_min": ("noise", "iso_long_range", 0),
    "iso_long_max": ("noise", "iso_long_range", 1),
    "iso_short_min": ("noise", "iso_short_range", 0),
    "iso_short_max": ("noise", "iso_short_range", 1),
    "wr_min": ("isp", "wr_range", 0),
    "wr_max": ("isp", "wr_range", 1),
    "wb_min": ("isp", "wb_range", 0),
    "wb_max": ("isp", "wb_range", 1),
    "gamma": ("isp", "gamma"),
}


def load_noise_profile(path: str, base: Optional[RunConfig] = None) -> tuple[IspConfig, NoiseParams]:
    """Read a flat ``key = value`` device profile on top of ``base``."""
    base = base or RunConfig()
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Noise profile not found: {path}")
    try:
        with open(file_path, "rb") as f:
            flat = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    sections = {"isp": base.isp.model_dump(), "noise": base.noise.model_dump()}
    for key, value in flat.items():
        target = PROFILE_KEYS.get(key)
        if target is None:
            raise ConfigError(f"{path}: unknown profile key '{key}'")
        if len(target) == 3:
            section, field, idx = target
            pair = list(sections[section][field])
            pair[idx] = value
            sections[section][field] = tuple(pair)
        else:
            section, field = target
            sections[section][field] = value

    try:
        return IspConfig.model_validate(sections["isp"]), NoiseParams.model_validate(sections["noise"])
    except ValidationError as e:
        raise ConfigError(f"{path}: {_first_error(e)}") from e


def config_help() -> str:
    """Every config key with its default, one line each."""
    lines = ["config keys (TOML):", f"  seed = {RunConfig.model_fields['seed'].default}"]
    for section, info in RunConfig.model_fields.items():
        if section == "seed":
            continue
        model = info.annotation
        lines.append(f"  [{section}]")
        for key, field in model.model_fields.items():
            default = field.default
            if isinstance(default, tuple):
                default = list(default)
            desc = f"  # {field.description}" if field.description else ""
            lines.append(f"    {key} = {default!r}{desc}")
    return "\n".join(lines)


class ManifestEntry(BaseModel):
    """One line of a tuple manifest."""
    tuple_id: str
    directory: str
    source: str
    start: int = Field(..., ge=0)
    long_indices: tuple[int, int]
    short_indices: tuple[int, int]
    interp_factor: int = Field(..., ge=1)
    crop: Optional[tuple[int, int, int]] = Field(None, description="(top, left, side) of a selected square")

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "tuple_id", "l", "s", "l_last", "s_first", "source", "start",
        "long", "short", "interp_factor", "crop",
    )

    def path(self, name: str) -> str:
        return str(Path(self.directory) / f"{name}.png")

    def to_fields(self) -> list[str]:
        crop = "-" if self.crop is None else ",".join(str(v) for v in self.crop)
        return [
            self.tuple_id,
            self.path("l"),
            self.path("s"),
            self.path("l_last"),
            self.path("s_first"),
            self.source,
            str(self.start),
            f"{self.long_indices[0]}-{self.long_indices[1]}",
            f"{self.short_indices[0]}-{self.short_indices[1]}",
            str(self.interp_factor),
            crop,
        ]

    @classmethod
    def from_fields(cls, fields: list[str]) -> "ManifestEntry":
        if len(fields) != len(cls.COLUMNS):
            raise ValueError(f"manifest line has {len(fields)} fields, expected {len(cls.COLUMNS)}")
        crop = None if fields[10] == "-" else tuple(int(v) for v in fields[10].split(","))
        return cls(
            tuple_id=fields[0],
            directory=str(Path(fields[1]).parent),
            source=fields[5],
            start=int(fields[6]),
            long_indices=tuple(int(v) for v in fields[7].split("-")),
            short_indices=tuple(int(v) for v in fields[8].split("-")),
            interp_factor=int(fields[9]),
            crop=crop,
        )


class GradCheckEntry(BaseModel):
    """Finite-difference comparison for one input of one op."""
    name: str
    max_rel_error: float
    max_abs_error: float
    kinks: int = Field(0, description="Probed coordinates where one-sided differences disagree")
    passed: bool


class GradCheckReport(BaseModel):
    """Result of gradient_check over all inputs of one op graph."""
    op: str
    h: float
    tol: float
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)


class EvalRow(BaseModel):
    """Metrics of one validation tuple."""
    tuple_id: str
    upscale: int = 1
    psnr: float
    ssim: float
    psnr_input: float = Field(..., description="PSNR of the noisy short input against z")
    stage: Literal["two-phase", "deblur"] = "two-phase"

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)


class EvalReport(BaseModel):
    """Per-image and aggregate metrics of one setting."""
    setting: str = "full"
    rows: list[EvalRow] = Field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    mean_psnr_input: float = 0.0
    stage2_present: bool = True
    fingerprint: str
    model_fingerprint: str
    manifest_hash: str
    metric_domain: str = config.METRIC_DOMAIN
    warnings: list[str] = Field(default_factory=list)
