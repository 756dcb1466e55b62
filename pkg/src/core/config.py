"""Configuration dataclasses and defaults."""

from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any

from core.error_handler import ParameterError

MASK_STYLES = ("dense", "land-sparse", "ocean-sparse")

# NEO-like layer names used by the synthetic generator.
DEFAULT_INPUT_NAMES = (
    "NDVI",
    "SNOWC",
    "LSTD",
    "LSTN",
    "CLD_OT",
    "CLD_RD",
    "CLD_FR",
    "CLD_WP",
    "NO2",
    "OZONE",
    "CHLORA",
    "SST",
)
DEFAULT_OUTPUT_NAMES = ("AOD", "CM", "FIRE", "LAI", "LSTD_AN", "LSTN_AN", "WV")

# Labeled : test : unlabeled months of the original 211-month series.
DEFAULT_SPLIT_RATIO = (119, 30, 62)


class LinkKind(str, Enum):
    """Reference learners available for direct links."""

    LINEAR_PATCH = "linear-patch"
    TINY_CONV = "tiny-conv"


class EnsembleVariant(str, Enum):
    """Ensemble combiners. PLAIN_MEAN is the non-learned baseline without selection."""

    PLAIN_MEAN = "plain-mean"
    S_MEAN = "s-mean"
    S_LR_FW = "s-lr-fw"
    S_NN_DW = "s-nn-dw"
    S_NN_DPW = "s-nn-dpw"
    S_NN_D = "s-nn-d"


@dataclass(frozen=True)
class TrainConfig:
    """Gradient training schedule shared by links, ensembles and the MTE baseline."""

    max_epochs: int = 100
    initial_learning_rate: float = 0.01
    plateau_patience: int = 5
    warmup_epochs_before_scheduling: int = 10
    lr_decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs <= 0:
            raise ParameterError(f"max_epochs must be positive, got {self.max_epochs}")
        if self.initial_learning_rate <= 0:
            raise ParameterError(
                f"initial_learning_rate must be positive, got {self.initial_learning_rate}"
            )
        if self.plateau_patience <= 0:
            raise ParameterError(f"plateau_patience must be positive, got {self.plateau_patience}")
        if self.warmup_epochs_before_scheduling <= 0:
            raise ParameterError(
                "warmup_epochs_before_scheduling must be positive, "
                f"got {self.warmup_epochs_before_scheduling}"
            )
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ParameterError(f"lr_decay_factor must be in (0,1), got {self.lr_decay_factor}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class LinkConfig:
    """Direct-link learner selection and hyperparameters."""

    kind: LinkKind = LinkKind.LINEAR_PATCH
    patch_radius: int = 1  # 3x3 patch
    ridge_lambda: float = 1e-3
    hidden_channels: int = 8  # TinyConvLink feature maps
    train: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LinkKind(self.kind))
        if self.patch_radius < 0:
            raise ParameterError(f"patch_radius must be >= 0, got {self.patch_radius}")
        if self.ridge_lambda < 0:
            raise ParameterError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if self.hidden_channels <= 0:
            raise ParameterError(f"hidden_channels must be positive, got {self.hidden_channels}")


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble variant and its training schedule."""

    variant: EnsembleVariant = EnsembleVariant.S_NN_DW
    include_complex: bool = False
    hidden_units: int = 16  # S-NN_DW weight network
    hidden_channels: int = 8  # S-NN_DPW / S-NN_D convolutions
    train: TrainConfig = TrainConfig(max_epochs=400, initial_learning_rate=0.05)

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", EnsembleVariant(self.variant))
        if self.hidden_units <= 0 or self.hidden_channels <= 0:
            raise ParameterError("ensemble hidden sizes must be positive")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic NEO-like dataset parameters."""

    width: int = 64
    height: int = 32
    months: int = 106
    n_inputs: int = 4
    n_outputs: int = 3
    n_latents: int = 3
    seasonal_period: int = 12
    drift_rate: float = 0.002
    noise_sigma: float = 0.01
    mask_styles: tuple[str, ...] | None = None  # inputs then outputs; None = default pattern
    split_ratio: tuple[int, int, int] = DEFAULT_SPLIT_RATIO
    start_year: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ParameterError(
                f"grid dimensions must be >= 8, got {self.width}x{self.height}"
            )
        if self.seasonal_period < 2:
            raise ParameterError(f"seasonal_period must be >= 2, got {self.seasonal_period}")
        if self.drift_rate < 0:
            raise ParameterError(f"drift_rate must be >= 0, got {self.drift_rate}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_inputs < 1 or self.n_outputs < 1 or self.n_latents < 1:
            raise ParameterError("n_inputs, n_outputs and n_latents must be >= 1")
        if self.months < 3:
            raise ParameterError(f"months must be >= 3, got {self.months}")
        if len(self.split_ratio) != 3 or any(part < 0 for part in self.split_ratio):
            raise ParameterError(
                f"split_ratio must be three non-negative parts, got {self.split_ratio}"
            )
        if self.split_ratio[0] <= 0 or sum(self.split_ratio) <= 0:
            raise ParameterError("split_ratio needs a positive labeled share")
        if self.mask_styles is not None:
            styles = tuple(self.mask_styles)
            object.__setattr__(self, "mask_styles", styles)
            if len(styles) != self.n_inputs + self.n_outputs:
                raise ParameterError(
                    f"mask_styles needs {self.n_inputs + self.n_outputs} entries, got {len(styles)}"
                )
            unknown = [style for style in styles if style not in MASK_STYLES]
            if unknown:
                raise ParameterError(f"unknown mask styles: {unknown}")
        object.__setattr__(self, "split_ratio", tuple(self.split_ratio))

    def layer_mask_styles(self) -> tuple[str, ...]:
        """Mask style per layer, inputs first."""
        if self.mask_styles is not None:
            return self.mask_styles
        input_cycle = ("dense", "land-sparse", "dense", "ocean-sparse")
        output_cycle = ("dense", "dense", "land-sparse")
        inputs = tuple(input_cycle[i % len(input_cycle)] for i in range(self.n_inputs))
        outputs = tuple(output_cycle[i % len(output_cycle)] for i in range(self.n_outputs))
        return inputs + outputs

    def split_counts(self) -> tuple[int, int, int]:
        """Labeled, test and unlabeled month counts, scaled from ``split_ratio``."""
        total = sum(self.split_ratio)
        labeled = max(1, round(self.months * self.split_ratio[0] / total))
        test = round(self.months * self.split_ratio[1] / total)
        labeled = min(labeled, self.months)
        test = min(test, self.months - labeled)
        return labeled, test, self.months - labeled - test


@dataclass(frozen=True)
class RunConfig:
    """One experiment: dataset, run directory, learners, iterations and seeds."""

    dataset: Path
    run_dir: Path
    ensemble: EnsembleConfig = EnsembleConfig()
    link: LinkConfig = LinkConfig()
    iterations: int = 3
    convergence_threshold: float | None = None  # validation ARPI gain to keep iterating; None = off
    validation_fraction: float = 0.2  # tail of S_L used to pick the best edge
    seed: int = 0
    jobs: int = 1
    mte_hidden_channels: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "dataset", Path(self.dataset))
        object.__setattr__(self, "run_dir", Path(self.run_dir))
        if self.iterations < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.convergence_threshold is not None and self.convergence_threshold < 0:
            raise ParameterError("convergence_threshold must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ParameterError("validation_fraction must be in (0,1)")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")
        if self.jobs < 1:
            raise ParameterError(f"jobs must be >= 1, got {self.jobs}")
        if self.mte_hidden_channels <= 0:
            raise ParameterError("mte_hidden_channels must be positive")

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready dictionary (paths and enums as strings)."""
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """Rebuild a RunConfig written by ``to_dict``."""
        try:
            link = dict(data.get("link", {}))
            link["train"] = TrainConfig(**link.get("train", {}))
            ensemble = dict(data.get("ensemble", {}))
            ensemble["train"] = TrainConfig(**ensemble.get("train", {}))
            known = {f.name for f in fields(cls)}
            rest = {k: v for k, v in data.items() if k in known and k not in ("link", "ensemble")}
            return cls(link=LinkConfig(**link), ensemble=EnsembleConfig(**ensemble), **rest)
        except TypeError as e:
            raise ParameterError(f"Invalid run configuration: {e}") from e


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    return value


@dataclass(frozen=True)
class ReportConfig:
    """Evaluation and report-table settings."""

    consistency_window: int = 3
    smoothing_window: int = 12  # months; cancels the seasonal cycle
    bootstrap_resamples: int = 200
    trend_min_points: int = 24


@dataclass(frozen=True)
class AppConfig:
    """Application-wide configuration."""

    app_name: str = "hypergraph-ssl"
    version: str = "0.1.0"

    # Artifact format versions
    grid_format: str = "GRD1"
    manifest_format_version: str = "1.0"
    topology_format_version: str = "1.0"
    model_format_version: str = "1.0"
    pseudolabel_format_version: str = "1.0"
    run_format_version: str = "1.0"

    # Defaults
    link: LinkConfig = LinkConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    synth: SynthConfig = SynthConfig()
    report: ReportConfig = ReportConfig()

    # Logging
    log_level: str = "INFO"  # DEBUG, INFO, WARNING, ERROR
    log_file_name: str = "run.log"


# Global configuration instance
config = AppConfig()
