"""Selection-gated ensemble teachers.

An ensemble turns the ordered stack of candidate predictions for one output node into a
single layer. Learned variants multiply every candidate by its gate weight
s_c = sigmoid(alpha_c) before combining; gates and combiner train jointly.
"""

import math
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils import skip_init

from core.config import EnsembleVariant, TrainConfig
from core.error_handler import (
    FormatError,
    ParameterError,
    StructuralError,
    UndefinedObjectiveError,
)
from core.grid import LayerGrid, Volume, stack_targets, stack_volumes
from core.serialization import ModelRecord
from core.training import TrainingReport, masked_mse, train_full_batch
from utils.logger import get_logger
from utils.seeding import torch_generator

logger = get_logger(__name__)

ENSEMBLE_KIND = "ensemble"


class SelectionGate(nn.Module):
    """One learnable alpha per candidate channel; weight s_c = 1 / (1 + exp(-alpha_c))."""

    def __init__(self, channels: int):
        super().__init__()
        self.alphas = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    @property
    def channels(self) -> int:
        return int(self.alphas.shape[0])

    def weights(self) -> torch.Tensor:
        return torch.sigmoid(self.alphas)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """Scale channel c of (N, C, H, W) values by s_c."""
        if values.shape[1] != self.channels:
            raise StructuralError(
                f"gate has {self.channels} alphas but the stack has {values.shape[1]} channels"
            )
        return values * self.weights().view(1, -1, 1, 1)


def gate_apply(gate: SelectionGate, candidates: Volume) -> Volume:
    """
    Scale every candidate by its gate weight; masks are unchanged.

    Raises:
        StructuralError: If the number of alphas differs from the number of candidates
    """
    if len(candidates) != gate.channels:
        raise StructuralError(
            f"gate has {gate.channels} alphas but {len(candidates)} candidates were given"
        )
    with torch.no_grad():
        weights = gate.weights().numpy()
    return Volume(
        channels=tuple(
            LayerGrid(values=grid.values * weights[c], mask=grid.mask)
            for c, grid in enumerate(candidates.channels)
        ),
        names=candidates.names,
    )


def _masked(values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return torch.where(masks, values, torch.zeros((), dtype=values.dtype))


def _linear(in_features: int, out_features: int) -> nn.Linear:
    return skip_init(nn.Linear, in_features, out_features, dtype=torch.float64)


def _conv3x3(in_channels: int, out_channels: int) -> nn.Conv2d:
    return skip_init(
        nn.Conv2d,
        in_channels,
        out_channels,
        kernel_size=3,
        padding=1,
        padding_mode="replicate",
        dtype=torch.float64,
    )


def _uniform_(param: torch.Tensor, bound: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        param.uniform_(-bound, bound, generator=generator)


def _init_layer(layer: nn.Linear | nn.Conv2d, generator: torch.Generator) -> None:
    fan_in = layer.weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    _uniform_(layer.weight, bound, generator)
    _uniform_(layer.bias, bound, generator)


def _init_weight_head(
    layer: nn.Linear | nn.Conv2d, channels: int, generator: torch.Generator, scale: float = 1e-2
) -> None:
    """Near-zero weights and bias 2/C: with gates at 0.5 the start equals the plain mean."""
    _uniform_(layer.weight, scale, generator)
    with torch.no_grad():
        layer.bias.fill_(2.0 / channels)


class _Combiner(nn.Module):
    """Maps candidate values and masks (N, C, H, W) to an unclamped (N, 1, H, W) output."""

    has_gate = True

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        if self.has_gate:
            self.gate = SelectionGate(channels)

    def reset_parameters(self, generator: torch.Generator) -> None:
        if self.has_gate:
            with torch.no_grad():
                self.gate.alphas.zero_()

    def gated(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Gated candidates with invalid cells contributing 0."""
        return self.gate(_masked(values, masks))


class PlainMean(_Combiner):
    has_gate = False

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        counts = masks.sum(dim=1, keepdim=True)
        total = _masked(values, masks).sum(dim=1, keepdim=True)
        return total / counts.clamp(min=1)


class SelectiveMean(_Combiner):
    """Gated weighted mean; the normalizer only counts candidates valid at the pixel."""

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        weights = self.gate.weights().view(1, -1, 1, 1) * masks
        total = (weights * _masked(values, masks)).sum(dim=1, keepdim=True)
        norm = weights.sum(dim=1, keepdim=True)
        return total / torch.where(norm > 0, norm, torch.ones((), dtype=norm.dtype))


class SelectiveLinearFixedWeights(_Combiner):
    """sum_c w_c * s_c * Y_c + b."""

    def __init__(self, channels: int):
        super().__init__(channels)
        self.weight = nn.Parameter(torch.empty(channels, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def reset_parameters(self, generator: torch.Generator) -> None:
        super().reset_parameters(generator)
        with torch.no_grad():
            self.weight.fill_(2.0 / self.channels)
            self.bias.zero_()

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        gated = self.gated(values, masks)
        return (gated * self.weight.view(1, -1, 1, 1)).sum(dim=1, keepdim=True) + self.bias


class SelectiveDynamicWeights(_Combiner):
    """An MLP over per-channel valid mean and variance of the gated stack gives channel weights."""

    def __init__(self, channels: int, hidden_units: int = 16):
        super().__init__(channels)
        self.hidden = _linear(2 * channels, hidden_units)
        self.head = _linear(hidden_units, channels)

    def reset_parameters(self, generator: torch.Generator) -> None:
        super().reset_parameters(generator)
        _init_layer(self.hidden, generator)
        _init_weight_head(self.head, self.channels, generator)

    def channel_statistics(self, gated: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        counts = masks.sum(dim=(2, 3)).clamp(min=1)
        mean = _masked(gated, masks).sum(dim=(2, 3)) / counts
        centered = _masked(gated - mean[:, :, None, None], masks)
        variance = (centered * centered).sum(dim=(2, 3)) / counts
        return torch.cat([mean, variance], dim=1)

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        gated = self.gated(values, masks)
        stats = self.channel_statistics(gated, masks)
        weights = self.head(torch.relu(self.hidden(stats)))
        return (gated * weights[:, :, None, None]).sum(dim=1, keepdim=True)


class SelectiveDynamicPixelWeights(_Combiner):
    """Two convolutions over the gated stack yield one weight map per channel."""

    def __init__(self, channels: int, hidden_channels: int = 8):
        super().__init__(channels)
        self.conv1 = _conv3x3(channels, hidden_channels)
        self.conv2 = _conv3x3(hidden_channels, channels)

    def reset_parameters(self, generator: torch.Generator) -> None:
        super().reset_parameters(generator)
        _init_layer(self.conv1, generator)
        _init_weight_head(self.conv2, self.channels, generator)

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        gated = self.gated(values, masks)
        weights = self.conv2(torch.relu(self.conv1(gated)))
        return (gated * weights).sum(dim=1, keepdim=True)


class SelectiveDirect(_Combiner):
    """Two convolutions map the gated stack straight to the output layer."""

    def __init__(self, channels: int, hidden_channels: int = 8):
        super().__init__(channels)
        self.conv1 = _conv3x3(channels, hidden_channels)
        self.conv2 = _conv3x3(hidden_channels, 1)

    def reset_parameters(self, generator: torch.Generator) -> None:
        super().reset_parameters(generator)
        _init_layer(self.conv1, generator)
        _init_layer(self.conv2, generator)

    def forward(self, values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(self.gated(values, masks))))


def _build_combiner(
    variant: EnsembleVariant, channels: int, hidden_units: int, hidden_channels: int
) -> _Combiner:
    if variant is EnsembleVariant.PLAIN_MEAN:
        return PlainMean(channels)
    if variant is EnsembleVariant.S_MEAN:
        return SelectiveMean(channels)
    if variant is EnsembleVariant.S_LR_FW:
        return SelectiveLinearFixedWeights(channels)
    if variant is EnsembleVariant.S_NN_DW:
        return SelectiveDynamicWeights(channels, hidden_units)
    if variant is EnsembleVariant.S_NN_DPW:
        return SelectiveDynamicPixelWeights(channels, hidden_channels)
    return SelectiveDirect(channels, hidden_channels)


class EnsembleModel:
    """A combiner bound to the candidate order it was built for."""

    def __init__(
        self,
        variant: EnsembleVariant | str,
        channels: Sequence[str],
        hidden_units: int = 16,
        hidden_channels: int = 8,
        seed: int = 0,
    ):
        self.variant = EnsembleVariant(variant)
        self.channels = tuple(channels)
        if not self.channels:
            raise StructuralError("an ensemble needs at least one candidate")
        if hidden_units <= 0 or hidden_channels <= 0:
            raise ParameterError("ensemble hidden sizes must be positive")
        self.hidden_units = hidden_units
        self.hidden_channels = hidden_channels
        self.net = _build_combiner(self.variant, len(self.channels), hidden_units, hidden_channels)
        self.reset_parameters(seed)
        self.is_fitted = self.variant is EnsembleVariant.PLAIN_MEAN

    @property
    def gate(self) -> SelectionGate | None:
        return self.net.gate if self.net.has_gate else None

    def reset_parameters(self, seed: int) -> None:
        self.net.reset_parameters(torch_generator(seed))

    def gate_weights(self) -> np.ndarray | None:
        gate = self.gate
        if gate is None:
            return None
        with torch.no_grad():
            return gate.weights().numpy().copy()

    def parameter_tensors(self) -> list[torch.Tensor]:
        return list(self.net.parameters())

    def _tensors(self, stacks: Sequence[Volume]) -> tuple[torch.Tensor, torch.Tensor]:
        for stack in stacks:
            if stack.names != self.channels:
                raise StructuralError(
                    f"candidate order mismatch: expected {list(self.channels)}, "
                    f"got {list(stack.names)}"
                )
        return stack_volumes(stacks)

    def forward_many(self, stacks: Sequence[Volume]) -> list[LayerGrid]:
        if not stacks:
            return []
        values, masks = self._tensors(stacks)
        with torch.no_grad():
            out = self.net(values, masks).clamp(0.0, 1.0)
        out_masks = masks.any(dim=1)
        zero = torch.zeros((), dtype=out.dtype)
        return [
            LayerGrid(
                values=torch.where(out_masks[n], out[n, 0], zero).numpy(),
                mask=out_masks[n].numpy(),
            )
            for n in range(len(stacks))
        ]

    def forward(self, candidates: Volume) -> LayerGrid:
        """Clamped teacher output; a cell is valid when at least one candidate is valid there."""
        return self.forward_many([candidates])[0]

    def sample_loss(self, volume: Volume, target: LayerGrid) -> torch.Tensor:
        values, masks = self._tensors([volume])
        target_values, target_masks = stack_targets([target])
        return masked_mse(self.net(values, masks), target_values, target_masks)

    def training_loss(self, stacks: Sequence[Volume], targets: Sequence[LayerGrid]) -> float:
        """Masked L2 of the unclamped output over the stacks."""
        values, masks = self._tensors(stacks)
        target_values, target_masks = stack_targets(targets)
        with torch.no_grad():
            return float(masked_mse(self.net(values, masks), target_values, target_masks))

    def to_record(self) -> ModelRecord:
        return ModelRecord(
            kind=ENSEMBLE_KIND,
            hyperparameters={
                "variant": self.variant.value,
                "hidden_units": self.hidden_units,
                "hidden_channels": self.hidden_channels,
            },
            channels=self.channels,
            parameters={
                name: param.detach().numpy().copy() for name, param in self.net.named_parameters()
            },
        )

    @classmethod
    def from_record(cls, record: ModelRecord) -> "EnsembleModel":
        if record.kind != ENSEMBLE_KIND:
            raise FormatError(f"expected an ensemble record, got {record.kind!r}")
        model = cls(channels=record.channels, **_record_kwargs(record.hyperparameters))
        named = dict(model.net.named_parameters())
        if set(named) != set(record.parameters):
            raise FormatError(
                f"ensemble parameters {sorted(record.parameters)} do not match {sorted(named)}"
            )
        with torch.no_grad():
            for name, param in named.items():
                array = record.parameters[name]
                if tuple(array.shape) != tuple(param.shape):
                    raise FormatError(f"parameter {name} has shape {array.shape}")
                param.copy_(torch.from_numpy(array))
        model.is_fitted = True
        return model


def _record_kwargs(hyperparameters: dict[str, Any]) -> dict[str, Any]:
    return {
        "variant": hyperparameters["variant"],
        "hidden_units": int(hyperparameters["hidden_units"]),
        "hidden_channels": int(hyperparameters["hidden_channels"]),
    }


def ensemble_forward(model: EnsembleModel, candidates: Volume) -> LayerGrid:
    return model.forward(candidates)


def fit_ensemble(
    variant: EnsembleVariant | str,
    candidate_stacks: Sequence[Volume],
    targets: Sequence[LayerGrid],
    train: TrainConfig,
    hidden_units: int = 16,
    hidden_channels: int = 8,
) -> tuple[EnsembleModel, TrainingReport]:
    """
    Fit gate and combiner end-to-end on labeled candidate stacks.

    Args:
        variant: Combiner variant
        candidate_stacks: One candidate stack per labeled timestamp, all in the same order
        targets: Ground truth aligned with the stacks
        train: Schedule; ``train.seed`` initializes the parameters
        hidden_units: Width of the S-NN_DW weight network
        hidden_channels: Feature maps of the S-NN_DPW / S-NN_D convolutions

    Returns:
        The fitted model and its training report

    Raises:
        UndefinedObjectiveError: On an empty labeled set or all-invalid targets
        StructuralError: On misaligned stacks and targets
    """
    if not candidate_stacks:
        raise UndefinedObjectiveError("cannot fit an ensemble on an empty labeled set")
    if len(candidate_stacks) != len(targets):
        raise StructuralError(
            f"{len(candidate_stacks)} candidate stacks but {len(targets)} targets"
        )
    model = EnsembleModel(
        variant,
        candidate_stacks[0].names,
        hidden_units=hidden_units,
        hidden_channels=hidden_channels,
        seed=train.seed,
    )
    values, masks = model._tensors(candidate_stacks)
    target_values, target_masks = stack_targets(targets)
    if not bool(target_masks.any()):
        raise UndefinedObjectiveError("every ensemble target is entirely invalid")

    def loss_fn() -> torch.Tensor:
        return masked_mse(model.net(values, masks), target_values, target_masks)

    parameters = model.parameter_tensors()
    if not parameters:
        with torch.no_grad():
            report = TrainingReport(final_loss=float(loss_fn()), closed_form=True)
    else:
        if isinstance(model.net, SelectiveDirect):
            with torch.no_grad():
                model.net.conv2.bias.fill_(float(target_values[target_masks].mean()))
        report = train_full_batch(parameters, loss_fn, train)
    model.is_fitted = True
    logger.debug(
        f"Fitted {model.variant.value} ensemble over {len(model.channels)} candidates, "
        f"final loss {report.final_loss:.6g}"
    )
    return model, report
