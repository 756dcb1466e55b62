"""Direct neural links: the LinkModel contract, reference learners and the MTE baseline.

Every learner maps a multi-channel Volume to one LayerGrid. Invalid input cells are
replaced by the channel's valid mean before the model sees them, borders use
replicate padding, and predictions are clamped to [0, 1].
"""

import hashlib
import math
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, ClassVar, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import skip_init

from core.config import LinkConfig, LinkKind, TrainConfig
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

Sample = tuple[Volume, LayerGrid]


def substitute_invalid(values: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Replace invalid cells by the valid mean of their (sample, channel); 0 when none is valid."""
    zero = torch.zeros((), dtype=values.dtype)
    counts = masks.sum(dim=(2, 3), keepdim=True)
    sums = torch.where(masks, values, zero).sum(dim=(2, 3), keepdim=True)
    means = torch.where(counts > 0, sums / counts.clamp(min=1), zero)
    return torch.where(masks, values, means)


def receptive_mask(masks: torch.Tensor, radius: int) -> torch.Tensor:
    """
    Output validity: cells whose replicate-padded receptive field holds only valid inputs.

    Args:
        masks: (N, C, H, W) bool input masks
        radius: Receptive field radius in cells

    Returns:
        (N, 1, H, W) bool
    """
    all_valid = masks.all(dim=1, keepdim=True)
    if radius == 0:
        return all_valid
    invalid = (~all_valid).to(torch.float64)
    padded = F.pad(invalid, (radius, radius, radius, radius), mode="replicate")
    pooled = F.max_pool2d(padded, kernel_size=2 * radius + 1, stride=1)
    return pooled == 0


def _init_uniform_(param: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        param.uniform_(-bound, bound, generator=generator)


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


def _reset_convs(convs: Sequence[nn.Conv2d], generator: torch.Generator) -> None:
    for conv in convs:
        fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
        _init_uniform_(conv.weight, fan_in, generator)
        _init_uniform_(conv.bias, fan_in, generator)


def _hash_tensors(tensors: Sequence[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for tensor in tensors:
        digest.update(tensor.detach().contiguous().numpy().astype("<f8").tobytes())
    return digest.hexdigest()


class LinkModel(ABC):
    """A learnable map from a fixed-order multi-channel volume to one output layer."""

    kind: ClassVar[str]

    def __init__(self, channels: Sequence[str]):
        """
        Args:
            channels: Input channel names; their order is part of the model identity
        """
        self.channels = tuple(channels)
        if not self.channels:
            raise ParameterError("a link needs at least one input channel")
        self.is_fitted = False

    @property
    def input_channel_count(self) -> int:
        return len(self.channels)

    @property
    @abstractmethod
    def receptive_radius(self) -> int:
        """Cells of context on each side of an output cell."""

    @abstractmethod
    def forward_tensor(self, inputs: torch.Tensor) -> torch.Tensor:
        """Unclamped prediction for substituted inputs (N, C, H, W) -> (N, 1, H, W)."""

    @abstractmethod
    def parameter_tensors(self) -> list[torch.Tensor]:
        """Trainable parameters in a fixed order."""

    @abstractmethod
    def hyperparameters(self) -> dict[str, Any]:
        """JSON-ready learner settings."""

    @abstractmethod
    def _fit(
        self,
        inputs: torch.Tensor,
        targets: torch.Tensor,
        target_masks: torch.Tensor,
        train: TrainConfig,
    ) -> TrainingReport:
        """Fit on substituted inputs; targets are only read under their masks."""

    def _check_volume(self, volume: Volume) -> None:
        if len(volume) != self.input_channel_count:
            raise StructuralError(
                f"{self.kind} link expects {self.input_channel_count} channels, got {len(volume)}"
            )
        if volume.names != self.channels:
            raise StructuralError(
                f"channel order mismatch: expected {list(self.channels)}, got {list(volume.names)}"
            )

    def _prepare(self, volumes: Sequence[Volume]) -> tuple[torch.Tensor, torch.Tensor]:
        for volume in volumes:
            self._check_volume(volume)
        values, masks = stack_volumes(volumes)
        return substitute_invalid(values, masks), masks

    def fit(self, samples: Sequence[Sample], train: TrainConfig) -> TrainingReport:
        """
        Minimize the mean masked L2 over the samples.

        Raises:
            UndefinedObjectiveError: If there is no sample or no valid target cell
            StructuralError: On channel or dimension mismatches
        """
        if not samples:
            raise UndefinedObjectiveError("cannot fit a link without samples")
        volumes = [volume for volume, _ in samples]
        targets = [target for _, target in samples]
        for volume, target in samples:
            if volume.shape != target.shape:
                raise StructuralError(
                    f"input shape {volume.shape} differs from target shape {target.shape}"
                )
        if not any(target.mask.any() for target in targets):
            raise UndefinedObjectiveError("every training target is entirely invalid")

        inputs, _ = self._prepare(volumes)
        target_values, target_masks = stack_targets(targets)
        report = self._fit(inputs, target_values, target_masks, train)
        self.is_fitted = True
        logger.debug(
            f"Fitted {self.kind} link on {len(samples)} samples, final loss {report.final_loss:.6g}"
        )
        return report

    def predict_many(self, volumes: Sequence[Volume]) -> list[LayerGrid]:
        """Batch prediction; see ``predict``."""
        if not volumes:
            return []
        inputs, masks = self._prepare(volumes)
        with torch.no_grad():
            out = self.forward_tensor(inputs).clamp(0.0, 1.0)
        out_masks = receptive_mask(masks, self.receptive_radius)
        return [
            LayerGrid(values=out[n, 0].numpy(), mask=out_masks[n, 0].numpy())
            for n in range(len(volumes))
        ]

    def predict(self, volume: Volume) -> LayerGrid:
        """
        Deterministic prediction clamped to [0, 1].

        The output mask holds the cells whose receptive field has only valid inputs;
        values are defined everywhere thanks to mean substitution.
        """
        return self.predict_many([volume])[0]

    def sample_loss(self, volume: Volume, target: LayerGrid) -> torch.Tensor:
        """Differentiable masked L2 of the unclamped prediction on one sample."""
        inputs, _ = self._prepare([volume])
        target_values, target_masks = stack_targets([target])
        return masked_mse(self.forward_tensor(inputs), target_values, target_masks)

    def parameter_hash(self) -> str:
        return _hash_tensors(self.parameter_tensors())

    def to_record(self) -> ModelRecord:
        return ModelRecord(
            kind=self.kind,
            hyperparameters=self.hyperparameters(),
            channels=self.channels,
            parameters={
                f"p{i}": tensor.detach().numpy().copy()
                for i, tensor in enumerate(self.parameter_tensors())
            },
        )

    def load_parameters(self, parameters: dict[str, np.ndarray]) -> None:
        tensors = self.parameter_tensors()
        if len(parameters) != len(tensors):
            raise FormatError(f"{self.kind} link expects {len(tensors)} parameter arrays")
        with torch.no_grad():
            for i, tensor in enumerate(tensors):
                array = parameters[f"p{i}"]
                if tuple(array.shape) != tuple(tensor.shape):
                    raise FormatError(
                        f"parameter p{i} has shape {array.shape}, expected {tuple(tensor.shape)}"
                    )
                tensor.copy_(torch.from_numpy(array))
        self.is_fitted = True


class LinearPatchLink(LinkModel):
    """Ridge regression on the (2r+1)x(2r+1) neighbourhood of every input channel.

    Fitted in closed form. Rows of each sample are weighted by mean_count / count so the
    objective is the mean per-sample masked L2 (scaled to squared-error units) plus
    ``ridge_lambda`` times the squared weights; the bias is not penalized.
    """

    kind = LinkKind.LINEAR_PATCH.value

    def __init__(self, channels: Sequence[str], patch_radius: int = 1, ridge_lambda: float = 1e-3):
        super().__init__(channels)
        if patch_radius < 0:
            raise ParameterError(f"patch_radius must be >= 0, got {patch_radius}")
        if ridge_lambda < 0:
            raise ParameterError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
        self.patch_radius = patch_radius
        self.ridge_lambda = ridge_lambda
        size = 2 * patch_radius + 1
        self.weight = torch.zeros(1, self.input_channel_count, size, size, dtype=torch.float64)
        self.bias = torch.zeros(1, dtype=torch.float64)

    @property
    def receptive_radius(self) -> int:
        return self.patch_radius

    @property
    def feature_count(self) -> int:
        size = 2 * self.patch_radius + 1
        return self.input_channel_count * size * size + 1

    def hyperparameters(self) -> dict[str, Any]:
        return {"patch_radius": self.patch_radius, "ridge_lambda": self.ridge_lambda}

    def parameter_tensors(self) -> list[torch.Tensor]:
        return [self.weight, self.bias]

    def _padded(self, inputs: torch.Tensor) -> torch.Tensor:
        r = self.patch_radius
        return F.pad(inputs, (r, r, r, r), mode="replicate") if r else inputs

    def forward_tensor(self, inputs: torch.Tensor) -> torch.Tensor:
        return F.conv2d(self._padded(inputs), self.weight, self.bias)

    def patch_features(self, inputs: torch.Tensor) -> torch.Tensor:
        """(N, C, H, W) -> (N, H*W, C*k*k + 1) design rows with a trailing bias column."""
        size = 2 * self.patch_radius + 1
        cols = F.unfold(self._padded(inputs), kernel_size=size).transpose(1, 2)
        ones = torch.ones(cols.shape[0], cols.shape[1], 1, dtype=cols.dtype)
        return torch.cat([cols, ones], dim=2)

    def _fit(
        self,
        inputs: torch.Tensor,
        targets: torch.Tensor,
        target_masks: torch.Tensor,
        train: TrainConfig,
    ) -> TrainingReport:
        n_features = self.feature_count
        gram = torch.zeros(n_features, n_features, dtype=torch.float64)
        moment = torch.zeros(n_features, dtype=torch.float64)
        counts = target_masks.sum(dim=(1, 2, 3))
        mean_count = counts[counts > 0].to(torch.float64).mean()

        for n in range(inputs.shape[0]):
            if int(counts[n]) == 0:
                continue
            valid = target_masks[n, 0].reshape(-1)
            rows = self.patch_features(inputs[n : n + 1])[0][valid]
            y = targets[n, 0].reshape(-1)[valid]
            weight = mean_count / counts[n]
            gram += weight * (rows.T @ rows)
            moment += weight * (rows.T @ y)

        penalty = torch.full((n_features,), self.ridge_lambda, dtype=torch.float64)
        penalty[-1] = 0.0
        system = gram + torch.diag(penalty)
        try:
            solution = torch.linalg.solve(system, moment)
        except RuntimeError:
            logger.warning("Singular ridge system; falling back to least squares")
            solution = torch.linalg.lstsq(system, moment.unsqueeze(1)).solution.squeeze(1)

        size = 2 * self.patch_radius + 1
        self.weight = solution[:-1].reshape(1, self.input_channel_count, size, size).clone()
        self.bias = solution[-1:].clone()
        with torch.no_grad():
            loss = masked_mse(self.forward_tensor(inputs), targets, target_masks)
        return TrainingReport(final_loss=float(loss.item()), closed_form=True)


class _TinyConvNet(nn.Module):
    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.conv1 = _conv3x3(in_channels, hidden_channels)
        self.conv2 = _conv3x3(hidden_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(x)))


class TinyConvLink(LinkModel):
    """Two 3x3 convolutions with a ReLU between, trained with Adam on masked L2."""

    kind = LinkKind.TINY_CONV.value

    def __init__(self, channels: Sequence[str], hidden_channels: int = 8, seed: int = 0):
        super().__init__(channels)
        if hidden_channels <= 0:
            raise ParameterError(f"hidden_channels must be positive, got {hidden_channels}")
        self.hidden_channels = hidden_channels
        self.net = _TinyConvNet(self.input_channel_count, hidden_channels)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        _reset_convs([self.net.conv1, self.net.conv2], torch_generator(seed))

    @property
    def receptive_radius(self) -> int:
        return 2

    def hyperparameters(self) -> dict[str, Any]:
        return {"hidden_channels": self.hidden_channels}

    def parameter_tensors(self) -> list[torch.Tensor]:
        return list(self.net.parameters())

    def forward_tensor(self, inputs: torch.Tensor) -> torch.Tensor:
        return self.net(inputs)

    def _fit(
        self,
        inputs: torch.Tensor,
        targets: torch.Tensor,
        target_masks: torch.Tensor,
        train: TrainConfig,
    ) -> TrainingReport:
        self.reset_parameters(train.seed)
        with torch.no_grad():
            self.net.conv2.bias.fill_(float(targets[target_masks].mean()))
        return train_full_batch(
            list(self.net.parameters()),
            lambda: masked_mse(self.net(inputs), targets, target_masks),
            train,
        )


LINK_CLASSES: dict[str, type[LinkModel]] = {
    LinearPatchLink.kind: LinearPatchLink,
    TinyConvLink.kind: TinyConvLink,
}


def make_link(channels: Sequence[str], link_config: LinkConfig, seed: int = 0) -> LinkModel:
    """Create an untrained link of the configured kind."""
    if link_config.kind is LinkKind.LINEAR_PATCH:
        return LinearPatchLink(channels, link_config.patch_radius, link_config.ridge_lambda)
    return TinyConvLink(channels, link_config.hidden_channels, seed=seed)


def link_from_record(record: ModelRecord) -> LinkModel:
    """Rebuild a trained link from its serialized record."""
    if record.kind not in LINK_CLASSES:
        raise FormatError(f"unknown link kind {record.kind!r}")
    link = LINK_CLASSES[record.kind](record.channels, **record.hyperparameters)
    link.load_parameters(record.parameters)
    return link


def fit_link(
    model: LinkModel, samples: Sequence[Sample], train: TrainConfig
) -> tuple[LinkModel, TrainingReport]:
    """Train ``model`` in place on the samples and return it with its report."""
    report = model.fit(samples, train)
    return model, report


def predict_link(model: LinkModel, volume: Volume) -> LayerGrid:
    return model.predict(volume)


class Differentiable(Protocol):
    """Models whose masked-L2 gradients can be checked against finite differences."""

    def parameter_tensors(self) -> list[torch.Tensor]: ...

    def sample_loss(self, volume: Volume, target: LayerGrid) -> torch.Tensor: ...


@dataclass(frozen=True)
class GradientCheckResult:
    """Finite-difference comparison over a sample of parameters."""

    max_relative_error: float
    gradient_norm: float
    checked: int


def gradient_check(
    model: Differentiable,
    sample: tuple[Volume, LayerGrid],
    n_params: int = 50,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-8,
    refine_below: float = 1e-6,
) -> GradientCheckResult:
    """
    Compare autograd gradients of the masked L2 loss with central finite differences.

    Args:
        model: Link or ensemble exposing ``parameter_tensors`` and ``sample_loss``
        sample: (input volume or candidate stack, target)
        n_params: Number of scalar parameters sampled (all of them if fewer exist)
        step: Finite-difference step
        seed: Sampling seed
        floor: Lower bound of the relative-error denominator
        refine_below: Relative error above which a parameter is re-checked at step / 100

    Returns:
        Max relative error |analytic - numeric| / max(|analytic|, |numeric|, floor),
        the analytic gradient norm and the number of parameters checked
    """
    volume, target = sample
    params = [p for p in model.parameter_tensors()]
    leaves = []
    for p in params:
        if not p.requires_grad:
            p.requires_grad_(True)
            leaves.append(p)
    try:
        loss = model.sample_loss(volume, target)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    finally:
        for p in leaves:
            p.requires_grad_(False)
    grads = tuple(
        torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)
    )
    gradient_norm = float(torch.sqrt(sum((g * g).sum() for g in grads)).item())

    positions = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = random.Random(seed)
    chosen = positions if len(positions) <= n_params else rng.sample(positions, n_params)

    def central_difference(flat: torch.Tensor, j: int, h: float) -> float:
        original = float(flat[j])
        flat[j] = original + h
        plus = float(model.sample_loss(volume, target))
        flat[j] = original - h
        minus = float(model.sample_loss(volume, target))
        flat[j] = original
        return (plus - minus) / (2 * h)

    def relative_error(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)

    max_error = 0.0
    with torch.no_grad():
        for i, j in chosen:
            flat = params[i].view(-1)
            analytic = float(grads[i].view(-1)[j])
            error = relative_error(analytic, central_difference(flat, j, step))
            if error > refine_below:
                # A ReLU kink inside [-step, step] biases the estimate; retry finer.
                finer = central_difference(flat, j, step / 100)
                error = min(error, relative_error(analytic, finer))
            max_error = max(max_error, error)

    return GradientCheckResult(
        max_relative_error=max_error, gradient_norm=gradient_norm, checked=len(chosen)
    )


class _MTENet(nn.Module):
    def __init__(self, in_channels: int, hidden_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = _conv3x3(in_channels, hidden_channels)
        self.conv2 = _conv3x3(hidden_channels, hidden_channels)
        self.conv3 = _conv3x3(hidden_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv3(torch.relu(self.conv2(torch.relu(self.conv1(x)))))


class MTEBaseline:
    """Monolithic multi-task baseline: all input channels to all output channels jointly."""

    kind = "mte"
    receptive_radius = 3

    def __init__(
        self,
        channels: Sequence[str],
        outputs: Sequence[str],
        hidden_channels: int = 16,
        seed: int = 0,
    ):
        self.channels = tuple(channels)
        self.outputs = tuple(outputs)
        if not self.channels or not self.outputs:
            raise ParameterError("MTE needs input and output channels")
        if hidden_channels <= 0:
            raise ParameterError(f"hidden_channels must be positive, got {hidden_channels}")
        self.hidden_channels = hidden_channels
        self.net = _MTENet(len(self.channels), hidden_channels, len(self.outputs))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        _reset_convs([self.net.conv1, self.net.conv2, self.net.conv3], torch_generator(seed))

    def parameter_tensors(self) -> list[torch.Tensor]:
        return list(self.net.parameters())

    def parameter_hash(self) -> str:
        return _hash_tensors(self.parameter_tensors())

    def _prepare(self, volumes: Sequence[Volume]) -> tuple[torch.Tensor, torch.Tensor]:
        for volume in volumes:
            if volume.names != self.channels:
                raise StructuralError(
                    f"MTE expects channels {list(self.channels)}, got {list(volume.names)}"
                )
        values, masks = stack_volumes(volumes)
        return substitute_invalid(values, masks), masks

    def _stack_targets(
        self, targets: Sequence[Sequence[LayerGrid | None]], shape: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        values = np.zeros((len(targets), len(self.outputs)) + shape)
        masks = np.zeros((len(targets), len(self.outputs)) + shape, dtype=bool)
        for n, row in enumerate(targets):
            if len(row) != len(self.outputs):
                raise StructuralError(
                    f"MTE expects {len(self.outputs)} targets per sample, got {len(row)}"
                )
            for k, grid in enumerate(row):
                if grid is None:
                    continue
                values[n, k] = grid.values
                masks[n, k] = grid.mask
        return torch.from_numpy(values), torch.from_numpy(masks)

    def fit(
        self,
        samples: Sequence[tuple[Volume, Sequence[LayerGrid | None]]],
        train: TrainConfig,
    ) -> TrainingReport:
        """
        Train from scratch on samples whose per-output targets may be missing (None).

        Raises:
            UndefinedObjectiveError: If no target cell is valid
        """
        if not samples:
            raise UndefinedObjectiveError("cannot fit the MTE baseline without samples")
        inputs, _ = self._prepare([volume for volume, _ in samples])
        shape = samples[0][0].shape
        targets, masks = self._stack_targets([row for _, row in samples], shape)
        if not bool(masks.any()):
            raise UndefinedObjectiveError("every MTE training target is entirely invalid")

        self.reset_parameters(train.seed)
        with torch.no_grad():
            for k in range(len(self.outputs)):
                if bool(masks[:, k].any()):
                    self.net.conv3.bias[k] = targets[:, k][masks[:, k]].mean()
        report = train_full_batch(
            list(self.net.parameters()),
            lambda: masked_mse(self.net(inputs), targets, masks),
            train,
        )
        logger.debug(f"Fitted MTE baseline, final loss {report.final_loss:.6g}")
        return report

    def predict(self, volume: Volume) -> tuple[LayerGrid, ...]:
        """One clamped grid per output, in output order."""
        inputs, masks = self._prepare([volume])
        with torch.no_grad():
            out = self.net(inputs).clamp(0.0, 1.0)
        out_mask = receptive_mask(masks, self.receptive_radius)[0, 0].numpy()
        return tuple(
            LayerGrid(values=out[0, k].numpy(), mask=out_mask) for k in range(len(self.outputs))
        )

    def with_seed(self, seed: int) -> "MTEBaseline":
        return MTEBaseline(self.channels, self.outputs, self.hidden_channels, seed)


def train_for_link(train: TrainConfig, seed: int) -> TrainConfig:
    """Copy of ``train`` carrying the link's derived seed."""
    return replace(train, seed=seed)
