"""Full-batch gradient training shared by links, ensembles and the MTE baseline."""

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau

from core.config import TrainConfig
from core.error_handler import TrainingError, UndefinedObjectiveError


@dataclass
class TrainingReport:
    """Outcome of one fit.

    Attributes:
        epoch_losses: Training loss at the start of each epoch
        learning_rates: Learning rate in effect after each epoch
        final_loss: Loss of the returned parameters
        closed_form: True when the fit was solved directly (no epochs)
    """

    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    final_loss: float = math.nan
    closed_form: bool = False

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0] if self.epoch_losses else self.final_loss

    @property
    def epochs(self) -> int:
        return len(self.epoch_losses)


def masked_mse(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """
    Mean over samples of the per-sample masked L2.

    Args:
        pred: (N, K, H, W) predictions
        target: (N, K, H, W) targets; values under ``mask == False`` are never read
        mask: (N, K, H, W) bool validity

    Returns:
        Scalar tensor: average of per-(sample, channel) masked L2 over pairs with a valid cell

    Raises:
        UndefinedObjectiveError: If no pair has a valid cell
    """
    diff = torch.where(mask, pred - target, torch.zeros((), dtype=pred.dtype))
    counts = mask.sum(dim=(2, 3))
    present = counts > 0
    if not bool(present.any()):
        raise UndefinedObjectiveError("no valid target cell in any training sample")
    per_pair = (diff * diff).sum(dim=(2, 3)) / counts.clamp(min=1)
    return per_pair[present].mean()


def train_full_batch(
    parameters: Sequence[torch.nn.Parameter],
    loss_fn: Callable[[], torch.Tensor],
    train: TrainConfig,
) -> TrainingReport:
    """
    Adam on the full dataset each epoch with plateau halving after the warmup epochs.

    The parameters with the lowest observed loss are restored at the end, so the
    returned loss never exceeds the initial one.

    Raises:
        TrainingError: If the loss becomes non-finite
    """
    parameters = list(parameters)
    optimizer = torch.optim.Adam(parameters, lr=train.initial_learning_rate)
    scheduler = ReduceLROnPlateau(
        optimizer,
        mode="min",
        factor=train.lr_decay_factor,
        patience=train.plateau_patience,
    )
    report = TrainingReport()
    best_loss = math.inf
    best_state = [p.detach().clone() for p in parameters]

    for epoch in range(train.max_epochs):
        optimizer.zero_grad()
        loss = loss_fn()
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        report.epoch_losses.append(value)
        if value < best_loss:
            best_loss = value
            best_state = [p.detach().clone() for p in parameters]
        loss.backward()
        optimizer.step()
        if epoch + 1 >= train.warmup_epochs_before_scheduling:
            scheduler.step(value)
        report.learning_rates.append(float(optimizer.param_groups[0]["lr"]))

    with torch.no_grad():
        value = float(loss_fn().item())
    if math.isfinite(value) and value < best_loss:
        best_loss = value
        best_state = [p.detach().clone() for p in parameters]

    with torch.no_grad():
        for param, state in zip(parameters, best_state):
            param.copy_(state)
    report.final_loss = best_loss
    return report
