"""
Unit tests for the masked loss and full-batch training loop.
"""

import math

import pytest
import torch

from core.config import TrainConfig
from core.error_handler import TrainingError, UndefinedObjectiveError
from core.training import masked_mse, train_full_batch


class TestMaskedMSE:
    """Test suite for the masked mean squared error."""

    def test_averages_per_sample_scores(self):
        """Each (sample, channel) pair is scored over its own valid cells, then averaged."""
        pred = torch.zeros(2, 1, 1, 2, dtype=torch.float64)
        target = torch.tensor([[[[1.0, 3.0]]], [[[2.0, 0.0]]]], dtype=torch.float64)
        mask = torch.tensor([[[[True, True]]], [[[True, False]]]])
        # sample 0: (1 + 9) / 2 = 5; sample 1: 4 / 1 = 4
        assert masked_mse(pred, target, mask).item() == pytest.approx(4.5)

    def test_ignores_samples_without_valid_cells(self):
        """Pairs with no valid cell do not dilute the mean."""
        pred = torch.zeros(2, 1, 1, 1, dtype=torch.float64)
        target = torch.tensor([[[[2.0]]], [[[100.0]]]], dtype=torch.float64)
        mask = torch.tensor([[[[True]]], [[[False]]]])
        assert masked_mse(pred, target, mask).item() == pytest.approx(4.0)

    def test_invalid_targets_do_not_leak_nan(self):
        """NaN under the mask does not reach the loss or its gradient."""
        pred = torch.zeros(1, 1, 1, 2, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([[[[1.0, math.nan]]]], dtype=torch.float64)
        mask = torch.tensor([[[[True, False]]]])
        loss = masked_mse(pred, target, mask)
        loss.backward()
        assert math.isfinite(loss.item())
        assert torch.isfinite(pred.grad).all()

    def test_no_valid_cell_raises(self):
        """An empty objective is undefined."""
        pred = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
        with pytest.raises(UndefinedObjectiveError):
            masked_mse(pred, pred, torch.zeros(1, 1, 1, 1, dtype=torch.bool))


class TestTrainFullBatch:
    """Test suite for the Adam training loop with plateau scheduling."""

    def test_converges_on_quadratic(self):
        """A single parameter converges towards the minimum."""
        param = torch.nn.Parameter(torch.tensor([5.0], dtype=torch.float64))
        report = train_full_batch(
            [param],
            lambda: ((param - 2.0) ** 2).sum(),
            TrainConfig(max_epochs=300, initial_learning_rate=0.1),
        )
        assert report.final_loss < 1e-3
        assert report.final_loss <= report.initial_loss
        assert report.epochs == 300

    def test_learning_rate_decays_on_plateau(self):
        """A flat loss halves the learning rate after warmup and patience."""
        param = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        train = TrainConfig(
            max_epochs=30,
            initial_learning_rate=0.1,
            plateau_patience=2,
            warmup_epochs_before_scheduling=5,
        )
        report = train_full_batch([param], lambda: param.sum() * 0.0 + 1.0, train)
        assert report.learning_rates[0] == pytest.approx(0.1)
        assert report.learning_rates[-1] < 0.1

    def test_restores_best_parameters(self):
        """The returned loss never exceeds the initial loss."""
        param = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        report = train_full_batch(
            [param],
            lambda: ((param - 1.0) ** 2).sum(),
            TrainConfig(max_epochs=20, initial_learning_rate=50.0),
        )
        assert report.final_loss <= report.initial_loss
        assert ((param.detach() - 1.0) ** 2).item() == pytest.approx(report.final_loss)

    def test_non_finite_loss_raises(self):
        """A diverged loss is a training failure."""
        param = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        with pytest.raises(TrainingError):
            train_full_batch([param], lambda: param.sum() * math.inf, TrainConfig(max_epochs=3))
