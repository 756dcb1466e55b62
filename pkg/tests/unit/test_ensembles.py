"""
Unit tests for selection gates, ensemble variants and ensemble fitting.
"""

import numpy as np
import pytest
import torch

from core.config import EnsembleVariant, TrainConfig
from core.error_handler import FormatError, StructuralError, UndefinedObjectiveError
from core.grid import LayerGrid, Volume, masked_l2
from core.ensembles import (
    EnsembleModel,
    SelectionGate,
    ensemble_forward,
    fit_ensemble,
    gate_apply,
)
from core.links import gradient_check
from core.serialization import ModelRecord
from fixtures.grid_data import grid, random_grid


def _stack(*grids: LayerGrid) -> Volume:
    return Volume(grids, tuple(f"link:c{i}" for i in range(len(grids))))


def _set_alphas(model: EnsembleModel, alphas: list[float]) -> None:
    with torch.no_grad():
        model.gate.alphas.copy_(torch.tensor(alphas, dtype=torch.float64))


class TestSelectionGate:
    """Test suite for per-candidate gate weights."""

    def test_zero_alpha_halves(self):
        """alpha = 0 gives weight 0.5."""
        gated = gate_apply(SelectionGate(2), _stack(grid([[1.0]]), grid([[0.4]])))
        assert gated.channels[0].values[0, 0] == pytest.approx(0.5)
        assert gated.channels[1].values[0, 0] == pytest.approx(0.2)

    def test_saturated_gates(self):
        """Large alphas pass a channel through; large negative ones silence it."""
        gate = SelectionGate(2)
        with torch.no_grad():
            gate.alphas.copy_(torch.tensor([20.0, -20.0], dtype=torch.float64))
        gated = gate_apply(gate, _stack(grid([[1.0]]), grid([[1.0]])))
        assert gated.channels[0].values[0, 0] == pytest.approx(1.0, abs=1e-8)
        assert gated.channels[1].values[0, 0] < 1e-8

    def test_masks_unchanged(self):
        """Gating leaves validity alone."""
        gated = gate_apply(SelectionGate(1), _stack(grid([[1.0, 2.0]], mask=[[True, False]])))
        assert gated.channels[0].mask.tolist() == [[True, False]]

    def test_size_mismatch(self):
        """Alpha count must match the candidate count."""
        with pytest.raises(StructuralError):
            gate_apply(SelectionGate(3), _stack(grid([[1.0]])))


class TestEnsembleForward:
    """Test suite for the forward pass of every variant."""

    def test_plain_mean_of_identical_candidates(self, rng):
        """Averaging equal grids returns the grid."""
        g = random_grid(rng)
        model = EnsembleModel(EnsembleVariant.PLAIN_MEAN, ("link:c0", "link:c1", "link:c2"))
        assert ensemble_forward(model, _stack(g, g, g)).equals(g)
        assert model.gate is None
        assert model.is_fitted

    def test_plain_mean_uses_valid_candidates_only(self):
        """Invalid candidates drop out; a cell with no valid candidate is invalid."""
        a = grid([[0.2, 0.9, 0.5]], mask=[[True, False, False]])
        b = grid([[0.4, 0.3, 0.5]], mask=[[True, True, False]])
        out = ensemble_forward(EnsembleModel("plain-mean", ("link:c0", "link:c1")), _stack(a, b))
        assert out.values[0, 0] == pytest.approx(0.3)
        assert out.values[0, 1] == pytest.approx(0.3)
        assert out.mask.tolist() == [[True, True, False]]

    def test_selective_mean_with_uniform_gates_is_plain_mean(self, rng):
        """Uniform gates cancel in the normalization."""
        stack = _stack(random_grid(rng), random_grid(rng), random_grid(rng, valid_fraction=0.7))
        channels = stack.names
        selective = EnsembleModel("s-mean", channels)
        _set_alphas(selective, [1.3, 1.3, 1.3])
        plain = EnsembleModel("plain-mean", channels)
        diff = np.abs(selective.forward(stack).values - plain.forward(stack).values)
        assert diff.max() < 1e-10

    def test_selective_mean_bounded_by_candidates(self, rng):
        """The gated mean lies between the smallest and largest valid candidate."""
        stack = _stack(random_grid(rng), random_grid(rng), random_grid(rng))
        model = EnsembleModel("s-mean", stack.names)
        _set_alphas(model, [2.0, -1.0, 0.3])
        out = model.forward(stack).values
        values = stack.values_array()
        assert np.all(out >= values.min(axis=0) - 1e-12)
        assert np.all(out <= values.max(axis=0) + 1e-12)

    def test_single_open_gate_is_identity(self, rng):
        """With one candidate and an open gate, S-Mean returns the candidate."""
        g = random_grid(rng)
        model = EnsembleModel("s-mean", ("link:c0",))
        _set_alphas(model, [30.0])
        assert masked_l2(model.forward(_stack(g)), g) < 1e-20

    def test_linear_fixed_weights_hand_evaluation(self, rng):
        """w = (1, 0, 0), b = 0 and one open gate select the first candidate."""
        stack = _stack(random_grid(rng), random_grid(rng), random_grid(rng))
        model = EnsembleModel("s-lr-fw", stack.names)
        _set_alphas(model, [20.0, -20.0, -20.0])
        with torch.no_grad():
            model.net.weight.copy_(torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
            model.net.bias.zero_()
        out = model.forward(stack)
        assert np.abs(out.values - stack.channels[0].values).max() < 1e-6

    def test_candidate_permutation(self, rng):
        """Permuting candidates, alphas and weights together keeps the output."""
        grids = [random_grid(rng) for _ in range(3)]
        model = EnsembleModel("s-lr-fw", ("link:a", "link:b", "link:c"))
        _set_alphas(model, [0.5, -0.2, 1.0])
        with torch.no_grad():
            model.net.weight.copy_(torch.tensor([0.2, 0.3, 0.4], dtype=torch.float64))
        permuted = EnsembleModel("s-lr-fw", ("link:c", "link:a", "link:b"))
        _set_alphas(permuted, [1.0, 0.5, -0.2])
        with torch.no_grad():
            permuted.net.weight.copy_(torch.tensor([0.4, 0.2, 0.3], dtype=torch.float64))
        out = model.forward(Volume(tuple(grids), model.channels))
        out_permuted = permuted.forward(
            Volume((grids[2], grids[0], grids[1]), permuted.channels)
        )
        assert np.abs(out.values - out_permuted.values).max() < 1e-12

    @pytest.mark.parametrize("variant", list(EnsembleVariant))
    def test_outputs_clamped_and_masked(self, rng, variant):
        """Every variant clamps to [0, 1] and is valid where any candidate is valid."""
        a = random_grid(rng, valid_fraction=0.5)
        b = random_grid(rng, valid_fraction=0.5)
        out = EnsembleModel(variant, ("link:c0", "link:c1"), 4, 2).forward(_stack(a, b))
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0
        assert np.array_equal(out.mask, a.mask | b.mask)

    def test_channel_order_mismatch(self, rng):
        """Stacks must follow the trained candidate order."""
        model = EnsembleModel("s-mean", ("link:c0", "link:c1"))
        stack = Volume((random_grid(rng), random_grid(rng)), ("link:c1", "link:c0"))
        with pytest.raises(StructuralError):
            model.forward(stack)


class TestFitEnsemble:
    """Test suite for end-to-end gate and combiner training."""

    def test_realizable_target(self, rng):
        """Target equal to one candidate is fitted closely by S-LR_FW."""
        stacks = [_stack(*(random_grid(rng) for _ in range(3))) for _ in range(6)]
        targets = [stack.channels[2] for stack in stacks]
        model, report = fit_ensemble(
            "s-lr-fw", stacks, targets, TrainConfig(max_epochs=600, initial_learning_rate=0.05)
        )
        assert report.final_loss <= report.initial_loss
        assert model.training_loss(stacks, targets) < 1e-4

    def test_noise_candidate_is_gated_down(self):
        """Across seeds the noise candidate ends with the smallest gate weight."""
        wins = 0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            stacks, targets = [], []
            for _ in range(8):
                target = random_grid(rng)
                near = [
                    LayerGrid(
                        values=np.clip(target.values + rng.normal(0, 0.02, target.shape), 0, 1),
                        mask=target.mask,
                    )
                    for _ in range(2)
                ]
                stacks.append(_stack(near[0], random_grid(rng), near[1]))
                targets.append(target)
            model, _ = fit_ensemble(
                "s-mean",
                stacks,
                targets,
                TrainConfig(max_epochs=150, initial_learning_rate=0.05, seed=seed),
            )
            weights = model.gate_weights()
            wins += int(weights[1] < min(weights[0], weights[2]))
        assert wins >= 3

    def test_deterministic_given_seed(self, rng):
        """Two fits with the same seed produce identical outputs."""
        stacks = [_stack(random_grid(rng), random_grid(rng)) for _ in range(4)]
        targets = [random_grid(rng) for _ in range(4)]
        train = TrainConfig(max_epochs=20, initial_learning_rate=0.05, seed=7)
        a, _ = fit_ensemble("s-nn-dpw", stacks, targets, train, hidden_channels=3)
        b, _ = fit_ensemble("s-nn-dpw", stacks, targets, train, hidden_channels=3)
        assert a.forward(stacks[0]).equals(b.forward(stacks[0]))

    def test_plain_mean_fits_without_training(self, rng):
        """The non-learned baseline reports a closed-form loss."""
        stacks = [_stack(random_grid(rng), random_grid(rng))]
        _, report = fit_ensemble("plain-mean", stacks, [random_grid(rng)], TrainConfig())
        assert report.closed_form

    def test_errors(self, rng):
        """Empty or misaligned training data is rejected."""
        with pytest.raises(UndefinedObjectiveError):
            fit_ensemble("s-mean", [], [], TrainConfig())
        stack = _stack(random_grid(rng))
        with pytest.raises(StructuralError):
            fit_ensemble("s-mean", [stack, stack], [random_grid(rng)], TrainConfig())
        empty = grid([[0.0] * 6] * 6, mask=[[False] * 6] * 6)
        with pytest.raises(UndefinedObjectiveError):
            fit_ensemble("s-mean", [stack], [empty], TrainConfig())


class TestEnsembleGradients:
    """Test suite for finite-difference checks of the learned combiners."""

    @pytest.mark.parametrize("variant", ["s-nn-dw", "s-nn-dpw", "s-nn-d"])
    def test_gradients_match_finite_differences(self, rng, variant):
        """Autograd agrees with central differences on a random sample."""
        stack = _stack(*(random_grid(rng) for _ in range(3)))
        model = EnsembleModel(variant, stack.names, hidden_units=8, hidden_channels=4, seed=3)
        result = gradient_check(model, (stack, random_grid(rng)), n_params=50)
        assert result.checked == 50
        assert result.max_relative_error < 1e-4


class TestEnsembleRecord:
    """Test suite for ensemble serialization records."""

    def test_round_trip(self, rng):
        """A rebuilt ensemble reproduces the outputs."""
        stacks = [_stack(random_grid(rng), random_grid(rng)) for _ in range(3)]
        targets = [random_grid(rng) for _ in range(3)]
        model, _ = fit_ensemble(
            "s-nn-dw", stacks, targets, TrainConfig(max_epochs=10), hidden_units=4
        )
        rebuilt = EnsembleModel.from_record(model.to_record())
        assert rebuilt.variant is EnsembleVariant.S_NN_DW
        assert rebuilt.forward(stacks[0]).equals(model.forward(stacks[0]))

    def test_wrong_kind(self):
        """Link records are not ensembles."""
        record = ModelRecord(kind="linear-patch", hyperparameters={}, channels=("node:a",))
        with pytest.raises(FormatError):
            EnsembleModel.from_record(record)
