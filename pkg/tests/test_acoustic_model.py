import itertools
import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

import acoustic_model
from acoustic_model import (
    Accumulator,
    AcousticModel,
    DiagGmm,
    PhoneHmm,
    align,
    emission_logprob,
    flat_start,
    forward_logprob,
    load_model,
    mixup,
    mixup_schedule,
    path_score,
    save_model,
    train_em,
    train_for_components,
    uniform_alignment,
)
from errors import AlignmentInfeasibleError, DuplicateUnitError, EmMonotonicityError, InputValidationError
from schemas import AmSettings

TWO_STATES = AmSettings(num_states=2, iterations_per_level=3, components=1)


def _model(state_means: dict[str, tuple[float, ...]], self_prob: float = 0.6, variance: float = 1.0) -> AcousticModel:
    hmms = {}
    for unit, means in state_means.items():
        states = tuple(DiagGmm([1.0], [[m]], [[variance]]) for m in means)
        transitions = np.log([[self_prob, 1.0 - self_prob]] * len(means))
        hmms[unit] = PhoneHmm(unit, states, transitions)
    return AcousticModel(hmms, dim=1, num_states=len(next(iter(state_means.values()))))


def _gaussian(x: float, mean: float, variance: float = 1.0) -> float:
    return -0.5 * (math.log(2 * math.pi * variance) + (x - mean) ** 2 / variance)


def _brute_force_best(model: AcousticModel, units, frames: np.ndarray) -> float:
    keys = [(u, s) for u in units for s in range(model.num_states)]
    emissions = np.array([[emission_logprob(model, u, s, f) for u, s in keys] for f in frames])
    self_lp = np.array([model.hmms[u].transitions[s, 0] for u, s in keys])
    fwd_lp = np.array([model.hmms[u].transitions[s, 1] for u, s in keys])
    best = -math.inf
    for steps in itertools.product((0, 1), repeat=len(frames) - 1):
        if sum(steps) != len(keys) - 1:
            continue
        path = np.concatenate([[0], np.cumsum(steps)])
        best = max(best, path_score(emissions, self_lp, fwd_lp, path))
    return best


SEPARATED = {"a": (-6.0, -2.0), "b": (2.0, 6.0)}


def _training_data(seed: int = 0, utterances: int = 24) -> list:
    rng = np.random.default_rng(seed)
    data = []
    for i in range(utterances):
        units = ["a", "b"] if i % 2 else ["b", "a", "b"]
        frames = []
        for unit in units:
            for mean in SEPARATED[unit]:
                frames.append(mean + 0.5 * rng.normal(size=(int(rng.integers(2, 6)), 1)))
        data.append((np.concatenate(frames), units))
    return data


class EmissionTests(unittest.TestCase):
    def test_matches_closed_form_gaussian(self) -> None:
        model = _model({"a": (0.5, -1.0)}, variance=2.0)
        self.assertAlmostEqual(emission_logprob(model, "a", 1, np.array([0.25])), _gaussian(0.25, -1.0, 2.0), places=12)

    def test_two_component_mixture(self) -> None:
        gmm = DiagGmm([0.25, 0.75], [[0.0], [2.0]], [[1.0], [1.0]])
        expected = math.log(0.25 * math.exp(_gaussian(1.0, 0.0)) + 0.75 * math.exp(_gaussian(1.0, 2.0)))
        self.assertAlmostEqual(float(gmm.log_density(np.array([[1.0]]))[0]), expected, places=12)

    def test_rejects_bad_state_index(self) -> None:
        with self.assertRaises(InputValidationError):
            emission_logprob(_model({"a": (0.0, 1.0)}), "a", 2, np.array([0.0]))


class FlatStartTests(unittest.TestCase):
    def test_uses_global_statistics_and_even_transitions(self) -> None:
        frames = np.array([[1.0, 0.0], [3.0, 0.0]])
        model = flat_start(["a", "b"], TWO_STATES, features=[frames])
        gmm = model.hmms["b"].states[1]
        np.testing.assert_allclose(gmm.means, [[2.0, 0.0]])
        np.testing.assert_allclose(gmm.variances, [[1.0, TWO_STATES.variance_floor]])
        np.testing.assert_allclose(np.exp(model.hmms["a"].transitions), 0.5)
        self.assertEqual(model.total_densities, 4)

    def test_without_data_uses_unit_gaussians(self) -> None:
        model = flat_start(["a"], TWO_STATES, dim=3)
        np.testing.assert_allclose(model.hmms["a"].states[0].variances, np.ones((1, 3)))

    def test_duplicate_units(self) -> None:
        with self.assertRaises(DuplicateUnitError):
            flat_start(["a", "b", "a"], TWO_STATES)


class AlignmentTests(unittest.TestCase):
    def test_viterbi_matches_brute_force(self) -> None:
        model = _model({"a": (0.0, 1.0), "b": (-1.0, 2.5)}, self_prob=0.7)
        frames = np.random.default_rng(3).normal(size=(7, 1))
        alignment = align(model, ["a", "b"], frames)
        self.assertAlmostEqual(alignment.log_likelihood, _brute_force_best(model, ["a", "b"], frames), places=9)

    def test_path_is_monotone_and_covers_every_state(self) -> None:
        model = _model(SEPARATED)
        frames, units = _training_data(utterances=1)[0]
        alignment = align(model, units, frames)
        steps = np.diff(alignment.states)
        self.assertTrue(set(steps.tolist()) <= {0, 1})
        self.assertEqual(alignment.states[0], 0)
        self.assertEqual(alignment.states[-1], len(units) * 2 - 1)
        self.assertEqual([pos for pos, _, _ in alignment.unit_segments()], list(range(len(units))))

    def test_separated_means_align_to_generating_segments(self) -> None:
        model = _model(SEPARATED)
        frames = np.array([[-6.0], [-6.0], [-2.0], [2.0], [2.0], [6.0]])
        labels = align(model, ["a", "b"], frames).frame_labels()
        self.assertEqual(labels, [("a", 0), ("a", 0), ("a", 1), ("b", 0), ("b", 0), ("b", 1)])

    def test_forward_bounds_viterbi(self) -> None:
        model = _model({"a": (0.0, 1.0)})
        frames = np.random.default_rng(1).normal(size=(5, 1))
        self.assertGreaterEqual(forward_logprob(model, ["a"], frames), align(model, ["a"], frames).log_likelihood)

    def test_too_few_frames(self) -> None:
        model = _model({"a": (0.0, 1.0)})
        with self.assertRaises(AlignmentInfeasibleError):
            align(model, ["a", "a"], np.zeros((3, 1)))

    def test_uniform_alignment_splits_evenly(self) -> None:
        model = _model({"a": (0.0, 1.0)})
        alignment = uniform_alignment(model, ["a"], np.zeros((4, 1)))
        self.assertEqual(alignment.states.tolist(), [0, 0, 1, 1])


class TrainingTests(unittest.TestCase):
    def test_log_likelihood_never_decreases_within_a_level(self) -> None:
        data = _training_data()
        model = flat_start(["a", "b"], TWO_STATES, features=[f for f, _ in data])
        history = []
        trained = train_for_components(model, data, 2, 3, TWO_STATES, history=history)
        self.assertEqual(trained.components_per_state, 2)
        self.assertEqual([h.components_per_state for h in history], [1, 1, 1, 2, 2, 2])
        for level in (history[:3], history[3:]):
            values = [h.log_likelihood for h in level]
            for before, after in zip(values, values[1:]):
                self.assertGreaterEqual(after, before - TWO_STATES.monotonic_slack)

    def test_recovers_generating_means(self) -> None:
        data = _training_data()
        model = flat_start(["a", "b"], TWO_STATES, features=[f for f, _ in data])
        trained = train_em(model, data, 5, config=TWO_STATES, uniform_first=True)
        for unit, means in SEPARATED.items():
            for state, mean in enumerate(means):
                self.assertAlmostEqual(float(trained.hmms[unit].states[state].means[0, 0]), mean, delta=0.5)

    def test_parallel_accumulation_matches_serial(self) -> None:
        data = _training_data()
        model = _model(SEPARATED)
        serial = acoustic_model.accumulate(model, data)
        parallel = acoustic_model.accumulate(model, data, workers=3)
        self.assertAlmostEqual(serial.log_likelihood, parallel.log_likelihood, places=6)
        np.testing.assert_allclose(serial.stats[("a", 1)].first, parallel.stats[("a", 1)].first)

    def test_decreasing_likelihood_raises(self) -> None:
        model = _model(SEPARATED)
        fake = [Accumulator(log_likelihood=-10.0, frames=1), Accumulator(log_likelihood=-20.0, frames=1)]
        with patch.object(acoustic_model, "accumulate", side_effect=fake):
            with self.assertRaises(EmMonotonicityError):
                train_em(model, [(np.zeros((4, 1)), ["a"])], 2, config=TWO_STATES)

    def test_slack_is_absolute_on_large_likelihoods(self) -> None:
        model = _model(SEPARATED)
        small_drop = [Accumulator(log_likelihood=-1e5, frames=1), Accumulator(log_likelihood=-1e5 - 5e-7, frames=1)]
        with patch.object(acoustic_model, "accumulate", side_effect=small_drop):
            train_em(model, [(np.zeros((4, 1)), ["a"])], 2, config=TWO_STATES)
        large_drop = [Accumulator(log_likelihood=-1e5, frames=1), Accumulator(log_likelihood=-1e5 - 1e-3, frames=1)]
        with patch.object(acoustic_model, "accumulate", side_effect=large_drop):
            with self.assertRaises(EmMonotonicityError):
                train_em(model, [(np.zeros((4, 1)), ["a"])], 2, config=TWO_STATES)

    def test_single_iteration_matches_closed_form_update(self) -> None:
        model = _model({"a": (2.0, 6.0)})
        frames = np.array([[1.0], [3.0], [5.0], [8.0]])
        history = []
        trained = train_em(model, [(frames, ["a"])], 1, config=TWO_STATES, history=history)
        # the best path splits the frames 2 + 2
        expected_ll = (
            _gaussian(1.0, 2.0) + _gaussian(3.0, 2.0) + _gaussian(5.0, 6.0) + _gaussian(8.0, 6.0)
            + 2 * math.log(0.6) + 2 * math.log(0.4)
        )
        self.assertAlmostEqual(history[0].log_likelihood, expected_ll, delta=1e-9)
        first, second = trained.hmms["a"].states
        self.assertAlmostEqual(float(first.means[0, 0]), 2.0, delta=1e-9)
        self.assertAlmostEqual(float(first.variances[0, 0]), 1.0, delta=1e-9)
        self.assertAlmostEqual(float(second.means[0, 0]), 6.5, delta=1e-9)
        self.assertAlmostEqual(float(second.variances[0, 0]), 2.25, delta=1e-9)
        np.testing.assert_allclose(np.exp(trained.hmms["a"].transitions), 0.5, atol=1e-12)

    def test_units_without_data_keep_parameters(self) -> None:
        model = _model({"a": (-6.0, -2.0), "b": (2.0, 6.0), "c": (9.0, 9.0)})
        data = [(f, u) for f, u in _training_data()]
        trained = train_em(model, data, 1, config=TWO_STATES)
        self.assertIs(trained.hmms["c"], model.hmms["c"])


class MixupTests(unittest.TestCase):
    def test_split_offsets_means_and_halves_weights(self) -> None:
        model = _model({"a": (1.0, 2.0)}, variance=4.0)
        split = mixup(model).hmms["a"].states[0]
        np.testing.assert_allclose(split.means, [[1.4], [0.6]])
        np.testing.assert_allclose(split.weights, [0.5, 0.5])
        np.testing.assert_allclose(split.variances, [[4.0], [4.0]])
        self.assertEqual(mixup(model).total_densities, 2 * model.total_densities)

    def test_schedule(self) -> None:
        self.assertEqual(mixup_schedule(4, 2), (6, [2, 4]))
        self.assertEqual(mixup_schedule(1, 3), (3, []))
        with self.assertRaises(InputValidationError):
            mixup_schedule(3, 2)


class ModelFileTests(unittest.TestCase):
    def test_saved_model_scores_identically(self) -> None:
        model = mixup(_model(SEPARATED))
        frames = np.array([[0.3], [-1.2], [2.0], [5.5]])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            save_model(model, path)
            restored = load_model(path)
        self.assertEqual(restored.total_densities, model.total_densities)
        self.assertEqual(align(restored, ["a", "b"], frames).log_likelihood, align(model, ["a", "b"], frames).log_likelihood)

    def test_wrong_schema(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            path.write_text('{"schema": "other"}', encoding="utf-8")
            with self.assertRaises(InputValidationError):
                load_model(path)


if __name__ == "__main__":
    unittest.main()
