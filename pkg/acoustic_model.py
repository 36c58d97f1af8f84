from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, reduce
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from errors import (
    AlignmentInfeasibleError,
    DimensionMismatchError,
    DuplicateUnitError,
    EmMonotonicityError,
    InputValidationError,
    PipelineRuntimeError,
)
from event_log import log_event
from feature_archive import FeatureMatrix
from schemas import AmSettings

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "jointaccent-am/1"
LOG_2PI = math.log(2.0 * math.pi)
MIXUP_OFFSET = 0.2
WEIGHT_FLOOR = 1e-8
_TINY_OCCUPANCY = 1e-10

StateKey = tuple[str, int]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        weights, means, variances = _frozen(self.weights), _frozen(self.means), _frozen(self.variances)
        if means.ndim != 2 or variances.shape != means.shape or weights.shape != (means.shape[0],):
            raise InputValidationError(
                f"GMM shapes disagree: weights {weights.shape}, means {means.shape}, variances {variances.shape}"
            )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def num_components(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @cached_property
    def _log_consts(self) -> np.ndarray:
        return np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))

    def component_logpdf(self, frames: np.ndarray) -> np.ndarray:
        diff = frames[:, None, :] - self.means[None, :, :]
        quad = np.einsum("tmd,md->tm", diff * diff, 1.0 / self.variances)
        return self._log_consts[None, :] - 0.5 * quad

    def log_density(self, frames: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(frames), axis=1)


@dataclass(frozen=True, eq=False)
class PhoneHmm:
    unit: str
    states: tuple[DiagGmm, ...]
    # log probabilities, one row per state: [self loop, forward]
    transitions: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(self.states))
        transitions = _frozen(self.transitions)
        if transitions.shape != (len(self.states), 2):
            raise InputValidationError(f"{self.unit}: transitions must have shape ({len(self.states)}, 2)")
        sums = np.exp(transitions).sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise InputValidationError(f"{self.unit}: transition probabilities do not sum to 1 ({sums})")
        object.__setattr__(self, "transitions", transitions)

    @property
    def total_densities(self) -> int:
        return sum(gmm.num_components for gmm in self.states)


@dataclass(frozen=True, eq=False)
class AcousticModel:
    hmms: Mapping[str, PhoneHmm]
    dim: int
    num_states: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "hmms", dict(self.hmms))
        for unit, hmm in self.hmms.items():
            if len(hmm.states) != self.num_states:
                raise InputValidationError(f"{unit}: expected {self.num_states} states, got {len(hmm.states)}")
            if any(gmm.dim != self.dim for gmm in hmm.states):
                raise DimensionMismatchError(f"{unit}: GMM dimension differs from model dimension {self.dim}")

    @cached_property
    def units(self) -> tuple[str, ...]:
        return tuple(sorted(self.hmms))

    @property
    def total_densities(self) -> int:
        return sum(hmm.total_densities for hmm in self.hmms.values())

    @property
    def components_per_state(self) -> int:
        return max(gmm.num_components for hmm in self.hmms.values() for gmm in hmm.states)

    def hmm(self, unit: str) -> PhoneHmm:
        try:
            return self.hmms[unit]
        except KeyError:
            raise InputValidationError(f"Acoustic model has no HMM for unit {unit!r}") from None

    def state_logliks(self, frames: np.ndarray | FeatureMatrix, units: Iterable[str]) -> dict[str, np.ndarray]:
        """Emission log likelihoods per unit as (T, num_states) arrays."""
        data = _as_frames(frames, self.dim)
        table: dict[str, np.ndarray] = {}
        for unit in units:
            if unit in table:
                continue
            hmm = self.hmm(unit)
            table[unit] = np.stack([gmm.log_density(data) for gmm in hmm.states], axis=1)
        return table


def _as_frames(frames: np.ndarray | FeatureMatrix, dim: int) -> np.ndarray:
    data = frames.frames if isinstance(frames, FeatureMatrix) else np.asarray(frames)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[1] != dim:
        raise DimensionMismatchError(f"Expected frames of dimension {dim}, got shape {data.shape}")
    return data


def _uniform_transitions(num_states: int) -> np.ndarray:
    return np.full((num_states, 2), math.log(0.5))


def flat_start(
    units: Sequence[str],
    config: AmSettings | None = None,
    *,
    dim: int = 13,
    features: Iterable[np.ndarray | FeatureMatrix] | None = None,
) -> AcousticModel:
    config = config or AmSettings()
    if not units:
        raise InputValidationError("flat_start needs at least one unit")
    duplicates = sorted(u for u, count in Counter(units).items() if count > 1)
    if duplicates:
        raise DuplicateUnitError(f"Duplicate units in flat start: {duplicates}")

    arrays = [f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in (features or ())]
    if arrays:
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        dim = stacked.shape[1]
        mean = stacked.mean(axis=0)
        variance = np.maximum(stacked.var(axis=0), config.variance_floor)
    else:
        mean = np.zeros(dim)
        variance = np.maximum(np.ones(dim), config.variance_floor)

    gmm = DiagGmm(np.ones(1), mean[None, :], variance[None, :])
    hmms = {
        unit: PhoneHmm(unit, tuple(gmm for _ in range(config.num_states)), _uniform_transitions(config.num_states))
        for unit in units
    }
    model = AcousticModel(hmms, dim=dim, num_states=config.num_states)
    log_event(logger, "am_flat_start", units=len(units), dim=dim, total_densities=model.total_densities)
    return model


def emission_logprob(model: AcousticModel, unit: str, state_index: int, frame: np.ndarray) -> float:
    hmm = model.hmm(unit)
    if not 0 <= state_index < model.num_states:
        raise InputValidationError(f"State index {state_index} out of range for {model.num_states} states")
    data = np.asarray(frame, dtype=np.float64)
    if data.shape != (model.dim,):
        raise DimensionMismatchError(f"Expected a frame of dimension {model.dim}, got shape {data.shape}")
    return float(hmm.states[state_index].log_density(data[None, :])[0])


# Alignment


@dataclass(frozen=True, eq=False)
class Alignment:
    units: tuple[str, ...]
    num_states: int
    # chain position per frame; chain position p is state p % num_states of unit p // num_states
    states: np.ndarray
    log_likelihood: float

    def frame_labels(self) -> list[StateKey]:
        return [(self.units[p // self.num_states], int(p % self.num_states)) for p in self.states]

    def unit_segments(self) -> list[tuple[int, int, int]]:
        """(unit position, first frame, end frame exclusive) per transcript unit."""
        positions = self.states // self.num_states
        segments = []
        start = 0
        for t in range(1, len(positions) + 1):
            if t == len(positions) or positions[t] != positions[start]:
                segments.append((int(positions[start]), start, t))
                start = t
        return segments


@dataclass(frozen=True)
class _Chain:
    keys: tuple[StateKey, ...]
    self_lp: np.ndarray
    fwd_lp: np.ndarray


def _chain(model: AcousticModel, units: Sequence[str]) -> _Chain:
    keys, self_lp, fwd_lp = [], [], []
    for unit in units:
        hmm = model.hmm(unit)
        for s in range(model.num_states):
            keys.append((unit, s))
            self_lp.append(hmm.transitions[s, 0])
            fwd_lp.append(hmm.transitions[s, 1])
    return _Chain(tuple(keys), np.array(self_lp), np.array(fwd_lp))


def _chain_emissions(model: AcousticModel, chain: _Chain, frames: np.ndarray) -> np.ndarray:
    per_unit = model.state_logliks(frames, (unit for unit, _ in chain.keys))
    return np.stack([per_unit[unit][:, s] for unit, s in chain.keys], axis=1)


def _check_feasible(units: Sequence[str], num_frames: int, num_states: int) -> None:
    if not units:
        raise InputValidationError("Cannot align an empty transcript")
    needed = len(units) * num_states
    if num_frames < needed:
        raise AlignmentInfeasibleError(
            f"{num_frames} frames cannot cover {len(units)} units x {num_states} states ({needed} frames needed)"
        )


def path_score(emissions: np.ndarray, self_lp: np.ndarray, fwd_lp: np.ndarray, path: np.ndarray) -> float:
    """Log likelihood of one chain path, including the exit transition of the final state."""
    total = float(emissions[np.arange(len(path)), path].sum())
    for t in range(1, len(path)):
        total += self_lp[path[t]] if path[t] == path[t - 1] else fwd_lp[path[t - 1]]
    return total + float(fwd_lp[path[-1]])


def _viterbi_chain(emissions: np.ndarray, self_lp: np.ndarray, fwd_lp: np.ndarray) -> tuple[np.ndarray, float]:
    num_frames, num_chain = emissions.shape
    delta = np.full(num_chain, -np.inf)
    delta[0] = emissions[0, 0]
    moved = np.zeros((num_frames, num_chain), dtype=bool)
    for t in range(1, num_frames):
        stay = delta + self_lp
        move = np.full(num_chain, -np.inf)
        move[1:] = delta[:-1] + fwd_lp[:-1]
        # ties keep the token in its state
        moved[t] = move > stay
        delta = np.where(moved[t], move, stay) + emissions[t]
    final = float(delta[-1] + fwd_lp[-1])
    if not np.isfinite(final):
        raise AlignmentInfeasibleError("No complete path through the state chain")
    path = np.empty(num_frames, dtype=np.int64)
    position = num_chain - 1
    for t in range(num_frames - 1, -1, -1):
        path[t] = position
        if t > 0 and moved[t, position]:
            position -= 1
    return path, final


def align(model: AcousticModel, units: Sequence[str], frames: np.ndarray | FeatureMatrix) -> Alignment:
    data = _as_frames(frames, model.dim)
    _check_feasible(units, len(data), model.num_states)
    chain = _chain(model, units)
    path, score = _viterbi_chain(_chain_emissions(model, chain, data), chain.self_lp, chain.fwd_lp)
    return Alignment(tuple(units), model.num_states, path, score)


def forward_logprob(model: AcousticModel, units: Sequence[str], frames: np.ndarray | FeatureMatrix) -> float:
    data = _as_frames(frames, model.dim)
    _check_feasible(units, len(data), model.num_states)
    chain = _chain(model, units)
    emissions = _chain_emissions(model, chain, data)
    alpha = np.full(emissions.shape[1], -np.inf)
    alpha[0] = emissions[0, 0]
    for t in range(1, len(data)):
        move = np.full_like(alpha, -np.inf)
        move[1:] = alpha[:-1] + chain.fwd_lp[:-1]
        alpha = np.logaddexp(alpha + chain.self_lp, move) + emissions[t]
    return float(alpha[-1] + chain.fwd_lp[-1])


def uniform_alignment(model: AcousticModel, units: Sequence[str], frames: np.ndarray | FeatureMatrix) -> Alignment:
    data = _as_frames(frames, model.dim)
    _check_feasible(units, len(data), model.num_states)
    num_chain = len(units) * model.num_states
    path = (np.arange(len(data)) * num_chain) // len(data)
    chain = _chain(model, units)
    score = path_score(_chain_emissions(model, chain, data), chain.self_lp, chain.fwd_lp, path)
    return Alignment(tuple(units), model.num_states, path, score)


# Training


@dataclass
class StateStats:
    occupancy: np.ndarray
    first: np.ndarray
    second: np.ndarray
    self_count: float = 0.0
    forward_count: float = 0.0

    @classmethod
    def empty(cls, components: int, dim: int) -> StateStats:
        return cls(np.zeros(components), np.zeros((components, dim)), np.zeros((components, dim)))

    def merge(self, other: StateStats) -> StateStats:
        return StateStats(
            self.occupancy + other.occupancy,
            self.first + other.first,
            self.second + other.second,
            self.self_count + other.self_count,
            self.forward_count + other.forward_count,
        )


@dataclass
class Accumulator:
    stats: dict[StateKey, StateStats] = field(default_factory=dict)
    log_likelihood: float = 0.0
    frames: int = 0
    utterances: int = 0

    def merge(self, other: Accumulator) -> Accumulator:
        merged = dict(self.stats)
        for key, value in other.stats.items():
            merged[key] = merged[key].merge(value) if key in merged else value
        return Accumulator(
            merged,
            self.log_likelihood + other.log_likelihood,
            self.frames + other.frames,
            self.utterances + other.utterances,
        )


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    components_per_state: int
    total_densities: int
    log_likelihood: float
    frames: int


TrainingPair = tuple[np.ndarray | FeatureMatrix, Sequence[str]]


def _accumulate_utterance(
    model: AcousticModel,
    frames: np.ndarray | FeatureMatrix,
    units: Sequence[str],
    uniform: bool,
    acc: Accumulator,
) -> None:
    data = _as_frames(frames, model.dim)
    alignment = uniform_alignment(model, units, data) if uniform else align(model, units, data)
    acc.log_likelihood += alignment.log_likelihood
    acc.frames += len(data)
    acc.utterances += 1

    path = alignment.states
    for position in np.unique(path):
        unit = units[position // model.num_states]
        state = int(position % model.num_states)
        key = (unit, state)
        gmm = model.hmms[unit].states[state]
        selected = data[path == position]
        comp = gmm.component_logpdf(selected)
        resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        stats = acc.stats.get(key)
        if stats is None:
            stats = acc.stats[key] = StateStats.empty(gmm.num_components, model.dim)
        stats.occupancy += resp.sum(axis=0)
        stats.first += resp.T @ selected
        stats.second += resp.T @ (selected * selected)
        stats.self_count += len(selected) - 1
        stats.forward_count += 1


def _accumulate_chunk(model: AcousticModel, chunk: Sequence[TrainingPair], uniform: bool) -> Accumulator:
    acc = Accumulator()
    for frames, units in chunk:
        _accumulate_utterance(model, frames, units, uniform, acc)
    return acc


def accumulate(
    model: AcousticModel,
    data: Sequence[TrainingPair],
    *,
    uniform: bool = False,
    workers: int = 1,
) -> Accumulator:
    if workers > 1 and len(data) > workers:
        size = math.ceil(len(data) / workers)
        chunks = [data[i : i + size] for i in range(0, len(data), size)]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda chunk: _accumulate_chunk(model, chunk, uniform), chunks))
        return reduce(Accumulator.merge, parts, Accumulator())
    return _accumulate_chunk(model, data, uniform)


def _update_gmm(gmm: DiagGmm, stats: StateStats, variance_floor: float) -> DiagGmm:
    occupancy = stats.occupancy
    total = occupancy.sum()
    weights = np.maximum(occupancy / total, WEIGHT_FLOOR)
    weights /= weights.sum()
    means = np.array(gmm.means)
    variances = np.array(gmm.variances)
    live = occupancy > _TINY_OCCUPANCY
    means[live] = stats.first[live] / occupancy[live, None]
    variances[live] = stats.second[live] / occupancy[live, None] - means[live] ** 2
    variances = np.maximum(variances, variance_floor)
    return DiagGmm(weights, means, variances)


def _update_transitions(stats: StateStats, floor: float) -> tuple[float, float]:
    p_self = stats.self_count / (stats.self_count + stats.forward_count)
    p_self = min(max(p_self, floor), 1.0 - floor)
    return math.log(p_self), math.log(1.0 - p_self)


def update_model(model: AcousticModel, acc: Accumulator, config: AmSettings) -> tuple[AcousticModel, list[str]]:
    hmms: dict[str, PhoneHmm] = {}
    frozen_units: list[str] = []
    for unit in model.units:
        hmm = model.hmms[unit]
        if (unit, 0) not in acc.stats:
            hmms[unit] = hmm
            frozen_units.append(unit)
            continue
        states, transitions = [], []
        for s, gmm in enumerate(hmm.states):
            stats = acc.stats[(unit, s)]
            states.append(_update_gmm(gmm, stats, config.variance_floor))
            transitions.append(_update_transitions(stats, config.transition_floor))
        hmms[unit] = PhoneHmm(unit, tuple(states), np.array(transitions))
    updated = AcousticModel(hmms, dim=model.dim, num_states=model.num_states)
    check_floors(updated, config)
    return updated, frozen_units


def check_floors(model: AcousticModel, config: AmSettings) -> None:
    for unit, hmm in model.hmms.items():
        for gmm in hmm.states:
            if gmm.variances.min() < config.variance_floor:
                raise PipelineRuntimeError(f"{unit}: variance {gmm.variances.min()} below floor {config.variance_floor}")


def mixup(model: AcousticModel) -> AcousticModel:
    """Splits every Gaussian in two, means offset by +/-0.2 standard deviations, weights halved."""
    hmms = {}
    for unit, hmm in model.hmms.items():
        states = []
        for gmm in hmm.states:
            offset = MIXUP_OFFSET * np.sqrt(gmm.variances)
            means = np.empty((2 * gmm.num_components, gmm.dim))
            means[0::2] = gmm.means + offset
            means[1::2] = gmm.means - offset
            variances = np.repeat(gmm.variances, 2, axis=0)
            weights = np.repeat(gmm.weights / 2.0, 2)
            states.append(DiagGmm(weights, means, variances))
        hmms[unit] = PhoneHmm(unit, tuple(states), hmm.transitions)
    return AcousticModel(hmms, dim=model.dim, num_states=model.num_states)


def train_em(
    model: AcousticModel,
    data: Sequence[TrainingPair],
    iterations: int,
    mixture_up_schedule: Iterable[int] = (),
    config: AmSettings | None = None,
    *,
    uniform_first: bool = False,
    workers: int = 1,
    history: list[IterationStats] | None = None,
) -> AcousticModel:
    """Viterbi training.

    Each iteration aligns every utterance with the current model, then re-estimates
    GMMs (one EM step on the aligned frames) and transitions from the hard counts.
    Components are split after every iteration listed in mixture_up_schedule.
    """
    config = config or AmSettings()
    if iterations < 1:
        raise InputValidationError("train_em needs at least one iteration")
    if not data:
        raise InputValidationError("train_em needs at least one training utterance")
    schedule = set(mixture_up_schedule)
    previous: float | None = None

    for iteration in range(1, iterations + 1):
        acc = accumulate(model, data, uniform=uniform_first and iteration == 1, workers=workers)
        if previous is not None:
            if acc.log_likelihood < previous - config.monotonic_slack:
                raise EmMonotonicityError(
                    f"Aligned log likelihood fell from {previous:.6f} to {acc.log_likelihood:.6f} at iteration {iteration}"
                )
        stats = IterationStats(
            iteration, model.components_per_state, model.total_densities, acc.log_likelihood, acc.frames
        )
        if history is not None:
            history.append(stats)
        log_event(
            logger,
            "am_iteration",
            iteration=iteration,
            components_per_state=stats.components_per_state,
            log_likelihood=round(acc.log_likelihood, 4),
            per_frame=round(acc.log_likelihood / max(acc.frames, 1), 4),
        )

        model, frozen_units = update_model(model, acc, config)
        if frozen_units:
            log_event(
                logger,
                "am_units_frozen",
                level=logging.WARNING,
                count=len(frozen_units),
                units=frozen_units[:10],
            )
        previous = acc.log_likelihood
        if iteration in schedule:
            model = mixup(model)
            previous = None
            log_event(logger, "am_mixup", iteration=iteration, total_densities=model.total_densities)
    return model


def mixup_schedule(components: int, iterations_per_level: int, start_components: int = 1) -> tuple[int, list[int]]:
    if components < start_components or components % start_components:
        raise InputValidationError(f"Cannot grow {start_components} components to {components}")
    levels = int(round(math.log2(components // start_components)))
    if start_components * 2**levels != components:
        raise InputValidationError(f"{components} is not {start_components} times a power of two")
    schedule = [iterations_per_level * level for level in range(1, levels + 1)]
    return iterations_per_level * (levels + 1), schedule


def train_for_components(
    model: AcousticModel,
    data: Sequence[TrainingPair],
    components: int,
    iterations_per_level: int,
    config: AmSettings | None = None,
    *,
    uniform_first: bool = True,
    workers: int = 1,
    history: list[IterationStats] | None = None,
) -> AcousticModel:
    iterations, schedule = mixup_schedule(components, iterations_per_level, model.components_per_state)
    return train_em(
        model,
        data,
        iterations,
        schedule,
        config,
        uniform_first=uniform_first,
        workers=workers,
        history=history,
    )


# Model file


def model_to_dict(model: AcousticModel) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "dim": model.dim,
        "num_states": model.num_states,
        "total_densities": model.total_densities,
        "hmms": [
            {
                "unit": unit,
                "transitions": model.hmms[unit].transitions.tolist(),
                "states": [
                    {
                        "weights": gmm.weights.tolist(),
                        "means": gmm.means.tolist(),
                        "variances": gmm.variances.tolist(),
                    }
                    for gmm in model.hmms[unit].states
                ],
            }
            for unit in model.units
        ],
    }


def model_from_dict(payload: dict) -> AcousticModel:
    if payload.get("schema") != MODEL_SCHEMA:
        raise InputValidationError(f"Unsupported model schema {payload.get('schema')!r}, expected {MODEL_SCHEMA}")
    try:
        hmms = {}
        for item in payload["hmms"]:
            unit = item["unit"]
            if unit in hmms:
                raise DuplicateUnitError(f"Model file lists unit {unit!r} twice")
            states = tuple(DiagGmm(s["weights"], s["means"], s["variances"]) for s in item["states"])
            hmms[unit] = PhoneHmm(unit, states, np.array(item["transitions"]))
        return AcousticModel(hmms, dim=int(payload["dim"]), num_states=int(payload["num_states"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputValidationError(f"Malformed model file: {exc}") from None


def save_model(model: AcousticModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path: str | Path) -> AcousticModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"{path}: not a JSON model file ({exc})") from None
    return model_from_dict(payload)
