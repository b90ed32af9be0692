"""Multi-object bootstrap particle filter over sets of box detections.

Each particle is one hypothesis of the full object set (variable
cardinality). The filter can run in two measurement modes:

* ``step``: every particle receives its own sampled detection set, so the
  randomness of the detector is folded into the particle population;
* ``step_baseline``: all particles share one detection set obtained by
  thresholding raw confidences.

All per-frame randomness is pre-drawn as one block per frame, with one row
per particle, so particles can be processed in any order (or in parallel)
without changing results for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import STATE_DIM
from .scenario import DetectionSample, RawDetection, sample_detection_batch

LOG_2PI = math.log(2.0 * math.pi)
UNLABELED = -1


@dataclass
class MultiObjectParticle:
    """One hypothesis of the object set plus its importance weight.

    ``states`` is (n, 6) in (cx, cy, w, h, vx, vy); ``labels`` carries the
    output-frame identity of each object (UNLABELED when unknown).
    """

    states: np.ndarray
    labels: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, STATE_DIM)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.states.shape[0]:
            raise ValueError("states / labels length mismatch")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"bad particle weight {self.weight}")

    @classmethod
    def empty(cls, weight: float = 1.0) -> "MultiObjectParticle":
        return cls(states=np.zeros((0, STATE_DIM)), labels=np.zeros(0, np.int64),
                   weight=weight)

    @property
    def cardinality(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class TrackerParams:
    n_particles: int = 50
    p_detect: float = 0.9
    clutter_rate: float = 2.0
    # Measurement-space volume the clutter rate is spread over; the default
    # matches a 960x640 image with box sizes spanning ~60 px in w and h.
    clutter_volume: float = 960.0 * 640.0 * 60.0 * 60.0
    birth_prob: float = 0.1
    death_prob: float = 0.05
    birth_gate: float = 30.0        # px, center distance blocking duplicate births
    birth_spread: float = 0.0       # px stddev around the spawning detection
    # Velocity prior for spawned objects. Births start at the detection with
    # zero mean velocity; without spread the population cannot represent a
    # moving object until process noise accumulates, which loses fast movers.
    birth_vel_spread: float = 2.0
    process_noise: tuple[float, float, float] = (1.0, 0.3, 0.3)  # pos, size, vel
    # Velocity retention per frame. With pure constant velocity the particle
    # population's velocity random-walks (position evidence damps it only
    # weakly at small N), and static objects pick up phantom motion.
    vel_damping: float = 0.95
    # Effective innovation scale: detector box noise plus sampling jitter
    # plus state spread. An undersized value trips the association gate on
    # true pairings, and one unexplained detection zeroes the particle.
    meas_noise: tuple[float, float, float, float] = (2.5, 2.5, 2.5, 2.5)
    assoc_gate: float = 5.0         # Mahalanobis gate for detection association
    label_gate: float = 3.0         # Mahalanobis gate for label inheritance
    max_cardinality: int = 50

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        for name in ("p_detect", "birth_prob", "death_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")

    @property
    def log_clutter_density(self) -> float:
        if self.clutter_rate <= 0:
            return -math.inf
        return math.log(self.clutter_rate / self.clutter_volume)


Sampler = Callable[[int, np.random.Generator], list[DetectionSample]]


def make_raw_sampler(raw: Sequence[RawDetection], box_jitter: float = 0.0) -> Sampler:
    """Sampler drawing independent detection-set realizations of ``raw``."""

    def sampler(n: int, rng: np.random.Generator) -> list[DetectionSample]:
        return sample_detection_batch(raw, n, rng, box_jitter=box_jitter)

    return sampler


def make_constant_sampler(detections: DetectionSample) -> Sampler:
    """Sampler returning the same fixed set for every particle."""

    def sampler(n: int, rng: np.random.Generator) -> list[DetectionSample]:
        return [detections] * n

    return sampler


def threshold_detections(raw: Sequence[RawDetection], threshold: float) -> DetectionSample:
    """Fixed-threshold acceptance: keep boxes with confidence >= threshold."""
    return DetectionSample(boxes=tuple(d.box for d in raw if d.confidence >= threshold))


# ---------------------------------------------------------------------------
# per-particle kernels


def _predict_kernel(particle: MultiObjectParticle, params: TrackerParams,
                    survival_u: np.ndarray, noise: np.ndarray | None) -> MultiObjectParticle:
    n = particle.cardinality
    if n == 0:
        return MultiObjectParticle.empty(particle.weight)
    keep = survival_u[:n] < (1.0 - params.death_prob)
    states = particle.states[keep].copy()
    labels = particle.labels[keep]
    if states.shape[0]:
        states[:, 0] += states[:, 4]
        states[:, 1] += states[:, 5]
        states[:, 4:6] *= params.vel_damping
        if noise is not None:
            states += noise[:n][keep]
            states[:, 2:4] = np.maximum(states[:, 2:4], 1.0)
    return MultiObjectParticle(states=states, labels=labels, weight=particle.weight)


def _noise_block(params: TrackerParams, rng: np.random.Generator,
                 shape: tuple[int, ...]) -> np.ndarray | None:
    pos, size, vel = params.process_noise
    if pos == 0 and size == 0 and vel == 0:
        return None
    scale = np.array([pos, pos, size, size, vel, vel])
    return rng.standard_normal(shape + (STATE_DIM,)) * scale


def predict(particle: MultiObjectParticle, params: TrackerParams,
            rng: np.random.Generator) -> MultiObjectParticle:
    """Survival thinning plus one constant-velocity noise step per object."""
    n = max(particle.cardinality, 1)
    survival_u = rng.random(n)
    noise = _noise_block(params, rng, (n,))
    return _predict_kernel(particle, params, survival_u, noise)


def _birth_kernel(particle: MultiObjectParticle, detections: DetectionSample,
                  params: TrackerParams, birth_u: np.ndarray,
                  spread: np.ndarray | None) -> MultiObjectParticle:
    if not detections.boxes:
        return particle
    states = particle.states
    labels = particle.labels
    new_rows = []
    for j, box in enumerate(detections.boxes):
        if states.shape[0] + len(new_rows) >= params.max_cardinality:
            break
        gated = False
        for row in (states, *((np.array(new_rows),) if new_rows else ())):
            if row.shape[0] and np.min(
                    np.hypot(row[:, 0] - box.cx, row[:, 1] - box.cy)) <= params.birth_gate:
                gated = True
                break
        if gated:
            continue
        if birth_u[j] < params.birth_prob:
            state = np.array([box.cx, box.cy, box.w, box.h, 0.0, 0.0])
            if spread is not None:
                state = state + spread[j]
                state[2:4] = np.maximum(state[2:4], 1.0)
            new_rows.append(state)
    if not new_rows:
        return particle
    states = np.vstack([states, np.array(new_rows)])
    labels = np.concatenate([labels, np.full(len(new_rows), UNLABELED, np.int64)])
    return MultiObjectParticle(states=states, labels=labels, weight=particle.weight)


def _birth_noise(params: TrackerParams, rng: np.random.Generator,
                 shape: tuple[int, ...]) -> np.ndarray | None:
    if params.birth_spread == 0 and params.birth_vel_spread == 0:
        return None
    scale = np.array([params.birth_spread] * 4 + [params.birth_vel_spread] * 2)
    return rng.standard_normal(shape + (STATE_DIM,)) * scale


def birth(particle: MultiObjectParticle, detections: DetectionSample,
          params: TrackerParams, rng: np.random.Generator) -> MultiObjectParticle:
    """Spawn new objects from detections not explained by existing ones.

    Each detection farther than ``birth_gate`` from every object center
    spawns, with probability ``birth_prob``, an object at the detection box
    with velocity drawn from the birth velocity prior.
    """
    m = max(len(detections.boxes), 1)
    birth_u = rng.random(m)
    spread = _birth_noise(params, rng, (m,))
    return _birth_kernel(particle, detections, params, birth_u, spread)


def log_weigh(particle: MultiObjectParticle, detections: DetectionSample,
              params: TrackerParams) -> float:
    """Log multi-object likelihood of the detection set given the particle.

    Detections are associated to objects greedily inside a Mahalanobis gate
    (measurement space: box center and size, diagonal noise). Assigned pairs
    contribute the Gaussian density and a p_detect factor, unassigned objects
    a missed-detection factor, unassigned detections the clutter intensity.
    Constant factors shared by all particles are dropped.
    """
    sig = np.asarray(params.meas_noise, dtype=float)
    n = particle.cardinality
    dets = detections.boxes
    m = len(dets)
    if n == 0 and m == 0:
        return 0.0
    assigned_obj = np.zeros(n, dtype=bool)
    assigned_det = np.zeros(m, dtype=bool)
    logw = 0.0
    if n and m:
        z = np.array([[b.cx, b.cy, b.w, b.h] for b in dets])
        x = particle.states[:, :4]
        d2 = (((z[:, None, :] - x[None, :, :]) / sig) ** 2).sum(axis=2)
        gate2 = params.assoc_gate ** 2
        order = np.argsort(d2, axis=None, kind="stable")
        log_norm = -0.5 * 4 * LOG_2PI - float(np.log(sig).sum())
        for flat in order:
            j, i = divmod(int(flat), n)
            if d2[j, i] > gate2:
                break
            if assigned_det[j] or assigned_obj[i]:
                continue
            assigned_det[j] = True
            assigned_obj[i] = True
            logw += math.log(params.p_detect) if params.p_detect > 0 else -math.inf
            logw += log_norm - 0.5 * d2[j, i]
    n_missed = n - int(assigned_obj.sum())
    if n_missed:
        if params.p_detect >= 1.0:
            return -math.inf
        logw += n_missed * math.log(1.0 - params.p_detect)
    n_clutter = m - int(assigned_det.sum())
    if n_clutter:
        lk = params.log_clutter_density
        if lk == -math.inf:
            return -math.inf
        logw += n_clutter * lk
    return logw


def weigh(particle: MultiObjectParticle, detections: DetectionSample,
          params: TrackerParams) -> float:
    """Likelihood weight relative to the empty-scene baseline (exp of log)."""
    return math.exp(log_weigh(particle, detections, params))


def systematic_resample(weights: np.ndarray, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices of a systematic (low-variance) resampling of ``weights``."""
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, positions, side="right").clip(0, len(w) - 1)


def advance_population(particles: Sequence[MultiObjectParticle],
                       detection_sets: Sequence[DetectionSample],
                       params: TrackerParams,
                       rng: np.random.Generator,
                       diagnostics: dict | None = None) -> list[MultiObjectParticle]:
    """Predict / birth / weigh every particle and normalize the weights.

    ``detection_sets`` holds one realization per particle (they may all be
    the same object in baseline mode). Weights of the returned particles sum
    to one; a fully degenerate frame (all likelihoods zero) resets to uniform
    and is flagged in ``diagnostics``.
    """
    n = len(particles)
    if n != len(detection_sets):
        raise ValueError("one detection set per particle required")
    max_card = max((p.cardinality for p in particles), default=0)
    max_dets = max((len(s.boxes) for s in detection_sets), default=0)
    survival_u = rng.random((n, max(max_card, 1)))
    noise = _noise_block(params, rng, (n, max(max_card, 1)))
    birth_u = rng.random((n, max(max_dets, 1)))
    spread = _birth_noise(params, rng, (n, max(max_dets, 1)))

    out = []
    logws = np.empty(n)
    for i, (particle, dets) in enumerate(zip(particles, detection_sets)):
        p = _predict_kernel(particle, params, survival_u[i],
                            None if noise is None else noise[i])
        p = _birth_kernel(p, dets, params, birth_u[i],
                          None if spread is None else spread[i])
        logws[i] = log_weigh(p, dets, params)
        out.append(p)

    prior = np.array([p.weight for p in out])
    prior = prior / prior.sum() if prior.sum() > 0 else np.full(n, 1.0 / n)
    with np.errstate(invalid="ignore"):
        logpost = np.log(prior) + logws
    finite = np.isfinite(logpost)
    degenerate = not finite.any()
    if degenerate:
        weights = np.full(n, 1.0 / n)
    else:
        shifted = np.where(finite, logpost - logpost[finite].max(), -np.inf)
        weights = np.exp(shifted)
        weights = weights / weights.sum()
    for p, w in zip(out, weights):
        p.weight = float(w)

    if diagnostics is not None:
        cards: dict[int, float] = {}
        for p in out:
            cards[p.cardinality] = cards.get(p.cardinality, 0.0) + p.weight
        diagnostics["degenerate"] = degenerate
        diagnostics["cardinality_posterior"] = cards
        diagnostics["log_weights"] = logws
    return out


def step(particles: Sequence[MultiObjectParticle],
         detector_output_sampler: Sampler,
         params: TrackerParams,
         rng: np.random.Generator,
         diagnostics: dict | None = None) -> list[MultiObjectParticle]:
    """One full filter stage with per-particle measurement sampling.

    Draws a fresh detection set for every particle, runs predict / birth /
    weigh, normalizes, and systematically resamples back to
    ``params.n_particles`` (uniform weights).
    """
    detection_sets = detector_output_sampler(len(particles), rng)
    weighted = advance_population(particles, detection_sets, params, rng, diagnostics)
    w = np.array([p.weight for p in weighted])
    idx = systematic_resample(w, params.n_particles, rng)
    return [MultiObjectParticle(states=weighted[i].states.copy(),
                                labels=weighted[i].labels.copy(),
                                weight=1.0 / params.n_particles) for i in idx]


def step_baseline(particles: Sequence[MultiObjectParticle],
                  raw_detections: Sequence[RawDetection],
                  threshold: float,
                  params: TrackerParams,
                  rng: np.random.Generator,
                  diagnostics: dict | None = None) -> list[MultiObjectParticle]:
    """Same pipeline as :func:`step` with one thresholded set for everyone."""
    shared = threshold_detections(raw_detections, threshold)
    return step(particles, make_constant_sampler(shared), params, rng, diagnostics)
