"""Labeled summary frames extracted from the weighted particle population.

Per stage the particles are binned by object count, the heaviest bin is
summarized into a set of labeled Gaussian tracks (the "output frame"), and
the next particle population is drawn from the binned representation so that
labels persist from stage to stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .geometry import COV_EPSILON, STATE_DIM, BBox, fit_gaussian
from .rfs import UNLABELED, MultiObjectParticle, TrackerParams

EM_MAX_ITERS = 50
EM_TOL = 1e-6


@dataclass(frozen=True)
class Track:
    label: int
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class OutputFrame:
    tracks: tuple[Track, ...] = ()

    def __post_init__(self):
        labels = [t.label for t in self.tracks]
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate track labels in frame: {labels}")

    @property
    def labels(self) -> list[int]:
        return [t.label for t in self.tracks]


@dataclass(frozen=True)
class CardinalityBin:
    cardinality: int
    particles: tuple[MultiObjectParticle, ...]
    cum_weight: float


@dataclass(frozen=True)
class GmmComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class Gmm:
    components: tuple[GmmComponent, ...] = ()
    loglik_history: tuple[float, ...] = ()

    def __post_init__(self):
        if self.components:
            total = sum(c.weight for c in self.components)
            if abs(total - 1.0) > 1e-9 or any(c.weight < 0 for c in self.components):
                raise ValueError(f"component weights must be a distribution, sum={total}")


class LabelAllocator:
    """Monotonic source of fresh track labels."""

    def __init__(self, start: int = 0):
        self._next = start

    def take(self) -> int:
        label = self._next
        self._next += 1
        return label

    def reserve(self, used: Iterable[int]) -> None:
        used = list(used)
        if used:
            self._next = max(self._next, max(used) + 1)


def bin_particles(particles: Sequence[MultiObjectParticle]) -> list[CardinalityBin]:
    """Group particles by object count; bin weights sum to the total weight."""
    groups: dict[int, list[MultiObjectParticle]] = {}
    for p in particles:
        groups.setdefault(p.cardinality, []).append(p)
    bins = []
    for card in sorted(groups):
        members = groups[card]
        bins.append(CardinalityBin(
            cardinality=card, particles=tuple(members),
            cum_weight=float(sum(p.weight for p in members))))
    return bins


# ---------------------------------------------------------------------------
# Gaussian mixture fitting


def _log_gauss(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    dim = points.shape[1]
    chol = np.linalg.cholesky(cov)
    diff = points - mean
    sol = np.linalg.solve(chol, diff.T)
    return (-0.5 * (sol ** 2).sum(axis=0)
            - np.log(np.diag(chol)).sum()
            - 0.5 * dim * np.log(2 * np.pi))


def _kmeanspp_seeds(points: np.ndarray, k: int, w: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    seeds = [points[int(rng.choice(n, p=w))]]
    for _ in range(1, k):
        d2 = np.min([((points - s) ** 2).sum(axis=1) for s in seeds], axis=0)
        total = (w * d2).sum()
        if total <= 0:
            seeds.append(points[int(rng.choice(n, p=w))])
            continue
        seeds.append(points[int(rng.choice(n, p=w * d2 / total))])
    return np.array(seeds)


def fit_gmm_em(points: Sequence[np.ndarray] | np.ndarray, k: int,
               rng: np.random.Generator,
               weights: Sequence[float] | np.ndarray | None = None) -> Gmm:
    """EM fit of a k-component Gaussian mixture to 6D points.

    Means are seeded with k-means++; iterations stop after EM_MAX_ITERS or
    when the (weighted) log-likelihood improves by less than EM_TOL.
    Component covariances carry the COV_EPSILON floor throughout, and k is
    clamped to the number of points. Optional per-point weights make the fit
    target the weighted empirical distribution.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, STATE_DIM)
    n = pts.shape[0]
    if n == 0:
        return Gmm()
    if k < 1:
        raise ValueError("k must be >= 1 when points are present")
    k = min(k, n)
    eye = COV_EPSILON * np.eye(STATE_DIM)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        w = w / w.sum()

    # Hard-assign points to the k-means++ seeds and take per-cluster moments.
    # Seeding every component at the global covariance would leave all of
    # them explaining everything, and EM then merges separated clusters.
    means = _kmeanspp_seeds(pts, k, w, rng)
    d2 = ((pts[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    centered = pts - w @ pts
    base_cov = (centered * w[:, None]).T @ centered + eye
    covs = np.empty((k, STATE_DIM, STATE_DIM))
    mix = np.empty(k)
    for j in range(k):
        sel = assign == j
        mass = w[sel].sum()
        if mass <= 0:
            covs[j] = base_cov.copy()
            mix[j] = 1.0 / n
            continue
        means[j] = w[sel] @ pts[sel] / mass
        diff = pts[sel] - means[j]
        covs[j] = (diff * w[sel][:, None]).T @ diff / mass + eye
        mix[j] = mass
    mix = mix / mix.sum()

    history = []
    prev_ll = -np.inf
    for _ in range(EM_MAX_ITERS):
        logp = np.stack([_log_gauss(pts, means[j], covs[j]) for j in range(k)], axis=1)
        with np.errstate(divide="ignore"):
            logp = logp + np.log(mix)[None, :]
        norm = logsumexp(logp, axis=1)
        ll = float(w @ norm)
        history.append(ll)
        resp = np.exp(logp - norm[:, None]) * w[:, None]

        mass = resp.sum(axis=0)
        for j in range(k):
            if mass[j] < 1e-15:
                # Starved component: park it on the worst-explained point.
                worst = int(np.argmin(norm))
                means[j] = pts[worst]
                covs[j] = base_cov.copy()
                mass[j] = 1e-15
                continue
            means[j] = resp[:, j] @ pts / mass[j]
            diff = pts - means[j]
            covs[j] = (diff * resp[:, j][:, None]).T @ diff / mass[j]
            covs[j] = (covs[j] + covs[j].T) / 2 + eye
        mix = mass / mass.sum()

        if ll - prev_ll < EM_TOL and np.isfinite(prev_ll):
            break
        prev_ll = ll

    comps = tuple(GmmComponent(weight=float(mix[j]), mean=means[j].copy(),
                               cov=covs[j].copy()) for j in range(k))
    # Renormalize away float drift so weights form an exact distribution.
    total = sum(c.weight for c in comps)
    comps = tuple(GmmComponent(c.weight / total, c.mean, c.cov) for c in comps)
    return Gmm(components=comps, loglik_history=tuple(history))


# ---------------------------------------------------------------------------
# output frame construction


def _select_bin(bins: Sequence[CardinalityBin]) -> CardinalityBin:
    # Heaviest bin wins; ties go to the larger cardinality (keep tracks alive).
    return max(bins, key=lambda b: (b.cum_weight, b.cardinality))


def build_output_frame(bins: Sequence[CardinalityBin],
                       prev_frame: OutputFrame,
                       rng: np.random.Generator,
                       allocator: LabelAllocator | None = None) -> OutputFrame:
    """Summarize the heaviest cardinality bin into labeled Gaussian tracks.

    Objects that carry a label are refit per label across the bin's
    particles; the remaining objects are pooled into a mixture fit with as
    many components as the bin cardinality. Candidates from both families
    are ranked by their expected object count per particle and the top C
    kept, where C is the bin cardinality. Mixture-sourced survivors receive
    fresh labels.
    """
    if not bins:
        raise ValueError("need at least one bin")
    if allocator is None:
        allocator = LabelAllocator()
        allocator.reserve(prev_frame.labels)
    win = _select_bin(bins)
    C = win.cardinality
    if C == 0:
        return OutputFrame()
    w_bin = win.cum_weight if win.cum_weight > 0 else len(win.particles)

    label_pts: dict[int, list[np.ndarray]] = {}
    label_wts: dict[int, list[float]] = {}
    unlabeled_pts: list[np.ndarray] = []
    unlabeled_wts: list[float] = []
    unlabeled_mass = 0.0
    for p in win.particles:
        pw = p.weight if win.cum_weight > 0 else 1.0
        for state, label in zip(p.states, p.labels):
            if label == UNLABELED:
                unlabeled_pts.append(state)
                unlabeled_wts.append(pw)
                unlabeled_mass += pw
            else:
                label_pts.setdefault(int(label), []).append(state)
                label_wts.setdefault(int(label), []).append(pw)

    candidates = []  # (rank weight, order key, label or None, mean, cov)
    for label in sorted(label_pts):
        g = fit_gaussian(label_pts[label], label_wts[label])
        support = sum(label_wts[label]) / w_bin
        candidates.append((support, (0, label), label, g.mean, g.cov))
    if unlabeled_pts:
        gmm = fit_gmm_em(unlabeled_pts, C, rng, weights=unlabeled_wts)
        scale = unlabeled_mass / w_bin  # expected unlabeled objects per particle
        for j, comp in enumerate(gmm.components):
            candidates.append((comp.weight * scale, (1, j), None, comp.mean, comp.cov))

    candidates.sort(key=lambda c: (-c[0], c[1]))
    tracks = []
    for support, _, label, mean, cov in candidates[:C]:
        if label is None:
            label = allocator.take()
        tracks.append(Track(label=label, mean=np.asarray(mean, dtype=float),
                            cov=np.asarray(cov, dtype=float)))
    return OutputFrame(tracks=tuple(tracks))


def _bin_mixture(b: CardinalityBin, radius: float) -> Gmm:
    """Mixture over a bin's weighted objects, one component per spatial mode.

    The component count is free here (unlike the output-frame fit): a bin
    holds hypotheses about *which* objects exist, so a cardinality-1 bin may
    mix disjoint object locations, and fitting it with one component would
    merge them into a ghost at their centroid. Objects are grouped by center
    proximity instead, and each group becomes one component.
    """
    if b.cardinality == 0:
        return Gmm()
    pts = np.vstack([p.states for p in b.particles])
    wts = np.repeat([p.weight for p in b.particles], b.cardinality)
    if wts.sum() <= 0:
        wts = np.ones(len(pts))
    order = np.argsort(-wts, kind="stable")
    leaders: list[np.ndarray] = []
    groups: list[list[int]] = []
    for i in order:
        for g, lead in enumerate(leaders):
            if np.hypot(pts[i, 0] - lead[0], pts[i, 1] - lead[1]) <= radius:
                groups[g].append(int(i))
                break
        else:
            leaders.append(pts[i, :2])
            groups.append([int(i)])
    comps = []
    total = wts.sum()
    for idx in groups:
        g = fit_gaussian(pts[idx], wts[idx])
        comps.append(GmmComponent(weight=float(wts[idx].sum() / total),
                                  mean=g.mean, cov=g.cov))
    comps.sort(key=lambda c: -c.weight)
    return Gmm(components=tuple(comps))


def sample_next_particles(bins: Sequence[CardinalityBin],
                          frame: OutputFrame,
                          n: int,
                          params: TrackerParams,
                          rng: np.random.Generator) -> list[MultiObjectParticle]:
    """Draw the next particle population from the binned representation.

    Each particle first draws its cardinality from the bin weights, then its
    object states from the chosen bin's mixture (fit over all of that bin's
    objects with as many components as the cardinality). One object is drawn
    per mixture component: independent per-object draws would frequently put
    two objects on the same component and starve the other, collapsing
    multi-object hypotheses. A sampled object inherits the label of the
    closest output track within the Mahalanobis gate (position and size
    dimensions); labels stay unique inside a particle.
    """
    if not bins or n < 1:
        raise ValueError("need bins and n >= 1")
    weights = np.array([b.cum_weight for b in bins], dtype=float)
    if weights.sum() <= 0:
        weights = np.ones(len(bins))
    weights = weights / weights.sum()
    choice = rng.choice(len(bins), size=n, p=weights)

    gmms: dict[int, tuple[Gmm, list[np.ndarray]]] = {}
    for bi in sorted(set(int(c) for c in choice)):
        g = _bin_mixture(bins[bi], radius=params.birth_gate)
        chols = [np.linalg.cholesky(c.cov) for c in g.components]
        gmms[bi] = (g, chols)

    gates = _label_gates(frame, params)

    particles = []
    for i in range(n):
        b = bins[int(choice[i])]
        card = b.cardinality
        if card == 0:
            particles.append(MultiObjectParticle.empty(1.0 / n))
            continue
        gmm, chols = gmms[int(choice[i])]
        k = len(gmm.components)
        if card <= k:
            mix = np.array([c.weight for c in gmm.components])
            comp_idx = rng.choice(k, size=card, replace=False, p=mix)
        else:
            comp_idx = np.concatenate([
                np.arange(k),
                rng.choice(k, size=card - k,
                           p=np.array([c.weight for c in gmm.components]))])
        states = np.empty((card, STATE_DIM))
        for r, ci in enumerate(comp_idx):
            z = rng.standard_normal(STATE_DIM)
            states[r] = gmm.components[ci].mean + chols[ci] @ z
        labels = _gate_labels(states, frame, gates, params.label_gate)
        particles.append(MultiObjectParticle(states=states, labels=labels,
                                             weight=1.0 / n))
    return particles


def _label_gates(frame: OutputFrame, params: TrackerParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-track (mean, covariance) over the position/size block, floored at
    the measurement scale so consensus tracks with collapsed covariance still
    pass their labels on."""
    floor = np.diag(np.asarray(params.meas_noise, dtype=float) ** 2)
    return [(t.mean[:4], t.cov[:4, :4] + floor) for t in frame.tracks]


def _gate_labels(states: np.ndarray, frame: OutputFrame,
                 gates: Sequence[tuple[np.ndarray, np.ndarray]],
                 gate: float) -> np.ndarray:
    labels = np.full(states.shape[0], UNLABELED, np.int64)
    if not frame.tracks:
        return labels
    pairs = []
    for oi, state in enumerate(states):
        for ti, (mean, cov) in enumerate(gates):
            diff = state[:4] - mean
            d = float(np.sqrt(max(diff @ np.linalg.solve(cov, diff), 0.0)))
            if d <= gate:
                pairs.append((d, oi, ti))
    pairs.sort()
    used_obj = set()
    used_track = set()
    for d, oi, ti in pairs:
        if oi in used_obj or ti in used_track:
            continue
        used_obj.add(oi)
        used_track.add(ti)
        labels[oi] = frame.tracks[ti].label
    return labels


# ---------------------------------------------------------------------------
# track log serialization (shared output format of all trackers)


def frame_record(frame_idx: int, frame: OutputFrame) -> dict:
    return {
        "frame": frame_idx,
        "tracks": [
            {"label": int(t.label),
             "box": [float(v) for v in t.mean[:4]],
             "cov_diag": [float(v) for v in np.diag(t.cov)]}
            for t in frame.tracks
        ],
    }


def write_track_log(path: str | Path, frames: Iterable[OutputFrame]) -> None:
    with open(path, "w") as fh:
        for k, frame in enumerate(frames):
            fh.write(json.dumps(frame_record(k, frame), sort_keys=True) + "\n")


def read_track_log(path: str | Path) -> list[list[tuple[int, BBox]]]:
    """Read a track log into per-frame (label, box) lists (metrics input)."""
    frames: dict[int, list[tuple[int, BBox]]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        frames[int(rec["frame"])] = [
            (int(t["label"]), BBox(*t["box"])) for t in rec["tracks"]]
    if not frames:
        return []
    return [frames.get(k, []) for k in range(max(frames) + 1)]
