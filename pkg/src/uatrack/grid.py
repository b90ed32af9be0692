"""Occupancy-grid tracker: per-cell measurements drive Gaussian track updates.

Each grid cell carries a binary occupancy and an uncertainty in [0, 1]; a
fully uncertain cell (u = 1) is worthless evidence and leaves both the track
state and its existence likelihood ratio untouched. Occupied cells are
clustered, clusters are greedily associated to tracks, and each track is
updated by importance-weighting particles drawn from its predicted Gaussian
against the cluster's cells. Track existence is a log likelihood ratio
updated from the same particle weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from .geometry import BBox, GaussianState, Rect, fit_gaussian, iou, rect_distances
from .output_frame import LabelAllocator, OutputFrame, Track
from .scenario import OccupancyGrid


@dataclass(frozen=True)
class GridParams:
    p_tp: float = 0.75
    p_fp: float = 0.2
    # Likelihood shaping length, in pixels. Keep this well below the cell
    # size: a slow decay makes boxes that under-cover their blob score better
    # than the true box, because cells just outside a box sit at set
    # distance zero and are then expected occupied at near p_tp.
    sigma: float = 1.0
    n_particles: int = 50
    link_radius: int = 2            # Chebyshev radius joining occupied cells
    boundary_radius: int = 2        # Chebyshev radius of surrounding empty cells
    birth_log_lr: float = 0.0
    kill_log_lr: float = math.log(0.01)
    confirm_log_lr: float = math.log(10.0)
    assoc_gate: float = 40.0        # px center distance allowing association
    miss_gate: float = 8.0          # px margin of empty evidence for missed tracks
    max_cells: int = 4096           # clusters above this are subsampled
    birth_min_evidence: float = 1.0  # required sum of (1 - u) over occupied cells
    birth_pos_std: float = 2.0
    birth_size_std: float = 2.0
    birth_vel_std: float = 1.0
    process_noise: tuple[float, float, float] = (1.0, 0.3, 0.3)  # pos, size, vel
    vel_damping: float = 0.95       # velocity retention per frame

    def __post_init__(self):
        if not 0.0 <= self.p_fp < self.p_tp <= 1.0:
            raise ValueError("need 0 <= p_fp < p_tp <= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class GridTrack:
    label: int
    state: GaussianState
    log_lr: float

    def __post_init__(self):
        if not math.isfinite(self.log_lr):
            raise ValueError(f"log_lr must be finite, got {self.log_lr}")


@dataclass(frozen=True)
class Cluster:
    """Connected occupied cells plus the empty cells surrounding them.

    Cells are (row, col) indices; ``bbox`` is the tight pixel bound of the
    occupied cells. Occupied cells belong to exactly one cluster, boundary
    cells may be shared between clusters.
    """

    occupied_cells: tuple[tuple[int, int], ...]
    boundary_cells: tuple[tuple[int, int], ...]
    bbox: Rect


def pixel_likelihood(o: int, u: float, d: float, params: GridParams) -> float:
    """Likelihood of one cell's (occupancy, uncertainty) given an object at
    set distance ``d`` (same units as ``params.sigma``).

    For an occupied reading the likelihood peaks at p_tp at d = 0, decays to
    p_fp with distance, and is pulled toward 1/2 as the uncertainty rises;
    the unoccupied reading is the exact complement.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must be in [0,1], got {u}")
    if d < 0 or not math.isfinite(d):
        raise ValueError(f"d must be finite and >= 0, got {d}")
    if o not in (0, 1):
        raise ValueError(f"o must be 0 or 1, got {o}")
    shape = math.exp(-d * d / (2.0 * params.sigma ** 2))
    p_occ = (params.p_fp + (params.p_tp - params.p_fp) * shape) * (1.0 - u) + u / 2.0
    return p_occ if o == 1 else 1.0 - p_occ


def empty_likelihood(o: int, u: float, params: GridParams) -> float:
    """Likelihood of a cell reading when no object is nearby."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must be in [0,1], got {u}")
    if o not in (0, 1):
        raise ValueError(f"o must be 0 or 1, got {o}")
    p_occ = params.p_fp * (1.0 - u) + u / 2.0
    return p_occ if o == 1 else 1.0 - p_occ


def _log_cell_likelihoods(d: np.ndarray, occ: np.ndarray, unc: np.ndarray,
                          params: GridParams) -> np.ndarray:
    """Vectorized log pixel_likelihood for (particles x cells) distances."""
    shape = np.exp(-d * d / (2.0 * params.sigma ** 2))
    p_occ = (params.p_fp + (params.p_tp - params.p_fp) * shape) * (1.0 - unc) + unc / 2.0
    p = np.where(occ == 1, p_occ, 1.0 - p_occ)
    return np.log(p)


def _log_empty_sum(occ: np.ndarray, unc: np.ndarray, params: GridParams) -> float:
    p_occ = params.p_fp * (1.0 - unc) + unc / 2.0
    p = np.where(occ == 1, p_occ, 1.0 - p_occ)
    return float(np.log(p).sum())


# ---------------------------------------------------------------------------
# clustering


def _neighbor_offsets(radius: int) -> np.ndarray:
    offs = [(dr, dc)
            for dr in range(-radius, radius + 1)
            for dc in range(-radius, radius + 1)
            if (dr, dc) != (0, 0)]
    return np.array(offs, dtype=int)


def cluster_grid(grid: OccupancyGrid, params: GridParams) -> list[Cluster]:
    """Connected components of occupied cells, linked when their Chebyshev
    distance is at most ``link_radius``, each padded with the unoccupied
    cells within ``boundary_radius``."""
    occ = grid.occ
    rows, cols = np.nonzero(occ)
    n = rows.size
    if n == 0:
        return []
    h, w = occ.shape
    index = np.full(occ.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)

    # Half neighborhood is enough for an undirected adjacency.
    offsets = _neighbor_offsets(params.link_radius)
    offsets = offsets[(offsets[:, 0] > 0) | ((offsets[:, 0] == 0) & (offsets[:, 1] > 0))]
    ei, ej = [], []
    for dr, dc in offsets:
        r2 = rows + dr
        c2 = cols + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        ok[ok] &= occ[r2[ok], c2[ok]] == 1
        ei.append(index[rows[ok], cols[ok]])
        ej.append(index[r2[ok], c2[ok]])
    ei = np.concatenate(ei) if ei else np.zeros(0, np.int64)
    ej = np.concatenate(ej) if ej else np.zeros(0, np.int64)
    adj = coo_matrix((np.ones(ei.size), (ei, ej)), shape=(n, n))
    n_comp, comp = connected_components(adj, directed=False)

    bound_offsets = _neighbor_offsets(params.boundary_radius)
    cell = grid.cell_size
    clusters = []
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        mr, mc = rows[members], cols[members]
        cand_r = (mr[:, None] + bound_offsets[None, :, 0]).ravel()
        cand_c = (mc[:, None] + bound_offsets[None, :, 1]).ravel()
        ok = (cand_r >= 0) & (cand_r < h) & (cand_c >= 0) & (cand_c < w)
        cand_r, cand_c = cand_r[ok], cand_c[ok]
        flat = np.unique(cand_r * w + cand_c)
        br, bc = flat // w, flat % w
        empty = occ[br, bc] == 0
        br, bc = br[empty], bc[empty]
        bbox = Rect(float(mc.min() * cell), float(mr.min() * cell),
                    float((mc.max() + 1) * cell), float((mr.max() + 1) * cell))
        clusters.append(Cluster(
            occupied_cells=tuple(zip(mr.tolist(), mc.tolist())),
            boundary_cells=tuple(zip(br.tolist(), bc.tolist())),
            bbox=bbox))
    # Stable frame-to-frame ordering: by first occupied cell in row-major order.
    clusters.sort(key=lambda cl: min(r * w + c for r, c in cl.occupied_cells))
    return clusters


def _rect_to_bbox(r: Rect) -> BBox:
    return BBox((r.x0 + r.x1) / 2, (r.y0 + r.y1) / 2, r.x1 - r.x0, r.y1 - r.y0)


def associate(clusters: Sequence[Cluster], tracks: Sequence[GridTrack],
              params: GridParams) -> dict[int, int]:
    """Greedy cluster-to-track assignment, best overlap first.

    Candidate pairs need positive box overlap or a center distance inside the
    gate; each track receives at most one cluster and vice versa. Returns
    {cluster index: track index}; clusters absent from the map are new.
    """
    pairs = []
    for ci, cl in enumerate(clusters):
        cb = _rect_to_bbox(cl.bbox)
        for ti, tr in enumerate(tracks):
            tb = tr.state.box()
            v = iou(cb, tb)
            dist = math.hypot(cb.cx - tb.cx, cb.cy - tb.cy)
            if v > 0 or dist <= params.assoc_gate:
                pairs.append((-v, dist, ci, ti))
    pairs.sort()
    assigned: dict[int, int] = {}
    used_tracks = set()
    for _, _, ci, ti in pairs:
        if ci in assigned or ti in used_tracks:
            continue
        assigned[ci] = ti
        used_tracks.add(ti)
    return assigned


# ---------------------------------------------------------------------------
# track update


def _predict_state(state: GaussianState, params: GridParams) -> GaussianState:
    F = np.eye(6)
    F[0, 4] = 1.0
    F[1, 5] = 1.0
    F[4, 4] = params.vel_damping
    F[5, 5] = params.vel_damping
    pos, size, vel = params.process_noise
    Q = np.diag(np.array([pos, pos, size, size, vel, vel], dtype=float) ** 2)
    mean = F @ state.mean
    cov = F @ state.cov @ F.T + Q
    return GaussianState(mean=mean, cov=(cov + cov.T) / 2)


def _cells_arrays(cells: Sequence[tuple[int, int]], grid: OccupancyGrid):
    idx = np.array(cells, dtype=int).reshape(-1, 2)
    r, c = idx[:, 0], idx[:, 1]
    s = grid.cell_size
    rects = np.stack([c * s, r * s, (c + 1) * s, (r + 1) * s], axis=1).astype(float)
    return rects, grid.occ[r, c].astype(int), grid.unc[r, c]


def _miss_evidence_cells(state: GaussianState, grid: OccupancyGrid,
                         params: GridParams) -> list[tuple[int, int]]:
    """Unoccupied cells within the miss gate of the predicted box."""
    box = state.box()
    s = grid.cell_size
    c0 = max(int((box.x0 - params.miss_gate) // s), 0)
    c1 = min(int((box.x1 + params.miss_gate) // s) + 1, grid.cells_w)
    r0 = max(int((box.y0 - params.miss_gate) // s), 0)
    r1 = min(int((box.y1 + params.miss_gate) // s) + 1, grid.cells_h)
    if c0 >= c1 or r0 >= r1:
        return []
    window = grid.occ[r0:r1, c0:c1]
    rr, cc = np.nonzero(window == 0)
    return list(zip((rr + r0).tolist(), (cc + c0).tolist()))


def update_existence(log_lr: float, log_w_bar: float, occ: np.ndarray,
                     unc: np.ndarray, params: GridParams,
                     scale: float = 1.0) -> float:
    """Multiply the existence ratio by mean particle weight over the
    no-object likelihood of the same cells (all in log domain)."""
    return log_lr + log_w_bar - scale * _log_empty_sum(occ, unc, params)


def update_track(track: GridTrack, cluster: Cluster | None, grid: OccupancyGrid,
                 params: GridParams, rng: np.random.Generator,
                 diagnostics: dict | None = None) -> GridTrack:
    """Predict, importance-weight sampled states against the cluster's cells,
    refit the Gaussian, and update the existence log ratio.

    Without an assigned cluster the track is weighed against the unoccupied
    cells near its predicted box. Cell sets larger than ``max_cells`` are
    uniformly subsampled, with the log-likelihood exponent rescaled so both
    the weights and the existence denominator see the same evidence.
    """
    predicted = _predict_state(track.state, params)
    if cluster is not None:
        cells = list(cluster.occupied_cells) + list(cluster.boundary_cells)
    else:
        cells = _miss_evidence_cells(predicted, grid, params)
    if not cells:
        return GridTrack(track.label, predicted, track.log_lr)

    scale = 1.0
    if len(cells) > params.max_cells:
        scale = len(cells) / params.max_cells
        pick = rng.choice(len(cells), size=params.max_cells, replace=False)
        cells = [cells[int(i)] for i in np.sort(pick)]
    rects, occ, unc = _cells_arrays(cells, grid)

    chol = np.linalg.cholesky(predicted.cov + 1e-9 * np.eye(6))
    z = rng.standard_normal((params.n_particles, 6))
    states = predicted.mean[None, :] + z @ chol.T
    states[:, 2:4] = np.maximum(states[:, 2:4], 1e-3)

    d = rect_distances(states[:, :4], rects)
    logw = scale * _log_cell_likelihoods(d, occ[None, :], unc[None, :], params).sum(axis=1)

    log_w_bar = float(logsumexp(logw) - math.log(params.n_particles))
    shifted = np.exp(logw - logw.max()) if np.isfinite(logw.max()) else np.zeros_like(logw)
    total = shifted.sum()
    degenerate = not (np.isfinite(total) and total > 0)
    if degenerate:
        post = predicted
        log_w_bar = scale * float(np.log(
            np.full(occ.shape, 0.5)).sum())  # flat fallback: no information
    else:
        post = fit_gaussian(states, shifted / total)

    new_log_lr = update_existence(track.log_lr, log_w_bar, occ, unc, params, scale)
    if diagnostics is not None:
        diagnostics["degenerate"] = degenerate
        diagnostics["log_w_bar"] = log_w_bar
        diagnostics["n_cells"] = len(cells)
    return GridTrack(track.label, post, new_log_lr)


def birth_and_kill(tracks: Sequence[GridTrack], new_clusters: Sequence[Cluster],
                   grid: OccupancyGrid, params: GridParams,
                   allocator: LabelAllocator) -> list[GridTrack]:
    """Remove tracks below the kill threshold, then spawn a track per
    unassigned cluster that carries enough confident occupied evidence."""
    out = [t for t in tracks if t.log_lr >= params.kill_log_lr]
    for cl in new_clusters:
        idx = np.array(cl.occupied_cells, dtype=int)
        unc = grid.unc[idx[:, 0], idx[:, 1]]
        if float((1.0 - unc).sum()) < params.birth_min_evidence:
            continue
        b = _rect_to_bbox(cl.bbox)
        mean = np.array([b.cx, b.cy, b.w, b.h, 0.0, 0.0])
        cov = np.diag(np.array([
            params.birth_pos_std, params.birth_pos_std,
            params.birth_size_std, params.birth_size_std,
            params.birth_vel_std, params.birth_vel_std]) ** 2)
        out.append(GridTrack(label=allocator.take(),
                             state=GaussianState(mean=mean, cov=cov),
                             log_lr=params.birth_log_lr))
    return out


def step_grid(tracks: Sequence[GridTrack], grid: OccupancyGrid, params: GridParams,
              rng: np.random.Generator, allocator: LabelAllocator,
              diagnostics: dict | None = None) -> tuple[list[GridTrack], OutputFrame]:
    """One full grid-tracker stage; returns surviving tracks and the frame of
    confirmed ones."""
    clusters = cluster_grid(grid, params)
    assignment = associate(clusters, tracks, params)
    track_cluster = {ti: ci for ci, ti in assignment.items()}

    child_rngs = rng.spawn(max(len(tracks), 1))
    updated = []
    for ti, track in enumerate(tracks):
        ci = track_cluster.get(ti)
        cl = clusters[ci] if ci is not None else None
        updated.append(update_track(track, cl, grid, params, child_rngs[ti]))

    new_clusters = [cl for ci, cl in enumerate(clusters) if ci not in assignment]
    survivors = birth_and_kill(updated, new_clusters, grid, params, allocator)

    confirmed = tuple(Track(label=t.label, mean=t.state.mean, cov=t.state.cov)
                      for t in survivors if t.log_lr >= params.confirm_log_lr)
    if diagnostics is not None:
        diagnostics["n_clusters"] = len(clusters)
        diagnostics["log_lrs"] = {t.label: t.log_lr for t in survivors}
    return survivors, OutputFrame(tracks=confirmed)


class GridTracker:
    """Stateful frame-by-frame driver around :func:`step_grid`.

    Deterministic for a fixed seed: frame k uses an rng keyed on
    (seed, frame index), with per-track substreams spawned inside the step.
    """

    def __init__(self, params: GridParams, seed: int = 0):
        self.params = params
        self.seed = seed
        self.tracks: list[GridTrack] = []
        self.allocator = LabelAllocator()
        self.lr_trace: list[dict] = []

    def process(self, frame_idx: int, grid: OccupancyGrid) -> OutputFrame:
        rng = np.random.default_rng((self.seed, frame_idx, 3))
        self.tracks, frame = step_grid(self.tracks, grid, self.params, rng,
                                       self.allocator)
        for t in self.tracks:
            self.lr_trace.append({"frame": frame_idx, "label": int(t.label),
                                  "log_lr": float(t.log_lr)})
        return frame
