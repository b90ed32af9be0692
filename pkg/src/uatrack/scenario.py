"""Ground-truth worlds plus a stochastic stand-in for an uncertainty-aware detector.

The simulator produces, per frame, three views of the same scene:

* the true objects (used as ground truth by the metrics),
* raw box detections with confidence scores (fed to the particle trackers),
* a per-cell occupancy probability map (fed to the grid tracker).

Real detector outputs can replace the simulator through a JSON-lines replay
log carrying exactly the same payloads.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox


class InputDataError(ValueError):
    """Malformed scenario file or replay log."""


@dataclass(frozen=True)
class WorldObject:
    """One simulated object with its detectability model."""

    id: str
    box: BBox
    velocity: tuple[float, float] = (0.0, 0.0)
    ood: bool = False
    c_bar: float = 0.95          # base confidence the detector assigns
    jitter: float = 0.0          # frame-to-frame confidence stddev

    def __post_init__(self):
        if not 0.0 <= self.c_bar <= 1.0:
            raise ValueError(f"c_bar must be in [0,1], got {self.c_bar}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class RawDetection:
    """A detector output: box plus confidence in [0, 1]."""

    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")


@dataclass(frozen=True)
class DetectionSample:
    """One sampled realization of the detector's output set."""

    boxes: tuple[BBox, ...] = ()


@dataclass(frozen=True)
class OccupancyGrid:
    """Binary occupancy plus per-cell uncertainty over a regular grid.

    ``occ`` and ``unc`` are (cells_h, cells_w) arrays; cell (i, j) covers the
    pixel rectangle [j*cell_size, (j+1)*cell_size] x [i*cell_size, (i+1)*cell_size].
    """

    occ: np.ndarray
    unc: np.ndarray
    cell_size: float

    def __post_init__(self):
        occ = np.asarray(self.occ, dtype=np.uint8)
        unc = np.asarray(self.unc, dtype=float)
        if occ.shape != unc.shape or occ.ndim != 2 or 0 in occ.shape:
            raise ValueError(f"bad grid shapes occ={occ.shape} unc={unc.shape}")
        if unc.min() < 0 or unc.max() > 1:
            raise ValueError("uncertainty outside [0,1]")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "occ", occ)
        object.__setattr__(self, "unc", unc)

    @property
    def cells_w(self) -> int:
        return self.occ.shape[1]

    @property
    def cells_h(self) -> int:
        return self.occ.shape[0]


@dataclass(frozen=True)
class DetectorModel:
    """Parameters of the simulated detector head."""

    box_noise: float = 1.0        # px stddev on raw detection boxes
    box_jitter: float = 2.0       # px stddev re-applied to each sampled box
    clutter_rate: float = 2.0     # Poisson false detections per frame
    clutter_conf: tuple[float, float] = (0.3, 0.9)
    clutter_size: tuple[float, float] = (20.0, 80.0)
    background_p: float = 0.05
    id_p: float = 0.95
    ood_p: float = 0.6
    p_noise: float = 0.0          # spatial stddev added to the probability map
    grid_cells: tuple[int, int] = (240, 160)   # (cells_w, cells_h)


@dataclass(frozen=True)
class ScriptedObject:
    """Object script: either an explicit trajectory or start + velocity."""

    id: str
    c_bar: float = 0.95
    jitter: float = 0.0
    ood: bool = False
    start: tuple[float, float, float, float] | None = None
    velocity: tuple[float, float] = (0.0, 0.0)
    trajectory: tuple[tuple[float, float, float, float], ...] | None = None
    enter: int = 0
    exit: int | None = None


@dataclass(frozen=True)
class Scenario:
    image_w: float
    image_h: float
    frames: int
    seed: int
    objects: tuple[ScriptedObject, ...]
    detector: DetectorModel = DetectorModel()
    process_noise: float = 0.0    # px stddev applied by step_world when rolling out
    margin: float = 50.0          # objects farther than this outside the image die

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image dimensions must be positive")


def step_world(objects: Sequence[WorldObject], noise: float, rng: np.random.Generator,
               image_w: float = np.inf, image_h: float = np.inf,
               margin: float = np.inf) -> list[WorldObject]:
    """Advance objects one frame: position += velocity plus Gaussian noise.

    Sizes are held constant apart from the same noise; objects drifting
    farther than ``margin`` outside the image are dropped.
    """
    out = []
    for obj in objects:
        b = obj.box
        dx, dy = obj.velocity
        if noise > 0:
            eps = rng.normal(0.0, noise, size=4)
        else:
            eps = np.zeros(4)
        cx = b.cx + dx + eps[0]
        cy = b.cy + dy + eps[1]
        w = max(b.w + eps[2], 1.0)
        h = max(b.h + eps[3], 1.0)
        if (cx < -margin or cx > image_w + margin
                or cy < -margin or cy > image_h + margin):
            continue
        out.append(replace(obj, box=BBox(cx, cy, w, h)))
    return out


def render_raw_detections(objects: Sequence[WorldObject], model: DetectorModel,
                          rng: np.random.Generator,
                          image_w: float, image_h: float) -> list[RawDetection]:
    """One raw detection per object plus Poisson clutter.

    The confidence is clamp(c_bar + jitter * eps, 0, 1); the box is the true
    box perturbed by the measurement noise. Out-of-distribution objects get
    the same treatment, their lower / noisier c_bar is what sets them apart.
    """
    dets = []
    for obj in objects:
        conf = obj.c_bar
        if obj.jitter > 0:
            conf = conf + obj.jitter * rng.standard_normal()
        conf = float(np.clip(conf, 0.0, 1.0))
        b = obj.box
        if model.box_noise > 0:
            eps = rng.normal(0.0, model.box_noise, size=4)
        else:
            eps = np.zeros(4)
        box = BBox(b.cx + eps[0], b.cy + eps[1],
                   max(b.w + eps[2], 1.0), max(b.h + eps[3], 1.0))
        dets.append(RawDetection(box=box, confidence=conf))
    if model.clutter_rate > 0:
        n_clutter = rng.poisson(model.clutter_rate)
        for _ in range(n_clutter):
            cx = rng.uniform(0, image_w)
            cy = rng.uniform(0, image_h)
            w = rng.uniform(*model.clutter_size)
            h = rng.uniform(*model.clutter_size)
            conf = rng.uniform(*model.clutter_conf)
            dets.append(RawDetection(box=BBox(cx, cy, w, h), confidence=float(conf)))
    return dets


def sample_detection_set(raw: Sequence[RawDetection], rng: np.random.Generator,
                         box_jitter: float = 0.0) -> DetectionSample:
    """Draw one realization of the detection set.

    Each raw detection is included iff an independent U[0,1] draw falls below
    its confidence, i.e. the confidence is read as the acceptance threshold
    for that box. Included boxes are re-perturbed by ``box_jitter`` to mimic
    the run-to-run variation of a stochastic regression head.
    """
    boxes = []
    for det in raw:
        if rng.random() < det.confidence:
            b = det.box
            if box_jitter > 0:
                eps = rng.normal(0.0, box_jitter, size=4)
                b = BBox(b.cx + eps[0], b.cy + eps[1],
                         max(b.w + eps[2], 1.0), max(b.h + eps[3], 1.0))
            boxes.append(b)
    return DetectionSample(boxes=tuple(boxes))


def sample_detection_batch(raw: Sequence[RawDetection], n: int,
                           rng: np.random.Generator,
                           box_jitter: float = 0.0) -> list[DetectionSample]:
    """Vectorized batch of n independent detection-set samples.

    Distributionally identical to calling :func:`sample_detection_set` n
    times; drawn as one block so large particle populations stay cheap.
    """
    m = len(raw)
    if m == 0:
        return [DetectionSample() for _ in range(n)]
    confs = np.array([d.confidence for d in raw])
    boxes = np.array([d.box.as_array() for d in raw])
    include = rng.random((n, m)) < confs[None, :]
    if box_jitter > 0:
        jit = rng.normal(0.0, box_jitter, size=(n, m, 4))
    else:
        jit = np.zeros((n, m, 4))
    samples = []
    for i in range(n):
        picked = []
        for j in range(m):
            if include[i, j]:
                cx, cy, w, h = boxes[j] + jit[i, j]
                picked.append(BBox(cx, cy, max(w, 1.0), max(h, 1.0)))
        samples.append(DetectionSample(boxes=tuple(picked)))
    return samples


def render_probability_map(objects: Sequence[WorldObject], model: DetectorModel,
                           rng: np.random.Generator,
                           image_w: float, image_h: float) -> np.ndarray:
    """Per-cell probability of occupancy for the whole image.

    Cells whose center falls inside an object get id_p (or ood_p for OOD
    objects); everything else sits at background_p. Optional spatial noise is
    added and the map clamped to [0, 1].
    """
    cells_w, cells_h = model.grid_cells
    cell = image_w / cells_w
    p = np.full((cells_h, cells_w), model.background_p, dtype=float)
    xs = (np.arange(cells_w) + 0.5) * cell
    ys = (np.arange(cells_h) + 0.5) * (image_h / cells_h)
    for obj in objects:
        b = obj.box
        level = model.ood_p if obj.ood else model.id_p
        jx = np.nonzero((xs > b.x0) & (xs < b.x1))[0]
        iy = np.nonzero((ys > b.y0) & (ys < b.y1))[0]
        if jx.size and iy.size:
            p[np.ix_(iy, jx)] = level
    if model.p_noise > 0:
        p = p + rng.normal(0.0, model.p_noise, size=p.shape)
    return np.clip(p, 0.0, 1.0)


def to_occupancy_grid(p_map: np.ndarray, cell_size: float) -> OccupancyGrid:
    """Convert a probability map into (occupancy, uncertainty) cells.

    o = 1 iff p >= 0.5; u = 2*(1-p) for occupied cells and 2*p otherwise, so
    u approaches 1 as p approaches 0.5 from either side.
    """
    p = np.asarray(p_map, dtype=float)
    if p.min() < 0 or p.max() > 1:
        raise InputDataError("probability map outside [0,1]")
    occ = (p >= 0.5).astype(np.uint8)
    unc = np.where(occ == 1, 2.0 * (1.0 - p), 2.0 * p)
    return OccupancyGrid(occ=occ, unc=unc, cell_size=cell_size)


def grid_to_probability(grid: OccupancyGrid) -> np.ndarray:
    """Inverse of :func:`to_occupancy_grid` (exact round trip)."""
    return np.where(grid.occ == 1, 1.0 - grid.unc / 2.0, grid.unc / 2.0)


class ScenarioSimulator:
    """Deterministic per-seed rollout of a scenario.

    A single instance is meant to be driven from one thread; independent
    instances (e.g. one per seed) can run concurrently.
    """

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.seed = seed
        self._truth = self._rollout()

    def _spawn_rng(self, stream: int, frame: int) -> np.random.Generator:
        return np.random.default_rng((self.scenario.seed, self.seed, stream, frame))

    def _rollout(self) -> list[list[WorldObject]]:
        sc = self.scenario
        frames: list[list[WorldObject]] = []
        live: dict[str, WorldObject] = {}
        for k in range(sc.frames):
            rng = self._spawn_rng(0, k)
            if k > 0:
                live = {o.id: o for o in step_world(
                    list(live.values()), sc.process_noise, rng,
                    sc.image_w, sc.image_h, sc.margin)}
            for script in sc.objects:
                if script.exit is not None and k >= script.exit:
                    live.pop(script.id, None)
                    continue
                if script.trajectory is not None:
                    idx = k - script.enter
                    if 0 <= idx < len(script.trajectory):
                        cx, cy, w, h = script.trajectory[idx]
                        live[script.id] = WorldObject(
                            id=script.id, box=BBox(cx, cy, w, h),
                            velocity=(0.0, 0.0), ood=script.ood,
                            c_bar=script.c_bar, jitter=script.jitter)
                    elif idx >= len(script.trajectory):
                        live.pop(script.id, None)
                elif k == script.enter:
                    cx, cy, w, h = script.start
                    live[script.id] = WorldObject(
                        id=script.id, box=BBox(cx, cy, w, h),
                        velocity=script.velocity, ood=script.ood,
                        c_bar=script.c_bar, jitter=script.jitter)
            frames.append(list(live.values()))
        return frames

    def truth(self, frame: int) -> list[WorldObject]:
        return self._truth[frame]

    def raw_detections(self, frame: int) -> list[RawDetection]:
        rng = self._spawn_rng(1, frame)
        return render_raw_detections(self._truth[frame], self.scenario.detector,
                                     rng, self.scenario.image_w, self.scenario.image_h)

    def probability_map(self, frame: int) -> np.ndarray:
        rng = self._spawn_rng(2, frame)
        return render_probability_map(self._truth[frame], self.scenario.detector,
                                      rng, self.scenario.image_w, self.scenario.image_h)

    def occupancy_grid(self, frame: int) -> OccupancyGrid:
        cell = self.scenario.image_w / self.scenario.detector.grid_cells[0]
        return to_occupancy_grid(self.probability_map(frame), cell)


# ---------------------------------------------------------------------------
# scenario file + replay log formats


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        image = doc["image"]
        det = doc.get("detector", {})
        grid = det.get("grid", {})
        objects = []
        for o in doc.get("objects", []):
            objects.append(ScriptedObject(
                id=str(o["id"]),
                c_bar=float(o.get("c_bar", 0.95)),
                jitter=float(o.get("jitter", 0.0)),
                ood=bool(o.get("ood", False)),
                start=tuple(o["start"]) if "start" in o else None,
                velocity=tuple(o.get("velocity", (0.0, 0.0))),
                trajectory=tuple(tuple(p) for p in o["trajectory"])
                if "trajectory" in o else None,
                enter=int(o.get("enter", 0)),
                exit=o.get("exit"),
            ))
        model = DetectorModel(
            box_noise=float(det.get("box_noise", 1.0)),
            box_jitter=float(det.get("box_jitter", 2.0)),
            clutter_rate=float(det.get("clutter_rate", 2.0)),
            clutter_conf=tuple(det.get("clutter_conf", (0.3, 0.9))),
            clutter_size=tuple(det.get("clutter_size", (20.0, 80.0))),
            background_p=float(det.get("background_p", 0.05)),
            id_p=float(det.get("id_p", 0.95)),
            ood_p=float(det.get("ood_p", 0.6)),
            p_noise=float(det.get("p_noise", 0.0)),
            grid_cells=(int(grid.get("cells_w", 240)), int(grid.get("cells_h", 160))),
        )
        return Scenario(
            image_w=float(image["w"]), image_h=float(image["h"]),
            frames=int(doc["frames"]), seed=int(doc.get("seed", 0)),
            objects=tuple(objects), detector=model,
            process_noise=float(doc.get("process_noise", 0.0)),
            margin=float(doc.get("margin", 50.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputDataError(f"bad scenario document: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputDataError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(doc)


def write_detection_log(path: str | Path,
                        frames: Iterable[Sequence[RawDetection]]) -> None:
    """Write raw detections as a JSON-lines replay log (one line per frame)."""
    with open(path, "w") as fh:
        for k, dets in enumerate(frames):
            rec = {"frame": k, "detections": [
                {"box": [d.box.cx, d.box.cy, d.box.w, d.box.h],
                 "conf": d.confidence} for d in dets]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_grid_log(path: str | Path, frames: Iterable[np.ndarray]) -> None:
    """Write probability maps as a JSON-lines replay log (base64 float32)."""
    with open(path, "w") as fh:
        for k, p in enumerate(frames):
            flat = np.asarray(p, dtype=np.float32).ravel()
            rec = {"frame": k, "p_map": base64.b64encode(flat.tobytes()).decode()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detection_log(path: str | Path) -> list[list[RawDetection]]:
    """Read a box-mode replay log, returning detections per frame index."""
    frames: dict[int, list[RawDetection]] = {}
    for line_no, line in enumerate(_read_lines(path)):
        try:
            rec = json.loads(line)
            dets = [RawDetection(box=BBox(*d["box"]), confidence=float(d["conf"]))
                    for d in rec["detections"]]
            frames[int(rec["frame"])] = dets
        except (KeyError, TypeError, ValueError) as exc:
            raise InputDataError(f"{path}:{line_no + 1}: bad detection record: {exc}") from exc
    return _densify(frames, default=[])


def read_grid_log(path: str | Path, cells_w: int, cells_h: int) -> list[np.ndarray]:
    """Read a grid-mode replay log of row-major float32 probability maps."""
    frames: dict[int, np.ndarray] = {}
    for line_no, line in enumerate(_read_lines(path)):
        try:
            rec = json.loads(line)
            buf = base64.b64decode(rec["p_map"])
            p = np.frombuffer(buf, dtype=np.float32).astype(float)
            if p.size != cells_w * cells_h:
                raise ValueError(f"expected {cells_w * cells_h} cells, got {p.size}")
            frames[int(rec["frame"])] = p.reshape(cells_h, cells_w)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputDataError(f"{path}:{line_no + 1}: bad grid record: {exc}") from exc
    return _densify(frames, default=None)


def _read_lines(path: str | Path) -> list[str]:
    try:
        return [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise InputDataError(f"cannot read replay log {path}: {exc}") from exc


def _densify(frames: dict, default):
    if not frames:
        return []
    n = max(frames) + 1
    return [frames.get(k, default) for k in range(n)]
