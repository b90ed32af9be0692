"""Reproducible benchmark runs: configuration, orchestration, reports.

A run takes a scenario (or a replay log of real detector outputs), executes
the selected tracker over every seed, and writes a self-describing run
directory: config echo with input hashes, per-seed truth / track logs,
per-seed metrics, a CSV summary, and aggregate means. Identical
(config, seed) pairs produce byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import BBox
from .grid import GridParams, GridTracker, pixel_likelihood
from .metrics import (MetricsReport, csv_header, csv_row, evaluate_sequence,
                      write_report)
from .output_frame import OutputFrame, frame_record, read_track_log
from .pipeline import SAMPLED, THRESHOLD, ParticleTracker
from .rfs import TrackerParams
from .scenario import (InputDataError, Scenario, ScenarioSimulator, load_scenario,
                       read_detection_log, read_grid_log, to_occupancy_grid,
                       write_detection_log, write_grid_log)

SCHEMA_VERSION = 1

TRACKER_UNCERTAINTY = "uncertainty"
TRACKER_BASELINE = "baseline"
TRACKER_GRID = "grid"
TRACKERS = (TRACKER_UNCERTAINTY, TRACKER_BASELINE, TRACKER_GRID)

# Higher is better for MOTA; the error fractions improve when they drop.
HIGHER_BETTER = {"mota": True, "miss": False, "mismatch": False, "fp": False}


class ConfigError(ValueError):
    """Invalid run configuration."""


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


@dataclass(frozen=True)
class RunConfig:
    tracker: str
    scenario: str | None = None
    replay: str | None = None
    truth: str | None = None           # optional truth log for replay runs
    seeds: tuple[int, ...] = (0,)
    out: str = "run"
    threshold: float = 0.7
    box_jitter: float | None = None    # sampled-mode jitter; scenario default if None
    particle: TrackerParams = field(default_factory=TrackerParams)
    grid: GridParams = field(default_factory=GridParams)
    replay_grid: tuple[int, int, float] = (240, 160, 4.0)  # cells_w, cells_h, cell px

    def __post_init__(self):
        if self.tracker not in TRACKERS:
            raise ConfigError(f"tracker must be one of {TRACKERS}, got {self.tracker!r}")
        if (self.scenario is None) == (self.replay is None):
            raise ConfigError("exactly one of scenario / replay must be set")
        if not self.seeds:
            raise ConfigError("need at least one seed")


@dataclass
class BenchmarkSummary:
    per_seed: dict[int, MetricsReport]
    means: dict[str, float]
    out_dir: str
    input_hash: str
    degenerate_frames: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "input_hash": self.input_hash,
            "degenerate_frames": self.degenerate_frames,
            "means": self.means,
            "per_seed": {str(s): r.to_dict() for s, r in sorted(self.per_seed.items())},
        }


def _dataclass_overrides(cls, table: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in table.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} parameters: {exc}") from exc


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a TOML file plus flag overrides (flags win)."""
    doc: dict = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})

    particle = _dataclass_overrides(TrackerParams, doc.pop("particle", {}), "particle")
    grid = _dataclass_overrides(GridParams, doc.pop("grid", {}), "grid")
    replay_grid = tuple(doc.pop("replay_grid", (240, 160, 4.0)))

    known = {"tracker", "scenario", "replay", "truth", "seeds", "out",
             "threshold", "box_jitter"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "tracker" not in doc:
        raise ConfigError("config needs a tracker (uncertainty | baseline | grid)")
    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    try:
        return RunConfig(
            tracker=doc["tracker"],
            scenario=doc.get("scenario"),
            replay=doc.get("replay"),
            truth=doc.get("truth"),
            seeds=tuple(int(s) for s in seeds),
            out=str(doc.get("out", "run")),
            threshold=float(doc.get("threshold", 0.7)),
            box_jitter=doc.get("box_jitter"),
            particle=particle,
            grid=grid,
            replay_grid=(int(replay_grid[0]), int(replay_grid[1]), float(replay_grid[2])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# truth logs (ground truth uses string labels, hypotheses integer ones)


def write_truth_log(path: str | Path, frames: Sequence[Sequence[tuple[str, BBox]]]) -> None:
    with open(path, "w") as fh:
        for k, objs in enumerate(frames):
            rec = {"frame": k, "tracks": [
                {"label": g, "box": [b.cx, b.cy, b.w, b.h]} for g, b in objs]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_truth_log(path: str | Path) -> list[list[tuple[str, BBox]]]:
    frames: dict[int, list[tuple[str, BBox]]] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputDataError(f"cannot read truth log {path}: {exc}") from exc
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        frames[int(rec["frame"])] = [
            (str(t["label"]), BBox(*t["box"])) for t in rec["tracks"]]
    if not frames:
        return []
    return [frames.get(k, []) for k in range(max(frames) + 1)]


# ---------------------------------------------------------------------------
# run orchestration


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _config_echo(config: RunConfig, input_hash: str) -> dict:
    doc = dataclasses.asdict(config)
    doc["schema_version"] = SCHEMA_VERSION
    doc["input_hash"] = input_hash
    return doc


def _make_tracker(config: RunConfig, scenario: Scenario | None, seed: int):
    if config.tracker == TRACKER_GRID:
        return GridTracker(config.grid, seed=seed)
    jitter = config.box_jitter
    if jitter is None:
        jitter = scenario.detector.box_jitter if scenario is not None else 2.0
    mode = SAMPLED if config.tracker == TRACKER_UNCERTAINTY else THRESHOLD
    return ParticleTracker(config.particle, mode=mode, threshold=config.threshold,
                           box_jitter=jitter, seed=seed)


def _run_one_seed(config: RunConfig, scenario: Scenario | None, replay,
                  seed: int, seed_dir: Path,
                  evaluate: bool = True) -> tuple[MetricsReport | None, int, int]:
    """Run one tracker over one seed; returns (report, frame errors, degenerate)."""
    seed_dir.mkdir(parents=True, exist_ok=True)
    grid_mode = config.tracker == TRACKER_GRID

    if scenario is not None:
        sim = ScenarioSimulator(scenario, seed)
        n_frames = scenario.frames
        truth = [[(o.id, o.box) for o in sim.truth(k)] for k in range(n_frames)]
    else:
        sim = None
        n_frames = len(replay)
        truth = read_truth_log(config.truth) if config.truth else None
    if not evaluate:
        truth = None

    tracker = _make_tracker(config, scenario, seed)
    frames: list[OutputFrame] = []
    errors: list[dict] = []
    for k in range(n_frames):
        try:
            if grid_mode:
                if sim is not None:
                    grid = sim.occupancy_grid(k)
                else:
                    cw, ch, cell = config.replay_grid
                    if replay[k] is None:
                        raise InputDataError(f"replay log missing frame {k}")
                    grid = to_occupancy_grid(replay[k], cell)
                frame = tracker.process(k, grid)
            else:
                raw = sim.raw_detections(k) if sim is not None else replay[k]
                frame = tracker.process(k, raw)
        except InputDataError:
            raise
        except Exception as exc:  # keep the run alive, record the frame
            errors.append({"frame": k, "error": f"{type(exc).__name__}: {exc}"})
            frame = frames[-1] if frames else OutputFrame()
        frames.append(frame)

    with open(seed_dir / "tracks.jsonl", "w") as fh:
        for k, frame in enumerate(frames):
            fh.write(json.dumps(frame_record(k, frame), sort_keys=True) + "\n")
    if truth is not None:
        write_truth_log(seed_dir / "truth.jsonl", truth)
    if errors:
        with open(seed_dir / "errors.jsonl", "w") as fh:
            for rec in errors:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if grid_mode and tracker.lr_trace:
        with open(seed_dir / "lr_trace.jsonl", "w") as fh:
            for rec in tracker.lr_trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    report = None
    if truth is not None:
        hyp_frames = [[(t.label, BBox(*[float(v) for v in t.mean[:4]]))
                       for t in frame.tracks] for frame in frames]
        report = evaluate_sequence(hyp_frames, truth)
        write_report(seed_dir / "metrics.json", report)
    degenerate = len(getattr(tracker, "degenerate_frames", []))
    return report, len(errors), degenerate


def run(config: RunConfig, evaluate: bool = True) -> BenchmarkSummary:
    """Execute the configured tracker over all seeds and write artifacts."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    scenario = None
    replay = None
    if config.scenario is not None:
        scenario = load_scenario(config.scenario)
        input_hash = _file_hash(config.scenario)
    else:
        if config.tracker == TRACKER_GRID:
            cw, ch, _ = config.replay_grid
            replay = read_grid_log(config.replay, cw, ch)
        else:
            replay = read_detection_log(config.replay)
        if not replay:
            raise InputDataError(f"replay log {config.replay} is empty")
        input_hash = _file_hash(config.replay)

    (out / "config.json").write_text(
        json.dumps(_config_echo(config, input_hash), sort_keys=True, indent=2) + "\n")

    per_seed: dict[int, MetricsReport] = {}
    total_errors = 0
    total_degenerate = 0
    for seed in config.seeds:
        report, n_err, n_deg = _run_one_seed(config, scenario, replay, seed,
                                             out / f"seed_{seed}", evaluate)
        total_errors += n_err
        total_degenerate += n_deg
        if report is not None:
            per_seed[seed] = report

    if per_seed:
        rows = [csv_header()] + [csv_row(s, per_seed[s]) for s in sorted(per_seed)]
        (out / "metrics.csv").write_text("\n".join(rows) + "\n")
        means = {m: float(np.mean([getattr(r, m) for r in per_seed.values()]))
                 for m in ("mota", "motp", "miss", "mismatch", "fp")}
    else:
        means = {}
    summary = BenchmarkSummary(per_seed=per_seed, means=means, out_dir=str(out),
                               input_hash=input_hash,
                               degenerate_frames=total_degenerate)
    doc = summary.to_dict()
    doc["frame_errors"] = total_errors
    (out / "summary.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return summary


def simulate(scenario_path: str | Path, seed: int, out_dir: str | Path) -> None:
    """Render one seed of a scenario to replay logs plus a truth log."""
    scenario = load_scenario(scenario_path)
    sim = ScenarioSimulator(scenario, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = range(scenario.frames)
    write_truth_log(out / "truth.jsonl",
                    [[(o.id, o.box) for o in sim.truth(k)] for k in frames])
    write_detection_log(out / "detections.jsonl",
                        [sim.raw_detections(k) for k in frames])
    write_grid_log(out / "p_maps.jsonl", [sim.probability_map(k) for k in frames])


# ---------------------------------------------------------------------------
# run comparison


def _load_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "summary.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputDataError(f"cannot read {path}: {exc}") from exc


def _improvement(ours: float, ref: float, higher_better: bool) -> float | None:
    delta = (ours - ref) if higher_better else (ref - ours)
    if delta == 0.0:
        return 0.0
    if ref == 0.0:
        return None
    return delta / abs(ref)


def compare(run_a: str | Path, run_b: str | Path) -> dict:
    """Improvement of run A over reference run B, per metric and per seed."""
    a = _load_summary(run_a)
    b = _load_summary(run_b)
    if a["input_hash"] != b["input_hash"]:
        raise InputDataError("runs used different inputs; comparison is meaningless")
    seeds_a = sorted(a["per_seed"])
    seeds_b = sorted(b["per_seed"])
    if seeds_a != seeds_b or not seeds_a:
        raise InputDataError(f"seed sets differ: {seeds_a} vs {seeds_b}")

    improvements: dict[str, float | None] = {}
    for metric, hb in HIGHER_BETTER.items():
        improvements[metric] = _improvement(a["means"][metric], b["means"][metric], hb)
    # The precision error is ambiguous in sign; report both readings.
    improvements["motp_lower_better"] = _improvement(
        a["means"]["motp"], b["means"]["motp"], higher_better=False)
    improvements["motp_higher_better"] = _improvement(
        a["means"]["motp"], b["means"]["motp"], higher_better=True)

    paired = {}
    sign_counts = {}
    for metric in ("mota", "motp", "miss", "mismatch", "fp"):
        diffs = {s: a["per_seed"][s][metric] - b["per_seed"][s][metric]
                 for s in seeds_a}
        paired[metric] = diffs
        sign_counts[metric] = {
            "a_higher": sum(1 for d in diffs.values() if d > 0),
            "b_higher": sum(1 for d in diffs.values() if d < 0),
            "tied": sum(1 for d in diffs.values() if d == 0),
        }
    return {
        "run_a": str(run_a), "run_b": str(run_b),
        "seeds": [int(s) for s in seeds_a],
        "improvement": improvements,
        "paired_differences": paired,
        "sign_counts": sign_counts,
    }


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(run_dir: str | Path) -> list[Path]:
    """Write CSV series for plotting: the cell-likelihood family over
    distance at several uncertainty levels, per-frame track counts, and (for
    grid runs) existence log-ratio traces."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise InputDataError(f"{run_dir} is not a run directory (no config.json)")
    config = json.loads(config_path.read_text())
    params = _dataclass_overrides(GridParams, {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in config.get("grid", {}).items()}, "grid")

    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    written = []

    u_levels = (0.0, 0.25, 0.5, 0.75, 1.0)
    lines = ["d," + ",".join(f"u{u:g}" for u in u_levels)]
    for d in np.arange(0.0, 6.0 * params.sigma + 1e-9, 0.1 * params.sigma):
        vals = [pixel_likelihood(1, u, float(d), params) for u in u_levels]
        lines.append(f"{d:.3f}," + ",".join(f"{v:.9f}" for v in vals))
    path = plots / "likelihood_curves.csv"
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    seed_dirs = sorted(run_dir.glob("seed_*"))
    if not seed_dirs:
        raise InputDataError(f"no seed directories under {run_dir}")
    count_lines = ["seed,frame,n_tracks"]
    lr_lines = ["seed,frame,label,log_lr"]
    have_lr = False
    for sd in seed_dirs:
        seed = sd.name.split("_", 1)[1]
        tracks_path = sd / "tracks.jsonl"
        if not tracks_path.exists():
            raise InputDataError(f"missing {tracks_path}")
        for k, hyps in enumerate(read_track_log(tracks_path)):
            count_lines.append(f"{seed},{k},{len(hyps)}")
        lr_path = sd / "lr_trace.jsonl"
        if lr_path.exists():
            have_lr = True
            for line in lr_path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    lr_lines.append(f"{seed},{rec['frame']},{rec['label']},"
                                    f"{rec['log_lr']:.9f}")
    path = plots / "track_counts.csv"
    path.write_text("\n".join(count_lines) + "\n")
    written.append(path)
    if have_lr:
        path = plots / "lr_traces.csv"
        path.write_text("\n".join(lr_lines) + "\n")
        written.append(path)
    return written
