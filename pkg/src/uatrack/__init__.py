"""Multi-object tracking with detector data uncertainty in the loop."""

from .geometry import BBox, GaussianState, Rect, fit_gaussian, iou, mahalanobis, set_distance
from .grid import Cluster, GridParams, GridTrack, GridTracker, pixel_likelihood
from .metrics import FrameTruth, MetricsReport, accumulate, evaluate_sequence, match_frame
from .output_frame import (CardinalityBin, Gmm, OutputFrame, Track, bin_particles,
                           build_output_frame, fit_gmm_em, sample_next_particles)
from .pipeline import ParticleTracker
from .rfs import MultiObjectParticle, TrackerParams, birth, predict, step, step_baseline, weigh
from .scenario import (DetectionSample, DetectorModel, OccupancyGrid, RawDetection,
                       Scenario, ScenarioSimulator, WorldObject, load_scenario,
                       render_probability_map, render_raw_detections,
                       sample_detection_set, step_world, to_occupancy_grid)

__version__ = "0.1.0"
