"""Minor-loop orchestration: score every candidate class cheaply, keep
only the most promising ones, and run the expensive per-class stages
(level fusion + toy detection) for that subset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .episodes import (
    Box,
    Episode,
    FusionProjector,
    build_prototype,
    correlate,
    fuse_levels,
)
from .scorer import ScoreModel, scores_batch
from .tensor_ops import FeatureMap, Level


@dataclass(frozen=True)
class TopN:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("TopN needs n >= 1")


@dataclass(frozen=True)
class Adaptive:
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("adaptive threshold must lie in [0, 1]")


@dataclass(frozen=True)
class All:
    pass


SelectionStrategy = TopN | Adaptive | All


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Box  # L4-grid units
    confidence: float


def _build_prototypes(episode: Episode) -> dict:
    return {
        cid: build_prototype(cid, episode.supports[cid])
        for cid in episode.class_ids
    }


def _score_from_prototypes(model: ScoreModel, episode: Episode,
                           protos: dict) -> dict[int, float]:
    """Batched scoring of all classes on their L4 correlation maps."""
    class_ids = episode.class_ids
    q4 = episode.levels[Level.L4].data
    proto_mat = np.stack([protos[cid].vectors[Level.L4] for cid in class_ids])
    maps = q4[None, :, :, :] * proto_mat[:, :, None, None]
    values = scores_batch(model, maps)
    return {cid: float(v) for cid, v in zip(class_ids, values)}


def score_all(model: ScoreModel, episode: Episode) -> dict[int, float]:
    """Score each candidate class on its deepest-level correlation map.

    Independent of fusion: only L4 query features and support prototypes
    are touched.
    """
    return _score_from_prototypes(model, episode, _build_prototypes(episode))


def select(scores: dict[int, float], strategy: SelectionStrategy) -> list[int]:
    """Pick the minor-loop class set, sorted by score descending.

    Ties break toward the lower class id. An empty selection is legal.
    """
    if not scores:
        raise ValueError("scores must be nonempty")
    ranked = sorted(scores, key=lambda cid: (-scores[cid], cid))
    if isinstance(strategy, TopN):
        return ranked[: strategy.n]
    if isinstance(strategy, Adaptive):
        return [cid for cid in ranked if scores[cid] >= strategy.threshold]
    return ranked


def detect_toy(fused: FeatureMap, peak_threshold: float = 0.5,
               class_id: int = -1) -> list[Detection]:
    """Blob detector on the channel-mean heat map.

    Cells at or above peak_threshold * global max form 4-connected
    components; each becomes a box with confidence = component peak.
    An all-nonpositive heat map yields no detections.
    """
    heat = fused.data.astype(np.float64).mean(axis=0)
    peak = heat.max()
    if peak <= 0:
        return []
    mask = heat >= peak_threshold * peak
    labels = _label4(mask)
    dets = []
    for comp in range(1, labels.max() + 1):
        ys, xs = np.nonzero(labels == comp)
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        conf = float(heat[ys, xs].max())
        dets.append(Detection(class_id, box, conf))
    dets.sort(key=lambda d: (-d.confidence, d.box))
    return dets


def _label4(mask: np.ndarray) -> np.ndarray:
    """4-connected component labeling via flood fill."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            stack = [(sy, sx)]
            labels[sy, sx] = current
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = current
                        stack.append((ny, nx))
    return labels


@dataclass
class InferenceResult:
    detections: dict[int, list[Detection]]  # every candidate class keyed
    selected: list[int]
    scores: dict[int, float]
    timings: dict[str, float] = field(default_factory=dict)
    heavy_calls: int = 0


def run_inference(
    model: ScoreModel,
    proj: FusionProjector,
    episode: Episode,
    strategy: SelectionStrategy,
    peak_threshold: float = 0.5,
) -> InferenceResult:
    """Score -> select -> heavy stage for the selected classes only.

    Non-selected classes report empty detection lists. Timings record
    wall-clock seconds per stage; heavy_calls counts fusion+detect
    invocations (exactly len(selected)).
    """
    t0 = time.perf_counter()
    protos = _build_prototypes(episode)
    t_setup = time.perf_counter() - t0

    t0 = time.perf_counter()
    scores = _score_from_prototypes(model, episode, protos)
    t_score = time.perf_counter() - t0

    selected = select(scores, strategy)

    detections: dict[int, list[Detection]] = {cid: [] for cid in episode.class_ids}
    t_fuse = 0.0
    t_detect = 0.0
    heavy_calls = 0
    for cid in selected:
        t1 = time.perf_counter()
        proto = protos[cid]
        per_level = {
            lv: correlate(episode.levels[lv], proto.vectors[lv])
            for lv in episode.levels
        }
        fused = fuse_levels(per_level, proj)
        t2 = time.perf_counter()
        detections[cid] = detect_toy(fused, peak_threshold, class_id=cid)
        t3 = time.perf_counter()
        t_fuse += t2 - t1
        t_detect += t3 - t2
        heavy_calls += 1

    return InferenceResult(
        detections=detections,
        selected=selected,
        scores=scores,
        timings={"setup": t_setup, "scoring": t_score, "fusion": t_fuse,
                 "detect": t_detect},
        heavy_calls=heavy_calls,
    )
