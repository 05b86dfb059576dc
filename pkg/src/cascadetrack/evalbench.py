"""Tracking-error metrics, per-source reports and frame-rate measurement."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .dataio import read_frame

log = logging.getLogger(__name__)

KNOWN_SOURCES = ("CIL", "ETH", "ICR", "MED", "SYN")
SOURCE_ALIASES = {"MED1": "MED", "MED2": "MED"}
REPORT_COLUMNS = ("source", "N", "mean_mm", "std_mm", "p95_mm", "ave_max_mm")
REPORT_HEADERS = ("Source", "N", "Mean (mm)", "Std (mm)", "95% (mm)", "AVE.MaxError(mm)")
TRACK_COLUMNS = ("frame", "landmark_id", "x", "y", "score")


def tracking_error(pred, gt, spacing_mm: float) -> float:
    """Euclidean distance between two pixel positions, in millimetres."""
    if not spacing_mm > 0:
        raise ValueError(f"spacing_mm must be positive, got {spacing_mm}")
    return math.hypot(pred[0] - gt[0], pred[1] - gt[1]) * spacing_mm


def nearest_rank(values, q: float) -> float:
    """Value at 1-based rank ceil(q*n) of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty series")
    k = max(1, math.ceil(q * v.size))
    return float(v[k - 1])


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    p95: float
    max: float

    def as_tuple(self):
        return (self.mean, self.std, self.p95, self.max)


def summarize(errors, ddof: int = 0) -> Summary:
    """Mean, standard deviation (population by default), nearest-rank p95 and max."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("summarize needs at least one error value")
    if e.size <= ddof:
        raise ValueError(f"need more than {ddof} values for ddof={ddof}")
    return Summary(float(e.mean()), float(e.std(ddof=ddof)), nearest_rank(e, 0.95), float(e.max()))


def canonical_source(tag: str) -> str:
    t = str(tag).upper()
    t = SOURCE_ALIASES.get(t, t)
    if t not in KNOWN_SOURCES:
        log.warning("unknown source tag %r grouped under OTHER", tag)
        return "OTHER"
    return t


@dataclass
class LandmarkErrors:
    source_tag: str
    sequence: str
    landmark_id: str
    errors: list                  # mm, one per evaluated frame
    frames: list = field(default_factory=list)

    @property
    def summary(self) -> Summary:
        return summarize(self.errors)


@dataclass(frozen=True)
class ReportRow:
    source: str
    N: int
    mean_mm: float
    std_mm: float
    p95_mm: float
    ave_max_mm: float

    def values(self):
        return (self.source, self.N, self.mean_mm, self.std_mm, self.p95_mm, self.ave_max_mm)


@dataclass
class TrackReport:
    landmarks: list
    rows: list
    fps: float | None = None

    def row(self, source: str) -> ReportRow:
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.source, r.N] + [f"{v:.6f}" for v in r.values()[2:]])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [REPORT_HEADERS] + [(r.source, str(r.N)) + tuple(f"{v:.2f}" for v in r.values()[2:])
                                    for r in self.rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(REPORT_HEADERS))]
        lines = ["  ".join(c[i].ljust(widths[i]) if i == 0 else c[i].rjust(widths[i])
                           for i in range(len(c))) for c in cells]
        if self.fps is not None:
            lines.append(f"fps: {self.fps:.1f}")
        return "\n".join(lines) + "\n"

    def write(self, stem) -> tuple:
        """Write ``<stem>.csv`` and ``<stem>.txt``; returns both paths."""
        stem = str(stem)
        with open(stem + ".csv", "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(stem + ".txt", "w") as fh:
            fh.write(self.to_text())
        return stem + ".csv", stem + ".txt"


def _row(source: str, group: list) -> ReportRow:
    pooled = np.concatenate([np.asarray(g.errors, dtype=np.float64) for g in group])
    s = summarize(pooled)
    ave_max = float(np.mean([max(g.errors) for g in group]))
    return ReportRow(source, len(group), s.mean, s.std, s.p95, ave_max)


def aggregate_report(landmarks, fps: float | None = None) -> TrackReport:
    """Per-source rows plus an ALL row; errors are pooled within each row.

    N counts landmarks; the last column is the mean over landmarks of their
    largest error.
    """
    landmarks = [lm for lm in landmarks if lm.errors]
    if not landmarks:
        raise ValueError("aggregate_report needs at least one landmark with errors")
    groups = {}
    for lm in landmarks:
        groups.setdefault(canonical_source(lm.source_tag), []).append(lm)
    order = [s for s in KNOWN_SOURCES + ("OTHER",) if s in groups]
    rows = [_row(s, groups[s]) for s in order]
    rows.append(_row("ALL", landmarks))
    return TrackReport(landmarks, rows, fps)


def landmark_errors(track: dict, bundle, exclude_reference: bool = True) -> list:
    """Errors at every annotated frame for tracked positions ``{lid: [(frame, x, y, score)]}``.

    The first frame is given to the tracker, so it is skipped by default.
    """
    out = []
    for lid, rows in bundle.landmarks.items():
        key = lid if lid in track else str(lid)
        if key not in track:
            raise KeyError(f"no tracked positions for landmark {lid!r} of {bundle.name}")
        pred = {int(r[0]): (r[1], r[2]) for r in track[key]}
        errs, frames = [], []
        for fi, x, y in rows:
            if fi == 0 and exclude_reference:
                continue
            if fi not in pred:
                raise KeyError(f"landmark {lid!r}: frame {fi} missing from the track")
            errs.append(tracking_error(pred[fi], (x, y), bundle.spacing_mm))
            frames.append(fi)
        out.append(LandmarkErrors(bundle.source_tag, bundle.name, str(lid), errs, frames))
    return out


def write_track_csv(track: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        rows = sorted((int(r[0]), str(lid), r[1], r[2], r[3]) for lid, rs in track.items() for r in rs)
        for fi, lid, x, y, s in rows:
            w.writerow([fi, lid, f"{x:.4f}", f"{y:.4f}", f"{s:.6f}"])


def read_track_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(h.strip() for h in header) != TRACK_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(TRACK_COLUMNS)}")
        for line_no, rec in enumerate(r, 2):
            if not rec:
                continue
            try:
                fi, lid, x, y, s = int(rec[0]), rec[1], float(rec[2]), float(rec[3]), float(rec[4])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{line_no}: malformed track row {rec}") from None
            out.setdefault(lid, []).append((fi, x, y, s))
    for rows in out.values():
        rows.sort()
    return out


# -- throughput ---------------------------------------------------------------------

@dataclass
class FpsReport:
    fps: float                      # frames / summed track_frame time
    latency_ms: dict                # p50, p90, p99, max of per-frame latency
    n_frames: int
    n_landmarks: int
    inclusive_fps: float | None     # including frame decoding from disk, when available
    positions: list                 # tracked output per timed frame

    def to_text(self) -> str:
        lat = ", ".join(f"{k} {v:.2f} ms" for k, v in self.latency_ms.items())
        out = f"fps {self.fps:.1f} over {self.n_frames} frames, {self.n_landmarks} landmark(s); latency {lat}"
        if self.inclusive_fps is not None:
            out += f"; with decoding {self.inclusive_fps:.1f} fps"
        return out


def fps_from_times(times) -> float:
    """Frames per second from per-frame durations in seconds."""
    total = float(np.sum(times))
    return len(times) / total if total > 0 else float("inf")


@contextmanager
def pinned_cpu():
    """Restrict this process to one CPU while the block runs (Linux only)."""
    if not hasattr(os, "sched_getaffinity"):
        yield
        return
    prev = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(prev)})
        yield
    finally:
        os.sched_setaffinity(0, prev)


def fps_benchmark(tracker, bundle, warmup: int = 5, inclusive: bool = True, pin: bool = True) -> FpsReport:
    """Time ``tracker.track_frame`` over frames 1.. of ``bundle``.

    The tracker must already hold the first frame. Frames are decoded
    before timing; the first ``warmup`` calls are not counted. When the
    bundle came from disk, a second figure includes reading each frame.
    """
    if bundle.n_frames < warmup + 2:
        raise ValueError(f"need more than {warmup + 1} frames, got {bundle.n_frames}")
    times, dec_times, positions = [], [], []
    paths = bundle.frame_paths if inclusive else None
    with pinned_cpu() if pin else _null():
        for i in range(1, bundle.n_frames):
            dt_read = 0.0
            if paths is not None:
                t = time.perf_counter()
                frame = read_frame(paths[i])
                dt_read = time.perf_counter() - t
            else:
                frame = bundle.frames[i]
            t = time.perf_counter()
            res = tracker.track_frame(frame)
            dt = time.perf_counter() - t
            if i > warmup:
                times.append(dt)
                dec_times.append(dt + dt_read)
                positions.append(res)
    lat = np.asarray(times) * 1e3
    pct = {"p50": float(np.percentile(lat, 50)), "p90": float(np.percentile(lat, 90)),
           "p99": float(np.percentile(lat, 99)), "max": float(lat.max())}
    return FpsReport(fps_from_times(times), pct, len(times), len(tracker.states),
                     fps_from_times(dec_times) if paths is not None else None, positions)


@contextmanager
def _null():
    yield
