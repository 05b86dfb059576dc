"""Sequence ingestion, synthetic sequence generation and patch cropping.

On-disk layout of one sequence directory::

    frame_00000.png, frame_00001.png, ...   8- or 16-bit grayscale, lossless
    landmark_<id>.csv                        "frame_index,x,y" rows (header optional)
    manifest.txt                             key=value lines: spacing_mm, hz, source_tag

Coordinates are x = column, y = row, in pixels, with the origin at the
center of the top-left pixel. Annotations from a CLUST download are
converted to this layout by writing one CSV per landmark; CLUST point
annotations are taken as pixel-center referenced.

A data root is a directory whose subdirectories are sequence directories.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

FRAME_RE = re.compile(r"^frame_(\d{5,})\.(png|tif|tiff)$")
LANDMARK_RE = re.compile(r"^landmark_(.+)\.csv$")
MANIFEST = "manifest.txt"
REAL_SPACING_RANGE = (0.27, 0.77)


class DataError(ValueError):
    """Malformed or inconsistent sequence data."""


@dataclass
class SequenceBundle:
    frames: list
    spacing_mm: float
    hz: float
    landmarks: dict                      # id -> list of (frame_index, x, y)
    source_tag: str = "OTHER"
    name: str = ""
    truth: dict | None = None            # id -> [n_frames, 2] dense positions (synthetic only)
    frame_paths: list | None = None

    def __post_init__(self):
        if not self.frames:
            raise DataError("sequence has no frames")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape or f.ndim != 2:
                raise DataError(f"frame {i} has shape {f.shape}, expected 2D {shape}")
        n = len(self.frames)
        for lid, rows in self.landmarks.items():
            if not rows or rows[0][0] != 0:
                raise DataError(f"landmark {lid}: missing first-frame annotation")
            for fi, _, _ in rows:
                if not 0 <= fi < n:
                    raise DataError(f"landmark {lid}: frame index {fi} outside 0..{n - 1}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    def first_position(self, lid) -> tuple:
        return tuple(self.landmarks[lid][0][1:])

    def annotation_map(self, lid) -> dict:
        return {fi: (x, y) for fi, x, y in self.landmarks[lid]}


# -- reading / writing ---------------------------------------------------------

def read_manifest(path: Path) -> dict:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def read_annotations(path: Path, n_frames: int | None = None) -> list:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or not "".join(rec).strip():
                continue
            if lineno == 1 and not rec[0].strip().lstrip("-").isdigit():
                continue                                   # header
            if len(rec) != 3:
                raise DataError(f"{path}:{lineno}: expected frame_index,x,y")
            try:
                fi, x, y = int(rec[0]), float(rec[1]), float(rec[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if n_frames is not None and not 0 <= fi < n_frames:
                raise DataError(f"{path}:{lineno}: frame index {fi} outside 0..{n_frames - 1}")
            if rows and fi <= rows[-1][0]:
                raise DataError(f"{path}:{lineno}: frame indices must increase")
            rows.append((fi, x, y))
    if not rows or rows[0][0] != 0:
        raise DataError(f"{path}: missing first-frame annotation")
    return rows


def read_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"unreadable frame {path}: {exc}") from None
    if arr.ndim == 3:
        raise DataError(f"frame {path} is not grayscale")
    if arr.dtype == np.int32:      # some PIL builds decode 16-bit PNG as mode I
        arr = arr.astype(np.uint16)
    return arr


def _frame_files(d: Path) -> list:
    found = []
    for p in d.iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    for pos, (idx, p) in enumerate(found):
        if idx != pos:
            raise DataError(f"{d}: frame files must be numbered consecutively from 0 (found {p.name} at position {pos})")
    return [p for _, p in found]


def load_sequence(d) -> SequenceBundle:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    paths = _frame_files(d)
    if not paths:
        raise DataError(f"{d}: no frame_NNNNN images")
    frames = []
    for i, p in enumerate(paths):
        try:
            frames.append(read_frame(p))
        except DataError as exc:
            raise DataError(f"frame {i}: {exc}") from None
    meta = read_manifest(d / MANIFEST) if (d / MANIFEST).exists() else {}
    landmarks = {}
    for p in sorted(d.iterdir()):
        m = LANDMARK_RE.match(p.name)
        if m:
            landmarks[m.group(1)] = read_annotations(p, len(frames))
    if not landmarks:
        raise DataError(f"{d}: no landmark_<id>.csv annotation files")
    spacing = float(meta.get("spacing_mm", 1.0))
    if spacing <= 0:
        raise DataError(f"{d}: spacing_mm must be positive")
    tag = meta.get("source_tag", "OTHER")
    if tag != "SYN" and not REAL_SPACING_RANGE[0] <= spacing <= REAL_SPACING_RANGE[1]:
        log.warning("%s: spacing %.3f mm outside the expected %s range", d, spacing, REAL_SPACING_RANGE)
    return SequenceBundle(
        frames=frames, spacing_mm=spacing, hz=float(meta.get("hz", 15.0)),
        landmarks=landmarks, source_tag=tag, name=d.name, frame_paths=paths,
    )


def save_sequence(bundle: SequenceBundle, d) -> Path:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(bundle.frames):
        Image.fromarray(f).save(d / f"frame_{i:05d}.png")
    for lid, rows in bundle.landmarks.items():
        with open(d / f"landmark_{lid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_index", "x", "y"])
            for fi, x, y in rows:
                w.writerow([fi, repr(float(x)), repr(float(y))])
    (d / MANIFEST).write_text(
        f"spacing_mm={bundle.spacing_mm!r}\nhz={bundle.hz!r}\nsource_tag={bundle.source_tag}\n"
    )
    return d


def is_sequence_dir(d) -> bool:
    d = Path(d)
    return d.is_dir() and any(FRAME_RE.match(p.name) for p in d.iterdir())


def sequence_dirs(root) -> list:
    """A single sequence directory, or every sequence directory under a root."""
    root = Path(root)
    if is_sequence_dir(root):
        return [root]
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if is_sequence_dir(p))
    if not dirs:
        raise DataError(f"{root}: no sequence directories found")
    return dirs


def load_root(root) -> list:
    return [load_sequence(d) for d in sequence_dirs(root)]


# -- cropping ------------------------------------------------------------------

def to_unit(frame: np.ndarray) -> np.ndarray:
    """Intensities as float in [0, 1]."""
    if np.issubdtype(frame.dtype, np.integer):
        return frame.astype(np.float64) / np.iinfo(frame.dtype).max
    return np.clip(frame.astype(np.float64), 0.0, 1.0)


def patch_origin(center, size: int) -> tuple:
    """Frame coordinates of the patch's top-left pixel."""
    return (int(math.floor(center[0] + 0.5)) - size // 2,
            int(math.floor(center[1] + 0.5)) - size // 2)


def crop_patch(frame: np.ndarray, center, size: int, dtype=np.float64) -> np.ndarray:
    """``size x size`` patch around ``center`` (x, y); out-of-frame pixels are 0."""
    if size < 1:
        raise ValueError("patch size must be >= 1")
    ox, oy = patch_origin(center, size)
    H, W = frame.shape
    out = np.zeros((size, size), dtype=dtype)
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + size, W), min(oy + size, H)
    if x1 > x0 and y1 > y0:
        out[y0 - oy:y1 - oy, x0 - ox:x1 - ox] = to_unit(frame[y0:y1, x0:x1])
    return out


# -- synthetic sequences ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    width: int = 160
    height: int = 160
    n_frames: int = 90
    hz: float = 15.0
    spacing_mm: float = 0.5
    n_landmarks: int = 1
    blob_amplitude: float = 0.8
    blob_sigma: float = 3.0
    background: float = 0.25
    texture_amplitude: float = 0.06
    motion_amplitude: float = 8.0        # px
    motion_freq: float = 0.25            # Hz
    motion_phase: float | None = None    # rad; None draws one from the seed
    motion_angle_deg: float | None = None  # None draws one in [60, 120] deg
    drift: float = 0.0                   # px per frame along the motion axis
    jump_prob: float = 0.02
    jump_magnitude: float = 6.0
    jump_decay: float = 0.5
    speckle: bool = True
    speckle_grain: float = 1.0           # px, correlation length of the speckle field
    speckle_strength: float = 0.7        # 0 = no speckle, 1 = full multiplicative Rayleigh
    n_distractors: int = 2
    distractor_min_dist: float = 15.0
    distractor_max_dist: float = 45.0
    distractor_amplitude: float = 0.7
    distractor_elongation: float = 1.8
    annotate_every: int = 1
    patch_size: int = 100
    seed: int = 0
    source_tag: str = "SYN"

    def __post_init__(self):
        if not 0.0 <= self.jump_prob <= 1.0:
            raise ValueError("jump_prob must lie in [0, 1]")
        if not 0.0 <= self.speckle_strength <= 1.0:
            raise ValueError("speckle_strength must lie in [0, 1]")
        if self.n_frames < 1 or self.n_landmarks < 1 or self.annotate_every < 1:
            raise ValueError("n_frames, n_landmarks and annotate_every must be >= 1")
        if self.motion_amplitude < 0 or self.jump_magnitude < 0 or self.blob_sigma <= 0:
            raise ValueError("amplitudes must be nonnegative and blob_sigma positive")
        if self.motion_amplitude + self.jump_magnitude / max(1e-9, 1 - self.jump_decay) \
                + abs(self.drift) * self.n_frames >= self.patch_size / 2 - 2 * self.blob_sigma:
            raise ValueError("motion settings can push the landmark out of the search patch")


def motion_path(cfg: SynthConfig, rng: np.random.Generator):
    """Global tissue displacement per frame, plus the jump-event frame indices."""
    phase = cfg.motion_phase if cfg.motion_phase is not None else rng.uniform(0, 2 * np.pi)
    angle = cfg.motion_angle_deg if cfg.motion_angle_deg is not None else rng.uniform(60, 120)
    u = np.array([math.cos(math.radians(angle)), math.sin(math.radians(angle))])
    t = np.arange(cfg.n_frames)
    along = cfg.motion_amplitude * np.sin(2 * np.pi * cfg.motion_freq * t / cfg.hz + phase) + cfg.drift * t
    disp = along[:, None] * u[None, :]
    jumps = np.zeros((cfg.n_frames, 2))
    state = np.zeros(2)
    events = []
    for i in range(cfg.n_frames):
        state = state * cfg.jump_decay
        if i > 0 and rng.random() < cfg.jump_prob:
            a = rng.uniform(0, 2 * np.pi)
            state = state + cfg.jump_magnitude * np.array([math.cos(a), math.sin(a)])
            events.append(i)
        jumps[i] = state
    return disp + jumps, events


def _blob(xx, yy, cx, cy, amp, sx, sy, angle):
    dx, dy = xx - cx, yy - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return amp * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _speckle(shape, grain, rng):
    re_ = ndimage.gaussian_filter(rng.standard_normal(shape), grain)
    im_ = ndimage.gaussian_filter(rng.standard_normal(shape), grain)
    amp = np.hypot(re_, im_)
    return amp / amp.mean()


def synth_sequence(cfg: SynthConfig = SynthConfig()) -> SequenceBundle:
    """Seeded synthetic sequence with dense ground truth in ``truth``."""
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    margin = 3 * cfg.blob_sigma
    # landmark starting positions
    starts = [np.array([W / 2, H / 2]) + rng.uniform(-4, 4, size=2)]
    for _ in range(cfg.n_landmarks - 1):
        for _attempt in range(1000):
            p = starts[0] + rng.uniform(-40, 40, size=2)
            if all(np.hypot(*(p - q)) >= 30 for q in starts):
                starts.append(p)
                break
        else:
            raise ValueError("could not place landmarks; enlarge the image")
    # distractors keep a minimum Chebyshev distance from every landmark
    distractors = []
    for _ in range(cfg.n_distractors):
        for _attempt in range(1000):
            ref = starts[rng.integers(len(starts))]
            off = rng.uniform(-cfg.distractor_max_dist, cfg.distractor_max_dist, size=2)
            p = ref + off
            if all(np.max(np.abs(p - q)) >= cfg.distractor_min_dist for q in starts):
                distractors.append((p, rng.uniform(0, np.pi)))
                break
        else:
            raise ValueError("could not place distractors")

    disp, _events = motion_path(cfg, rng)
    truth = {}
    for k, s in enumerate(starts):
        path = s[None, :] + disp
        if path[:, 0].min() < margin or path[:, 0].max() > W - 1 - margin \
                or path[:, 1].min() < margin or path[:, 1].max() > H - 1 - margin:
            raise ValueError(f"landmark {k + 1} leaves the frame; reduce motion or enlarge the image")
        truth[str(k + 1)] = path

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    texture = ndimage.gaussian_filter(rng.standard_normal((H, W)), 4.0)
    texture *= cfg.texture_amplitude / (texture.std() + 1e-12)
    frames = []
    for i in range(cfg.n_frames):
        d = disp[i]
        img = cfg.background + ndimage.shift(texture, (d[1], d[0]), order=1, mode="mirror")
        for path in truth.values():
            img += _blob(xx, yy, path[i, 0], path[i, 1], cfg.blob_amplitude, cfg.blob_sigma, cfg.blob_sigma, 0.0)
        for p, ang in distractors:
            img += _blob(xx, yy, p[0] + d[0], p[1] + d[1], cfg.distractor_amplitude,
                         cfg.blob_sigma * cfg.distractor_elongation, cfg.blob_sigma, ang)
        if cfg.speckle and cfg.speckle_strength > 0:
            sp = _speckle((H, W), cfg.speckle_grain, rng)
            img = img * ((1 - cfg.speckle_strength) + cfg.speckle_strength * sp)
        frames.append(np.round(np.clip(img / 1.6, 0, 1) * 255).astype(np.uint8))

    landmarks = {
        lid: [(i, float(path[i, 0]), float(path[i, 1]))
              for i in range(cfg.n_frames) if i % cfg.annotate_every == 0]
        for lid, path in truth.items()
    }
    return SequenceBundle(
        frames=frames, spacing_mm=cfg.spacing_mm, hz=cfg.hz, landmarks=landmarks,
        source_tag=cfg.source_tag, name=f"SYN-{cfg.seed:04d}", truth=truth,
    )


def synth_dataset(n: int, cfg: SynthConfig = SynthConfig(), seed0: int = 0) -> list:
    return [synth_sequence(replace(cfg, seed=seed0 + i)) for i in range(n)]
