"""Per-frame landmark choice combining detector score and temporal proximity."""
from __future__ import annotations

import math
from dataclasses import dataclass


class TrackLost(LookupError):
    """No candidate available in this frame."""


@dataclass(frozen=True)
class SelectionConfig:
    tradeoff_gamma: float = 0.5
    # maximize the combined score; literal_argmin=True reproduces the printed arg min
    literal_argmin: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tradeoff_gamma <= 1.0:
            raise ValueError(f"tradeoff_gamma must lie in [0, 1], got {self.tradeoff_gamma}")


def proximity(pos, prev) -> float:
    """1 / (1 + e^d) for the pixel distance d between ``pos`` and ``prev``."""
    d = math.hypot(pos[0] - prev[0], pos[1] - prev[1])
    # e^d overflows past ~709; the term is 0 to double precision long before
    return 0.0 if d > 700 else 1.0 / (1.0 + math.exp(d))


def combined_score(pos, score: float, prev, gamma: float) -> float:
    return gamma * score + (1.0 - gamma) * proximity(pos, prev)


def select_index(cands, prev, cfg: SelectionConfig = SelectionConfig()) -> int:
    """Index of the chosen candidate among ``(position, score)`` pairs.

    Ties on the combined score go to the candidate closer to ``prev``, then
    to the earlier list entry. Raises :class:`TrackLost` for an empty list.
    """
    if not cands:
        raise TrackLost("no candidates in frame")
    sign = -1.0 if cfg.literal_argmin else 1.0
    best, best_key = None, None
    for i, (pos, score) in enumerate(cands):
        key = (sign * combined_score(pos, score, prev, cfg.tradeoff_gamma),
               -math.hypot(pos[0] - prev[0], pos[1] - prev[1]))
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def select(cands, prev, cfg: SelectionConfig = SelectionConfig()):
    """Position of the candidate chosen by :func:`select_index`."""
    return cands[select_index(cands, prev, cfg)][0]
