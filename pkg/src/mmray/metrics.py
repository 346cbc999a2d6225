"""Peak detection on AoA spectra and F1 / angle-error / power-error scoring.

Peaks are local maxima of the grid under a square window that also clear a
threshold below the global maximum. Matching is greedy by ascending
great-circle distance with a cutoff radius; Hungarian assignment is
available behind a flag. Angular error is the great-circle angle between
look directions, which stays well defined near the zenith.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .spectra import AoASpectrum, direction_of

DEFAULT_WINDOW = 5
DEFAULT_FLOOR_DB = 30.0
DEFAULT_MATCH_RADIUS_DEG = 20.0


@dataclass(frozen=True)
class Peak:
    el_deg: float
    az_deg: float
    power: float

    def direction(self) -> np.ndarray:
        return direction_of(self.el_deg, self.az_deg)


@dataclass
class MatchReport:
    pairs: list[tuple[Peak, Peak, float]] = field(default_factory=list)
    unmatched_pred: list[Peak] = field(default_factory=list)
    unmatched_gt: list[Peak] = field(default_factory=list)
    f1: float = 0.0
    aae_deg: float = 0.0
    ape_db: float = 0.0

    def to_dict(self) -> dict:
        return {"f1": self.f1, "aae_deg": self.aae_deg, "ape_db": self.ape_db,
                "n_pred": len(self.pairs) + len(self.unmatched_pred),
                "n_gt": len(self.pairs) + len(self.unmatched_gt),
                "n_matched": len(self.pairs)}


def detect_peaks(spec: AoASpectrum, k: int = 5, window: int = DEFAULT_WINDOW,
                 floor_db: float = DEFAULT_FLOOR_DB) -> list[Peak]:
    """Top-k local maxima above (global max - floor_db).

    A cell qualifies when it equals the maximum of its window neighborhood
    (azimuth wraps, elevation clamps). Ties are broken by (el index, az
    index) so output order is deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    v = spec.values
    vmax = v.max()
    if vmax <= 0.0:
        return []
    local_max = maximum_filter(v, size=window, mode=("nearest", "wrap"))
    threshold = vmax * 10.0 ** (-floor_db / 10.0)
    cand = np.argwhere((v >= local_max) & (v > threshold))
    order = sorted(range(len(cand)),
                   key=lambda i: (-v[cand[i, 0], cand[i, 1]], cand[i, 0], cand[i, 1]))
    peaks = []
    for i in order[:k]:
        r, c = cand[i]
        peaks.append(Peak(float(spec.el_deg[r]), float(spec.az_deg[c]), float(v[r, c])))
    return peaks


def _pairwise_distance_deg(pred: list[Peak], gt: list[Peak]) -> np.ndarray:
    if not pred or not gt:
        return np.zeros((len(pred), len(gt)))
    dp = np.stack([p.direction() for p in pred])
    dg = np.stack([g.direction() for g in gt])
    return np.degrees(np.arccos(np.clip(dp @ dg.T, -1.0, 1.0)))


def match_peaks(pred: list[Peak], gt: list[Peak],
                radius_deg: float = DEFAULT_MATCH_RADIUS_DEG,
                assignment: str = "greedy") -> MatchReport:
    """Pair predicted and reference peaks by angular proximity.

    ``greedy`` takes globally-nearest pairs first; ``optimal`` solves the
    assignment problem over in-radius pairs.
    """
    dist = _pairwise_distance_deg(pred, gt)
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs: list[tuple[int, int]] = []
    if assignment == "greedy":
        order = np.dstack(np.unravel_index(np.argsort(dist, axis=None, kind="stable"),
                                           dist.shape))[0] if dist.size else []
        for i, j in order:
            if i in used_p or j in used_g or dist[i, j] > radius_deg:
                continue
            pairs.append((int(i), int(j)))
            used_p.add(int(i))
            used_g.add(int(j))
    elif assignment == "optimal":
        from scipy.optimize import linear_sum_assignment
        if dist.size:
            big = 1e9
            cost = np.where(dist <= radius_deg, dist, big)
            rows, cols = linear_sum_assignment(cost)
            for i, j in zip(rows, cols):
                if cost[i, j] < big:
                    pairs.append((int(i), int(j)))
                    used_p.add(int(i))
                    used_g.add(int(j))
    else:
        raise ValueError("assignment must be 'greedy' or 'optimal'")

    report = MatchReport()
    for i, j in pairs:
        report.pairs.append((pred[i], gt[j], float(dist[i, j])))
    report.unmatched_pred = [p for i, p in enumerate(pred) if i not in used_p]
    report.unmatched_gt = [g for j, g in enumerate(gt) if j not in used_g]
    return report


def score(report: MatchReport) -> MatchReport:
    """Fill f1 / aae_deg / ape_db in from the matched pairs."""
    n_match = len(report.pairs)
    n_pred = n_match + len(report.unmatched_pred)
    n_gt = n_match + len(report.unmatched_gt)
    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_gt if n_gt else 0.0
    report.f1 = (2 * precision * recall / (precision + recall)
                 if (precision + recall) > 0 else 0.0)
    if n_match:
        report.aae_deg = float(np.mean([d for _, _, d in report.pairs]))
        report.ape_db = float(np.mean(
            [abs(10.0 * np.log10(p.power / g.power)) for p, g, _ in report.pairs]))
    return report


def evaluate_spectra(pred: AoASpectrum, gt: AoASpectrum, k: int = 5,
                     window: int = DEFAULT_WINDOW, floor_db: float = DEFAULT_FLOOR_DB,
                     radius_deg: float = DEFAULT_MATCH_RADIUS_DEG,
                     assignment: str = "greedy") -> MatchReport:
    """Peak-detect both spectra, match and score in one call."""
    p = detect_peaks(pred, k=k, window=window, floor_db=floor_db)
    g = detect_peaks(gt, k=k, window=window, floor_db=floor_db)
    return score(match_peaks(p, g, radius_deg=radius_deg, assignment=assignment))
