"""Angle-of-arrival power spectra and their file formats.

A spectrum is a nonnegative elevation x azimuth grid of received power in
watts, defined on look directions in the receiver's local frame: elevation
measured up from the local x-y plane, azimuth from local +x, so the look
direction is ``k = (cos el cos az, cos el sin az, sin el)``. Values are kept
in watts internally; dB conversion happens only at presentation time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def grid_axes(el_step_deg: float = 1.0, az_step_deg: float = 1.0):
    """Default upper-hemisphere axes: el 0..90 inclusive, az 0..360 exclusive."""
    el = np.arange(0.0, 90.0 + 1e-9, el_step_deg)
    az = np.arange(0.0, 360.0 - 1e-9, az_step_deg)
    return el, az


def grid_directions(el_deg: np.ndarray, az_deg: np.ndarray) -> np.ndarray:
    """Unit look directions for every grid cell, shape (N_el * N_az, 3), el-major."""
    el = np.radians(np.asarray(el_deg, dtype=np.float64))
    az = np.radians(np.asarray(az_deg, dtype=np.float64))
    ee, aa = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)],
                    axis=-1).reshape(-1, 3)


def direction_of(el_deg, az_deg) -> np.ndarray:
    e = np.radians(np.asarray(el_deg, dtype=np.float64))
    a = np.radians(np.asarray(az_deg, dtype=np.float64))
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)


def angular_distance_deg(el1, az1, el2, az2) -> float:
    """Great-circle angle between two look directions, in degrees."""
    d = float(np.clip(np.sum(direction_of(el1, az1) * direction_of(el2, az2)), -1.0, 1.0))
    return float(np.degrees(np.arccos(d)))


@dataclass
class AoASpectrum:
    """Received power (W) per look-direction grid cell."""

    values: np.ndarray                     # (N_el, N_az)
    el_deg: np.ndarray
    az_deg: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.el_deg = np.asarray(self.el_deg, dtype=np.float64)
        self.az_deg = np.asarray(self.az_deg, dtype=np.float64)
        if self.values.shape != (len(self.el_deg), len(self.az_deg)):
            raise ValueError("spectrum shape does not match axes")
        if np.any(np.diff(self.el_deg) <= 0) or np.any(np.diff(self.az_deg) <= 0):
            raise ValueError("axes must be strictly increasing")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("spectrum values must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def to_db(self) -> np.ndarray:
        """10 log10(P / 1 W), with empty cells floored at -400 dB."""
        return 10.0 * np.log10(np.maximum(self.values, 1e-40))

    def argmax_cell(self) -> tuple[int, int]:
        i = int(np.argmax(self.values))
        return np.unravel_index(i, self.values.shape)

    def peak_direction(self) -> tuple[float, float]:
        i, j = self.argmax_cell()
        return float(self.el_deg[i]), float(self.az_deg[j])

    # -- serialization ---------------------------------------------------------

    def save_csv(self, path: str | Path, meta: dict | None = None) -> None:
        """CSV matrix with axis header rows plus a JSON metadata sidecar."""
        path = Path(path)
        lines = ["# mmray aoa spectrum (values in W; rows el_deg, cols az_deg)"]
        lines.append("el\\az," + ",".join(f"{a:.17g}" for a in self.az_deg))
        for i, e in enumerate(self.el_deg):
            lines.append(f"{e:.17g}," + ",".join(f"{v:.17e}" for v in self.values[i]))
        path.write_text("\n".join(lines) + "\n")
        side = dict(self.meta)
        side.update(meta or {})
        path.with_suffix(path.suffix + ".meta.json").write_text(
            json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_csv(cls, path: str | Path) -> "AoASpectrum":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
        az = np.array([float(x) for x in lines[0].split(",")[1:]])
        el, rows = [], []
        for ln in lines[1:]:
            cells = ln.split(",")
            el.append(float(cells[0]))
            rows.append([float(x) for x in cells[1:]])
        meta_path = path.with_suffix(path.suffix + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(np.array(rows), np.array(el), az, meta=meta)
