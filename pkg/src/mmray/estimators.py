"""Scikit-learn style estimators wrapping the calibration loops.

``MaterialCalibrator.fit`` learns the neural material field from measured
AoA spectra; ``predict`` synthesizes spectra at new receiver poses with the
fitted field. ``GeometryCalibrator.fit`` recovers rigid offsets of a single
reflector from one reference spectrum. Both follow the estimator protocol
(get_params / set_params / fitted attributes with trailing underscore) so
they compose with model-selection tooling.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .calibrate import (Measurement, calibrate_geometry, calibrate_materials,
                        log_mae)
from .diffplate import PlateScene, plate_spectrum
from .field import MaterialField
from .spectra import AoASpectrum
from .tracer import Pose, SceneConfig, synthesize_spectrum


class MaterialCalibrator(BaseEstimator):
    """Fit per-point material parameters to AoA power spectra.

    Parameters
    ----------
    scene : SceneConfig
        Geometry, terminals and tracing budget. Its material source is
        replaced by the field being trained.
    epochs : int
        Passes over the measurement list (one receiver per step).
    lr : float
        Adam learning rate.
    octaves : int
        Positional-encoding octaves of the field.
    alpha_r : float or None
        Lobe exponent; defaults to the scene's value.
    init_seed : int
        Field weight initialization seed.
    """

    def __init__(self, scene: SceneConfig, epochs: int = 100, lr: float = 5e-4,
                 octaves: int = 6, alpha_r: float | None = None, init_seed: int = 0):
        self.scene = scene
        self.epochs = epochs
        self.lr = lr
        self.octaves = octaves
        self.alpha_r = alpha_r
        self.init_seed = init_seed

    def fit(self, X, y=None):
        """X: list of Measurement (or (pose, spectrum) pairs)."""
        measurements = [m if isinstance(m, Measurement)
                        else Measurement(rx=m[0], spectrum=m[1]) for m in X]
        alpha = self.alpha_r if self.alpha_r is not None else self.scene.alpha_r
        field = MaterialField.init_random(seed=self.init_seed, octaves=self.octaves,
                                          alpha_r=alpha)
        cfg = replace(self.scene, materials=field, alpha_r=alpha)
        self.field_, self.history_ = calibrate_materials(
            cfg, measurements, epochs=self.epochs, lr=self.lr)
        self.cfg_ = cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "field_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X) -> list[AoASpectrum]:
        """X: list of Pose (or Measurement); returns predicted spectra."""
        self._check_fitted()
        out = []
        for item in X:
            pose = item.rx if isinstance(item, Measurement) else item
            if not isinstance(pose, Pose):
                raise TypeError("predict expects Pose or Measurement items")
            cfg = replace(self.cfg_, rx=pose)
            spec, _ = synthesize_spectrum(cfg)
            out.append(spec)
        return out

    def score(self, X, y=None) -> float:
        """Negative mean log-MAE against the measurements in X."""
        self._check_fitted()
        losses = []
        for m in X:
            if not isinstance(m, Measurement) or m.spectrum is None:
                raise TypeError("score expects Measurements with spectra")
            cfg = replace(self.cfg_, rx=m.rx,
                          el_step_deg=float(np.diff(m.spectrum.el_deg)[0]),
                          az_step_deg=float(np.diff(m.spectrum.az_deg)[0]))
            pred, _ = synthesize_spectrum(
                cfg, grid=(m.spectrum.el_deg, m.spectrum.az_deg))
            losses.append(float(np.asarray(log_mae(pred, m.spectrum))))
        return -float(np.mean(losses))


class GeometryCalibrator(BaseEstimator):
    """Recover rigid offsets of a square reflector from a reference spectrum.

    Parameters mirror the published procedure: Adam with lr 0.02 for 200
    iterations on the spectrum log-MAE, one geometry variable set free.
    """

    def __init__(self, scene: PlateScene, free_params=("tx", "ty", "tz"),
                 iters: int = 200, lr: float = 0.02):
        self.scene = scene
        self.free_params = free_params
        self.iters = iters
        self.lr = lr

    def fit(self, X, y=None):
        """X: reference AoASpectrum (or {param: initial offset} with y=spectrum)."""
        if isinstance(X, AoASpectrum):
            reference, initial = X, dict(y or {})
        else:
            reference, initial = y, dict(X)
        if not isinstance(reference, AoASpectrum):
            raise TypeError("need a reference AoASpectrum")
        self.offsets_, self.trajectory_, self.history_ = calibrate_geometry(
            self.scene, reference, list(self.free_params), initial,
            iters=self.iters, lr=self.lr)
        return self

    def predict(self, X=None) -> AoASpectrum:
        """Spectrum of the plate at the recovered pose."""
        if not hasattr(self, "offsets_"):
            raise NotFittedError("call fit first")
        params = np.zeros(6)
        from .calibrate import FREE_PARAM_NAMES
        for name, val in self.offsets_.items():
            params[FREE_PARAM_NAMES.index(name)] = val
        return plate_spectrum(self.scene, params)
