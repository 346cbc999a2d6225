"""mmray: differentiable Monte Carlo ray tracing for mmWave channels.

A directional scattering lobe replaces mirror-law reflection so traced
power varies smoothly with geometry, which makes angle-of-arrival power
spectra robust to reconstruction noise and differentiable for gradient
calibration of material and geometry parameters.
"""

from .antenna import (ArrayGeometry, CosinePowerPattern, DipolePattern,
                      IsotropicPattern, Precoding, TabulatedPattern,
                      hanning_taper, matched_precoding, steering_vector,
                      tx_array_weight, rx_element_phase,
                      uniform_rectangular_array)
from .autodiff import Tape, Var, backward, finite_diff_check, grad
from .bvh import AccelStructure, build_accel, intersect, occluded
from .calibrate import (AdamState, CalibrationDiverged, Measurement, adam_step,
                        calibrate_geometry, calibrate_materials, load_measurements,
                        log_mae)
from .constants import SPEED_OF_LIGHT, wavelength
from .diffplate import PlateScene, plate_spectrum
from .estimators import GeometryCalibrator, MaterialCalibrator
from .field import MaterialField, positional_encoding
from .geometry import Intersection, Ray, TriangleMesh, load_mesh
from .materials import (RadioMaterial, TransferMatrix, complex_permittivity,
                        fresnel_coeffs, hpbw_deg, normalization_factor,
                        sample_scatter_direction, scattering_pattern,
                        transfer_matrix)
from .metrics import MatchReport, Peak, detect_peaks, evaluate_spectra, match_peaks, score
from .scenes import build_scene, load_scene_config
from .spectra import AoASpectrum
from .tracer import (PathBatch, PathSample, Pose, SceneConfig, aoa_spectrum,
                     friis_gain, integrate_path_gain, look_at_rotation,
                     per_element_power, specular_reference_gain,
                     synthesize_spectrum, trace_paths)

__version__ = "0.1.0"
