"""Physical constants used across the engine (SI units, 64-bit)."""

SPEED_OF_LIGHT = 299792458.0
"""Speed of light in vacuum, m/s."""

VACUUM_PERMITTIVITY = 8.8541878128e-12
"""Vacuum permittivity, F/m."""


def wavelength(frequency_hz: float) -> float:
    """Free-space wavelength in meters for a carrier frequency in Hz."""
    if frequency_hz <= 0.0:
        raise ValueError(f"frequency must be positive, got {frequency_hz}")
    return SPEED_OF_LIGHT / frequency_hz
