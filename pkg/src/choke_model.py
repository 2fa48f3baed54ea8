"""Sachdeva choke model used as the per-well virtual flow meter.

The total mass flow through a production choke is

    w = C_D * A(u) * sqrt(2 * rho_2**2 * p1 * [k/(k-1) * phi_G * (1/rho_G1 - p_r/rho_G2)
                                          + (phi_O/rho_O + phi_W/rho_W) * (1 - p_r)])

with ``p_r = max(p2/p1, r_c)``, the upstream gas density from the ideal gas law
corrected by ``Z``, the downstream gas density from isentropic expansion and
``rho_2`` the harmonic mean of the phase densities at downstream conditions.
The gas density entering that harmonic mean is the downstream one.

All functions accept numpy arrays and broadcast, so a single call can evaluate
a composition per particle.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import InvalidInputError, NumericalDomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

AREA_PROFILES: Tuple[str, ...] = ("linear", "sigmoid", "convex", "concave")


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    """Return a Python float for 0-d results."""
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class WellFeatures:
    """Measured inputs of one well at one time step.

    Parameters
    ----------
    u : float
        Choke opening in [0, 1]
    p1 : float
        Upstream pressure, Pa
    p2 : float
        Downstream pressure, Pa
    temperature : float
        Upstream temperature, K
    active : bool, optional
        Whether the well contributes to the observation, by default True
    """

    u: float
    p1: float
    p2: float
    temperature: float
    active: bool = True

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise InvalidInputError(f"Choke opening must lie in [0, 1], got {self.u}")
        if self.p1 <= 0 or self.p2 <= 0:
            raise InvalidInputError(
                f"Pressures must be positive, got p1={self.p1}, p2={self.p2}"
            )
        if self.temperature <= 0:
            raise InvalidInputError(
                f"Temperature must be positive, got {self.temperature}"
            )


@dataclass(frozen=True)
class FluidProperties:
    """Fluid and choke constants shared by all wells (SI units)."""

    rho_o: float = 800.0
    rho_w: float = 1000.0
    kappa: float = 1.3
    z: float = 1.0
    molar_mass: float = 0.016
    gas_constant: float = 8.314
    r_c: float = 0.6
    c_d: float = 0.84
    a_max: float = 1.0e-3
    area_profile: str = "linear"

    def __post_init__(self):
        for name in (
            "rho_o",
            "rho_w",
            "kappa",
            "z",
            "molar_mass",
            "gas_constant",
            "c_d",
            "a_max",
        ):
            if getattr(self, name) <= 0:
                raise InvalidInputError(
                    f"Fluid property '{name}' must be positive, got {getattr(self, name)}"
                )
        if not 0.0 < self.r_c < 1.0:
            raise InvalidInputError(
                f"Critical pressure ratio must lie in (0, 1), got {self.r_c}"
            )
        if self.kappa <= 1.0:
            raise InvalidInputError(
                f"Gas expansion coefficient must exceed 1, got {self.kappa}"
            )
        if self.area_profile not in AREA_PROFILES:
            raise InvalidInputError(
                f"Unknown choke area profile: {self.area_profile}. "
                f"Available: {', '.join(AREA_PROFILES)}"
            )


@dataclass(frozen=True)
class Composition:
    """Gas, oil and water mass fractions.

    Fields may be arrays of equal shape, one composition per entry.
    """

    phi_g: ArrayLike
    phi_o: ArrayLike
    phi_w: ArrayLike

    def __post_init__(self):
        phi = self.as_array()
        if np.any(phi < 0.0) or np.any(phi > 1.0):
            raise InvalidInputError("Mass fractions must lie in [0, 1]")
        if np.any(np.abs(phi.sum(axis=-1) - 1.0) > 1e-12):
            raise InvalidInputError("Mass fractions must sum to one")

    def as_array(self) -> np.ndarray:
        """Stack the fractions along a trailing axis of length 3."""
        return np.stack(
            np.broadcast_arrays(
                np.asarray(self.phi_g, dtype=float),
                np.asarray(self.phi_o, dtype=float),
                np.asarray(self.phi_w, dtype=float),
            ),
            axis=-1,
        )


def pressure_ratio(p1: ArrayLike, p2: ArrayLike, r_c: float) -> ArrayLike:
    """Return the effective pressure ratio ``max(p2/p1, r_c)``.

    Raises
    ------
    InvalidInputError
        If a pressure is not positive or ``p2 > p1``
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.any(p1 <= 0) or np.any(p2 <= 0):
        raise InvalidInputError(f"Pressures must be positive, got p1={p1}, p2={p2}")
    if np.any(p2 > p1):
        raise InvalidInputError(
            f"Downstream pressure exceeds upstream pressure (p1={p1}, p2={p2})"
        )
    return _scalar_or_array(np.maximum(p2 / p1, r_c))


def is_critical(p1: ArrayLike, p2: ArrayLike, r_c: float) -> ArrayLike:
    """Whether the choke operates in the critical (choked) regime."""
    return np.asarray(p2, dtype=float) / np.asarray(p1, dtype=float) <= r_c


def gas_density_upstream(
    p1: ArrayLike, temperature: ArrayLike, props: FluidProperties
) -> ArrayLike:
    """Upstream gas density ``p1 * M / (Z * R * T)`` in kg/m³."""
    p1 = np.asarray(p1, dtype=float)
    temperature = np.asarray(temperature, dtype=float)
    if np.any(p1 <= 0) or np.any(temperature <= 0):
        raise InvalidInputError(
            f"Pressure and temperature must be positive, got p1={p1}, T={temperature}"
        )
    rho = p1 * props.molar_mass / (props.z * props.gas_constant * temperature)
    return _scalar_or_array(rho)


def gas_density_downstream(rho_g1: ArrayLike, p_r: ArrayLike, kappa: float) -> ArrayLike:
    """Downstream gas density after isentropic expansion to ``p_r``."""
    rho_g1 = np.asarray(rho_g1, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    if np.any(rho_g1 <= 0):
        raise InvalidInputError(f"Gas density must be positive, got {rho_g1}")
    if np.any(p_r <= 0) or np.any(p_r > 1):
        raise InvalidInputError(f"Pressure ratio must lie in (0, 1], got {p_r}")
    if kappa <= 1:
        raise InvalidInputError(f"Gas expansion coefficient must exceed 1, got {kappa}")
    return _scalar_or_array(rho_g1 * p_r ** (1.0 / kappa))


def mixture_density_downstream(
    phi: Composition, rho_g2: ArrayLike, props: FluidProperties
) -> ArrayLike:
    """Mass-weighted harmonic mean of the phase densities."""
    rho_g2 = np.asarray(rho_g2, dtype=float)
    if np.any(rho_g2 <= 0):
        raise InvalidInputError(f"Gas density must be positive, got {rho_g2}")
    specific_volume = (
        np.asarray(phi.phi_g) / rho_g2
        + np.asarray(phi.phi_o) / props.rho_o
        + np.asarray(phi.phi_w) / props.rho_w
    )
    return _scalar_or_array(1.0 / specific_volume)


def choke_area(u: ArrayLike, a_max: float, profile: str = "linear") -> ArrayLike:
    """Flow area of the choke at opening ``u``.

    Parameters
    ----------
    u : ArrayLike
        Choke opening in [0, 1]
    a_max : float
        Area of the fully open choke, m²
    profile : str, optional
        Valve characteristic, one of ``AREA_PROFILES``, by default 'linear'

    Returns
    -------
    ArrayLike
        Flow area, m²

    Raises
    ------
    InvalidInputError
        If ``u`` lies outside [0, 1] or the profile is unknown
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise InvalidInputError(f"Choke opening must lie in [0, 1], got {u}")

    if profile == "linear":
        opening = u
    elif profile == "sigmoid":
        b = 1.5
        opening = u**b / (u**b + (1.0 - u) ** b)
    elif profile == "convex":
        b = 0.25
        opening = b * u + (1.0 - b) * u**2
    elif profile == "concave":
        b = 0.75
        opening = u**b
    else:
        raise InvalidInputError(
            f"Unknown choke area profile: {profile}. "
            f"Available: {', '.join(AREA_PROFILES)}"
        )
    return _scalar_or_array(a_max * opening)


def total_flow(x: WellFeatures, phi: Composition, props: FluidProperties) -> ArrayLike:
    """Total mass flow through the choke in kg/s.

    Parameters
    ----------
    x : WellFeatures
        Measured choke opening, pressures and temperature
    phi : Composition
        Mass fractions; array-valued fields give one flow per entry
    props : FluidProperties
        Fluid and choke constants

    Returns
    -------
    ArrayLike
        Nonnegative mass flow, shaped like the composition fields

    Raises
    ------
    NumericalDomainError
        If the radicand is negative beyond rounding
    """
    area = choke_area(x.u, props.a_max, props.area_profile)
    p_r = pressure_ratio(x.p1, x.p2, props.r_c)
    rho_g1 = gas_density_upstream(x.p1, x.temperature, props)
    rho_g2 = gas_density_downstream(rho_g1, p_r, props.kappa)
    rho_2 = np.asarray(mixture_density_downstream(phi, rho_g2, props))

    phi_g = np.asarray(phi.phi_g, dtype=float)
    liquid = np.asarray(phi.phi_o) / props.rho_o + np.asarray(phi.phi_w) / props.rho_w
    expansion = props.kappa / (props.kappa - 1.0)
    gas_term = expansion * phi_g * (1.0 / rho_g1 - p_r / rho_g2)
    radicand = 2.0 * rho_2**2 * x.p1 * (gas_term + liquid * (1.0 - p_r))

    # Rounding in the gas term may leave a tiny negative value at p_r = 1
    scale = 2.0 * rho_2**2 * x.p1 * (expansion * phi_g / rho_g1 + liquid)
    if np.any(radicand < -1e-12 * scale):
        bad = int(np.argmin(radicand - (-1e-12 * scale))) if radicand.ndim else 0
        raise NumericalDomainError(
            f"Negative radicand in choke equation for features {x} and composition "
            f"{phi.as_array().reshape(-1, 3)[bad]}"
        )
    return _scalar_or_array(props.c_d * area * np.sqrt(np.maximum(radicand, 0.0)))
