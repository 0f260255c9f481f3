"""Names, normal ranges and sentinel conventions of the seven channel rasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# on-disk / raster-stack order
KINDS = ("h", "PL", "R_p", "LOS", "DS", "phi", "theta")
# SR targets in report order
TARGETS = ("PL", "R_p", "DS", "phi", "theta", "LOS")
REGRESSION_TARGETS = ("PL", "R_p", "DS", "phi", "theta")

UNITS = {"h": "m", "PL": "dB", "R_p": "dB", "LOS": "", "DS": "ns", "phi": "deg", "theta": "deg"}

SENTINEL_NORM = -0.1
# normalized values below this are in-building cells
BUILDING_THRESHOLD = -0.05

POLICIES = ("to_min", "to_max", "none")


@dataclass(frozen=True)
class CharacteristicSpec:
    kind: str
    min: float
    max: float
    overflow_policy: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown characteristic kind {self.kind!r}")
        if not self.min < self.max:
            raise ValueError(f"{self.kind}: normal range min must be < max, got [{self.min}, {self.max}]")
        if self.overflow_policy not in POLICIES:
            raise ValueError(f"{self.kind}: overflow_policy must be one of {POLICIES}")

    @property
    def span(self) -> float:
        return self.max - self.min

    @property
    def sentinel(self) -> float:
        return self.min - 0.1 * self.span

    def is_sentinel(self, values: np.ndarray) -> np.ndarray:
        """Exact-match sentinel test, tolerant only to float32 storage rounding."""
        values = np.asarray(values)
        return np.abs(values - self.sentinel) <= 1e-6 * self.span


DEFAULT_SPECS = {
    "h": CharacteristicSpec("h", 0.0, 80.0, "to_max"),
    "PL": CharacteristicSpec("PL", -160.0, -40.0, "to_min"),
    "R_p": CharacteristicSpec("R_p", -30.0, 0.0, "to_min"),
    "LOS": CharacteristicSpec("LOS", 0.0, 1.0, "none"),
    "DS": CharacteristicSpec("DS", 0.0, 500.0, "to_max"),
    "phi": CharacteristicSpec("phi", 0.0, 120.0, "to_max"),
    "theta": CharacteristicSpec("theta", 0.0, 30.0, "to_max"),
}


def specs_from_config(overrides: dict | None = None) -> dict[str, CharacteristicSpec]:
    """Default specs with optional ``{kind: {"min":..,"max":..,"overflow_policy":..}}`` overrides."""
    specs = dict(DEFAULT_SPECS)
    for kind, fields in (overrides or {}).items():
        base = specs[kind]
        specs[kind] = CharacteristicSpec(
            kind,
            float(fields.get("min", base.min)),
            float(fields.get("max", base.max)),
            fields.get("overflow_policy", base.overflow_policy),
        )
    return specs
