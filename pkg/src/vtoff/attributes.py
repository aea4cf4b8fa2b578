"""Structural garment attributes.

Each garment carries a category plus a small vector of structural slots
(cloth type, waist, fit, hem, neckline, sleeve length, cloth length).
Lower-body garments use the 4-slot subset without hem, neckline, or
sleeves.  Slot values index small per-slot vocabularies and are the only
"text" this package conditions on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CATEGORY_NAMES, CATEGORY_SLOTS, SLOT_CARDINALITIES
from .errors import ValidationError


@dataclass(frozen=True)
class AttributeVector:
    category: str
    cloth_type: int = 0
    waist: int = 0
    fit: int = 0
    cloth_length: int = 0
    hem: int | None = None
    neckline: int | None = None
    sleeve_length: int | None = None

    def __post_init__(self):
        if self.category not in CATEGORY_NAMES:
            raise ValidationError(f"unknown category {self.category!r}")
        valid = set(CATEGORY_SLOTS[self.category])
        for name in ("hem", "neckline", "sleeve_length"):
            value = getattr(self, name)
            if name in valid:
                if value is None:
                    raise ValidationError(f"{self.category} garment needs a {name} value")
            elif value is not None:
                raise ValidationError(f"{self.category} garment has no {name} slot")
        for name in valid:
            value = getattr(self, name)
            if not 0 <= value < SLOT_CARDINALITIES[name]:
                raise ValidationError(
                    f"{name}={value} outside 0..{SLOT_CARDINALITIES[name] - 1}")

    @property
    def slots(self) -> tuple[str, ...]:
        return CATEGORY_SLOTS[self.category]

    def slot_values(self) -> list[int]:
        return [getattr(self, name) for name in self.slots]

    def to_array(self) -> np.ndarray:
        """[category index, slot values in canonical order] as uint8."""
        return np.array([CATEGORY_NAMES.index(self.category)] + self.slot_values(),
                        dtype=np.uint8)

    @classmethod
    def from_array(cls, arr) -> "AttributeVector":
        arr = [int(v) for v in arr]
        if not arr or arr[0] >= len(CATEGORY_NAMES):
            raise ValidationError(f"bad attribute array {arr}")
        category = CATEGORY_NAMES[arr[0]]
        names = CATEGORY_SLOTS[category]
        if len(arr) - 1 != len(names):
            raise ValidationError(
                f"{category} expects {len(names)} slots, got {len(arr) - 1}")
        return cls(category=category, **dict(zip(names, arr[1:])))


def random_attributes(rng, category: str) -> AttributeVector:
    """Uniform draw over the category's slot vocabularies."""
    values = {name: int(rng.integers(0, SLOT_CARDINALITIES[name], ()))
              for name in CATEGORY_SLOTS[category]}
    return AttributeVector(category=category, **values)
