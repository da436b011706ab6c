"""The two-axis score pair emitted by validator endpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScorePair:
    """Instruction-adherence and aesthetic scores on the 1-5 scale.

    Values are clamped into [1, 5] on ingest; when clamping fired, the raw
    values are kept in the diagnostics fields and ``clamped`` is set.
    """

    adherence: float
    aesthetic: float
    clamped: bool = False
    raw_adherence: float | None = None
    raw_aesthetic: float | None = None

    def __post_init__(self) -> None:
        for value in (self.adherence, self.aesthetic):
            if not (math.isfinite(value) and 1.0 <= value <= 5.0):
                raise ValueError(f"score {value} outside [1.0, 5.0]")

    @classmethod
    def from_raw(cls, adherence: float, aesthetic: float) -> "ScorePair":
        adherence = float(adherence)
        aesthetic = float(aesthetic)
        if not (math.isfinite(adherence) and math.isfinite(aesthetic)):
            raise ValueError("scores must be finite")
        clamped_adh = min(5.0, max(1.0, adherence))
        clamped_aes = min(5.0, max(1.0, aesthetic))
        if clamped_adh != adherence or clamped_aes != aesthetic:
            return cls(clamped_adh, clamped_aes, True, adherence, aesthetic)
        return cls(clamped_adh, clamped_aes)

    def meets(self, t_adh: float, t_aes: float) -> bool:
        """Inclusive threshold test on both axes."""
        return self.adherence >= t_adh and self.aesthetic >= t_aes

    def geometric_mean(self) -> float:
        return math.exp(0.5 * (math.log(self.adherence) + math.log(self.aesthetic)))

    def as_dict(self) -> dict:
        out: dict = {"adherence": self.adherence, "aesthetic": self.aesthetic}
        if self.clamped:
            out["clamped"] = True
            out["raw_adherence"] = self.raw_adherence
            out["raw_aesthetic"] = self.raw_aesthetic
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScorePair":
        return cls(
            adherence=float(data["adherence"]),
            aesthetic=float(data["aesthetic"]),
            clamped=bool(data.get("clamped", False)),
            raw_adherence=data.get("raw_adherence"),
            raw_aesthetic=data.get("raw_aesthetic"),
        )
