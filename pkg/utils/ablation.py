"""
Component toggles for ablation runs.

    dpr  remove dynamic points before encoding
    fa   align past maps along the grid trajectory
    tsp  build the multi-scale pyramid and aggregate coarse to fine
    da   deformable attention over past frames (identity sampling when off)

With tsp and da both off the window's maps are simply summed.
"""
from dataclasses import dataclass
from typing import Dict, List

from utils.errors import ValidationError

FLAG_NAMES = ("dpr", "fa", "tsp", "da")


@dataclass(frozen=True)
class AblationFlags:
    dpr: bool = True
    fa: bool = True
    tsp: bool = True
    da: bool = True

    @property
    def label(self) -> str:
        enabled = [name.upper() for name in FLAG_NAMES if getattr(self, name)]
        return "+".join(enabled) if enabled else "plain"

    @property
    def uses_aggregator(self) -> bool:
        return self.tsp or self.da

    def to_dict(self) -> Dict[str, bool]:
        return {name: getattr(self, name) for name in FLAG_NAMES}

    @classmethod
    def from_dict(cls, data: Dict[str, bool]) -> "AblationFlags":
        unknown = set(data) - set(FLAG_NAMES)
        if unknown:
            raise ValidationError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**{name: bool(value) for name, value in data.items()})

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """Comma-separated enabled flags, e.g. "dpr,fa"; "all" or "none" also accepted."""
        text = text.strip().lower()
        if text == "all":
            return cls()
        if text in ("", "none", "plain"):
            return cls(False, False, False, False)
        names = [part.strip() for part in text.split(",") if part.strip()]
        unknown = [name for name in names if name not in FLAG_NAMES]
        if unknown:
            raise ValidationError(f"unknown ablation flags: {unknown}")
        return cls(**{name: name in names for name in FLAG_NAMES})


def ablation_ladder() -> List[AblationFlags]:
    """plain, +DPR, +FA, +TSP, +DA: each step enables one more component."""
    ladder = []
    for count in range(len(FLAG_NAMES) + 1):
        ladder.append(AblationFlags(**{name: index < count for index, name in enumerate(FLAG_NAMES)}))
    return ladder
