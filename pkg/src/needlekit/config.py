"""Run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

from .cluster import HdbscanParams
from .errors import FormatError, InvalidInput
from .refine import EmParams, MergeParams
from .techniques import LeonSplitParams, ReconstructOptions, Technique

_SECTIONS = {"hdbscan": HdbscanParams, "leon_split": LeonSplitParams, "merge": MergeParams, "em": EmParams}
_SCALARS = {f.name for f in fields(ReconstructOptions)} - set(_SECTIONS)


def _build(cls, doc, source, where):
    if not isinstance(doc, dict):
        raise FormatError("expected an object", source, where)
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise FormatError("unknown key", source, f"{where}.{key}" if where else key)
    try:
        return cls(**doc)
    except (InvalidInput, TypeError, ValueError) as exc:
        raise FormatError(str(exc), source, where or "$") from None


@dataclass
class RunConfig:
    technique: Technique | None = None
    n_needles: int | None = None
    seed: int = 0
    gate_mm: float = 10.0
    options: ReconstructOptions = field(default_factory=ReconstructOptions)
    mask: list = field(default_factory=list)
    out: str | None = None

    @classmethod
    def from_dict(cls, doc, source: str = "<config>") -> "RunConfig":
        if not isinstance(doc, dict):
            raise FormatError("config must be a JSON object", source, "$")
        cfg = cls()
        opts = {}
        for key, val in doc.items():
            if key in _SECTIONS:
                opts[key] = _build(_SECTIONS[key], val, source, key)
            elif key in _SCALARS:
                # null radius means unbounded
                opts[key] = math.inf if val is None and key.endswith("radius_vox") else val
            elif key == "technique":
                try:
                    cfg.technique = Technique(val)
                except ValueError:
                    raise FormatError(f"unknown technique {val!r}", source, key) from None
            elif key in ("n_needles", "seed"):
                if val is not None and (not isinstance(val, int) or isinstance(val, bool)):
                    raise FormatError("expected an integer", source, key)
                setattr(cfg, key, val)
            elif key == "gate_mm":
                if not isinstance(val, (int, float)) or isinstance(val, bool) or val <= 0:
                    raise FormatError("expected a positive number", source, key)
                cfg.gate_mm = float(val)
            elif key == "mask":
                cfg.mask = [val] if isinstance(val, str) else list(val)
            elif key == "out":
                cfg.out = str(val)
            else:
                raise FormatError("unknown key", source, key)
        try:
            cfg.options = dataclasses.replace(cfg.options, **opts)
        except (InvalidInput, TypeError) as exc:
            raise FormatError(str(exc), source, "$") from None
        if cfg.options.mjung_count not in ("centroids", "points"):
            raise FormatError("expected 'centroids' or 'points'", source, "mjung_count")
        if cfg.options.init_degree not in (1, 2, 3):
            raise FormatError("expected 1, 2 or 3", source, "init_degree")
        return cfg

    def validate(self) -> None:
        if self.technique is None:
            raise InvalidInput("no technique given")
        if self.technique.needs_count and self.n_needles is None:
            raise InvalidInput(f"technique {self.technique.value} requires needle count (--n-needles)")
        if self.n_needles is not None and self.n_needles < 1:
            raise InvalidInput("n_needles must be >= 1")

    def to_dict(self) -> dict:
        return {
            "technique": self.technique.value if self.technique else None,
            "n_needles": self.n_needles,
            "seed": self.seed,
            "gate_mm": self.gate_mm,
            "options": {k: (None if isinstance(v, float) and math.isinf(v) else v)
                        for k, v in dataclasses.asdict(self.options).items()},
        }
