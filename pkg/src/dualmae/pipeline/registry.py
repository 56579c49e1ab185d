"""Feature registry: the declared features and the grid layout they induce.

The registry is a JSON document listing features in a fixed order. Grid slots
derive from feature kind:

  lab          one value slot (last result of the day) plus one reference
               slot (most recent prior-day result)
  vital        24 hourly slots, last observation up to each hour
  vasopressor  all vasopressor drugs fold into a single norepinephrine-
               equivalent feature with 24 hourly slots stamped at hour
               midpoints (dopamine is replaced, never kept as its own column)

The slot order is fixed by registry order: labs first (value, reference per
lab), then vitals, then the combined vasopressor feature.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import ConfigError

KINDS = ("lab", "vital", "vasopressor")
VASO_ROLES = ("ne", "epi", "dopamine", "phenylephrine", "vasopressin")
NE_EQ_FEATURE = "vasopressor_ne_eq"

# unit conversions applied at ingest, keyed by name in the registry
CONVERSIONS = {
    "identity": lambda v: v,
    "f_to_c": lambda v: (v - 32.0) * 5.0 / 9.0,
}


@dataclass
class FeatureSpec:
    id: str
    kind: str
    unit: Optional[str] = None
    panel: Optional[str] = None
    role: Optional[str] = None  # vasopressor drugs only
    aliases: dict = field(default_factory=dict)  # alias -> conversion name

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"feature {self.id}: unknown kind {self.kind!r}")
        if self.kind == "vasopressor":
            if self.role not in VASO_ROLES:
                raise ConfigError(f"vasopressor {self.id} needs a role among {VASO_ROLES}")
        for conv in self.aliases.values():
            if conv not in CONVERSIONS:
                raise ConfigError(f"feature {self.id}: unknown conversion {conv!r}")


@dataclass(frozen=True)
class Slot:
    """One grid column: a feature, its kind, and a sub-slot tag."""

    feature: str
    kind: str
    tag: str  # "day" | "ref" | "h00".."h23"

    @property
    def column(self) -> str:
        return f"{self.feature}@{self.tag}"


class FeatureRegistry:
    def __init__(self, features: list):
        if not features:
            raise ConfigError("registry declares no features")
        self.features = features
        seen = set()
        for f in features:
            if f.id in seen:
                raise ConfigError(f"duplicate feature id {f.id}")
            seen.add(f.id)
        self._alias_map = {}
        for f in features:
            self._alias_map[f.id] = (f.id, "identity")
            for alias, conv in f.aliases.items():
                if alias in self._alias_map:
                    raise ConfigError(f"alias {alias} claimed twice")
                self._alias_map[alias] = (f.id, conv)
        self._by_id = {f.id: f for f in features}

    # construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureRegistry":
        known = {"version", "features"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown registry keys: {sorted(extra)}")
        feats = []
        for item in doc.get("features", []):
            aliases = item.get("aliases", {})
            if isinstance(aliases, list):
                aliases = {a: "identity" for a in aliases}
            feats.append(
                FeatureSpec(
                    id=str(item["id"]),
                    kind=item["kind"],
                    unit=item.get("unit"),
                    panel=item.get("panel"),
                    role=item.get("role"),
                    aliases={str(k): v for k, v in aliases.items()},
                )
            )
        return cls(feats)

    @classmethod
    def load(cls, path) -> "FeatureRegistry":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "features": [
                {
                    "id": f.id,
                    "kind": f.kind,
                    **({"unit": f.unit} if f.unit else {}),
                    **({"panel": f.panel} if f.panel else {}),
                    **({"role": f.role} if f.role else {}),
                    **({"aliases": f.aliases} if f.aliases else {}),
                }
                for f in self.features
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # lookups ---------------------------------------------------------------
    def resolve(self, raw_feature_id: str):
        """Map an event's feature id (canonical or alias) to (feature, conversion)."""
        hit = self._alias_map.get(str(raw_feature_id))
        if hit is None:
            return None
        fid, conv = hit
        return self._by_id[fid], CONVERSIONS[conv]

    def feature(self, fid: str) -> FeatureSpec:
        return self._by_id[fid]

    @property
    def labs(self) -> list:
        return [f for f in self.features if f.kind == "lab"]

    @property
    def vitals(self) -> list:
        return [f for f in self.features if f.kind == "vital"]

    @property
    def vasopressors(self) -> list:
        return [f for f in self.features if f.kind == "vasopressor"]

    def panels(self) -> dict:
        """Panel name -> list of member feature ids."""
        out: dict = {}
        for f in self.features:
            if f.panel:
                out.setdefault(f.panel, []).append(f.id)
        return out

    # grid layout -----------------------------------------------------------
    def slots(self) -> list:
        layout = []
        for f in self.labs:
            layout.append(Slot(f.id, "lab", "day"))
            layout.append(Slot(f.id, "lab", "ref"))
        for f in self.vitals:
            layout.extend(Slot(f.id, "vital", f"h{h:02d}") for h in range(24))
        if self.vasopressors:
            layout.extend(Slot(NE_EQ_FEATURE, "vasopressor", f"h{h:02d}") for h in range(24))
        return layout

    @property
    def grid_len(self) -> int:
        return len(self.slots())

    def stat_features(self) -> list:
        """Feature ids that carry normalization stats (drugs fold into one)."""
        out = [f.id for f in self.labs] + [f.id for f in self.vitals]
        if self.vasopressors:
            out.append(NE_EQ_FEATURE)
        return out
