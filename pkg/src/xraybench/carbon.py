"""Instance-power carbon model for inference workloads.

A run of ``t`` seconds on an instance drawing ``watts`` behind a data centre
with power-usage-effectiveness ``pue`` on a grid of ``carbon_intensity``
gCO2eq/kWh, plus amortized hardware emissions ``manufacturing_per_hour``
gCO2eq/h, emits::

    E [mg] = (watts * pue * carbon_intensity / 1000 + manufacturing_per_hour) * t / 3.6

All arithmetic is float64; rounding happens only when rendering.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from xraybench.errors import ConfigError, UnknownProfileError

# Hosting platform bills in 60 s minimum increments; reported, never folded in.
MIN_BILLING_S = 60.0

COACH_EMISSION_G_PER_KM = 21.7
# Birmingham-London is not given; back-solved so GenAI(3h)/coach ~= 0.42.
COACH_DISTANCE_KM = 188.0
SUSTAINED_HOURS = 3.0


@dataclass(frozen=True)
class InfrastructureProfile:
    name: str
    watts: float
    pue: float
    carbon_intensity: float
    manufacturing_per_hour: float = 0.0
    is_remote: bool = False

    def __post_init__(self) -> None:
        if not self.watts > 0:
            raise ConfigError(f"{self.name}: watts must be > 0, got {self.watts}")
        if not self.pue >= 1:
            raise ConfigError(f"{self.name}: pue must be >= 1, got {self.pue}")
        if not self.carbon_intensity >= 0:
            raise ConfigError(f"{self.name}: carbon_intensity must be >= 0")
        if not self.manufacturing_per_hour >= 0:
            raise ConfigError(f"{self.name}: manufacturing_per_hour must be >= 0")
        if self.is_remote and self.manufacturing_per_hour != 0:
            raise ConfigError(f"{self.name}: remote profiles carry no manufacturing term")

    @property
    def grams_per_hour(self) -> float:
        return self.watts * self.pue * self.carbon_intensity / 1000.0 + self.manufacturing_per_hour


@dataclass(frozen=True)
class MemoryContext:
    app_size_mb: float
    model_size_mb: float
    instance_total_mb: float

    def __post_init__(self) -> None:
        if not self.instance_total_mb > 0:
            raise ConfigError("instance_total_mb must be > 0")
        if self.app_size_mb < 0 or self.model_size_mb < 0:
            raise ConfigError("memory sizes must be non-negative")
        used = self.app_size_mb + self.model_size_mb
        if not 0 < used <= self.instance_total_mb:
            raise ConfigError(
                f"app+model memory {used} MB must be in (0, {self.instance_total_mb}]"
            )

    @property
    def fraction(self) -> float:
        return (self.app_size_mb + self.model_size_mb) / self.instance_total_mb

    @classmethod
    def from_fraction(cls, fraction: float) -> "MemoryContext":
        """Context whose used share equals ``fraction`` of a unit instance."""
        return cls(app_size_mb=fraction, model_size_mb=0.0, instance_total_mb=1.0)


@dataclass(frozen=True)
class FootprintBreakdown:
    total_mg: float
    memory_scaled_mg_per_mb: float
    duration_s: float
    profile_name: str


def footprint(profile: InfrastructureProfile, duration_s: float) -> float:
    """Carbon footprint in mgCO2eq of running on ``profile`` for ``duration_s``."""
    if duration_s < 0 or math.isnan(duration_s):
        raise ValueError(f"duration must be >= 0, got {duration_s}")
    return profile.grams_per_hour * duration_s / 3.6


def memory_scaled_footprint(total_mg: float, mem: MemoryContext) -> float:
    if mem.instance_total_mb == 0:
        raise ValueError("instance_total_mb must be non-zero")
    return total_mg * (mem.app_size_mb + mem.model_size_mb) / mem.instance_total_mb


def breakdown(profile: InfrastructureProfile, duration_s: float, mem: MemoryContext) -> FootprintBreakdown:
    total = footprint(profile, duration_s)
    return FootprintBreakdown(
        total_mg=total,
        memory_scaled_mg_per_mb=memory_scaled_footprint(total, mem),
        duration_s=duration_s,
        profile_name=profile.name,
    )


def billed_duration_s(duration_s: float) -> float:
    """Duration the hosting platform would bill for (annotation only)."""
    return max(duration_s, MIN_BILLING_S)


def sustained_footprint(profile: InfrastructureProfile, hours: float) -> float:
    """gCO2eq from running ``profile`` continuously for ``hours``."""
    if hours < 0:
        raise ValueError(f"hours must be >= 0, got {hours}")
    return footprint(profile, hours * 3600.0) / 1000.0


def transport_baseline(distance_km: float, emission_per_km: float) -> float:
    if distance_km < 0 or emission_per_km < 0:
        raise ValueError("distance and emission factor must be >= 0")
    return distance_km * emission_per_km


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    value_g: float
    ratio: float | None  # None when the baseline is zero

    def ratio_text(self, digits: int = 3) -> str:
        return "undefined" if self.ratio is None else format_sig(self.ratio, digits)


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    rows: tuple[ComparisonRow, ...]

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dicts(self) -> list[dict]:
        return [{"label": r.label, "value_g": r.value_g, "ratio": r.ratio} for r in self.rows]

    def to_json(self) -> str:
        return json.dumps({"baseline": self.baseline, "rows": self.to_dicts()}, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "value_g", "ratio_to_" + self.baseline])
        for r in self.rows:
            w.writerow([r.label, repr(r.value_g), "undefined" if r.ratio is None else repr(r.ratio)])
        return buf.getvalue()


def compare_footprints(entries: Sequence[tuple[str, float]], baseline: str) -> ComparisonTable:
    """Tabulate ``entries`` against the entry labelled ``baseline``.

    A zero baseline yields ``ratio=None`` for non-zero entries (and 1.0 for
    zero entries, including the baseline itself).
    """
    values = dict(entries)
    if len(values) != len(entries):
        raise ValueError("duplicate labels in comparison entries")
    if baseline not in values:
        raise ValueError(f"baseline {baseline!r} is not among the entries")
    for label, v in entries:
        if v < 0:
            raise ValueError(f"{label}: negative footprint {v}")
    base = values[baseline]
    rows = []
    for label, v in entries:
        if base == 0:
            ratio = 1.0 if v == 0 else None
        else:
            ratio = v / base
        rows.append(ComparisonRow(label, v, ratio))
    return ComparisonTable(baseline, tuple(rows))


def format_sig(x: float, digits: int = 3) -> str:
    """Render ``x`` to ``digits`` significant figures."""
    if x == 0 or not math.isfinite(x):
        return str(x) if x != 0 else "0"
    return f"{x:.{digits}g}" if abs(x) < 10**digits else f"{x:.0f}"


# Instance profiles (power, PUE, grid intensity, amortized manufacturing).
APP = InfrastructureProfile("app", 5.3, 1.2, 228, 1.2, is_remote=False)
GPT_45_PREVIEW = InfrastructureProfile("gpt-4.5-preview", 1301, 1.12, 353, 0.0, is_remote=True)
O4_MINI = InfrastructureProfile("o4-mini", 991, 1.12, 353, 0.0, is_remote=True)
GPT_41_NANO = InfrastructureProfile("gpt-4.1-nano", 377, 1.12, 353, 0.0, is_remote=True)
GENAI = InfrastructureProfile("genai", 1301, 1.14, 385, 0.0, is_remote=True)

DEFAULT_PROFILES: dict[str, InfrastructureProfile] = {
    p.name: p for p in (APP, GPT_45_PREVIEW, O4_MINI, GPT_41_NANO, GENAI)
}

# Appliance wattages are not published. The fan is sized so the app instance
# over 3 h is ~12% of the fan's footprint on the same grid; the heater is a
# typical 2 kW unit.
FAN = InfrastructureProfile("electric-fan", 97.0, 1.0, 228, 0.0)
HEATER = InfrastructureProfile("electric-heater", 2000.0, 1.0, 228, 0.0)
DEFAULT_APPLIANCES: dict[str, InfrastructureProfile] = {FAN.name: FAN, HEATER.name: HEATER}


@dataclass(frozen=True)
class TransportBaseline:
    name: str
    distance_km: float
    emission_per_km: float

    @property
    def grams(self) -> float:
        return transport_baseline(self.distance_km, self.emission_per_km)


COACH = TransportBaseline("coach", COACH_DISTANCE_KM, COACH_EMISSION_G_PER_KM)


@dataclass
class ProfileRegistry:
    """Profiles plus the sustained-use comparison baselines."""

    profiles: dict[str, InfrastructureProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    appliances: dict[str, InfrastructureProfile] = field(default_factory=lambda: dict(DEFAULT_APPLIANCES))
    transport: dict[str, TransportBaseline] = field(default_factory=lambda: {COACH.name: COACH})

    def get(self, name: str) -> InfrastructureProfile:
        try:
            return self.profiles[name]
        except KeyError:
            known = ", ".join(sorted(self.profiles))
            raise UnknownProfileError(f"unknown profile {name!r} (known: {known})") from None

    def to_dict(self) -> dict:
        return {
            "profiles": [asdict(p) for p in self.profiles.values()],
            "appliances": [asdict(p) for p in self.appliances.values()],
            "transport": [asdict(t) for t in self.transport.values()],
        }

    @classmethod
    def from_dict(cls, data: dict, *, merge_defaults: bool = True) -> "ProfileRegistry":
        reg = cls() if merge_defaults else cls(profiles={}, appliances={}, transport={})
        try:
            for p in data.get("profiles", []) or []:
                prof = InfrastructureProfile(**p)
                reg.profiles[prof.name] = prof
            for p in data.get("appliances", []) or []:
                prof = InfrastructureProfile(**p)
                reg.appliances[prof.name] = prof
            for t in data.get("transport", []) or []:
                tb = TransportBaseline(**t)
                reg.transport[tb.name] = tb
        except TypeError as exc:
            raise ConfigError(f"bad profile entry: {exc}") from exc
        return reg

    @classmethod
    def load(cls, path: str | Path, *, merge_defaults: bool = True) -> "ProfileRegistry":
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(data, merge_defaults=merge_defaults)


def sustained_comparison(
    registry: ProfileRegistry,
    profile_names: Iterable[str],
    hours: float = SUSTAINED_HOURS,
    baseline: str = COACH.name,
) -> ComparisonTable:
    """Footprints of running each profile for ``hours`` next to appliance and
    transport baselines, as ratios to ``baseline``."""
    entries: list[tuple[str, float]] = []
    for name in profile_names:
        entries.append((name, sustained_footprint(registry.get(name), hours)))
    for name, prof in sorted(registry.appliances.items()):
        entries.append((name, sustained_footprint(prof, hours)))
    for name, tb in sorted(registry.transport.items()):
        entries.append((name, tb.grams))
    return compare_footprints(entries, baseline)
