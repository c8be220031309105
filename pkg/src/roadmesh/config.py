"""Tunable defaults for nodes, protocols and the simulated channel."""

from dataclasses import dataclass, fields, replace
from datetime import datetime, timedelta, timezone
from typing import Any, Dict, Mapping

from .exceptions import ConfigError

ROAD_CLASSES = ("urban", "rural", "highway")


@dataclass(frozen=True)
class SimConfig:
    """Every protocol and detector constant, overridable from ``[config]``."""

    network_name: str = "roadmesh"
    epoch: datetime = datetime(2012, 4, 13, 10, 0, 0, tzinfo=timezone.utc)

    # beacons and pseudonyms
    beacon_min: float = 3.0
    beacon_max: float = 7.0
    rotation_period: int = 10

    # answer / retransmission
    answer_timeout: float = 2.0
    max_resends: int = 3
    retry_cooldown: float = 10.0

    # zero-knowledge identification
    zkp_rounds: int = 2
    p_aug: float = 0.5

    # events
    parking_validity: float = 600.0
    jam_validity: float = 900.0
    publicity_validity: float = 600.0
    jam_window: float = 60.0
    jam_fraction: float = 0.25
    speed_urban: float = 50.0
    speed_rural: float = 90.0
    speed_highway: float = 120.0
    dedup_radius: float = 5.0
    sample_interval: float = 1.0
    jam_detection: bool = True

    # aggregation
    aggregation_radius: float = 100.0
    threshold: int = 2

    # node
    battery_threshold: float = 10.0
    debug_reparse: bool = True

    # K1 as hex; empty means "derive from the run seed"
    k1: str = ""

    def expected_speed(self, road_class: str) -> float:
        """Expected speed in km/h for a road class."""
        speeds = {
            "urban": self.speed_urban,
            "rural": self.speed_rural,
            "highway": self.speed_highway,
        }
        if road_class not in speeds:
            raise ConfigError(f"unknown road class: {road_class}")
        return speeds[road_class]

    def wall_clock(self, now: float) -> datetime:
        """UTC timestamp, whole seconds, for simulated time ``now``."""
        return self.epoch + timedelta(seconds=int(now))

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, str]) -> "SimConfig":
        """Build a config from ``key = value`` strings, coercing types."""
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        values: Dict[str, Any] = {}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, raw, getattr(defaults, key))
        config = replace(defaults, **values)
        config.validate()
        return config

    def validate(self) -> None:
        if not 0 < self.beacon_min <= self.beacon_max:
            raise ConfigError("beacon interval must satisfy 0 < beacon_min <= beacon_max")
        if self.rotation_period < 1:
            raise ConfigError("rotation_period must be >= 1")
        if self.zkp_rounds < 1:
            raise ConfigError("zkp_rounds must be >= 1")
        if not 0.0 <= self.p_aug <= 1.0:
            raise ConfigError("p_aug must be within [0, 1]")
        if self.threshold < 1:
            raise ConfigError("threshold must be >= 1")
        if self.answer_timeout <= 0:
            raise ConfigError("answer_timeout must be positive")
        if self.max_resends < 0:
            raise ConfigError("max_resends must be >= 0")
        for name in ("parking_validity", "jam_validity", "publicity_validity",
                     "jam_window", "sample_interval", "dedup_radius", "aggregation_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.jam_fraction < 1.0:
            raise ConfigError("jam_fraction must be within (0, 1)")
        if not self.network_name or any(ch.isspace() for ch in self.network_name):
            raise ConfigError("network_name must be one word")
        if self.k1:
            try:
                k1 = bytes.fromhex(self.k1)
            except ValueError:
                raise ConfigError(f"k1 is not hex: {self.k1!r}")
            if len(k1) not in (16, 24, 32):
                raise ConfigError("k1 must be 16, 24 or 32 bytes of hex")


@dataclass(frozen=True)
class ChannelConfig:
    """Broadcast-domain channel parameters (``[channel]`` section)."""

    loss: float = 0.0
    latency: float = 0.010
    duplicate: float = 0.0
    jitter: float = 0.0

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, str]) -> "ChannelConfig":
        known = {f.name for f in fields(cls)}
        values: Dict[str, float] = {}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown channel key: {key}")
            try:
                values[key] = float(raw)
            except ValueError:
                raise ConfigError(f"channel {key} must be a number, got {raw!r}")
        channel = cls(**values)
        for name in ("loss", "duplicate"):
            value = getattr(channel, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"channel {name} must be within [0, 1]")
        if channel.latency < 0 or channel.jitter < 0:
            raise ConfigError("channel latency and jitter must be non-negative")
        return channel


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, datetime):
            return datetime.strptime(raw, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}")
    return raw
