"""Engine configuration, loaded from a JSON file and validated up front.

Top-level keys (all optional; defaults in brackets):

``snowflake``
    ``epoch_ms``, ``timestamp_bits`` [41], ``datacenter_bits`` [5],
    ``worker_bits`` [5], ``sequence_bits`` [12], ``datacenter_id`` [0],
    ``worker_id`` [0].
``bloom``
    ``users_n`` [100000], ``users_p`` [0.01], ``routes_n`` [10000],
    ``routes_p`` [1e-6].
``shards``
    ``db_count`` [2], ``tables_per_db`` [4]; powers of two.
``flow_rules``
    list of objects with the :class:`~railsale.flowcontrol.FlowRule` fields;
    rules for ``query``, ``purchase``, ``pay``, ``cancel``, ``login``,
    ``register`` and ``lookup`` are created with defaults when absent.
``access``
    ``whitelist``, ``blacklist``, ``open_paths`` (lists of strings).
``ttl``
    ``route_cache_ms`` [60000], ``session_ms`` [3600000],
    ``dedup_ms`` [900000].
``payment_deadline_ms`` [600000], ``close_interval_ms`` [1000]
``field_key``
    hex AES key (16, 24 or 32 bytes) for encrypted columns.
``fares``
    cents per leg by seat type.
``listen``
    ``host`` ["127.0.0.1"], ``port`` [8080], ``workers`` [256].
``persistence_path``
    change-log file; the store replays it at startup when set.
``cdc``
    ``appliers`` [2], ``visibility_timeout_ms`` [1000].
``password_iterations`` [2000]
``trains``
    train plans to load at startup: ``train_id``, ``service_date``,
    ``stations``, ``carriages`` (list of ``[carriage_no, seat_type, seat_count]``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .flowcontrol import FlowRule
from .idgen import DEFAULT_EPOCH_MS, SnowflakeLayout, validate_layout
from .inventory import Carriage, TrainPlan
from .orders import DEFAULT_FARES
from .shardrouter import ShardTopology

DEFAULT_RESOURCES = ("query", "purchase", "pay", "cancel", "login", "register", "lookup")
DEV_FIELD_KEY = "000102030405060708090a0b0c0d0e0f"


@dataclass
class SnowflakeConfig:
    epoch_ms: int = DEFAULT_EPOCH_MS
    timestamp_bits: int = 41
    datacenter_bits: int = 5
    worker_bits: int = 5
    sequence_bits: int = 12
    datacenter_id: int = 0
    worker_id: int = 0

    @property
    def layout(self) -> SnowflakeLayout:
        return SnowflakeLayout(
            self.epoch_ms, self.timestamp_bits, self.datacenter_bits, self.worker_bits, self.sequence_bits
        )


@dataclass
class BloomConfig:
    users_n: int = 100_000
    users_p: float = 0.01
    routes_n: int = 10_000
    routes_p: float = 1e-6


@dataclass
class TtlConfig:
    route_cache_ms: int = 60_000
    session_ms: int = 3_600_000
    dedup_ms: int = 900_000


@dataclass
class ListenConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    workers: int = 256


@dataclass
class CdcConfig:
    appliers: int = 2
    visibility_timeout_ms: int = 1_000


@dataclass
class AccessConfig:
    whitelist: list[str] = field(default_factory=list)
    blacklist: list[str] = field(default_factory=list)
    open_paths: list[str] = field(default_factory=lambda: ["/health", "/metrics", "/pay/callback"])


@dataclass
class EngineConfig:
    snowflake: SnowflakeConfig = field(default_factory=SnowflakeConfig)
    bloom: BloomConfig = field(default_factory=BloomConfig)
    shards: ShardTopology = field(default_factory=lambda: ShardTopology(2, 4))
    flow_rules: list[FlowRule] = field(default_factory=list)
    access: AccessConfig = field(default_factory=AccessConfig)
    ttl: TtlConfig = field(default_factory=TtlConfig)
    payment_deadline_ms: int = 600_000
    close_interval_ms: int = 1_000
    field_key: str = DEV_FIELD_KEY
    fares: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_FARES))
    listen: ListenConfig = field(default_factory=ListenConfig)
    persistence_path: str | None = None
    cdc: CdcConfig = field(default_factory=CdcConfig)
    password_iterations: int = 2_000
    trains: list[TrainPlan] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        validate_layout(self.snowflake.layout)
        layout = self.snowflake.layout
        if not 0 <= self.snowflake.datacenter_id <= layout.max_datacenter_id:
            raise ConfigError("snowflake.datacenter_id out of range")
        if not 0 <= self.snowflake.worker_id <= layout.max_worker_id:
            raise ConfigError("snowflake.worker_id out of range")
        for n, p, name in (
            (self.bloom.users_n, self.bloom.users_p, "users"),
            (self.bloom.routes_n, self.bloom.routes_p, "routes"),
        ):
            if n < 1 or not 0 < p < 1:
                raise ConfigError(f"bloom.{name}: need n >= 1 and 0 < p < 1")
        try:
            key = bytes.fromhex(self.field_key)
        except ValueError:
            raise ConfigError("field_key must be hex") from None
        if len(key) not in (16, 24, 32):
            raise ConfigError("field_key must be 16, 24 or 32 bytes")
        if self.payment_deadline_ms <= 0 or self.close_interval_ms <= 0:
            raise ConfigError("payment_deadline_ms and close_interval_ms must be positive")
        if self.listen.workers < 1 or self.cdc.appliers < 1:
            raise ConfigError("listen.workers and cdc.appliers must be >= 1")
        have = {r.resource for r in self.flow_rules}
        if len(have) != len(self.flow_rules):
            raise ConfigError("duplicate flow rule resource")
        self.flow_rules += [FlowRule(r) for r in DEFAULT_RESOURCES if r not in have]

    @property
    def field_key_bytes(self) -> bytes:
        return bytes.fromhex(self.field_key)

    def rule(self, resource: str) -> FlowRule:
        return next(r for r in self.flow_rules if r.resource == resource)

    @classmethod
    def from_dict(cls, raw: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs: dict = {}
            simple = {
                "snowflake": SnowflakeConfig,
                "bloom": BloomConfig,
                "ttl": TtlConfig,
                "listen": ListenConfig,
                "cdc": CdcConfig,
                "access": AccessConfig,
                "shards": ShardTopology,
            }
            for name, value in raw.items():
                if name in simple:
                    kwargs[name] = simple[name](**value)
                elif name == "flow_rules":
                    kwargs[name] = [FlowRule(**r) for r in value]
                elif name == "trains":
                    kwargs[name] = [train_plan_from_dict(t) for t in value]
                else:
                    kwargs[name] = value
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except (ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"bad config: {exc!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["trains"] = [train_plan_to_dict(t) for t in self.trains]
        return out


def train_plan_from_dict(raw: dict) -> TrainPlan:
    return TrainPlan(
        train_id=raw["train_id"],
        service_date=raw["service_date"],
        stations=tuple(raw["stations"]),
        carriages=tuple(Carriage(int(c[0]), str(c[1]), int(c[2])) for c in raw["carriages"]),
    )


def train_plan_to_dict(plan: TrainPlan) -> dict:
    return {
        "train_id": plan.train_id,
        "service_date": plan.service_date,
        "stations": list(plan.stations),
        "carriages": [[c.carriage_no, c.seat_type, c.seat_count] for c in plan.carriages],
    }
