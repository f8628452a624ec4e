"""JSON configuration: load, validate (unknown keys rejected) and build session objects."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .memory import ScoringConfig
from .oracles import DEFAULT_DEADLINE, HttpOracle, MockScript, Oracles, mock_oracle
from .pipeline import CacheLayout, PromptSegment, SessionConfig, TimingModel
from .synth import SyntheticWorld
from .transition import APTConfig

ENV_ENDPOINT = "IDSTREAM_ORACLE_ENDPOINT"
ENV_ROLE_ENDPOINT = "IDSTREAM_{role}_ENDPOINT"

DEFAULT_SCHEDULE = (
    ("A woman in a red coat walks through a quiet park at dawn.", ["woman"]),
    ("The woman sits on a wooden bench and opens a letter.", ["woman"]),
    ("A man with a grey beard rides a bicycle along the river.", ["man"]),
    ("The man stops at a small cafe and orders coffee.", ["man"]),
    ("The man reads a newspaper while rain starts to fall.", ["man"]),
    ("The woman enters the cafe and waves at the man.", ["woman", "man"]),
)


class ConfigError(ValueError):
    pass


@dataclass
class OracleSlot:
    endpoint: Optional[str] = None
    mock_script: Optional[str] = None


@dataclass
class OracleSettings:
    deadline: float = DEFAULT_DEADLINE
    endpoint: Optional[str] = None
    mock_script: Optional[str] = None
    extract: OracleSlot = field(default_factory=OracleSlot)
    match: OracleSlot = field(default_factory=OracleSlot)
    verify: OracleSlot = field(default_factory=OracleSlot)


@dataclass
class SessionFlags:
    transition_mode: str = "apt"
    memory_enabled: bool = True
    verification_enabled: bool = True
    retrieval_mode: str = "per_prompt"
    worker: str = "virtual"
    clock: str = "virtual"
    lexicon: Optional[list] = None


@dataclass
class AppConfig:
    seed: int = 0
    layout: CacheLayout = field(default_factory=CacheLayout)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    apt: APTConfig = field(default_factory=APTConfig)
    world: dict = field(default_factory=dict)
    session: SessionFlags = field(default_factory=SessionFlags)
    timing: TimingModel = field(default_factory=TimingModel)
    oracles: OracleSettings = field(default_factory=OracleSettings)
    schedule: list = field(default_factory=lambda: default_schedule())

    def session_config(self) -> SessionConfig:
        flags = dataclasses.asdict(self.session)
        lexicon = flags.pop("lexicon")
        kwargs = dict(layout=self.layout, scoring=self.scoring, apt=self.apt, timing=self.timing, **flags)
        if lexicon is not None:
            kwargs["lexicon"] = tuple(lexicon)
        return SessionConfig(**kwargs)

    def make_world(self, seed: Optional[int] = None) -> SyntheticWorld:
        return SyntheticWorld(seed=self.seed if seed is None else seed, **self.world)


def default_schedule(chunks: int = 5) -> list[PromptSegment]:
    return [PromptSegment(p, chunks, list(e)) for p, e in DEFAULT_SCHEDULE]


_WORLD_KEYS = {f.name for f in dataclasses.fields(SyntheticWorld)} - {"seed", "entity_vectors"}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    if cls is ScoringConfig and kwargs.get("layer_weights") is not None:
        kwargs["layer_weights"] = {int(k): float(v) for k, v in kwargs["layer_weights"].items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (AppConfig, "layout"): CacheLayout,
    (AppConfig, "scoring"): ScoringConfig,
    (AppConfig, "apt"): APTConfig,
    (AppConfig, "session"): SessionFlags,
    (AppConfig, "timing"): TimingModel,
    (AppConfig, "oracles"): OracleSettings,
    (OracleSettings, "extract"): OracleSlot,
    (OracleSettings, "match"): OracleSlot,
    (OracleSettings, "verify"): OracleSlot,
}


def parse_config(data: dict) -> AppConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    data = dict(data)
    schedule = data.pop("schedule", None)
    world = data.pop("world", {})
    cfg = _build(AppConfig, data, "config")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("config.seed: expected an integer")
    if not isinstance(world, dict) or set(world) - _WORLD_KEYS:
        raise ConfigError(f"config.world: unknown keys {sorted(set(world) - _WORLD_KEYS) if isinstance(world, dict) else world}")
    cfg.world = dict(world)
    try:
        cfg.make_world()
        cfg.session_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    if schedule is not None:
        cfg.schedule = parse_schedule(schedule)
    return cfg


def parse_schedule(items: Any) -> list[PromptSegment]:
    if not isinstance(items, list) or not items:
        raise ConfigError("config.schedule: expected a non-empty list")
    out = []
    for i, item in enumerate(items):
        where = f"config.schedule[{i}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{where}: expected an object")
        unknown = sorted(set(item) - {"prompt", "chunks", "entities"})
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        try:
            out.append(PromptSegment(item.get("prompt", ""), item.get("chunks", 5), item.get("entities")))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return out


def load_config(path: Optional[str | Path]) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def config_to_dict(cfg: AppConfig) -> dict:
    out = {
        "seed": cfg.seed,
        "layout": dataclasses.asdict(cfg.layout),
        "scoring": dataclasses.asdict(cfg.scoring),
        "apt": dataclasses.asdict(cfg.apt),
        "world": dict(cfg.world),
        "session": dataclasses.asdict(cfg.session),
        "timing": dataclasses.asdict(cfg.timing),
        "oracles": dataclasses.asdict(cfg.oracles),
        "schedule": [{"prompt": s.prompt, "chunks": s.chunks, "entities": s.entities} for s in cfg.schedule],
    }
    if out["scoring"]["layer_weights"] is not None:
        out["scoring"]["layer_weights"] = {str(k): v for k, v in out["scoring"]["layer_weights"].items()}
    return out


def build_oracles(settings: OracleSettings, env: Optional[dict] = None) -> Oracles:
    """Resolve each role to an HTTP client, a scripted mock, or nothing.

    Precedence: role env var, global env var, role config, global config.
    """
    env = os.environ if env is None else env
    cache: dict[str, Any] = {}

    def from_script(path: str):
        if path not in cache:
            try:
                cache[path] = mock_oracle(MockScript.load(path))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"mock script {path}: {exc}") from exc
        return cache[path]

    slots = {}
    for role in ("extract", "match", "verify"):
        slot = getattr(settings, role)
        endpoint = env.get(ENV_ROLE_ENDPOINT.format(role=role.upper())) or env.get(ENV_ENDPOINT)
        if endpoint:
            slots[role] = HttpOracle(endpoint)
        elif slot.endpoint:
            slots[role] = HttpOracle(slot.endpoint)
        elif slot.mock_script:
            slots[role] = from_script(slot.mock_script)
        elif settings.endpoint:
            slots[role] = HttpOracle(settings.endpoint)
        elif settings.mock_script:
            slots[role] = from_script(settings.mock_script)
        else:
            slots[role] = None
    return Oracles(slots["extract"], slots["match"], slots["verify"], settings.deadline)
