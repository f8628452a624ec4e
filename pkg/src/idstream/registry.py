"""Global entity registry: extraction, persistent IDs, alias and attribute merging."""

from __future__ import annotations

import copy
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import oracles as _oracles
from .oracles import DEFAULT_DEADLINE, Oracle, OracleRequest

logger = logging.getLogger(__name__)

NOVELTY_MARKERS = frozenset({"another", "other", "new", "different", "second", "third"})
ARTICLES = frozenset({"a", "an", "the"})

DEFAULT_LEXICON = (
    "man", "woman", "boy", "girl", "person", "protagonist",
    "men", "women", "boys", "girls", "people",
    "child", "kid", "lady", "gentleman", "guy", "teenager", "character",
)

# words that end a noun phrase when scanning left from a lexicon hit
_PHRASE_STOPS = ARTICLES | {
    "and", "or", "but", "with", "to", "of", "in", "on", "at", "by", "from", "for",
    "into", "onto", "near", "beside", "behind", "while", "as", "then", "when",
    "this", "that", "these", "those", "his", "her", "their", "its", "some",
    "is", "are", "was", "were",
}
_MAX_MODIFIERS = 3

_WORD = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")
_CLAUSE_SPLIT = re.compile(r"[.;:!?,()\n]")


def _dedupe(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for item in items:
        item = item.strip()
        key = item.lower()
        if item and key not in seen:
            seen.add(key)
            out.append(item)
    return out


def normalize_name(name: str) -> str:
    """Lowercase, drop articles, collapse whitespace."""
    words = [w for w in _WORD.findall(name.lower()) if w not in ARTICLES]
    return " ".join(words)


@dataclass
class EntityDescriptor:
    name: str
    attributes: list[str] = field(default_factory=list)
    surface_text: str = ""

    def __post_init__(self):
        self.name = self.name.strip()
        if not self.name:
            raise ValueError("entity name is empty")
        self.attributes = _dedupe(self.attributes)
        if not self.surface_text:
            self.surface_text = self.name


@dataclass
class RegistryEntry:
    global_id: int
    canonical_name: str
    aliases: list[str] = field(default_factory=list)
    attributes: list[str] = field(default_factory=list)
    instances: list[tuple[int, EntityDescriptor]] = field(default_factory=list)

    def add_instance(self, prompt_index: int, descriptor: EntityDescriptor) -> None:
        if descriptor.name.lower() not in {a.lower() for a in self.aliases}:
            self.aliases.append(descriptor.name)
        self.attributes = _dedupe(self.attributes + descriptor.attributes)
        self.instances.append((prompt_index, descriptor))
        self.instances.sort(key=lambda pair: pair[0])

    def describe(self) -> str:
        line = f"ID {self.global_id}: {'/'.join(self.aliases)}"
        return f"{line}: {', '.join(self.attributes)}" if self.attributes else line

    def to_dict(self) -> dict:
        return {
            "global_id": self.global_id,
            "canonical_name": self.canonical_name,
            "aliases": list(self.aliases),
            "attributes": list(self.attributes),
            "instances": [
                {
                    "prompt_index": idx,
                    "name": d.name,
                    "attributes": list(d.attributes),
                    "surface_text": d.surface_text,
                }
                for idx, d in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegistryEntry":
        entry = cls(
            global_id=int(data["global_id"]),
            canonical_name=data["canonical_name"],
            aliases=list(data["aliases"]),
            attributes=list(data["attributes"]),
        )
        entry.instances = [
            (
                int(inst["prompt_index"]),
                EntityDescriptor(inst["name"], list(inst["attributes"]), inst.get("surface_text", "")),
            )
            for inst in data.get("instances", [])
        ]
        return entry


@dataclass
class GlobalRegistry:
    """ID -> entry map. IDs start at 1 and are never reused or deleted."""

    entries: dict[int, RegistryEntry] = field(default_factory=dict)
    next_id: int = 1

    def __contains__(self, gid: object) -> bool:
        return gid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, gid: int) -> RegistryEntry:
        return self.entries[gid]

    def allocate(self, descriptor: EntityDescriptor, prompt_index: int) -> int:
        gid = self.next_id
        self.next_id += 1
        entry = RegistryEntry(gid, descriptor.name)
        entry.add_instance(prompt_index, descriptor)
        self.entries[gid] = entry
        return gid

    def reuse(self, gid: int, descriptor: EntityDescriptor, prompt_index: int) -> None:
        self.entries[gid].add_instance(prompt_index, descriptor)

    def snapshot(self) -> "GlobalRegistry":
        return copy.deepcopy(self)

    def names_for(self, ids: Iterable[int]) -> list[str]:
        names: list[str] = []
        for gid in ids:
            if gid in self.entries:
                names.extend(self.entries[gid].aliases)
        return _dedupe(names)

    def attributes_for(self, ids: Iterable[int]) -> list[str]:
        attrs: list[str] = []
        for gid in ids:
            if gid in self.entries:
                attrs.extend(self.entries[gid].attributes)
        return _dedupe(attrs)

    def to_dict(self) -> dict:
        return {
            "next_id": self.next_id,
            "entries": {str(gid): e.to_dict() for gid, e in sorted(self.entries.items())},
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), indent=2, **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "GlobalRegistry":
        entries = {int(k): RegistryEntry.from_dict(v) for k, v in data.get("entries", {}).items()}
        next_id = int(data.get("next_id", max(entries, default=0) + 1))
        if entries and next_id <= max(entries):
            raise ValueError("next_id must exceed every assigned id")
        return cls(entries, next_id)


# -- extraction ---------------------------------------------------------------

def has_novelty_marker(surface_text: str) -> bool:
    return any(w in NOVELTY_MARKERS for w in _WORD.findall(surface_text.lower()))


def heuristic_extract(prompt_text: str, lexicon: Iterable[str] = DEFAULT_LEXICON) -> list[EntityDescriptor]:
    """Keyword-lexicon noun phrases, e.g. ``"A young man reads"`` -> ``young man``.

    Modifiers are collected leftwards from the keyword until an article,
    function word or clause boundary, at most three words.
    """
    lex = {w.lower() for w in lexicon}
    found: list[EntityDescriptor] = []
    for clause in _CLAUSE_SPLIT.split(prompt_text.lower()):
        words = _WORD.findall(clause)
        for i, word in enumerate(words):
            if word not in lex:
                continue
            # the keyword itself may be a modifier ("woman doctor")
            if i + 1 < len(words) and words[i + 1] in lex:
                continue
            j = i
            while j > 0 and i - j < _MAX_MODIFIERS and words[j - 1] not in _PHRASE_STOPS and words[j - 1] not in lex:
                j -= 1
            surface_start = j - 1 if j > 0 and words[j - 1] in ARTICLES else j
            name = " ".join(words[j:i + 1])
            found.append(EntityDescriptor(name, [], " ".join(words[surface_start:i + 1])))
    return found


def _descriptors_from_payload(payload: dict) -> list[EntityDescriptor]:
    out = []
    for item in payload.get("entities", []):
        try:
            out.append(EntityDescriptor(item["entity"], list(item.get("attrs", [])), item["entity"]))
        except (KeyError, TypeError, ValueError):
            continue
    return out


def parse_entities(
    prompt_text: str,
    oracle: Optional[Oracle] = None,
    deadline: float = DEFAULT_DEADLINE,
    lexicon: Iterable[str] = DEFAULT_LEXICON,
) -> list[EntityDescriptor]:
    """Entity descriptors for one prompt; any oracle failure falls back to the lexicon."""
    if not prompt_text or not prompt_text.strip():
        raise ValueError("prompt_text is empty")
    if oracle is not None:
        request = OracleRequest("extract", _oracles.render_extract_prompt(prompt_text), deadline)
        text = _oracles.call_oracle(oracle, request)
        if text is not None:
            payload = _oracles.try_parse(text, "extract")
            if payload is not None:
                return _descriptors_from_payload(payload)
            logger.warning("extraction response unparseable, using heuristic")
    return heuristic_extract(prompt_text, lexicon)


# -- matching -----------------------------------------------------------------

def heuristic_match(descriptor: EntityDescriptor, registry: GlobalRegistry) -> Optional[int]:
    target = normalize_name(descriptor.name)
    if not target:
        return None
    for gid, entry in sorted(registry.entries.items()):
        if any(normalize_name(alias) == target for alias in entry.aliases):
            return gid
    return None


def match_or_create(
    descriptor: EntityDescriptor,
    registry: GlobalRegistry,
    prompt_index: int,
    oracle: Optional[Oracle] = None,
    deadline: float = DEFAULT_DEADLINE,
) -> tuple[int, bool]:
    """Resolve ``descriptor`` to a global ID, allocating when unsure.

    Without an oracle the exact normalized-name heuristic is used instead.
    """
    if prompt_index < 1:
        raise ValueError("prompt_index must be >= 1")
    if prompt_index == 1 or has_novelty_marker(descriptor.surface_text) or not registry.entries:
        return registry.allocate(descriptor, prompt_index), True

    if oracle is None:
        matched = heuristic_match(descriptor, registry)
    else:
        lines = [entry.describe() for _, entry in sorted(registry.entries.items())]
        prompt = _oracles.render_match_prompt(descriptor.name, descriptor.attributes, lines)
        text = _oracles.call_oracle(oracle, OracleRequest("match", prompt, deadline))
        matched = _oracles.parse_oracle_json(text, "match")["matched_id"] if text is not None else None

    if matched is not None and matched in registry:
        registry.reuse(matched, descriptor, prompt_index)
        return matched, False
    return registry.allocate(descriptor, prompt_index), True


def apply_corrections(registry: GlobalRegistry, corrections: Optional[dict]) -> int:
    """Replace attribute lists of existing IDs; returns how many entries changed."""
    if not corrections:
        return 0
    changed = 0
    for key, attrs in corrections.items():
        try:
            gid = int(key)
        except (TypeError, ValueError):
            continue
        if gid not in registry or not isinstance(attrs, list):
            continue
        new_attrs = _dedupe(a for a in attrs if isinstance(a, str))
        entry = registry.entries[gid]
        if new_attrs != entry.attributes:
            entry.attributes = new_attrs
            changed += 1
    return changed


def assign_ids(
    descriptors: list[EntityDescriptor],
    registry: GlobalRegistry,
    prompt_index: int,
    oracle: Optional[Oracle] = None,
    deadline: float = DEFAULT_DEADLINE,
) -> list[int]:
    """Active IDs for one prompt, in descriptor order without duplicates."""
    ids: list[int] = []
    for d in descriptors:
        gid, _ = match_or_create(d, registry, prompt_index, oracle, deadline)
        if gid not in ids:
            ids.append(gid)
    return ids
