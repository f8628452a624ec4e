"""Frame archive, entity-token weighting, frame scoring and identity-aware retrieval."""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._binio import read_arrays, write_arrays

EPS_NORM = 1e-8

MATCH_WEIGHT = 2.5
HEAD_WEIGHT = 0.7
TAIL_WEIGHT = 0.5
FALLBACK_WEIGHT = 1.5
SPAN_EXPANSION = 0.02


@dataclass(eq=False)
class KeyBlock:
    """Per-layer keys/values shaped ``(tokens, heads, head_dim)``."""

    layer_id: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.ndim != 3:
            raise ValueError(f"keys must be (tokens, heads, dim), got {self.keys.shape}")
        if self.keys.shape != self.values.shape:
            raise ValueError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.keys.shape[1] < 1 or self.keys.shape[2] < 1:
            raise ValueError("heads and head_dim must be >= 1")
        if not (np.isfinite(self.keys).all() and np.isfinite(self.values).all()):
            raise ValueError("non-finite entries in key block")

    @property
    def tokens(self) -> int:
        return self.keys.shape[0]

    @property
    def heads(self) -> int:
        return self.keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]


@dataclass
class TokenWeightVector:
    raw: np.ndarray
    normalized: np.ndarray


@dataclass
class ScoringConfig:
    lam: float = 0.3
    layer_weights: Optional[dict[int, float]] = None
    epsilon_norm: float = EPS_NORM

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.layer_weights is not None:
            total = sum(self.layer_weights.values())
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ValueError(f"layer weights sum to {total}, expected 1")


# -- token weights ------------------------------------------------------------

def _char_spans(text: str, phrase: str) -> list[tuple[int, int]]:
    phrase = phrase.strip().lower()
    if not phrase:
        return []
    return [(m.start(), m.end()) for m in re.finditer(re.escape(phrase), text)]


def span_to_tokens(char_start: int, char_end: int, text_len: int, token_count: int) -> tuple[int, int]:
    """Character span -> half-open token range by length ratio (floor start, ceil end)."""
    start = (char_start * token_count) // text_len
    end = -((-char_end * token_count) // text_len)
    return start, max(end, start + 1)


def build_token_weights(
    prompt_text: str,
    entity_names: Sequence[str],
    attributes: Sequence[str],
    token_count: int,
) -> TokenWeightVector:
    S = int(token_count)
    if S < 1:
        raise ValueError("token_count must be >= 1")
    raw = np.ones(S)
    names = [n for n in entity_names if n and n.strip()]
    text = prompt_text.lower()
    if names and text:
        expand = int(SPAN_EXPANSION * S)
        matched = np.zeros(S, dtype=bool)
        for phrase in list(names) + [a for a in attributes if a and a.strip()]:
            for c0, c1 in _char_spans(text, phrase):
                t0, t1 = span_to_tokens(c0, c1, len(text), S)
                matched[max(0, t0 - expand):min(S, t1 + expand)] = True
        u = np.arange(S)
        if matched.any():
            raw[matched] = MATCH_WEIGHT
            raw[~matched & (u * 100 < 8 * S)] = HEAD_WEIGHT
            raw[~matched & ((u + 1) * 100 > 92 * S)] = TAIL_WEIGHT
        else:
            raw[(u * 100 >= 10 * S) & (u * 100 < 85 * S)] = FALLBACK_WEIGHT
    return TokenWeightVector(raw, raw / (raw.sum() + EPS_NORM))


# -- scoring ------------------------------------------------------------------

def _as_layers(blocks: KeyBlock | Sequence[KeyBlock]) -> dict[int, KeyBlock]:
    if isinstance(blocks, KeyBlock):
        return {blocks.layer_id: blocks}
    return {b.layer_id: b for b in blocks}


def entity_score(
    text_keys: KeyBlock | Sequence[KeyBlock],
    frame_keys: KeyBlock | Sequence[KeyBlock],
    weights: TokenWeightVector,
    config: Optional[ScoringConfig] = None,
) -> float:
    """Weighted text-key anchor vs. mean frame key, averaged over heads, scaled by 1/sqrt(d)."""
    config = config or ScoringConfig()
    text_layers = _as_layers(text_keys)
    frame_layers = _as_layers(frame_keys)
    if config.layer_weights is not None:
        betas = dict(config.layer_weights)
    else:
        shared = sorted(set(text_layers) & set(frame_layers))
        if not shared:
            raise ValueError("text and frame keys share no layer")
        betas = {lid: 1.0 / len(shared) for lid in shared}
    w = np.asarray(weights.normalized, dtype=np.float64)
    total = 0.0
    for lid, beta in betas.items():
        if lid not in text_layers or lid not in frame_layers:
            raise ValueError(f"layer {lid} missing from text or frame keys")
        kt = text_layers[lid].keys
        kv = frame_layers[lid].keys
        if kt.shape[1:] != kv.shape[1:]:
            raise ValueError(f"layer {lid}: head/dim mismatch {kt.shape[1:]} vs {kv.shape[1:]}")
        if kt.shape[0] != w.shape[0]:
            raise ValueError(f"layer {lid}: {kt.shape[0]} text tokens but {w.shape[0]} weights")
        anchor = np.einsum("u,uhd->hd", w, kt)
        frame_mean = kv.mean(axis=0)
        per_head = (anchor * frame_mean).sum(axis=1) / math.sqrt(kt.shape[2])
        total += beta * per_head.mean()
    return float(total)


def normalize_entity_scores(scores: Sequence[float]) -> list[float]:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("scores must be non-empty")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return [0.5] * arr.size
    return list((arr - lo) / (hi - lo))


def fuse_score(entity_norm: float, visual: float, lam: float) -> float:
    return (1.0 - lam) * entity_norm + lam * visual


def select_archive_frame(candidates: Sequence[tuple[object, float]]):
    if not candidates:
        raise ValueError("no candidate frames")
    best = 0
    for i, (_, score) in enumerate(candidates):
        if score > candidates[best][1]:
            best = i
    return candidates[best][0]


# -- archive ------------------------------------------------------------------

@dataclass(eq=False)
class ArchivedFrame:
    frame_id: int
    prompt_index: int
    chunk_index: int
    entity_ids: frozenset
    entity_score_raw: float
    entity_score_norm: float
    visual_score: float
    fused_score: float
    kv: list[KeyBlock] = field(default_factory=list)
    temporal_order: int = 0
    source: str = ""
    latent_index: int = 0

    def metadata(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "prompt_index": self.prompt_index,
            "chunk_index": self.chunk_index,
            "latent_index": self.latent_index,
            "source": self.source,
            "entity_ids": sorted(self.entity_ids),
            "entity_score_raw": self.entity_score_raw,
            "entity_score_norm": self.entity_score_norm,
            "visual_score": self.visual_score,
            "fused_score": self.fused_score,
            "temporal_order": self.temporal_order,
            "kv_shapes": [[b.layer_id, *b.keys.shape] for b in self.kv],
        }


@dataclass
class FrameArchive:
    """Append-only store of archived frames."""

    frames: list[ArchivedFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def append(self, frame: ArchivedFrame) -> None:
        if any(f.frame_id == frame.frame_id for f in self.frames):
            raise ValueError(f"duplicate frame_id {frame.frame_id}")
        if self.frames and frame.temporal_order <= self.frames[-1].temporal_order:
            raise ValueError("temporal_order must increase with archival order")
        self.frames.append(frame)

    def get(self, frame_id: int) -> ArchivedFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def metadata(self) -> list[dict]:
        return [f.metadata() for f in self.frames]

    def export(self, json_path: str | Path, sidecar_path: Optional[str | Path] = None) -> None:
        """JSON metadata plus a float32 sidecar holding every frame's keys and values."""
        json_path = Path(json_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else json_path.with_suffix(".kv.bin")
        arrays = []
        meta = []
        for f in self.frames:
            m = f.metadata()
            m["kv_index"] = []
            for b in f.kv:
                m["kv_index"].append({"layer_id": b.layer_id, "keys": len(arrays), "values": len(arrays) + 1})
                arrays.extend([b.keys, b.values])
            meta.append(m)
        write_arrays(sidecar_path, arrays)
        doc = {"sidecar": sidecar_path.name, "frames": meta}
        json_path.write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, json_path: str | Path, with_kv: bool = True) -> "FrameArchive":
        json_path = Path(json_path)
        doc = json.loads(json_path.read_text())
        arrays = None
        if with_kv and doc.get("sidecar"):
            sidecar = json_path.parent / doc["sidecar"]
            if sidecar.exists():
                arrays = read_arrays(sidecar)
        archive = cls()
        for m in doc.get("frames", []):
            kv = []
            if arrays is not None:
                kv = [KeyBlock(e["layer_id"], arrays[e["keys"]], arrays[e["values"]]) for e in m.get("kv_index", [])]
            archive.append(
                ArchivedFrame(
                    frame_id=int(m["frame_id"]),
                    prompt_index=int(m["prompt_index"]),
                    chunk_index=int(m["chunk_index"]),
                    entity_ids=frozenset(int(g) for g in m["entity_ids"]),
                    entity_score_raw=float(m["entity_score_raw"]),
                    entity_score_norm=float(m["entity_score_norm"]),
                    visual_score=float(m["visual_score"]),
                    fused_score=float(m["fused_score"]),
                    kv=kv,
                    temporal_order=int(m["temporal_order"]),
                    source=m.get("source", ""),
                    latent_index=int(m.get("latent_index", 0)),
                )
            )
        return archive


# -- retrieval ----------------------------------------------------------------

@dataclass
class ActiveMemory:
    frame_ids: list[int] = field(default_factory=list)
    assembled_kv: list[KeyBlock] = field(default_factory=list)
    covered_ids: frozenset = frozenset()
    uncovered_ids: frozenset = frozenset()
    cover_size: int = 0
    repaired: bool = False

    def __len__(self) -> int:
        return len(self.frame_ids)


def _greedy_key(frame: ArchivedFrame, uncovered: set) -> tuple:
    return (len(frame.entity_ids & uncovered), frame.entity_score_norm, frame.temporal_order)


def _exact_cover(frames: Sequence[ArchivedFrame], targets: frozenset, cap: int) -> Optional[list[ArchivedFrame]]:
    """Smallest cover of ``targets`` with at most ``cap`` frames, if one exists.

    Searches over distinct coverage masks (at most 2**|targets|), keeping the
    greedy-preferred frame for each mask, so the search stays small.
    """
    best_for_mask: dict[frozenset, ArchivedFrame] = {}
    for f in frames:
        mask = frozenset(f.entity_ids & targets)
        if not mask:
            continue
        cur = best_for_mask.get(mask)
        if cur is None or (f.entity_score_norm, f.temporal_order) > (cur.entity_score_norm, cur.temporal_order):
            best_for_mask[mask] = f
    masks = sorted(best_for_mask, key=lambda m: (-len(m), sorted(m)))
    for k in range(1, min(cap, len(masks)) + 1):
        for combo in itertools.combinations(masks, k):
            if frozenset().union(*combo) == targets:
                return [best_for_mask[m] for m in combo]
    return None


def greedy_retrieve(
    archive: FrameArchive | Sequence[ArchivedFrame],
    active_ids: Iterable[int],
    cap: int,
    with_kv: bool = True,
) -> ActiveMemory:
    """Pick few archived frames whose entity sets jointly cover ``active_ids``.

    Greedy max coverage (ties: entity score, then later frames). If greedy
    runs into ``cap`` while a cover of size <= ``cap`` exists, that cover is
    used instead. With two or more active IDs and at least two frames the
    result keeps two frames; spare budget goes to the best fused scores.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    frames = list(archive)
    active = frozenset(active_ids)
    if not frames:
        return ActiveMemory(uncovered_ids=active)
    coverable = active & frozenset().union(*(f.entity_ids for f in frames))

    selected: list[ArchivedFrame] = []
    uncovered = set(coverable)
    while uncovered and len(selected) < cap:
        pool = [f for f in frames if f not in selected]
        best = max(pool, key=lambda f: _greedy_key(f, uncovered))
        if not best.entity_ids & uncovered:
            break
        selected.append(best)
        uncovered -= best.entity_ids

    repaired = False
    if uncovered:
        cover = _exact_cover(frames, coverable, cap)
        if cover is not None:
            selected, uncovered, repaired = cover, set(), True

    budget = len(selected)
    if len(active) >= 2 and len(frames) >= 2:
        budget = max(budget, 2)
    budget = min(budget, cap)
    if len(selected) < budget:
        rest = sorted(
            (f for f in frames if f not in selected),
            key=lambda f: (f.fused_score, f.temporal_order),
            reverse=True,
        )
        selected.extend(rest[: budget - len(selected)])

    selected.sort(key=lambda f: f.temporal_order)
    covered = frozenset(coverable - uncovered)
    return ActiveMemory(
        frame_ids=[f.frame_id for f in selected],
        assembled_kv=assemble_memory_kv(selected) if with_kv else [],
        covered_ids=covered,
        uncovered_ids=active - covered,
        cover_size=len(selected),
        repaired=repaired,
    )


def assemble_memory_kv(selected: Sequence[ArchivedFrame]) -> list[KeyBlock]:
    """Per-layer concatenation of the frames' blocks along tokens, in temporal order."""
    if not selected:
        return []
    ordered = sorted(selected, key=lambda f: f.temporal_order)
    layer_ids = [b.layer_id for b in ordered[0].kv]
    out = []
    for pos, lid in enumerate(layer_ids):
        blocks = []
        for f in ordered:
            if [b.layer_id for b in f.kv] != layer_ids:
                raise ValueError(f"frame {f.frame_id} has a different layer structure")
            blocks.append(f.kv[pos])
        shape = blocks[0].keys.shape[1:]
        if any(b.keys.shape[1:] != shape for b in blocks):
            raise ValueError(f"layer {lid}: heterogeneous head/dim across frames")
        out.append(
            KeyBlock(
                lid,
                np.concatenate([b.keys for b in blocks], axis=0),
                np.concatenate([b.values for b in blocks], axis=0),
            )
        )
    return out
