"""Deterministic stand-in for the text encoder, denoiser and decoder.

Identity forgetting is modelled directly: an entity's appearance in frame
keys is ``a * v + sqrt(1 - a**2) * u`` where ``v`` is its identity vector,
``u`` a fixed drift direction orthogonal to ``v`` and
``a = (1 - drift_rate) ** age``, ``age`` counting chunks since the entity
was introduced or last refreshed by an injected memory frame that truly
shows it. With no noise the frame/identity cosine equals ``a``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .memory import KeyBlock

LAYER_ID = 0
_WORD = re.compile(r"\S+")


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


@dataclass
class SyntheticWorld:
    seed: int = 0
    heads: int = 4
    head_dim: int = 16
    frame_tokens: int = 8
    text_tokens: int = 32
    latent_frames: int = 3
    pixel_frames_per_latent: int = 4
    image_size: int = 16
    embed_dim: int = 64
    noise_sigma: float = 0.3
    drift_rate: float = 0.2
    entity_vectors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.noise_sigma < 0 or not 0.0 <= self.drift_rate <= 1.0:
            raise ValueError("noise_sigma must be >= 0 and drift_rate in [0, 1]")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    def rng(self, *parts) -> np.random.Generator:
        return np.random.default_rng([self.seed, *(stable_hash(str(p)) for p in parts)])

    def entity_vector(self, name: str) -> np.ndarray:
        key = name.strip().lower()
        if key not in self.entity_vectors:
            v = self.rng("entity", key).standard_normal(self.dim)
            self.entity_vectors[key] = v / np.linalg.norm(v)
        return self.entity_vectors[key]

    def drift_direction(self, name: str) -> np.ndarray:
        v = self.entity_vector(name)
        u = self.rng("drift", name.strip().lower()).standard_normal(self.dim)
        u -= (u @ v) * v
        return u / np.linalg.norm(u)

    def attenuation(self, age: int) -> float:
        return (1.0 - self.drift_rate) ** max(0, age)

    def to_dict(self) -> dict:
        return {
            "heads": self.heads,
            "head_dim": self.head_dim,
            "frame_tokens": self.frame_tokens,
            "text_tokens": self.text_tokens,
            "noise_sigma": self.noise_sigma,
            "drift_rate": self.drift_rate,
        }


@dataclass
class PromptEncoding:
    text: str  # the part of the prompt covered by the token block
    text_block: KeyBlock
    cond_k: np.ndarray
    cond_v: np.ndarray
    embed: np.ndarray


@dataclass
class SyntheticChunk:
    chunk_index: int
    frames: list  # per latent frame: list of KeyBlock (one per layer)
    latent: np.ndarray  # (latent_frames, dim) noise-free signal
    presence: list  # per latent frame: frozenset of entity names
    attenuation: dict

    def frame_vector(self, j: int) -> np.ndarray:
        return self.frames[j][0].keys.mean(axis=0).reshape(-1)


def prompt_embedding(prompt_text: str, dim: int = 64) -> np.ndarray:
    """Bag-of-words hash vector; shared words make prompts similar."""
    vec = np.zeros(dim)
    for word in re.findall(r"[a-z0-9]+", prompt_text.lower()):
        vec += np.random.default_rng(stable_hash("word:" + word)).standard_normal(dim)
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec = np.random.default_rng(stable_hash("empty")).standard_normal(dim)
        norm = np.linalg.norm(vec)
    return vec / norm


def _entity_token_mask(text: str, spans: Sequence[tuple[int, int]], names: Iterable[str]) -> dict[str, np.ndarray]:
    lower = text.lower()
    masks = {}
    for name in names:
        key = name.strip().lower()
        mask = np.zeros(len(spans), dtype=bool)
        for m in re.finditer(re.escape(key), lower):
            for i, (s, e) in enumerate(spans):
                if s < m.end() and e > m.start():
                    mask[i] = True
        masks[key] = mask
    return masks


def text_keys(prompt_text: str, entity_names: Iterable[str], world: SyntheticWorld) -> tuple[KeyBlock, np.ndarray]:
    """Token keys for the prompt plus its pooled embedding.

    Tokens overlapping an entity mention carry that entity's vector plus
    ``noise_sigma`` noise; all other tokens are seeded random vectors.
    """
    block, embed, _ = _encode_tokens(prompt_text, entity_names, world)
    return block, embed


def _encode_tokens(prompt_text: str, entity_names: Iterable[str], world: SyntheticWorld):
    matches = list(_WORD.finditer(prompt_text))[: world.text_tokens] or [re.match(r"", prompt_text)]
    spans = [(m.start(), m.end()) for m in matches]
    covered = prompt_text[: spans[-1][1]] if spans[-1][1] else prompt_text
    S, D = len(spans), world.dim
    rng = world.rng("text", prompt_text)
    keys = rng.standard_normal((S, D)) / np.sqrt(D)
    values = rng.standard_normal((S, D)) / np.sqrt(D)
    noise = rng.standard_normal((S, D)) / np.sqrt(D)
    for name, mask in _entity_token_mask(covered, spans, entity_names).items():
        v = world.entity_vector(name)
        keys[mask] = v + world.noise_sigma * noise[mask]
        values[mask] = v
    shape = (S, world.heads, world.head_dim)
    block = KeyBlock(LAYER_ID, keys.reshape(shape), values.reshape(shape))
    return block, prompt_embedding(prompt_text, world.embed_dim), covered


def gen_chunk(
    chunk_index: int,
    present_entities: Iterable[str],
    world: SyntheticWorld,
    ages: Optional[dict[str, int]] = None,
) -> SyntheticChunk:
    """One chunk of latent frames; ``ages`` maps entity -> chunks since refresh."""
    ages = ages or {}
    names = sorted({n.strip().lower() for n in present_entities})
    att = {n: world.attenuation(ages.get(n, 0)) for n in names}
    signal = np.zeros(world.dim)
    for n in names:
        a = att[n]
        signal += a * world.entity_vector(n) + np.sqrt(max(0.0, 1.0 - a * a)) * world.drift_direction(n)
    norm = np.linalg.norm(signal)
    if norm > 0:
        signal /= norm
    shape = (world.frame_tokens, world.heads, world.head_dim)
    frames, latent, presence = [], [], []
    for j in range(world.latent_frames):
        rng = world.rng("chunk", chunk_index, j)
        noise = rng.standard_normal((world.frame_tokens, world.dim)) / np.sqrt(world.dim)
        keys = signal + world.noise_sigma * noise
        values = 0.5 * signal + rng.standard_normal((world.frame_tokens, world.dim)) / np.sqrt(world.dim)
        frames.append([KeyBlock(LAYER_ID, keys.reshape(shape), values.reshape(shape))])
        latent.append(signal.copy())
        presence.append(frozenset(names))
    return SyntheticChunk(chunk_index, frames, np.array(latent), presence, att)


def identity_cosine(chunk: SyntheticChunk, vector: np.ndarray) -> float:
    """Mean over latent frames of cos(mean frame key, vector)."""
    vals = []
    for j in range(len(chunk.frames)):
        f = chunk.frame_vector(j)
        n = np.linalg.norm(f)
        vals.append(0.0 if n == 0 else float(f @ vector / (n * np.linalg.norm(vector))))
    return float(np.mean(vals))


class SyntheticGenerator:
    """Stateful wrapper tracking identity refreshes and recache passes."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.last_refresh: dict[str, int] = {}
        self.truth: dict[tuple[int, int], frozenset] = {}
        self.recache_count = 0
        self.next_chunk = 1
        rng = world.rng("decoder")
        self._decoder = rng.standard_normal((world.image_size * world.image_size * 3, world.dim))

    def encode_prompt(self, prompt_text: str, entity_names: Iterable[str]) -> PromptEncoding:
        block, embed, covered = _encode_tokens(prompt_text, list(entity_names), self.world)
        # conditioning is padded to a fixed token count so blocks of different prompts blend
        T = self.world.text_tokens
        pad = T - block.tokens
        cond_k = np.concatenate([block.keys, np.zeros((pad, *block.keys.shape[1:]))]) if pad else block.keys
        cond_v = np.concatenate([block.values, np.zeros((pad, *block.values.shape[1:]))]) if pad else block.values
        return PromptEncoding(covered, block, cond_k, cond_v, embed)

    def inject_memory(self, frames: Iterable) -> list[str]:
        """Refresh every entity that an injected archived frame truly shows."""
        refreshed = set()
        for f in frames:
            refreshed |= self.truth.get((f.chunk_index, f.latent_index), frozenset())
        for name in refreshed:
            self.last_refresh[name] = self.next_chunk
        return sorted(refreshed)

    def recache(self, context_chunks: int) -> None:
        self.recache_count += 1

    def denoise_chunk(self, chunk_index: int, present_entities: Iterable[str], conditioning=None, memory_kv=None) -> SyntheticChunk:
        names = [n.strip().lower() for n in present_entities]
        for n in names:
            self.last_refresh.setdefault(n, chunk_index)
        ages = {n: chunk_index - self.last_refresh[n] for n in names}
        chunk = gen_chunk(chunk_index, names, self.world, ages)
        for j, present in enumerate(chunk.presence):
            self.truth[(chunk_index, j)] = present
        self.next_chunk = chunk_index + 1
        return chunk

    def decode(self, chunk: SyntheticChunk) -> np.ndarray:
        """Pixel frames ``(latent * per_latent, size, size, 3)`` as uint8."""
        w = self.world
        out = []
        for j in range(len(chunk.frames)):
            logits = self._decoder @ chunk.frame_vector(j)
            img = (255.0 / (1.0 + np.exp(-logits))).reshape(w.image_size, w.image_size, 3)
            out.extend([img] * w.pixel_frames_per_latent)
        return np.clip(np.rint(np.array(out)), 0, 255).astype(np.uint8)
