"""Streaming session orchestration.

One orchestrator loop owns all mutable state (registry, archive, transition
state, local window). Decode plus verification runs on a single worker that
talks to the loop over two order-preserving channels. Archival of a chunk's
best frame is lagged behind generation by ``n_local / chunk_size`` chunks,
which is the slack that hides verification latency.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import oracles as _oracles
from .memory import (
    ArchivedFrame,
    FrameArchive,
    ScoringConfig,
    build_token_weights,
    entity_score,
    fuse_score,
    greedy_retrieve,
    normalize_entity_scores,
)
from .oracles import NEUTRAL_SCORE, Oracles, OracleRequest
from .registry import (
    DEFAULT_LEXICON,
    GlobalRegistry,
    apply_corrections,
    assign_ids,
    normalize_name,
    parse_entities,
)
from .synth import SyntheticGenerator, SyntheticWorld, identity_cosine
from .transition import (
    APTConfig,
    advance,
    begin_transition,
    current_alpha,
    current_conditioning,
    set_target,
)

logger = logging.getLogger(__name__)

PIXEL_FRAMES_PER_CHUNK = 12
VERIFY_PIXEL_INDICES = (0, 4, 8)
TRANSITION_MODES = ("apt", "recache", "hard")
RETRIEVAL_MODES = ("per_prompt", "per_chunk")
CLEAN_CONTEXT = "clean-context"
EVICTED = "evicted"


class SessionError(RuntimeError):
    pass


# -- clocks -------------------------------------------------------------------

class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class ManualClock:
    """Virtual time; only advances when told to."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot sleep a negative duration")
        self._now += seconds

    advance = sleep


# -- configuration ------------------------------------------------------------

@dataclass
class CacheLayout:
    n_sink: int = 3
    n_local: int = 9
    memory_cap: int = 4
    chunk_size: int = 3
    frames_per_chunk_pixel: int = PIXEL_FRAMES_PER_CHUNK

    def __post_init__(self):
        if min(self.n_sink, self.n_local, self.memory_cap, self.chunk_size, self.frames_per_chunk_pixel) < 1:
            raise ValueError("cache layout sizes must be positive")
        if self.n_local % self.chunk_size:
            raise ValueError("n_local must be a multiple of chunk_size")

    @property
    def lag(self) -> int:
        """Chunks a chunk stays in the local window before eviction."""
        return self.n_local // self.chunk_size


@dataclass
class TimingModel:
    """Durations used by the virtual clock (and slept on the system clock).

    ``verify_latency`` is submit-to-ready time of one verification ticket;
    a list gives per-chunk values, cycling.
    """

    chunk_time: float = 0.5
    prompt_time: float = 0.05
    verify_latency: float | list = 1.0
    queue_depth: int = 8

    def __post_init__(self):
        lat = self.verify_latency if isinstance(self.verify_latency, list) else [self.verify_latency]
        if not lat or min(lat) < 0 or self.chunk_time < 0 or self.prompt_time < 0:
            raise ValueError("timings must be non-negative")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")

    def latency_for(self, chunk_id: int) -> float:
        if isinstance(self.verify_latency, list):
            return float(self.verify_latency[(chunk_id - 1) % len(self.verify_latency)])
        return float(self.verify_latency)


@dataclass
class SessionConfig:
    layout: CacheLayout = field(default_factory=CacheLayout)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    apt: APTConfig = field(default_factory=APTConfig)
    timing: TimingModel = field(default_factory=TimingModel)
    transition_mode: str = "apt"
    memory_enabled: bool = True
    verification_enabled: bool = True
    retrieval_mode: str = "per_prompt"
    worker: str = "virtual"
    clock: str = "virtual"
    lexicon: tuple = DEFAULT_LEXICON

    def __post_init__(self):
        if self.transition_mode not in TRANSITION_MODES:
            raise ValueError(f"transition_mode must be one of {TRANSITION_MODES}")
        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise ValueError(f"retrieval_mode must be one of {RETRIEVAL_MODES}")
        if self.worker not in ("virtual", "threaded"):
            raise ValueError("worker must be 'virtual' or 'threaded'")
        if self.clock not in ("virtual", "system"):
            raise ValueError("clock must be 'virtual' or 'system'")
        if self.worker == "threaded" and self.clock != "system":
            raise ValueError("the threaded worker needs the system clock")
        if self.apt.chunk_size != self.layout.chunk_size:
            raise ValueError("APT chunk_size must equal the cache layout chunk_size")

    def make_clock(self):
        return ManualClock() if self.clock == "virtual" else SystemClock()


@dataclass
class PromptSegment:
    prompt: str
    chunks: int = 5
    entities: Optional[list[str]] = None  # names the synthetic world renders

    def __post_init__(self):
        if not isinstance(self.prompt, str) or not self.prompt.strip():
            raise ValueError("segment prompt must be non-empty text")
        if not isinstance(self.chunks, int) or isinstance(self.chunks, bool) or self.chunks < 1:
            raise ValueError("segment chunk count must be a positive integer")


def archival_source(chunk_index: int, layout: CacheLayout) -> tuple[str, int]:
    """``(kind, source_chunk)`` for the frame archived at ``chunk_index``."""
    if chunk_index < 1:
        raise ValueError("chunk_index must be >= 1")
    if chunk_index <= layout.lag:
        return CLEAN_CONTEXT, chunk_index
    return EVICTED, chunk_index - layout.lag


# -- verification worker ------------------------------------------------------

@dataclass
class VerificationResult:
    chunk_id: int
    frame_scores: list[float]
    corrections: Optional[dict] = None
    latency: float = 0.0
    ok: bool = True


@dataclass
class VerifyJob:
    chunk_id: int
    chunk: object
    request: Optional[OracleRequest]


def run_verify_job(job: VerifyJob, decode: Callable, oracle) -> VerificationResult:
    """Decode, sample pixel frames 0/4/8 and ask the verifier; neutral on failure."""
    neutral = VerificationResult(job.chunk_id, [NEUTRAL_SCORE] * len(VERIFY_PIXEL_INDICES), None, ok=False)
    if job.request is None or oracle is None:
        return neutral
    try:
        pixels = decode(job.chunk)
        job.request.images = [pixels[i] for i in VERIFY_PIXEL_INDICES if i < len(pixels)]
    except Exception as exc:  # noqa: BLE001
        logger.warning("decode failed for chunk %d: %s", job.chunk_id, exc)
        return neutral
    text = _oracles.call_oracle(oracle, job.request)
    if text is None:
        return neutral
    payload = _oracles.try_parse(text, "verify", len(VERIFY_PIXEL_INDICES))
    if payload is None:
        return neutral
    return VerificationResult(job.chunk_id, payload["scores"], payload["corrections"])


class VirtualWorker:
    """Deterministic worker on a :class:`ManualClock`.

    Results are computed at submit time; a ticket becomes ready
    ``latency`` after submission, never before its predecessor.
    """

    def __init__(self, process: Callable[[VerifyJob], VerificationResult], clock, latency: Callable[[int], float], depth: int = 8):
        self.process = process
        self.clock = clock
        self.latency = latency
        self.depth = depth
        self._pending: deque = deque()  # (chunk_id, ready_at, result)
        self._last_ready = -np.inf
        self.blocking_wait = 0.0

    def _in_flight(self) -> list[float]:
        now = self.clock.now()
        return [ready for _, ready, _ in self._pending if ready > now]

    def submit(self, job: VerifyJob) -> int:
        waited = 0.0
        busy = sorted(self._in_flight())
        if len(busy) >= self.depth:
            waited = busy[len(busy) - self.depth] - self.clock.now()
            self.clock.sleep(waited)
        submitted = self.clock.now()
        result = self.process(job)
        ready = max(submitted + self.latency(job.chunk_id), self._last_ready)
        self._last_ready = ready
        result.latency = ready - submitted
        self._pending.append((job.chunk_id, ready, result))
        return waited

    def next_result(self, block: bool) -> tuple[Optional[VerificationResult], float]:
        if not self._pending:
            raise SessionError("collect with no outstanding verification ticket")
        chunk_id, ready, result = self._pending[0]
        now = self.clock.now()
        if ready > now:
            if not block:
                return None, 0.0
            self.clock.sleep(ready - now)
            waited = ready - now
        else:
            waited = 0.0
        self._pending.popleft()
        return result, waited

    def close(self) -> None:
        self._pending.clear()


class ThreadedWorker:
    """Background thread fed by a bounded request queue."""

    def __init__(self, process: Callable[[VerifyJob], VerificationResult], clock, latency: Callable[[int], float], depth: int = 8):
        self.process = process
        self.clock = clock
        self.latency = latency
        self.requests: queue.Queue = queue.Queue(maxsize=depth)
        self.results: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._loop, daemon=True, name="verify-worker")
        self._thread.start()

    def _loop(self) -> None:
        while True:
            job = self.requests.get()
            if job is None:
                return
            start = time.monotonic()
            try:
                time.sleep(self.latency(job.chunk_id))
                result = self.process(job)
            except Exception as exc:  # noqa: BLE001
                logger.warning("verification worker failed on chunk %d: %s", job.chunk_id, exc)
                result = VerificationResult(job.chunk_id, [NEUTRAL_SCORE] * 3, None, ok=False)
            result.latency = time.monotonic() - start
            self.results.put(result)

    def submit(self, job: VerifyJob) -> float:
        try:
            self.requests.put_nowait(job)
            return 0.0
        except queue.Full:
            start = self.clock.now()
            self.requests.put(job)
            return self.clock.now() - start

    def next_result(self, block: bool) -> tuple[Optional[VerificationResult], float]:
        try:
            return self.results.get_nowait(), 0.0
        except queue.Empty:
            if not block:
                return None, 0.0
        start = self.clock.now()
        result = self.results.get()
        return result, self.clock.now() - start

    def close(self) -> None:
        self.requests.put(None)
        self._thread.join(timeout=5.0)


# -- session ------------------------------------------------------------------

@dataclass
class EfficiencyReport:
    e2e_latency: float
    per_chunk_times: list[float]
    fps: Optional[float]
    blocking_wait_total: float
    recache_count: int
    final_wait: float = 0.0

    def to_dict(self) -> dict:
        return {
            "e2e_latency": self.e2e_latency,
            "per_chunk_times": list(self.per_chunk_times),
            "fps": self.fps,
            "blocking_wait_total": self.blocking_wait_total,
            "final_wait": self.final_wait,
            "recache_count": self.recache_count,
        }


@dataclass
class SessionTrace:
    start: float = 0.0
    end: float = 0.0
    chunk_times: list[float] = field(default_factory=list)
    blocking_waits: list[float] = field(default_factory=list)
    final_wait: float = 0.0
    recache_count: int = 0
    pixel_frames_per_chunk: int = PIXEL_FRAMES_PER_CHUNK


def measure(trace: SessionTrace) -> EfficiencyReport:
    mean = float(np.mean(trace.chunk_times)) if trace.chunk_times else 0.0
    return EfficiencyReport(
        e2e_latency=trace.end - trace.start,
        per_chunk_times=list(trace.chunk_times),
        fps=trace.pixel_frames_per_chunk / mean if mean > 0 else None,
        blocking_wait_total=float(sum(trace.blocking_waits)),
        recache_count=trace.recache_count,
        final_wait=trace.final_wait,
    )


@dataclass
class ArchivalItem:
    order: int  # chunk counter at scheduling time; becomes temporal_order
    kind: str
    source_chunk: int
    due: int


@dataclass
class ChunkRecord:
    chunk: object
    prompt_index: int
    active_ids: tuple
    first_of_prompt: bool


@dataclass
class GenerationSession:
    layout: CacheLayout
    registry: GlobalRegistry = field(default_factory=GlobalRegistry)
    archive: FrameArchive = field(default_factory=FrameArchive)
    apt: object = None
    prompt_schedule: list = field(default_factory=list)
    chunk_counter: int = 0
    local_window: deque = field(default_factory=deque)
    pending_verifications: deque = field(default_factory=deque)
    rng_seed: int = 0


@dataclass
class SessionOutput:
    session: GenerationSession
    chunks: list[dict]
    prompts: list[dict]
    archival: list[dict]
    report: EfficiencyReport

    @property
    def registry(self) -> GlobalRegistry:
        return self.session.registry

    @property
    def archive(self) -> FrameArchive:
        return self.session.archive

    def final_identity_cosine(self, entity: str) -> Optional[float]:
        """Mean frame/identity cosine of ``entity`` over the last prompt's chunks."""
        last = max(c["prompt_index"] for c in self.chunks)
        key = entity.strip().lower()
        vals = [c["identity_cosine"][key] for c in self.chunks if c["prompt_index"] == last and key in c["identity_cosine"]]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "seed": self.session.rng_seed,
            "registry": self.registry.to_dict(),
            "archive": self.archive.metadata(),
            "prompts": self.prompts,
            "chunks": self.chunks,
            "archival": self.archival,
            "efficiency": self.report.to_dict(),
        }


def _present_names(segment: PromptSegment, descriptors) -> list[str]:
    if segment.entities is not None:
        return [n.strip().lower() for n in segment.entities]
    return [normalize_name(d.name) for d in descriptors]


def run_session(
    schedule: Sequence[PromptSegment],
    generator: Optional[SyntheticGenerator] = None,
    oracles: Optional[Oracles] = None,
    config: Optional[SessionConfig] = None,
    seed: int = 0,
    clock=None,
) -> SessionOutput:
    if not schedule:
        raise ValueError("schedule must contain at least one prompt")
    config = config or SessionConfig()
    oracles = oracles or Oracles()
    generator = generator or SyntheticGenerator(SyntheticWorld(seed=seed))
    clock = clock or config.make_clock()
    layout = config.layout
    session = GenerationSession(layout, prompt_schedule=list(schedule), rng_seed=seed)
    trace = SessionTrace(start=clock.now(), pixel_frames_per_chunk=layout.frames_per_chunk_pixel)

    process = lambda job: run_verify_job(job, generator.decode, oracles.verify)  # noqa: E731
    worker_cls = VirtualWorker if config.worker == "virtual" else ThreadedWorker
    worker = worker_cls(process, clock, config.timing.latency_for, config.timing.queue_depth)

    records: dict[int, ChunkRecord] = {}
    results: dict[int, VerificationResult] = {}
    archival_queue: deque[ArchivalItem] = deque()
    chunk_traces: list[dict] = []
    prompt_traces: list[dict] = []
    archival_events: list[dict] = []
    state = {"ids": (), "encoding": None, "weights": None, "wait": 0.0}

    def collect_for(chunk_id: int, block: bool) -> Optional[VerificationResult]:
        while chunk_id not in results:
            if not session.pending_verifications:
                raise SessionError(f"no verification ticket for chunk {chunk_id}")
            result, waited = worker.next_result(block)
            state["wait"] += waited
            if result is None:
                return None
            expected = session.pending_verifications.popleft()
            if result.chunk_id != expected:
                raise SessionError(f"verification results out of order: got {result.chunk_id}, expected {expected}")
            results[result.chunk_id] = result
            rec = records[result.chunk_id]
            applied = 0
            if rec.first_of_prompt and result.corrections:
                applied = apply_corrections(session.registry, result.corrections)
            result_trace = chunk_traces[result.chunk_id - 1]
            result_trace["verify_scores"] = list(result.frame_scores)
            result_trace["verify_ok"] = result.ok
            result_trace["corrections_applied"] = applied
        return results[chunk_id]

    def archive_item(item: ArchivalItem, result: Optional[VerificationResult]) -> None:
        rec = records[item.source_chunk]
        enc = state["encoding"]
        frames = rec.chunk.frames
        raw = [entity_score(enc.text_block, kv, state["weights"], config.scoring) for kv in frames]
        norm = normalize_entity_scores(raw)
        if config.verification_enabled and result is not None:
            visual = list(result.frame_scores)[: len(frames)]
            visual += [NEUTRAL_SCORE] * (len(frames) - len(visual))
            lam = config.scoring.lam
        else:
            visual, lam = [NEUTRAL_SCORE] * len(frames), 0.0
        fused = [fuse_score(e, v, lam) for e, v in zip(norm, visual)]
        best = max(range(len(frames)), key=lambda j: (fused[j], -j))
        frame = ArchivedFrame(
            frame_id=len(session.archive) + 1,
            prompt_index=rec.prompt_index,
            chunk_index=item.source_chunk,
            entity_ids=frozenset(rec.active_ids),
            entity_score_raw=float(raw[best]),
            entity_score_norm=float(norm[best]),
            visual_score=float(visual[best]),
            fused_score=float(fused[best]),
            kv=frames[best],
            temporal_order=item.order,
            source=item.kind,
            latent_index=best,
        )
        session.archive.append(frame)
        archival_events.append({
            "at_chunk": session.chunk_counter,
            "order": item.order,
            "source": item.kind,
            "source_chunk": item.source_chunk,
            "frame_id": frame.frame_id,
            "latent_index": best,
            "fused_scores": [float(x) for x in fused],
        })

    def drain(final: bool = False) -> None:
        while archival_queue:
            item = archival_queue[0]
            must = final or item.due <= session.chunk_counter
            if config.verification_enabled:
                result = collect_for(item.source_chunk, block=must)
                if result is None:
                    return
            else:
                if not must:
                    return
                result = None
            archival_queue.popleft()
            archive_item(item, result)

    def retrieve(pidx: int) -> tuple[list[int], list[int], list[str]]:
        mem = greedy_retrieve(session.archive, state["ids"], layout.memory_cap)
        frames = [session.archive.get(fid) for fid in mem.frame_ids]
        refreshed = generator.inject_memory(frames)
        return mem.frame_ids, sorted(mem.uncovered_ids), refreshed

    cond = None
    prev_embed = None
    memory_ids: list[int] = []
    try:
        for pidx, segment in enumerate(schedule, start=1):
            clock.sleep(config.timing.prompt_time)
            descriptors = parse_entities(segment.prompt, oracles.extract, oracles.deadline, config.lexicon)
            ids = assign_ids(descriptors, session.registry, pidx, oracles.match, oracles.deadline)
            present = _present_names(segment, descriptors)
            enc = generator.encode_prompt(segment.prompt, present)
            weights = build_token_weights(
                enc.text,
                session.registry.names_for(ids),
                session.registry.attributes_for(ids),
                enc.text_block.tokens,
            )
            state.update(ids=tuple(ids), encoding=enc, weights=weights)

            if cond is None:
                cond = (enc.cond_k, enc.cond_v)
            elif config.transition_mode == "apt":
                live = current_conditioning(session.apt) if session.apt is not None and session.apt.active else cond
                session.apt = begin_transition(live, enc.embed, prev_embed, config.apt)
            elif config.transition_mode == "recache":
                generator.recache(len(session.local_window))
                trace.recache_count += 1
                cond = (enc.cond_k, enc.cond_v)
            else:
                cond = (enc.cond_k, enc.cond_v)
            prev_embed = enc.embed

            prompt_trace = {
                "prompt_index": pidx,
                "prompt": segment.prompt,
                "active_ids": list(ids),
                "entities": [d.name for d in descriptors],
                "w_apt": session.apt.w_apt if session.apt is not None and session.apt.tau == 0 and pidx > 1 else None,
                "memory_frame_ids": [],
                "uncovered_ids": [],
                "refreshed": [],
            }
            if config.memory_enabled and config.retrieval_mode == "per_prompt":
                memory_ids, uncovered, refreshed = retrieve(pidx)
                prompt_trace.update(memory_frame_ids=memory_ids, uncovered_ids=uncovered, refreshed=refreshed)
            prompt_traces.append(prompt_trace)

            for c in range(segment.chunks):
                t0 = clock.now()
                state["wait"] = 0.0
                session.chunk_counter += 1
                n = session.chunk_counter
                if config.memory_enabled and config.retrieval_mode == "per_chunk":
                    memory_ids, _, _ = retrieve(pidx)

                apt_info = {"tau": None, "alpha": None, "w_apt": None}
                if session.apt is not None and session.apt.active:
                    if session.apt.pending_target:
                        set_target(session.apt, enc.cond_k, enc.cond_v)
                    a = current_alpha(session.apt)
                    apt_info = {"tau": session.apt.tau, "alpha": a, "w_apt": session.apt.w_apt}
                    cond = current_conditioning(session.apt)

                try:
                    chunk = generator.denoise_chunk(n, present, cond, memory_ids)
                except Exception as exc:
                    raise SessionError(f"generator failed on chunk {n} (prompt {pidx}): {exc}") from exc
                clock.sleep(config.timing.chunk_time)

                if session.apt is not None and session.apt.active:
                    advance(session.apt, layout.chunk_size)
                    if not session.apt.active:
                        cond = (session.apt.k_new, session.apt.v_new)

                records[n] = ChunkRecord(chunk, pidx, tuple(ids), c == 0)
                chunk_traces.append({
                    "chunk": n,
                    "prompt_index": pidx,
                    **apt_info,
                    "memory_frame_ids": list(memory_ids) if config.memory_enabled else [],
                    "identity_cosine": _identity_trace(generator, chunk, present),
                    # filled in when the verification result is collected; tickets of
                    # chunks that are never archived are dropped at session end
                    "verify_scores": None,
                    "verify_ok": None,
                    "corrections_applied": 0,
                })

                if config.verification_enabled:
                    request = OracleRequest(
                        "verify",
                        _oracles.render_verify_prompt(
                            segment.prompt,
                            session.registry.names_for(ids),
                            [session.registry[g].describe() for g in ids],
                        ),
                        oracles.deadline,
                        metadata={"chunk": n, "prompt_index": pidx, "first_chunk": c == 0},
                    )
                    state["wait"] += worker.submit(VerifyJob(n, chunk, request))
                    session.pending_verifications.append(n)

                session.local_window.append(n)
                while len(session.local_window) > layout.lag:
                    session.local_window.popleft()
                kind, src = archival_source(n, layout)
                archival_queue.append(ArchivalItem(n, kind, src, src + layout.lag))
                drain()

                chunk_traces[-1].update(
                    local_window=list(session.local_window),
                    archival_source={"kind": kind, "chunk": src},
                    blocking_wait=state["wait"],
                    time=clock.now() - t0,
                )
                trace.chunk_times.append(clock.now() - t0)
                trace.blocking_waits.append(state["wait"])

        state["wait"] = 0.0
        drain(final=True)
        trace.final_wait = state["wait"]
    finally:
        worker.close()

    trace.end = clock.now()
    report = measure(trace)
    return SessionOutput(session, chunk_traces, prompt_traces, archival_events, report)


def _identity_trace(generator, chunk, present: list[str]) -> dict:
    world = getattr(generator, "world", None)
    if world is None:
        return {}
    return {name: identity_cosine(chunk, world.entity_vector(name)) for name in sorted(set(present))}
