import json
import threading

import numpy as np
import pytest

from idstream import oracles as O
from idstream.config import default_schedule
from idstream.oracles import Oracles, mock_oracle
from idstream.pipeline import (
    CacheLayout,
    ManualClock,
    PromptSegment,
    SessionConfig,
    SessionError,
    SessionTrace,
    TimingModel,
    VerificationResult,
    VerifyJob,
    VirtualWorker,
    archival_source,
    measure,
    run_session,
)
from idstream.synth import SyntheticGenerator, SyntheticWorld


def cfg(**kw):
    timing = kw.pop("timing", {})
    return SessionConfig(timing=TimingModel(**timing), **kw)


@pytest.mark.parametrize("n,expected", [(1, ("clean-context", 1)), (3, ("clean-context", 3)), (4, ("evicted", 1)), (7, ("evicted", 4))])
def test_archival_source(n, expected):
    assert archival_source(n, CacheLayout()) == expected


def test_archival_source_rejects_zero():
    with pytest.raises(ValueError):
        archival_source(0, CacheLayout())


def test_layout_validation():
    with pytest.raises(ValueError):
        CacheLayout(n_local=10)
    with pytest.raises(ValueError):
        SessionConfig(worker="threaded")
    with pytest.raises(ValueError):
        SessionConfig(transition_mode="fade")


def test_single_prompt_single_chunk():
    out = run_session([PromptSegment("A man walks.", 1)])
    assert len(out.chunks) == 1 and len(out.archive) == 1
    assert out.archive.get(1).source == "clean-context"
    assert out.report.recache_count == 0
    # the final drain waited for the only verification ticket
    assert out.report.final_wait == pytest.approx(1.0)


def test_default_session_shape():
    out = run_session(default_schedule(), seed=0)
    assert len(out.chunks) == 30 and len(out.archive) == 30 and len(out.prompts) == 6
    assert out.report.recache_count == 0
    assert out.report.fps == pytest.approx(24.0)
    assert out.report.e2e_latency == pytest.approx(15.3)
    assert out.report.blocking_wait_total == 0.0
    assert [p["active_ids"] for p in out.prompts] == [[1], [1], [2], [2], [2], [1, 2]]
    orders = [f.temporal_order for f in out.archive]
    assert orders == list(range(1, 31))
    for c in out.chunks:
        n = c["chunk"]
        assert c["local_window"] == list(range(max(1, n - 2), n + 1))
        expected = ("clean-context", n) if n <= 3 else ("evicted", n - 3)
        assert (c["archival_source"]["kind"], c["archival_source"]["chunk"]) == expected


def test_archive_entity_sets_follow_generating_prompt():
    out = run_session(default_schedule(), seed=1)
    by_chunk = {c["chunk"]: c["prompt_index"] for c in out.chunks}
    for f in out.archive:
        assert f.prompt_index == by_chunk[f.chunk_index]
        assert sorted(f.entity_ids) == out.prompts[f.prompt_index - 1]["active_ids"]


def test_apt_trace():
    out = run_session(default_schedule(), seed=0)
    second = [c for c in out.chunks if c["prompt_index"] == 2]
    assert second[0]["tau"] == 0 and second[0]["alpha"] == 0.0
    alphas = [c["alpha"] for c in second]
    assert alphas == sorted(alphas)
    assert all(c["alpha"] is None for c in out.chunks if c["prompt_index"] == 1)
    assert out.prompts[1]["w_apt"] in (3, 6, 9, 12, 15)


def test_determinism():
    a = json.dumps(run_session(default_schedule(), seed=5).to_dict(), sort_keys=True)
    b = json.dumps(run_session(default_schedule(), seed=5).to_dict(), sort_keys=True)
    assert a == b


def test_memory_improves_reappearing_identity():
    on = run_session(default_schedule(), seed=3)
    off = run_session(default_schedule(), seed=3, config=cfg(memory_enabled=False))
    assert on.final_identity_cosine("woman") > off.final_identity_cosine("woman")
    assert all(c["memory_frame_ids"] == [] for c in off.chunks)
    assert "woman" in on.prompts[-1]["refreshed"]


def test_recache_and_hard_modes():
    sched = default_schedule(2)
    re = run_session(sched, config=cfg(transition_mode="recache"))
    assert re.report.recache_count == len(sched) - 1
    hard = run_session(sched, config=cfg(transition_mode="hard"))
    assert hard.report.recache_count == 0
    assert all(c["alpha"] is None for c in hard.chunks)


def test_per_chunk_retrieval():
    out = run_session(default_schedule(2), config=cfg(retrieval_mode="per_chunk"))
    assert all(p["memory_frame_ids"] == [] for p in out.prompts)
    assert any(c["memory_frame_ids"] for c in out.chunks)


def test_verification_disabled():
    verify = mock_oracle({"rules": []})
    out = run_session(default_schedule(1), oracles=Oracles(verify=verify), config=cfg(verification_enabled=False))
    assert verify.calls == []
    assert all(c["verify_scores"] is None for c in out.chunks)
    assert all(f.visual_score == 0.5 for f in out.archive)
    assert all(f.fused_score == f.entity_score_norm for f in out.archive)


def test_liveness_fast_worker():
    out = run_session(default_schedule(), config=cfg(timing={"verify_latency": 1.4}))
    assert out.report.blocking_wait_total == 0.0


def test_slow_worker_blocks_but_keeps_order():
    out = run_session(default_schedule(), config=cfg(timing={"verify_latency": [3.0, 0.1, 0.2]}))
    assert out.report.blocking_wait_total > 0
    assert [e["order"] for e in out.archival] == list(range(1, 31))
    collected = [c["chunk"] for c in out.chunks if c["verify_scores"] is not None]
    assert collected == list(range(1, len(collected) + 1))


def test_queue_depth_backpressure():
    out = run_session(default_schedule(2), config=cfg(timing={"verify_latency": 2.0, "queue_depth": 1}))
    assert out.report.blocking_wait_total > 0
    assert len(out.archive) == 12


def test_virtual_worker_three_in_flight():
    clock = ManualClock()
    w = VirtualWorker(lambda j: VerificationResult(j.chunk_id, [0.5] * 3), clock, lambda _: 1.2, depth=8)
    for n in (1, 2, 3):
        assert w.submit(VerifyJob(n, None, None)) == 0.0
        clock.advance(0.5)
    assert w.next_result(block=False)[0].chunk_id == 1
    assert w.next_result(block=False) == (None, 0.0)
    r, waited = w.next_result(block=True)
    assert r.chunk_id == 2 and waited == pytest.approx(0.2)
    assert w.next_result(block=True)[0].chunk_id == 3
    with pytest.raises(SessionError):
        w.next_result(block=True)


def test_threaded_worker_session():
    out = run_session(
        default_schedule(3),
        config=cfg(worker="threaded", clock="system", timing={"chunk_time": 0.005, "prompt_time": 0.0, "verify_latency": 0.002}),
    )
    assert len(out.archive) == 18
    assert [e["order"] for e in out.archival] == list(range(1, 19))


def test_scripted_corrections_applied_once():
    script = {
        "rules": [
            {"role": "verify", "metadata": {"prompt_index": 2},
             "response": {"scores": [0.9, 0.1, 0.2], "corrections": {"1": {"corrected_attrs": ["red scarf"]}}}},
        ]
    }
    out = run_session(default_schedule(), oracles=Oracles(verify=mock_oracle(script)))
    applied = [c["chunk"] for c in out.chunks if c["corrections_applied"]]
    assert applied == [6]
    assert out.registry[1].attributes == ["red scarf"]


def test_generator_failure_names_chunk():
    class Broken(SyntheticGenerator):
        def denoise_chunk(self, chunk_index, *a, **k):
            if chunk_index == 4:
                raise RuntimeError("out of memory")
            return super().denoise_chunk(chunk_index, *a, **k)

    with pytest.raises(SessionError, match="chunk 4"):
        run_session(default_schedule(), generator=Broken(SyntheticWorld()))


def test_all_neutral_oracles():
    failing = mock_oracle({"rules": [{"role": r, "fail": True} for r in ("extract", "match", "verify")]})
    out = run_session(default_schedule(), oracles=Oracles.single(failing))
    assert len(out.archive) == 30 and out.report.recache_count == 0
    assert all(c["verify_ok"] is False for c in out.chunks if c["verify_scores"] is not None)


def test_measure():
    rep = measure(SessionTrace(start=1.0, end=4.0, chunk_times=[0.5] * 4, blocking_waits=[0.0, 2.0, 0.0, 0.0]))
    assert rep.fps == pytest.approx(24.0) and rep.blocking_wait_total == 2.0 and rep.e2e_latency == 3.0
    assert measure(SessionTrace()).fps is None


def test_http_loopback_session():
    script = {"rules": [
        {"role": "extract", "contains": "woman", "response": {"entities": [{"entity": "woman", "attrs": ["red coat"]}]}},
        {"role": "verify", "response": {"scores": [0.2, 0.9, 0.4]}},
    ]}
    oracle = mock_oracle(script)
    srv = O.serve_mock(oracle)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        url = "http://%s:%d/oracle" % srv.server_address[:2]
        out = run_session(default_schedule(1)[:2], oracles=Oracles.single(O.HttpOracle(url), deadline=5))
    finally:
        srv.shutdown()
        srv.server_close()
    assert out.registry[1].attributes == ["red coat"]
    assert out.chunks[0]["verify_scores"] == [0.2, 0.9, 0.4]
    assert {r for r, _ in oracle.calls} == {"extract", "match", "verify"}
    assert [m["chunk"] for r, m in oracle.calls if r == "verify"] == [1, 2]
