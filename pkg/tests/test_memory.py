import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import refimpl
from idstream.memory import (
    ArchivedFrame,
    FrameArchive,
    KeyBlock,
    ScoringConfig,
    TokenWeightVector,
    assemble_memory_kv,
    build_token_weights,
    entity_score,
    fuse_score,
    greedy_retrieve,
    normalize_entity_scores,
    select_archive_frame,
    span_to_tokens,
)


def frame(fid, ids, norm=0.5, fused=None, order=None, tokens=2, fill=None):
    keys = np.full((tokens, 1, 2), float(fid) if fill is None else fill)
    return ArchivedFrame(
        frame_id=fid, prompt_index=1, chunk_index=fid, entity_ids=frozenset(ids),
        entity_score_raw=norm, entity_score_norm=norm, visual_score=0.5,
        fused_score=norm if fused is None else fused,
        kv=[KeyBlock(0, keys, keys)], temporal_order=fid if order is None else order,
    )


# -- token weights ------------------------------------------------------------

def test_weights_no_entities_uniform():
    tw = build_token_weights("A quiet street.", [], [], 10)
    assert np.all(tw.raw == 1.0)
    np.testing.assert_allclose(tw.normalized, 0.1, rtol=1e-8)


def test_weights_span_arithmetic():
    text = "q" * 40 + "abcdefghij" + "q" * 50
    tw = build_token_weights(text, ["abcdefghij"], [], 100)
    expected = np.ones(100)
    expected[38:52] = 2.5
    expected[0:8] = 0.7
    expected[92:100] = 0.5
    np.testing.assert_array_equal(tw.raw, expected)
    np.testing.assert_allclose(tw.normalized, expected / (expected.sum() + 1e-8), rtol=0, atol=0)


def test_weights_no_span_match():
    tw = build_token_weights("a prompt without the name", ["zebra"], [], 100)
    expected = np.ones(100)
    expected[10:85] = 1.5
    np.testing.assert_array_equal(tw.raw, expected)


def test_weights_attribute_spans_count():
    tw = build_token_weights("q" * 10 + "man" + "q" * 10 + "red hat" + "q" * 10, ["man"], ["red hat"], 40)
    assert tw.raw.max() == 2.5
    assert (tw.raw == 2.5).sum() > (build_token_weights("q" * 10 + "man" + "q" * 27, ["man"], [], 40).raw == 2.5).sum()


def test_span_to_tokens_rounding():
    assert span_to_tokens(3, 7, 10, 4) == (1, 3)
    assert span_to_tokens(0, 1, 100, 5) == (0, 1)
    assert span_to_tokens(50, 50, 100, 10) == (5, 6)


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=60), st.lists(st.text(max_size=6), max_size=3), st.integers(1, 120))
def test_weights_normalize(text, names, S):
    tw = build_token_weights(text, names, [], S)
    assert np.all(tw.raw > 0)
    total = tw.raw.sum()
    # the +1e-8 denominator keeps the sum 1e-8/total below one
    assert abs(tw.normalized.sum() - 1.0) <= 1e-8 / total + 1e-12


def test_weights_rejects_empty_token_count():
    with pytest.raises(ValueError):
        build_token_weights("x", [], [], 0)


# -- entity score -------------------------------------------------------------

def test_entity_score_trivial_cases():
    text = KeyBlock(0, np.ones((3, 2, 4)), np.ones((3, 2, 4)))
    zeros = KeyBlock(0, np.zeros((5, 2, 4)), np.zeros((5, 2, 4)))
    w = build_token_weights("x", [], [], 3)
    assert entity_score(text, zeros, w) == 0.0

    e = np.zeros(4)
    e[1] = 1.0
    tk = KeyBlock(0, np.tile(e, (3, 1, 1)), np.tile(e, (3, 1, 1)))
    fk = KeyBlock(0, np.tile(e, (6, 1, 1)), np.tile(e, (6, 1, 1)))
    uniform = TokenWeightVector(np.ones(3), np.full(3, 1 / 3))
    assert entity_score(tk, fk, uniform) == pytest.approx(0.5, abs=1e-15)


def test_entity_score_matches_scalar_loop():
    rng = np.random.default_rng(0)
    for _ in range(50):
        S, H, d, nf = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 9)
        kt = rng.standard_normal((S, H, d))
        kv = rng.standard_normal((nf, H, d))
        raw = rng.uniform(0.1, 3, S)
        w = TokenWeightVector(raw, raw / (raw.sum() + 1e-8))
        got = entity_score(KeyBlock(0, kt, kt), KeyBlock(0, kv, kv), w)
        assert got == pytest.approx(refimpl.entity_score(kt.tolist(), kv.tolist(), w.normalized.tolist()), abs=1e-9)


def test_entity_score_layer_weights_and_errors():
    rng = np.random.default_rng(1)
    t = [KeyBlock(l, rng.standard_normal((3, 2, 4)), np.zeros((3, 2, 4))) for l in (0, 1)]
    f = [KeyBlock(l, rng.standard_normal((5, 2, 4)), np.zeros((5, 2, 4))) for l in (0, 1)]
    w = build_token_weights("x", [], [], 3)
    both = entity_score(t, f, w, ScoringConfig(layer_weights={0: 0.25, 1: 0.75}))
    parts = [entity_score(t[i], f[i], w) for i in (0, 1)]
    assert both == pytest.approx(0.25 * parts[0] + 0.75 * parts[1], abs=1e-12)
    assert entity_score(t, f, w) == pytest.approx(0.5 * sum(parts), abs=1e-12)
    with pytest.raises(ValueError):
        entity_score(t[0], KeyBlock(0, np.zeros((5, 2, 3)), np.zeros((5, 2, 3))), w)
    with pytest.raises(ValueError):
        entity_score(t[0], f[0], build_token_weights("x", [], [], 4))
    with pytest.raises(ValueError):
        ScoringConfig(layer_weights={0: 0.5})
    with pytest.raises(ValueError):
        ScoringConfig(lam=1.5)


def test_keyblock_validation():
    with pytest.raises(ValueError):
        KeyBlock(0, np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        KeyBlock(0, np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))
    with pytest.raises(ValueError):
        KeyBlock(0, np.full((1, 1, 1), np.nan), np.zeros((1, 1, 1)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_scale_covariance(seed, c):
    rng = np.random.default_rng(seed)
    kt = rng.standard_normal((4, 2, 3))
    frames = [rng.standard_normal((5, 2, 3)) for _ in range(3)]
    w = build_token_weights("x", [], [], 4)
    text = KeyBlock(0, kt, kt)
    base = [entity_score(text, KeyBlock(0, f, f), w) for f in frames]
    scaled = [entity_score(text, KeyBlock(0, c * f, c * f), w) for f in frames]
    np.testing.assert_allclose(scaled, [c * b for b in base], rtol=1e-9, atol=1e-12)
    if len(set(np.round(base, 9))) == len(base):
        assert int(np.argmax(normalize_entity_scores(base))) == int(np.argmax(normalize_entity_scores(scaled)))


# -- normalization / fusion / selection ---------------------------------------

def test_normalize_entity_scores():
    assert normalize_entity_scores([1, 2, 3]) == [0, 0.5, 1]
    assert normalize_entity_scores([4, 4, 4]) == [0.5, 0.5, 0.5]
    assert normalize_entity_scores([7]) == [0.5]
    with pytest.raises(ValueError):
        normalize_entity_scores([])


def test_fuse_score():
    assert fuse_score(1, 0, 0.3) == pytest.approx(0.7, abs=1e-15)
    assert fuse_score(0, 1, 0.3) == pytest.approx(0.3, abs=1e-15)
    for lam in (0.0, 0.3, 0.77, 1.0):
        assert fuse_score(0.5, 0.5, lam) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_fusion_bounds(e, v, lam):
    assert 0.0 <= fuse_score(e, v, lam) <= 1.0


def test_select_archive_frame():
    assert select_archive_frame(list(zip("abc", [0.2, 0.9, 0.4]))) == "b"
    assert select_archive_frame([("a", 0.5), ("b", 0.5)]) == "a"
    assert select_archive_frame([("only", 0.1)]) == "only"
    with pytest.raises(ValueError):
        select_archive_frame([])


# -- retrieval ----------------------------------------------------------------

def test_greedy_spec_example():
    f1, f2, f3 = frame(1, {1}, 0.9), frame(2, {2}, 0.8), frame(3, {1, 2}, 0.5)
    mem = greedy_retrieve([f1, f2, f3], {1, 2}, 4)
    assert mem.frame_ids == [1, 3]
    assert mem.covered_ids == {1, 2}


def test_greedy_single_id_and_empty():
    assert greedy_retrieve([frame(1, {1}, 0.4), frame(2, {1}, 0.7)], {1}, 4).frame_ids == [2]
    empty = greedy_retrieve(FrameArchive(), {1, 2}, 4)
    assert empty.frame_ids == [] and empty.assembled_kv == [] and empty.uncovered_ids == {1, 2}
    with pytest.raises(ValueError):
        greedy_retrieve([], {1}, 0)


def test_greedy_tie_breaks():
    # equal coverage and entity score: the later frame wins
    assert greedy_retrieve([frame(1, {1}, 0.5), frame(2, {1}, 0.5)], {1}, 4).frame_ids == [2]


def test_greedy_repair_counterexample():
    frames = [frame(1, {1, 2}, 0.9), frame(2, {3, 4}, 0.1), frame(3, {1, 3}, 0.95), frame(4, {2}, 0.1), frame(5, {4}, 0.1)]
    # {1,3} is picked first (tie on coverage, higher score) and then no single frame finishes within cap 2
    mem = greedy_retrieve(frames, {1, 2, 3, 4}, 2)
    assert mem.repaired and mem.frame_ids == [1, 2] and mem.covered_ids == {1, 2, 3, 4}


def test_greedy_minimum_two_and_unknown_ids():
    frames = [frame(1, {1, 2}, 0.5, fused=0.2), frame(2, {3}, 0.1, fused=0.9), frame(3, {3}, 0.1, fused=0.1)]
    mem = greedy_retrieve(frames, {1, 2, 9}, 4)
    assert mem.frame_ids == [1, 2]
    assert mem.uncovered_ids == {9}
    assert greedy_retrieve(frames, {1, 2}, 1).frame_ids == [1]


def _brute_force_cases():
    rng = np.random.default_rng(7)
    for _ in range(400):
        n_frames = int(rng.integers(1, 9))
        n_ids = int(rng.integers(1, 5))
        frames = []
        for fid in range(1, n_frames + 1):
            ids = {i for i in range(1, n_ids + 1) if rng.random() < 0.4}
            frames.append(frame(fid, ids, float(rng.random()), float(rng.random())))
        active = {i for i in range(1, n_ids + 1) if rng.random() < 0.8} or {1}
        yield frames, active, int(rng.integers(1, 5))


def test_greedy_feasibility_random():
    for frames, active, cap in _brute_force_cases():
        mem = greedy_retrieve(frames, active, cap)
        coverable = active & set().union(*(f.entity_ids for f in frames))
        assert len(mem) <= cap
        orders = [f.temporal_order for f in frames if f.frame_id in mem.frame_ids]
        assert orders == sorted(orders)
        if refimpl.covers_within([f.entity_ids for f in frames], coverable, cap):
            assert mem.covered_ids == coverable
        if len(active) >= 2 and len(frames) >= 2 and cap >= 2:
            assert len(mem) >= 2


def test_assemble_memory_kv():
    a, b = frame(1, {1}, order=5, tokens=4), frame(2, {1}, order=2, tokens=4)
    blocks = assemble_memory_kv([a, b])
    assert len(blocks) == 1 and blocks[0].tokens == 8
    np.testing.assert_array_equal(blocks[0].keys[:4], b.kv[0].keys)
    np.testing.assert_array_equal(blocks[0].keys[4:], a.kv[0].keys)
    assert assemble_memory_kv([]) == []
    odd = frame(3, {1})
    odd.kv = [KeyBlock(0, np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))]
    with pytest.raises(ValueError):
        assemble_memory_kv([a, odd])


# -- archive ------------------------------------------------------------------

def test_archive_invariants():
    arc = FrameArchive()
    arc.append(frame(1, {1}))
    with pytest.raises(ValueError):
        arc.append(frame(1, {1}, order=9))
    with pytest.raises(ValueError):
        arc.append(frame(2, {1}, order=0))
    with pytest.raises(KeyError):
        arc.get(5)


def test_archive_export_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arc = FrameArchive()
    for fid in (1, 2, 3):
        f = frame(fid, {fid, 1}, 0.25 * fid)
        k = rng.standard_normal((4, 2, 3)).astype(np.float32).astype(np.float64)
        f.kv = [KeyBlock(0, k, 2 * k)]
        arc.append(f)
    arc.export(tmp_path / "archive.json")
    assert (tmp_path / "archive.kv.bin").exists()
    back = FrameArchive.load(tmp_path / "archive.json")
    assert back.metadata() == arc.metadata()
    for a, b in zip(arc, back):
        np.testing.assert_array_equal(a.kv[0].keys, b.kv[0].keys)
        np.testing.assert_array_equal(a.kv[0].values, b.kv[0].values)
    meta_only = FrameArchive.load(tmp_path / "archive.json", with_kv=False)
    assert all(f.kv == [] for f in meta_only)
