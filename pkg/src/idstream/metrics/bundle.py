"""Measurement bundles: JSON (optionally with float32 sidecars) -> validated inputs -> report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .._binio import read_arrays
from . import scores as S
from .aggregation import planner_valid, planner_weights

FEATURES_PER_SEGMENT = 5
UNIT_TOL = 1e-6

KNOWN_FIELDS = {
    "segment_count", "planner_raw", "sc_features", "bc_features", "tf_inputs", "ms_inputs",
    "vtss_raw", "bs_triples", "cac_keep", "clc_groups", "clc_similarities", "eg_entities",
    "dt_pairs", "vlm_judge",
}


class BundleError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"bundle field '{field_name}': {message}")
        self.field = field_name


@dataclass
class MeasurementBundle:
    segment_count: int
    planner_raw: Optional[list]
    sc_features: list
    bc_features: list
    tf_inputs: list
    ms_inputs: list
    vtss_raw: list
    bs_triples: list
    cac_keep: list
    clc_groups: dict
    eg_entities: list
    dt_pairs: list
    vlm_segments: list
    vlm_overall: int
    clc_similarities: Optional[dict] = None
    notes: list = field(default_factory=list)


class _Resolver:
    def __init__(self, base_dir: Path):
        self.base_dir = base_dir
        self._cache: dict[str, list] = {}

    def __call__(self, value: Any, name: str) -> Any:
        if isinstance(value, dict) and "$sidecar" in value:
            path = str(value["$sidecar"])
            if path not in self._cache:
                try:
                    self._cache[path] = read_arrays(self.base_dir / path)
                except (OSError, ValueError) as exc:
                    raise BundleError(name, f"cannot read sidecar {path}: {exc}") from exc
            arrays = self._cache[path]
            index = value.get("index", 0)
            if not isinstance(index, int) or not 0 <= index < len(arrays):
                raise BundleError(name, f"sidecar index {index!r} out of range")
            return arrays[index]
        return value


def _array(value, name: str, ndim: Optional[int] = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise BundleError(name, "expected a numeric array") from exc
    if ndim is not None and arr.ndim != ndim:
        raise BundleError(name, f"expected {ndim} dimensions, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise BundleError(name, "non-finite values")
    return arr


def _list(data: dict, name: str, length: int) -> list:
    value = data.get(name)
    if not isinstance(value, list):
        raise BundleError(name, "missing or not a list")
    if len(value) != length:
        raise BundleError(name, f"expected {length} entries, got {len(value)}")
    return value


def _unit_features(data: dict, name: str, T: int, resolve: _Resolver) -> list[np.ndarray]:
    raw = resolve(data.get(name), name)
    if isinstance(raw, np.ndarray):
        raw = list(raw)
    if not isinstance(raw, list) or len(raw) != T:
        raise BundleError(name, f"expected {T} segments")
    out = []
    for i, seg in enumerate(raw):
        where = f"{name}[{i}]"
        arr = _array(resolve(seg, where), where, 2)
        if arr.shape[0] != FEATURES_PER_SEGMENT:
            raise BundleError(where, f"expected {FEATURES_PER_SEGMENT} vectors, got {arr.shape[0]}")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise BundleError(where, "feature vectors must be unit-normalized")
        if out and arr.shape[1] != out[0].shape[1]:
            raise BundleError(where, "feature dimension differs from segment 0")
        out.append(arr)
    return out


def _unit_interval(x, name: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not 0.0 <= x <= 1.0:
        raise BundleError(name, "expected a number in [0, 1]")
    return float(x)


def _nonneg(x, name: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x) or x < 0:
        raise BundleError(name, "expected a non-negative number")
    return float(x)


def parse_bundle(data: dict, base_dir: str | Path = ".") -> MeasurementBundle:
    """Validate a bundle document; raises :class:`BundleError` on the first bad field."""
    if not isinstance(data, dict):
        raise BundleError("<root>", "expected a JSON object")
    unknown = sorted(set(data) - KNOWN_FIELDS)
    if unknown:
        raise BundleError(unknown[0], "unknown field")
    resolve = _Resolver(Path(base_dir))
    T = data.get("segment_count", 6)
    if isinstance(T, bool) or not isinstance(T, int) or T < 2:
        raise BundleError("segment_count", "expected an integer >= 2")

    notes = []
    planner = data.get("planner_raw")
    if planner is not None and not planner_valid(planner, T):
        notes.append("planner_raw malformed; uniform weights used")
    elif planner is None or planner == []:
        notes.append("planner_raw absent; uniform weights used")
        planner = None

    sc = _unit_features(data, "sc_features", T, resolve)
    bc = _unit_features(data, "bc_features", T, resolve)

    tf = []
    for i, seg in enumerate(_list(data, "tf_inputs", T)):
        where = f"tf_inputs[{i}]"
        if not isinstance(seg, dict):
            raise BundleError(where, "expected an object")
        entry = {}
        for key in ("frames", "flow_fwd", "flow_bwd"):
            if key not in seg:
                raise BundleError(f"{where}.{key}", "missing")
            entry[key] = _array(resolve(seg[key], f"{where}.{key}"), f"{where}.{key}")
        frames = entry["frames"]
        if frames.ndim not in (3, 4) or len(frames) < 2:
            raise BundleError(f"{where}.frames", "expected (K, H, W[, 3]) with K >= 2")
        expect = (len(frames) - 1, *frames.shape[1:3], 2)
        for key in ("flow_fwd", "flow_bwd"):
            if entry[key].shape != expect:
                raise BundleError(f"{where}.{key}", f"expected shape {expect}, got {entry[key].shape}")
        tf.append(entry)

    ms = []
    for i, seg in enumerate(_list(data, "ms_inputs", T)):
        where = f"ms_inputs[{i}]"
        if not isinstance(seg, dict):
            raise BundleError(where, "expected an object")
        if "error" in seg:
            ms.append({"error": _nonneg(seg["error"], f"{where}.error")})
            continue
        if "originals" not in seg or "interpolated" not in seg:
            raise BundleError(where, "needs 'error' or 'originals' + 'interpolated'")
        a = _array(resolve(seg["originals"], f"{where}.originals"), f"{where}.originals")
        b = _array(resolve(seg["interpolated"], f"{where}.interpolated"), f"{where}.interpolated")
        if a.shape != b.shape or a.ndim < 3:
            raise BundleError(f"{where}.interpolated", f"shape {b.shape} does not match originals {a.shape}")
        ms.append({"originals": a, "interpolated": b})

    vtss_raw = [float(_array(x, f"vtss_raw[{i}]")) for i, x in enumerate(_list(data, "vtss_raw", T))]

    bs = []
    for i, t in enumerate(_list(data, "bs_triples", T - 1)):
        where = f"bs_triples[{i}]"
        if not isinstance(t, list) or len(t) != 3:
            raise BundleError(where, "expected [m_minus, m_boundary, m_plus]")
        bs.append([_nonneg(x, where) for x in t])

    keep = _list(data, "cac_keep", T - 1)
    for i, k in enumerate(keep):
        if not isinstance(k, bool):
            raise BundleError(f"cac_keep[{i}]", "expected a boolean")

    groups = data.get("clc_groups", {})
    if not isinstance(groups, dict):
        raise BundleError("clc_groups", "expected an object")
    for entity, occ in groups.items():
        where = f"clc_groups.{entity}"
        if not isinstance(occ, list) or any(isinstance(i, bool) or not isinstance(i, int) or not 1 <= i <= T for i in occ):
            raise BundleError(where, f"expected a list of segment indices in 1..{T}")
        if occ != sorted(set(occ)):
            raise BundleError(where, "occurrences must be strictly increasing")
    sims = data.get("clc_similarities")
    if sims is not None:
        if not isinstance(sims, dict):
            raise BundleError("clc_similarities", "expected an object")
        for entity, values in sims.items():
            where = f"clc_similarities.{entity}"
            occ = groups.get(entity)
            if occ is None:
                raise BundleError(where, "entity not in clc_groups")
            if not isinstance(values, list) or len(values) != max(0, len(occ) - 1):
                raise BundleError(where, f"expected {max(0, len(occ) - 1)} similarities")
            for v in values:
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not -1.0 <= v <= 1.0:
                    raise BundleError(where, "similarities must lie in [-1, 1]")

    eg_segments = []
    for i, ents in enumerate(_list(data, "eg_entities", T)):
        where = f"eg_entities[{i}]"
        if not isinstance(ents, list):
            raise BundleError(where, "expected a list of [presence, match] pairs")
        pairs = []
        for j, p in enumerate(ents):
            if not isinstance(p, list) or len(p) != 2:
                raise BundleError(f"{where}[{j}]", "expected [presence, match]")
            pairs.append([_unit_interval(x, f"{where}[{j}]") for x in p])
        eg_segments.append(pairs)

    dt_pairs = []
    for i, p in enumerate(_list(data, "dt_pairs", T - 1)):
        where = f"dt_pairs[{i}]"
        if not isinstance(p, list) or len(p) != 2:
            raise BundleError(where, "expected [d_prompt, d_video]")
        dt_pairs.append([_nonneg(x, where) for x in p])

    judge = data.get("vlm_judge")
    if not isinstance(judge, dict):
        raise BundleError("vlm_judge", "expected {segments, overall}")
    q_seg = judge.get("segments")
    if not isinstance(q_seg, list) or len(q_seg) != T:
        raise BundleError("vlm_judge.segments", f"expected {T} scores")
    for i, q in enumerate([*q_seg, judge.get("overall")]):
        where = f"vlm_judge.segments[{i}]" if i < T else "vlm_judge.overall"
        if isinstance(q, bool) or not isinstance(q, int) or not 1 <= q <= 100:
            raise BundleError(where, "expected an integer in [1, 100]")

    return MeasurementBundle(
        segment_count=T,
        planner_raw=planner,
        sc_features=sc,
        bc_features=bc,
        tf_inputs=tf,
        ms_inputs=ms,
        vtss_raw=vtss_raw,
        bs_triples=bs,
        cac_keep=list(keep),
        clc_groups={k: list(v) for k, v in groups.items()},
        eg_entities=eg_segments,
        dt_pairs=dt_pairs,
        vlm_segments=list(q_seg),
        vlm_overall=judge["overall"],
        clc_similarities=sims,
        notes=notes,
    )


def load_bundle(path: str | Path) -> MeasurementBundle:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise BundleError("<file>", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BundleError("<file>", f"invalid JSON: {exc}") from exc
    return parse_bundle(data, path.parent)


def score_bundle(bundle: MeasurementBundle) -> S.MetricReport:
    T = bundle.segment_count
    w = planner_weights(bundle.planner_raw, T)
    diag: dict[str, Any] = {"weights": w.tolist(), "notes": list(bundle.notes)}
    metrics: dict[str, Optional[float]] = {}

    metrics["sc"], diag["sc"] = S.consistency_score(bundle.sc_features, w)
    metrics["bc"], diag["bc"] = S.consistency_score(bundle.bc_features, w)
    metrics["tf"], diag["tf"] = S.temporal_flicker(bundle.tf_inputs, w)
    metrics["ms"], diag["ms"] = S.motion_smoothness(bundle.ms_inputs, w)
    metrics["vtss"], diag["vtss"] = S.vtss(bundle.vtss_raw, w)
    metrics["bs"], diag["bs"] = S.boundary_smoothness(bundle.bs_triples, w)
    medoids = [f[S.medoid_index(f)] for f in bundle.sc_features]
    metrics["cac"], diag["cac"] = S.cac(bundle.cac_keep, medoids, w)
    metrics["clc"], diag["clc"] = S.clc(bundle.clc_groups, bundle.clc_similarities, medoids, w)
    metrics["eg"], diag["eg"] = S.eg(bundle.eg_entities, w)
    metrics["dt"], diag["dt"] = S.dt(bundle.dt_pairs, w)
    metrics["vlm"], diag["vlm"] = S.vlm_align(bundle.vlm_segments, bundle.vlm_overall, w)

    for name in ("cac", "clc"):
        if metrics[name] is None:
            diag["notes"].append(f"{name} absent and excluded from the temporal group")
    groups, overall = S.group_and_overall(metrics)
    return S.MetricReport(metrics, groups, overall, diag)
