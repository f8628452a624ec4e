"""The eleven benchmark scores plus group and overall means.

Every function takes already-extracted measurements (features, flows,
judge outputs) and segment weights ``w`` from :func:`planner_weights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .aggregation import agg_seg, agg_tr, percentile
from .flow import segment_flicker_error

GROUPS = {
    "quality": ("sc", "bc", "tf", "ms", "vtss"),
    "temporal": ("bs", "cac", "clc"),
    "instruction": ("eg", "dt", "vlm"),
}
METRICS = tuple(m for group in GROUPS.values() for m in group)

ALPHA_CONS = 0.34
TF_PARAMS = {"k_tf": 8, "rho_pair": 90.0, "rho_seg": 84.0, "tau": 0.5, "eps_fb": 1.0}
TAU_MS = 3.0
VTSS_LOW, VTSS_HIGH = 0.02, 0.075
BS_EPS, BS_LAMBDA = 0.02, 0.5
CAC_DELTA, CAC_KAPPA = 0.79, 2.0
CLC_DELTA, CLC_KAPPA, CLC_MIX = 0.58, 1.5, 0.7
EG_EMPTY = 0.5
DT_MU, DT_GATE, DT_ON, DT_OFF = 0.25, 0.05, 0.02, 0.06
VLM_ALPHA = 0.8


def _cos(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def remap(c: float, delta: float, kappa: float) -> float:
    """``clip((c - delta) / (1 - delta), 0, 1) ** kappa``."""
    return min(1.0, max(0.0, (c - delta) / (1.0 - delta))) ** kappa


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# -- consistency --------------------------------------------------------------

def medoid_index(vectors: np.ndarray) -> int:
    sims = vectors @ vectors.T
    totals = sims.sum(axis=1) - np.diag(sims)
    return int(np.argmax(totals))  # first maximum, i.e. lowest index on ties


def local_consistency(vectors: np.ndarray) -> float:
    n = len(vectors)
    pairs = [_cos(vectors[i], vectors[j]) for i in range(n) for j in range(i + 1, n)]
    return percentile(pairs, 25)


def consistency_score(features: Sequence[np.ndarray], w, alpha_cons: float = ALPHA_CONS) -> tuple[float, dict]:
    """Within-segment p25 similarity fused with adjacent and first-anchor medoid similarity."""
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    local = [local_consistency(f) for f in feats]
    medoids = [f[medoid_index(f)] for f in feats]
    adj = [_cos(medoids[i], medoids[i + 1]) for i in range(len(medoids) - 1)]
    anchor = [_cos(medoids[0], medoids[i]) for i in range(1, len(medoids))]
    c_adj, c_anchor = percentile(adj, 25), percentile(anchor, 25)
    score = alpha_cons * agg_seg(local, w) + (1 - alpha_cons) * (c_adj + c_anchor) / 2
    return score, {
        "local": local,
        "medoids": [medoid_index(f) for f in feats],
        "c_adj": c_adj,
        "c_anchor": c_anchor,
    }


# -- visual quality -----------------------------------------------------------

def temporal_flicker(tf_inputs: Sequence[dict], w, params: Optional[dict] = None) -> tuple[float, dict]:
    p = {**TF_PARAMS, **(params or {})}
    errors, details = [], []
    for seg in tf_inputs:
        e, info = segment_flicker_error(
            seg["frames"], seg["flow_fwd"], seg["flow_bwd"], p["rho_pair"], p["rho_seg"], p["eps_fb"]
        )
        errors.append(e)
        details.append(info)
    scores = [math.exp(-e / p["tau"]) for e in errors]
    return agg_seg(scores, w), {"errors": errors, "segments": details}


def interpolation_error(originals, interpolated) -> float:
    """Mean over midpoints of the mean absolute pixel/channel difference."""
    a = np.asarray(originals, dtype=np.float64)
    b = np.asarray(interpolated, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 3:
        raise ValueError(f"original/interpolated midpoints differ: {a.shape} vs {b.shape}")
    return float(np.mean([np.abs(x - y).mean() for x, y in zip(a, b)]))


def motion_smoothness(ms_inputs: Sequence[dict], w, tau: float = TAU_MS) -> tuple[float, dict]:
    errors = []
    for seg in ms_inputs:
        if "error" in seg:
            errors.append(float(seg["error"]))
        else:
            errors.append(interpolation_error(seg["originals"], seg["interpolated"]))
    return agg_seg([math.exp(-e / tau) for e in errors], w), {"errors": errors}


def vtss(r: Sequence[float], w, low: float = VTSS_LOW, high: float = VTSS_HIGH) -> tuple[float, dict]:
    r_bar = agg_seg(r, w)
    return min(1.0, max(0.0, (r_bar - low) / (high - low))), {"r_bar": r_bar}


# -- temporal consistency -----------------------------------------------------

def boundary_smoothness(triples: Sequence[Sequence[float]], w, eps: float = BS_EPS, lam: float = BS_LAMBDA) -> tuple[float, dict]:
    scores = []
    for m_minus, m_b, m_plus in triples:
        m_bar = (m_minus + m_plus) / 2
        scores.append(math.exp(-abs(m_b - m_bar) / (eps + lam * m_bar)))
    return agg_tr(scores, w), {"transitions": scores}


def cac(keep: Sequence[bool], medoids: Sequence[np.ndarray], w, delta: float = CAC_DELTA, kappa: float = CAC_KAPPA) -> tuple[Optional[float], dict]:
    omega = {i: remap(_cos(medoids[i], medoids[i + 1]), delta, kappa) for i, k in enumerate(keep) if k}
    if not omega:
        return None, {"omega": []}
    return agg_tr(omega, w), {"omega": [i + 1 for i in omega], "transitions": list(omega.values())}


def clc(
    groups: dict[str, Sequence[int]],
    similarities: Optional[dict[str, Sequence[float]]],
    medoids: Optional[Sequence[np.ndarray]],
    w,
    delta: float = CLC_DELTA,
    kappa: float = CLC_KAPPA,
    mix: float = CLC_MIX,
) -> tuple[Optional[float], dict]:
    """Reappearance consistency against each entity's first occurrence.

    Occurrences are 1-based segment indices. Similarities default to the
    cosine between segment medoids.
    """
    w = np.asarray(w, dtype=np.float64)
    per_entity = {}
    for entity, occ in groups.items():
        occ = list(occ)
        if len(occ) < 2:
            continue
        targets = occ[1:]
        if similarities is not None and entity in similarities:
            sims = [float(c) for c in similarities[entity]]
        elif medoids is not None:
            sims = [_cos(medoids[occ[0] - 1], medoids[i - 1]) for i in targets]
        else:
            continue
        s = np.array([remap(c, delta, kappa) for c in sims])
        tw = np.array([w[i - 1] for i in targets])
        w_tilde = mix * tw / tw.sum() + (1 - mix) / len(targets)
        per_entity[entity] = float(w_tilde @ s)
    if not per_entity:
        return None, {"entities": {}}
    return float(np.mean(list(per_entity.values()))), {"entities": per_entity}


# -- instruction compliance ---------------------------------------------------

def eg(segments: Sequence[Sequence[Sequence[float]]], w, nu: float = EG_EMPTY) -> tuple[float, dict]:
    seg_scores = [float(np.mean([a * m for a, m in ents])) if ents else nu for ents in segments]
    return agg_seg(seg_scores, w), {"segments": seg_scores}


def dt_transition(d_p: float, d_v: float, mu=DT_MU, tau_gate=DT_GATE, tau_on=DT_ON, tau_off=DT_OFF) -> float:
    gamma = logistic((d_p - mu) / tau_gate)
    response = 1.0 - math.exp(-d_v / tau_on)
    stability = math.exp(-d_v / tau_off)
    return gamma * response + (1.0 - gamma) * stability


def dt(pairs: Sequence[Sequence[float]], w, **params) -> tuple[float, dict]:
    scores = [dt_transition(dp, dv, **params) for dp, dv in pairs]
    return agg_tr(scores, w), {"transitions": scores}


def vlm_align(q_segments: Sequence[int], q_overall: int, w, alpha: float = VLM_ALPHA) -> tuple[float, dict]:
    q_seg = agg_seg([q / 100 for q in q_segments], w)
    return alpha * q_seg + (1 - alpha) * q_overall / 100, {"q_seg": q_seg}


# -- report -------------------------------------------------------------------

@dataclass
class MetricReport:
    metrics: dict[str, Optional[float]]
    groups: dict[str, float]
    overall: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "groups": self.groups, "overall": self.overall, "diagnostics": self.diagnostics}

    def summary(self) -> str:
        """Human-readable table with scores scaled by 100."""
        lines = []
        for group, names in GROUPS.items():
            cells = []
            for m in names:
                v = self.metrics.get(m)
                cells.append(f"{m.upper()} {'absent' if v is None else f'{100 * v:.2f}'}")
            lines.append(f"{group:<12} {100 * self.groups[group]:6.2f}  | " + "  ".join(cells))
        lines.append(f"{'overall':<12} {100 * self.overall:6.2f}")
        return "\n".join(lines)


def group_and_overall(metrics: dict[str, Optional[float]]) -> tuple[dict[str, float], float]:
    groups = {}
    for group, names in GROUPS.items():
        present = [metrics[m] for m in names if metrics.get(m) is not None]
        if not present:
            raise ValueError(f"group {group} has no available metric")
        groups[group] = float(np.mean(present))
    return groups, float(np.mean([groups[g] for g in GROUPS]))
