"""Regenerate golden_bundle.json, its sidecar, and golden_report.json.

The report is computed with the loop-based reference in tests/refimpl.py,
not with the package. Run from the repository root:

    python3 tests/data/make_golden.py
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))
import refimpl  # noqa: E402

T, K, H, W = 6, 4, 6, 6


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def write_sidecar(path, arrays):
    with open(path, "wb") as fh:
        fh.write(b"F32A" + struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.ascontiguousarray(a, dtype="<f4")
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def main():
    rng = np.random.default_rng(20240601)
    sc, bc = [], []
    subject = rng.standard_normal(8)
    scene = rng.standard_normal(8)
    for i in range(T):
        drift = 0.4 if i in (2, 3, 4) else 0.1
        sc.append(unit_rows(subject + drift * rng.standard_normal((5, 8)) + (i in (2, 3)) * rng.standard_normal(8)))
        bc.append(unit_rows(scene + 0.3 * rng.standard_normal((5, 8))))
    # float32 round trip so the reference sees exactly what the loader reads
    sc = [unit_rows(s.astype(np.float32).astype(np.float64)) for s in sc]
    bc = [unit_rows(b.astype(np.float32).astype(np.float64)) for b in bc]

    frames, fwd, bwd = [], [], []
    for i in range(T):
        base = rng.uniform(0, 255, (H, W))
        seg = [base]
        for t in range(K - 1):
            seg.append(np.clip(seg[-1] + rng.normal(0, 4 + 2 * i, (H, W)), 0, 255))
        frames.append(np.array(seg, dtype=np.float32))
        shift = np.zeros((K - 1, H, W, 2), dtype=np.float32)
        shift[..., 0] = [0.0, 0.5, -1.0][i % 3]
        shift[..., 1] = [0.0, 0.25, 1.0][i % 3]
        fwd.append(shift)
        back = -shift.copy()
        back[:, :2, :2, :] += 3.0  # a small inconsistent patch
        bwd.append(back.astype(np.float32))
    arrays = []
    tf_inputs = []
    for i in range(T):
        tf_inputs.append({
            "frames": {"$sidecar": "golden_bundle.bin", "index": len(arrays)},
            "flow_fwd": {"$sidecar": "golden_bundle.bin", "index": len(arrays) + 1},
            "flow_bwd": {"$sidecar": "golden_bundle.bin", "index": len(arrays) + 2},
        })
        arrays += [frames[i], fwd[i], bwd[i]]
    write_sidecar(HERE / "golden_bundle.bin", arrays)

    ms_inputs = []
    for i in range(T):
        if i % 2:
            ms_inputs.append({"error": round(float(rng.uniform(0.5, 6.0)), 4)})
        else:
            orig = rng.integers(0, 255, (2, 3, 3, 3)).tolist()
            interp = (np.array(orig) + rng.integers(-6, 7, (2, 3, 3, 3))).tolist()
            ms_inputs.append({"originals": orig, "interpolated": interp})

    doc = {
        "segment_count": T,
        "planner_raw": [30, 10, 15, 15, 10, 20],
        "sc_features": [s.tolist() for s in sc],
        "bc_features": [b.tolist() for b in bc],
        "tf_inputs": tf_inputs,
        "ms_inputs": ms_inputs,
        "vtss_raw": [0.031, 0.052, 0.044, 0.067, 0.059, 0.038],
        "bs_triples": [[1.2, 1.5, 1.1], [0.8, 3.0, 0.9], [2.0, 2.1, 2.2], [0.0, 0.4, 0.1], [1.5, 1.0, 1.7]],
        "cac_keep": [True, False, True, True, False],
        "clc_groups": {"woman": [1, 6], "man": [3, 4, 5], "dog": [2]},
        "clc_similarities": {"man": [0.81, 0.66]},
        "eg_entities": [[[1.0, 0.8]], [[0.9, 0.7], [0.6, 1.0]], [], [[1.0, 1.0]], [[0.5, 0.5], [1.0, 0.4]], [[0.95, 0.9]]],
        "dt_pairs": [[0.12, 0.01], [0.45, 0.08], [0.25, 0.03], [0.05, 0.2], [0.6, 0.0]],
        "vlm_judge": {"segments": [82, 75, 90, 64, 70, 88], "overall": 77},
    }
    (HERE / "golden_bundle.json").write_text(json.dumps(doc, indent=1) + "\n")

    lum = [
        (f.astype(np.float64).tolist(), fw.astype(np.float64).tolist(), bw.astype(np.float64).tolist())
        for f, fw, bw in zip(frames, fwd, bwd)
    ]
    report = refimpl.score_bundle(doc, lum)
    (HERE / "golden_report.json").write_text(json.dumps(report, indent=2) + "\n")


if __name__ == "__main__":
    main()
