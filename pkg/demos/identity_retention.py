"""Memory on vs. off on the default six-prompt schedule.

The woman is on screen for prompts 1-2, gone for 3-5 and back for 6.
Prints her per-prompt frame/identity cosine for both sessions.

    python3 demos/identity_retention.py [--seeds 5]
"""

import argparse

import numpy as np

from idstream.config import default_schedule
from idstream.pipeline import SessionConfig, run_session


def per_prompt(out, name):
    rows = {}
    for c in out.chunks:
        if name in c["identity_cosine"]:
            rows.setdefault(c["prompt_index"], []).append(c["identity_cosine"][name])
    return {p: float(np.mean(v)) for p, v in rows.items()}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--entity", default="woman")
    args = ap.parse_args()

    for seed in range(args.seeds):
        on = run_session(default_schedule(), seed=seed)
        off = run_session(default_schedule(), seed=seed, config=SessionConfig(memory_enabled=False))
        a, b = per_prompt(on, args.entity), per_prompt(off, args.entity)
        cells = "  ".join(f"p{p}: {a[p]:+.2f}/{b[p]:+.2f}" for p in sorted(a))
        print(f"seed {seed}  {cells}   (memory on / off)")
        last = max(a)
        print(f"         memory frames for prompt {last}: {on.prompts[last - 1]['memory_frame_ids']}, "
              f"refreshed {on.prompts[last - 1]['refreshed']}")


if __name__ == "__main__":
    main()
