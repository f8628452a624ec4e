"""Step through identity-aware retrieval for one session.

Shows the registry, what got archived from which chunk, and which frames
each prompt pulled back into memory.

    python3 demos/retrieval_walkthrough.py --seed 0
"""

import argparse

from idstream.config import default_schedule
from idstream.memory import greedy_retrieve
from idstream.pipeline import run_session


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = run_session(default_schedule(), seed=args.seed)
    print("registry:")
    for gid, entry in out.registry.entries.items():
        print(f"  {entry.describe()}")

    print("\narchive (frame <- chunk, source, ids, fused score):")
    for f in out.archive:
        print(f"  {f.frame_id:>2} <- {f.chunk_index:>2}  {f.source:<13} {sorted(f.entity_ids)}  {f.fused_score:.3f}")

    print("\nper-prompt memory:")
    for p in out.prompts:
        print(f"  prompt {p['prompt_index']}: ids {p['active_ids']} -> frames {p['memory_frame_ids']}"
              f"{'  uncovered ' + str(p['uncovered_ids']) if p['uncovered_ids'] else ''}")

    # the final archive answering a query for both characters
    mem = greedy_retrieve(out.archive, [1, 2], cap=4, with_kv=False)
    print(f"\nquery ids [1, 2] on the final archive -> frames {mem.frame_ids}, covered {sorted(mem.covered_ids)}")


if __name__ == "__main__":
    main()
