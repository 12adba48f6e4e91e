"""A small evolutionary search on planted data, written out as a run directory.

Run:  python demos/03_mini_search.py [out_dir]
Takes about four minutes on one core.
"""

import sys
from pathlib import Path

from cdnas import data, evolve, training

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
planted = data.make_planted_mf(seed=0)
ds = data.build_dataset(planted.logs, planted.q, seed=0)

cfg = evolve.SearchConfig(pop=16, gen=10, train=training.TrainConfig(epochs=10), seed=0)


def progress(h):
    print(f"gen {h.generation:2d}  best f1 {h.best_f1:.4f}  front {h.front_size}  archive {h.archive_size}")


result = evolve.run_search(cfg, ds, on_generation=progress)

print("\nfinal front (validation AUC vs interpretability):")
for ind in result.front:
    print(f"  f1={ind.f1:.4f}  f2={ind.f2:.5f}  {ind.key}")

evolve.write_results(result, out)
print(f"\nwrote {out}/history.csv, archive.jsonl and front/")
