"""Tour of the search space: seed architectures, shapes, repair and the f2 score.

Run:  python demos/01_search_space.py
"""

import numpy as np

from cdnas import genome
from cdnas.genome import H_E, H_S, op

# Four classic diagnostic functions, written as trees over the embeddings
# H_S (student), H_E (exercise) and H_C (the exercise's Q-matrix row).
for name in genome.SEED_MODELS:
    tree = genome.seed_tree(name)
    m = genome.metrics(tree)
    print(f"{name:5s} {genome.canonical_key(tree)}")
    print(f"      root={genome.root_shape(tree).value:6s} depth={m.depth} breadth={m.breadth} "
          f"num_c={m.num_c} f2={genome.interpretability(tree):.5f}")

# A scalar can't feed Mean; repair swaps in a shape-agnostic operator
# and keeps the topology.
broken = op("Mean", op("Sum", H_S))
print("\ninfeasible node ids:", genome.infer_shapes(broken)[1])
fixed = genome.repair(broken, np.random.default_rng(0))
print("repaired:", genome.canonical_key(fixed))

# Shallow and broad beats deep and narrow.
rng = np.random.default_rng(1)
trees = [genome.random_tree((2, 6), rng) for _ in range(6)]
for t in sorted(trees, key=genome.interpretability, reverse=True):
    print(f"{genome.interpretability(t):.5f}  {genome.canonical_key(t)}")

# Graphviz source for the MF cell; pipe into `dot -Tpng` to draw it.
print()
print(genome.to_dot(op("Sum", op("Mul", H_S, H_E)), name="mf"))
