"""Train the four seed architectures on planted matrix-factorization data.

The synthetic responses come from sigmoid(<w_s, w_e>), so inner-product
models should recover most of the signal while purely additive ones cannot.

Run:  python demos/02_train_baselines.py
"""

import time

from cdnas import data, genome, training

planted = data.make_planted_mf(seed=0)
ds = data.build_dataset(planted.logs, planted.q, seed=0)
test = ds.split("test")
truth = training.auc_score(planted.true_probability(test.student, test.exercise), test.score)
print(f"N={ds.N} M={ds.M} K={ds.K}; AUC of the true probabilities on test: {truth:.3f}\n")

cfg = training.TrainConfig(epochs=30)
print(f"{'model':5s} {'mode':13s} {'val AUC':>8s} {'test AUC':>8s} {'ACC':>6s} {'RMSE':>6s} epochs  time")
for name in genome.SEED_MODELS:
    model = training.assemble(genome.seed_tree(name), ds.N, ds.q.matrix, seed=1)
    start = time.perf_counter()
    result = training.train(model, ds, cfg)
    report = training.evaluate_split(model, ds, "test")
    print(f"{name:5s} {model.output_mode:13s} {result.best_val_auc:8.3f} {report.auc:8.3f} "
          f"{report.acc:6.3f} {report.rmse:6.3f} {len(result.trace):6d} {time.perf_counter() - start:5.1f}s")
