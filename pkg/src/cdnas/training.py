"""Turn a genome into a trainable model, train it, and score predictions."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import numcore as nc
from .data import ResponseDataset, batches
from .genome import GenomeTree, Leaf, Op, Shape, canonical_key, from_dict, get_node, infer_shapes, iter_nodes, to_dict
from .operators import LeafKind, OperatorKind

HIDDEN = (512, 256, 1)
P_MIN, P_MAX = 1e-7, 1 - 1e-7

SCALAR_DIRECT = "ScalarDirect"
VECTOR_FC_HEAD = "VectorFCHead"


class InfeasibleTreeError(ValueError):
    def __init__(self, infeasible):
        self.infeasible = list(infeasible)
        super().__init__(f"tree has infeasible nodes {self.infeasible}")


class UndefinedAUCError(ValueError):
    """Labels contain a single class; ``report`` still carries ACC and RMSE."""

    def __init__(self, report):
        self.report = report
        super().__init__("AUC is undefined for single-class labels")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.001
    batch_size: int = 128
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patience < 1 or self.batch_size < 1:
            raise ValueError("patience and batch_size must be >= 1")


@dataclass
class EvalReport:
    acc: float
    rmse: float
    auc: float
    n: int


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainResult:
    model: "CandidateModel"
    best_val_auc: float
    trace: list = field(default_factory=list)
    stop_reason: str = "completed"  # completed | patience | overflow


@dataclass
class CandidateModel:
    tree: GenomeTree
    store: nc.ParamStore
    output_mode: str
    q: np.ndarray
    n_students: int
    node_params: dict  # pre-order node id -> parameter name

    @property
    def dims(self) -> dict:
        M, K = self.q.shape
        return {"N": self.n_students, "M": M, "K": K, "D": K, "H": list(HIDDEN)}


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def assemble(tree: GenomeTree, n_students: int, q: np.ndarray, seed: int = 0) -> CandidateModel:
    """Fresh parameters for ``tree``; the FC head exists only for vector-valued roots."""
    shapes, infeasible = infer_shapes(tree)
    if infeasible:
        raise InfeasibleTreeError(infeasible)
    q = np.asarray(q, dtype=np.float64)
    M, D = q.shape
    rng = np.random.default_rng(seed)
    store = nc.ParamStore()
    store.add("W_S", _xavier(rng, n_students, D))
    store.add("W_E", _xavier(rng, M, D))
    node_params = {}
    for idx, (_, node) in enumerate(iter_nodes(tree)):
        if isinstance(node, Op) and node.kind.has_params:
            name = f"node{idx}.W"
            fan_in = 2 * D if node.kind is OperatorKind.CONCAT else D
            fan_out = 1 if node.kind is OperatorKind.FFN else D
            store.add(name, _xavier(rng, fan_in, fan_out))
            node_params[idx] = name
    mode = VECTOR_FC_HEAD if shapes[0] is Shape.VECTOR else SCALAR_DIRECT
    if mode == VECTOR_FC_HEAD:
        # Nonnegative weights with biases cancelling the mean incoming activation
        # (0 for the cell output, 1/2 after a sigmoid); a sign-projected init
        # saturates the 512/256 layers and the head never leaves p = const.
        fan_in, mean_in = D, 0.0
        for i, width in enumerate(HIDDEN, start=1):
            W = np.abs(_xavier(rng, fan_in, width))
            store.add(f"fc{i}.W", W, monotonic=True)
            store.add(f"fc{i}.b", -mean_in * W.sum(axis=0))
            fan_in, mean_in = width, 0.5
    return CandidateModel(tree, store, mode, q, n_students, node_params)


def cell_forward(model: CandidateModel, students, exercises, tape: nc.Tape,
                 path: tuple = ()) -> nc.Value:
    """Evaluate the tree (or the subtree at ``path``) on a batch; ``(B,)`` or ``(B, D)``."""
    store = model.store
    leaves = {}

    def leaf(kind):
        if kind not in leaves:
            if kind is LeafKind.H_S:
                leaves[kind] = nc.gather(tape.param(store, "W_S"), students)
            elif kind is LeafKind.H_E:
                leaves[kind] = nc.gather(tape.param(store, "W_E"), exercises)
            else:
                leaves[kind] = tape.input(model.q[exercises])
        return leaves[kind]

    ids = {p: i for i, (p, _) in enumerate(iter_nodes(model.tree))}

    def visit(node, p):
        if isinstance(node, Leaf):
            return leaf(node.kind)
        args = [visit(c, p + (i,)) for i, c in enumerate(node.children)]
        params = None
        if ids[p] in model.node_params:
            params = {"W": tape.param(store, model.node_params[ids[p]])}
        return nc.apply_primitive(node.kind, args, params, tape)

    return visit(get_node(model.tree, path), path)


def head_forward(model: CandidateModel, y: nc.Value, tape: nc.Tape) -> nc.Value:
    """Monotonic FC1 -> Sigmoid -> FC2 -> Sigmoid -> FC3; returns the pre-sigmoid logit."""
    h = y
    n = len(HIDDEN)
    for i in range(1, n + 1):
        h = nc.linear(h, tape.param(model.store, f"fc{i}.W"), tape.param(model.store, f"fc{i}.b"))
        if i < n:
            h = nc.sigmoid(h)
    return nc.squeeze_last(h)


def logit_forward(model: CandidateModel, students, exercises, tape: nc.Tape) -> nc.Value:
    """Log-odds of a correct response.

    A Sigmoid root contributes its input as the logit, so it is never squashed
    twice; any other scalar root is itself the logit.
    """
    if model.output_mode == VECTOR_FC_HEAD:
        return head_forward(model, cell_forward(model, students, exercises, tape), tape)
    if model.tree.kind is OperatorKind.SIGMOID:
        return cell_forward(model, students, exercises, tape, path=(0,))
    return cell_forward(model, students, exercises, tape)


def predict(model: CandidateModel, students, exercises, chunk: int = 4096) -> np.ndarray:
    """Probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    students = np.asarray(students, dtype=np.int64)
    exercises = np.asarray(exercises, dtype=np.int64)
    out = [
        expit(logit_forward(model, students[i:i + chunk], exercises[i:i + chunk], nc.Tape()).data)
        for i in range(0, len(students), chunk)
    ]
    return np.clip(np.concatenate(out), P_MIN, P_MAX) if out else np.zeros(0)


def head_predict(model: CandidateModel, y) -> np.ndarray:
    """Probabilities the FC head assigns to given tree outputs ``y`` of shape ``(B, D)``."""
    if model.output_mode != VECTOR_FC_HEAD:
        raise ValueError("model has no FC head")
    tape = nc.Tape()
    z = head_forward(model, tape.input(np.atleast_2d(y)), tape)
    return np.clip(expit(z.data), P_MIN, P_MAX)


# --- metrics -------------------------------------------------------------------


def auc_score(preds, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(preds)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(preds, labels) -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds and labels must be non-empty and of equal length")
    acc = float(np.mean((preds >= 0.5) == (labels == 1)))
    rmse = float(np.sqrt(np.mean((preds - labels) ** 2)))
    try:
        auc = auc_score(preds, labels)
    except ValueError:
        raise UndefinedAUCError(EvalReport(acc, rmse, float("nan"), int(preds.size))) from None
    return EvalReport(acc, rmse, auc, int(preds.size))


def _safe_auc(preds, labels) -> float:
    try:
        return auc_score(preds, labels)
    except ValueError:
        return 0.5


# --- training ------------------------------------------------------------------


def train(model: CandidateModel, dataset: ResponseDataset, cfg: TrainConfig) -> TrainResult:
    """Adam on binary cross-entropy with early stopping on validation AUC.

    The returned model holds the parameters of the best-AUC epoch.  A numeric
    overflow ends training with the best state seen so far.
    """
    tr = dataset.split("train")
    va = dataset.split("val")
    y_train = tr.score.astype(np.float64)
    initial = model.store.snapshot()
    best_auc, best_state, stale = -np.inf, None, 0
    trace, reason = [], "completed"
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        try:
            for idx in batches(len(tr), cfg.batch_size, cfg.seed, epoch):
                tape = nc.Tape()
                loss = nc.bce_with_logits(logit_forward(model, tr.student[idx], tr.exercise[idx], tape), y_train[idx])
                grads = nc.param_grads(tape, nc.backward(tape, loss))
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise nc.NumericOverflowError("non-finite gradient")
                nc.adam_step(model.store, grads, cfg.lr)
                total += float(loss.data) * len(idx)
            val_auc = _safe_auc(predict(model, va.student, va.exercise), va.score)
        except nc.NumericOverflowError:
            reason = "overflow"
            break
        trace.append(EpochRecord(epoch, total / len(tr), val_auc))
        if val_auc > best_auc:
            best_auc, best_state, stale = val_auc, model.store.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                reason = "patience"
                break
    if best_state is None:
        model.store.restore(initial)
        best_auc = 0.5
    else:
        model.store.restore(best_state)
    return TrainResult(model, float(best_auc), trace, reason)


def evaluate_split(model: CandidateModel, dataset: ResponseDataset, split: str = "test") -> EvalReport:
    logs = dataset.split(split)
    return evaluate(predict(model, logs.student, logs.exercise), logs.score)


# --- persistence ----------------------------------------------------------------


def write_trace_csv(trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_auc"])
        for r in trace:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc)])


def save_checkpoint(model: CandidateModel, directory, cfg: TrainConfig | None = None,
                    report: EvalReport | None = None) -> None:
    """``manifest.json`` (tree key, dims, config, metrics) plus ``params.npz``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tree": canonical_key(model.tree),
        "tree_json": to_dict(model.tree),
        "output_mode": model.output_mode,
        "dims": model.dims,
        "config": asdict(cfg) if cfg else None,
        "metrics": asdict(report) if report else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    np.savez(directory / "params.npz", q=model.q, **model.store.snapshot())


def load_checkpoint(directory) -> CandidateModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = np.load(directory / "params.npz")
    tree = from_dict(manifest["tree_json"])
    model = assemble(tree, manifest["dims"]["N"], arrays["q"], seed=0)
    model.store.restore({k: arrays[k] for k in model.store})
    return model
