"""Losses, the optimizer, and the training/evaluation loops.

One training step works through the batch in groups that share a retrieved
count (the sequence encoder collates fixed-shape groups), accumulating
gradients across groups before a single Adam update. The per-example
objective is ``alpha * recon + task_loss`` averaged over the batch, where
the task loss is binary cross-entropy for ranking and a sampled softmax
for retrieval.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbones import BACKBONES, build_backbone, collate_features
from .checkpoint import load_checkpoint, save_checkpoint
from .cotstore import CoTStore, RetrievalConfig
from .data import DatasetSplit, Vocab, render_text
from .errors import DataError, NumericalError
from .incontext import ContextEncoder, IctConfig, assemble, collate, query_payload
from .metrics import PROB_FLOOR, MetricsReport, auc, logloss, topk_metrics
from .util import rng_for, write_ndjson
from ._accel import adam_update

log = logging.getLogger(__name__)

TASKS = ("ranking", "retrieval")
VARIANTS = ("full", "base", "no_cot", "mean_pool", "no_balance")
EVAL_BATCH = 512


@dataclass
class TrainConfig:
    """Everything a run needs; serializable and rejecting unknown keys."""

    task: str = "ranking"
    backbone: str = "fm_deep"
    variant: str = "full"
    dim: int = 32
    heads: int = 2
    layers: int = 2
    k: int = 4
    k_max: int = 8
    text_dim: int = 64
    dropout: float = 0.0
    alpha: float = 0.5
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 20
    patience: int = 3
    n_negatives: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task == "retrieval" and self.backbone != "two_tower":
            raise ValueError("the retrieval task needs the two_tower backbone")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.k > self.k_max:
            raise ValueError(f"k {self.k} exceeds k_max {self.k_max}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, epochs, and patience must be positive")

    @property
    def balance(self) -> bool:
        return self.variant != "no_balance"

    @property
    def include_cot(self) -> bool:
        return self.variant != "no_cot"

    @property
    def mean_pool(self) -> bool:
        return self.variant == "mean_pool"

    @property
    def uses_recon(self) -> bool:
        """The trace-alignment term applies only when traces feed the decoder."""
        return self.variant in ("full", "no_balance")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, labels: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example BCE with clamped probabilities.

    Returns (losses, probs, d_loss/d_logit). The gradient is exactly the
    derivative of the clamped forward: zero where the probability was
    clamped, otherwise p - y.
    """
    p = sigmoid(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    losses = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    d = np.where(p == pc, p - y, 0.0)
    return losses, p, d


def sampled_softmax(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy against column 0 over a sampled candidate set.

    Returns (losses (B,), d_loss/d_scores (B, C)).
    """
    z = scores - scores.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    losses = np.log(denom[:, 0]) - z[:, 0]
    d = ez / denom
    d[:, 0] -= 1.0
    return losses, d


def combined_loss(alpha: float, recon: np.ndarray, task_losses: np.ndarray) -> float:
    """Batch objective: mean over examples of alpha * recon + task loss."""
    return float((alpha * recon + task_losses).mean())


class Adam:
    """Bias-corrected Adam over every tensor in a parameter store."""

    def __init__(self, store: nn.ParamStore, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = {n: np.zeros_like(store[n]) for n in store.names()}
        self._v = {n: np.zeros_like(store[n]) for n in store.names()}

    def step(self) -> None:
        self.t += 1
        for name in self.store.names():
            grad = self.store.grad(name)
            if not np.isfinite(grad).all():
                raise NumericalError(f"non-finite gradient in {name}")
            adam_update(self.store[name], grad, self._m[name], self._v[name],
                        self.t, self.lr, self.beta1, self.beta2, self.eps)


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a new best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.epoch = 0
        self._bad = 0

    def update(self, metric: float) -> bool:
        """Record one epoch's monitored metric; True means stop now."""
        self.epoch += 1
        if metric > self.best:
            self.best = metric
            self.best_epoch = self.epoch
            self._bad = 0
        else:
            self._bad += 1
        return self._bad >= self.patience


def _ordered_sizes(sizes: dict[str, int]) -> dict[str, int]:
    """Canonical field order: user_id, user attrs, item_id, item attrs.

    Table construction and token collation both rely on this order, and
    dicts arriving from JSON (checkpoint headers) carry sorted keys, so the
    order is recomputed here rather than trusted.
    """
    user_attrs = sorted(k for k in sizes if k.startswith("user:"))
    item_attrs = sorted(k for k in sizes if k.startswith("item:"))
    expected = {"user_id", "item_id", *user_attrs, *item_attrs}
    if set(sizes) != expected:
        raise ValueError(f"unrecognized field names: {sorted(set(sizes) - expected)}")
    ordered = {"user_id": sizes["user_id"]}
    ordered.update({k: sizes[k] for k in user_attrs})
    ordered["item_id"] = sizes["item_id"]
    ordered.update({k: sizes[k] for k in item_attrs})
    return ordered


class Model:
    """Shared field tables, the sequence encoder, and one backbone."""

    def __init__(self, sizes: dict[str, int], config: TrainConfig):
        self.config = config
        sizes = _ordered_sizes(sizes)
        self.sizes = dict(sizes)
        self.store = nn.ParamStore()
        rng = rng_for(config.seed, "init")
        self.fields = nn.FieldEmbeddingSet(self.store, "fields", sizes, config.dim, rng)
        ict = IctConfig(dim=config.dim, heads=config.heads, layers=config.layers,
                        k_max=config.k_max, text_dim=config.text_dim,
                        dropout=config.dropout)
        self.encoder = ContextEncoder(self.store, "ict", self.fields, ict, rng)
        self.backbone = build_backbone(config.backbone, self.store, self.fields,
                                       sizes, rng)

    def save(self, path: str) -> None:
        save_checkpoint(path, {"train_config": self.config.to_dict(),
                               "field_sizes": self.sizes},
                        self.store.clone_arrays())

    @classmethod
    def load(cls, path: str) -> "Model":
        header, arrays = load_checkpoint(path)
        if "train_config" not in header or "field_sizes" not in header:
            raise DataError(f"{path}: checkpoint header lacks config or field sizes")
        model = cls(header["field_sizes"], TrainConfig.from_dict(header["train_config"]))
        model.store.load_arrays(arrays)
        return model


@dataclass
class PreparedPart:
    """One split part with query embeddings and cached retrievals."""

    examples: list
    query_embs: np.ndarray
    retrieved: list[list[int]]


def prepare_part(examples, vocab: Vocab, store: CoTStore | None, encoder,
                 config: TrainConfig) -> PreparedPart:
    """Embed query texts and cache per-example retrievals.

    The retrieval task renders and embeds queries without the candidate
    item. Every retrieval is audited against timestamp leakage here, once,
    since the cache is reused across epochs.
    """
    if not examples:
        raise DataError("cannot prepare an empty example list")
    mask_target = config.task == "retrieval"
    dim = config.text_dim
    embs = np.zeros((len(examples), dim), dtype=np.float64)
    retrieved: list[list[int]] = []
    rcfg = RetrievalConfig(k=config.k, balance=config.balance, anti_leakage=True)
    for i, ex in enumerate(examples):
        text = render_text(ex, vocab, include_target=False) if mask_target else ex.text
        emb = encoder.encode(text)
        if emb.shape != (dim,):
            raise DataError(f"encoder produced dim {emb.shape[0]}, config wants {dim}")
        embs[i] = emb
        if config.variant == "base" or store is None:
            retrieved.append([])
            continue
        recs = store.retrieve(emb, ex.timestamp, rcfg,
                              exclude_id=store.record_id_for(ex))
        for rec in recs:
            if rec.timestamp >= ex.timestamp:
                raise DataError(
                    f"leakage: retrieved record {rec.id} at t={rec.timestamp} "
                    f"for query at t={ex.timestamp}")
        retrieved.append([rec.id for rec in recs])
    return PreparedPart(list(examples), embs, retrieved)


def _group_by_kprime(prepared: PreparedPart, batch_positions) -> list[tuple[int, list[int]]]:
    buckets: dict[int, list[int]] = {}
    for pos in batch_positions:
        buckets.setdefault(len(prepared.retrieved[pos]), []).append(pos)
    return sorted(buckets.items())


def _encode_group(model: Model, prepared: PreparedPart, positions, store: CoTStore,
                  config: TrainConfig, dropout_rng=None):
    """Sequence-encoder forward for one fixed-k_prime group."""
    mask_target = config.task == "retrieval"
    seqs = []
    for pos in positions:
        ex = prepared.examples[pos]
        payload = query_payload(ex, prepared.query_embs[pos], mask_target=mask_target)
        records = [store.records[i] for i in prepared.retrieved[pos]]
        seqs.append(assemble(payload, records, include_cot=config.include_cot))
    batch = collate(seqs)
    return model.encoder.forward(batch, mean_pool=config.mean_pool,
                                 dropout_rng=dropout_rng)


def _sample_candidates(rng: np.random.Generator, targets: np.ndarray,
                       n_items: int, n_neg: int) -> np.ndarray:
    """Candidate matrix (B, 1 + n_neg): true item first, uniform negatives.

    Negatives avoid the row's own target (rejection resampling); item index
    0 is the out-of-vocab row and is never drawn.
    """
    if n_items <= 2:
        raise DataError("sampled softmax needs at least two real items")
    bsz = targets.shape[0]
    neg = rng.integers(1, n_items, size=(bsz, n_neg))
    clash = neg == targets[:, None]
    while clash.any():
        neg[clash] = rng.integers(1, n_items, size=int(clash.sum()))
        clash = neg == targets[:, None]
    return np.concatenate([targets[:, None], neg], axis=1)


def train_step(model: Model, prepared: PreparedPart, batch_positions,
               store: CoTStore | None, config: TrainConfig, optimizer: Adam,
               softmax_rng=None, dropout_rng=None) -> tuple[float, float, float]:
    """One gradient step over a batch; returns (loss, task part, recon part)."""
    model.store.zero_grads()
    total = len(batch_positions)
    sum_task = 0.0
    sum_recon = 0.0
    alpha = config.alpha if config.uses_recon else 0.0
    for _, positions in _group_by_kprime(prepared, batch_positions):
        exs = [prepared.examples[p] for p in positions]
        fb = collate_features(exs)
        if config.variant == "base":
            w, recon = None, np.zeros(len(positions))
        else:
            w, recon = _encode_group(model, prepared, positions, store, config,
                                     dropout_rng=dropout_rng)
        if config.task == "ranking":
            logits = model.backbone.forward(fb, w)
            losses, _, d_out = bce_with_logits(logits, fb.labels)
        else:
            cands = _sample_candidates(softmax_rng, fb.item_idx,
                                       model.sizes["item_id"], config.n_negatives)
            scores = model.backbone.forward_candidates(fb, w, cands)
            losses, d_out = sampled_softmax(scores)
        sum_task += float(losses.sum())
        sum_recon += float(recon.sum())
        d_w = model.backbone.backward(d_out / total)
        if config.variant != "base":
            model.encoder.backward(d_w, np.full(len(positions), alpha / total))
    optimizer.step()
    loss = (sum_task + alpha * sum_recon) / total
    return loss, sum_task / total, sum_recon / total


def predict_ranking(model: Model, prepared: PreparedPart, store: CoTStore | None,
                    config: TrainConfig) -> np.ndarray:
    """Click probabilities for every prepared example, original order."""
    n = len(prepared.examples)
    probs = np.zeros(n)
    for start in range(0, n, EVAL_BATCH):
        positions = list(range(start, min(start + EVAL_BATCH, n)))
        for _, group in _group_by_kprime(prepared, positions):
            exs = [prepared.examples[p] for p in group]
            fb = collate_features(exs)
            if config.variant == "base":
                w = None
            else:
                w, _ = _encode_group(model, prepared, group, store, config)
            probs[group] = sigmoid(model.backbone.forward(fb, w))
    return probs


def predict_retrieval_ranks(model: Model, prepared: PreparedPart,
                            store: CoTStore | None, config: TrainConfig,
                            seen: dict[str, set[int]]) -> np.ndarray:
    """1-based rank of each example's true item over the full catalog.

    Items the user already interacted with (per ``seen``) are excluded
    from the candidate set; the true item always stays in.
    """
    n = len(prepared.examples)
    ranks = np.zeros(n, dtype=np.int64)
    for start in range(0, n, EVAL_BATCH):
        positions = list(range(start, min(start + EVAL_BATCH, n)))
        for _, group in _group_by_kprime(prepared, positions):
            exs = [prepared.examples[p] for p in group]
            fb = collate_features(exs)
            if config.variant == "base":
                w = None
            else:
                w, _ = _encode_group(model, prepared, group, store, config)
            scores = model.backbone.score_all(fb, w)
            scores[:, 0] = -np.inf  # out-of-vocab row never competes
            for row, (pos, ex) in enumerate(zip(group, exs)):
                target = ex.target_item_index
                for item in seen.get(ex.user_id, ()):
                    if item != target:
                        scores[row, item] = -np.inf
                ranks[pos] = 1 + int((scores[row] > scores[row, target]).sum())
    return ranks


def seen_items(split: DatasetSplit, parts=("train",)) -> dict[str, set[int]]:
    """Per-user positives from the given parts, as item indices."""
    seen: dict[str, set[int]] = {}
    for part in parts:
        for ex in split[part]:
            if ex.label == 1:
                seen.setdefault(ex.user_id, set()).add(ex.target_item_index)
    return seen


def evaluate_part(model: Model, prepared: PreparedPart, store: CoTStore | None,
                  config: TrainConfig, seen: dict[str, set[int]] | None = None
                  ) -> dict[str, float]:
    if config.task == "ranking":
        labels = np.array([ex.label for ex in prepared.examples])
        probs = predict_ranking(model, prepared, store, config)
        return {"auc": auc(labels, probs), "logloss": logloss(labels, probs)}
    ranks = predict_retrieval_ranks(model, prepared, store, config, seen or {})
    return topk_metrics(ranks)


def monitored_metric(task: str) -> str:
    return "auc" if task == "ranking" else "ndcg@10"


@dataclass
class TrainResult:
    best_epoch: int
    best_metric: float
    history: list[dict] = field(default_factory=list)


def train(config: TrainConfig, split: DatasetSplit, vocab: Vocab,
          store: CoTStore | None, encoder, outdir: str | None = None
          ) -> tuple[Model, TrainResult]:
    """Full training run with early stopping on the validation metric.

    Returns the model restored to its best epoch. When ``outdir`` is given,
    writes ``model.ckpt`` and ``history.jsonl`` there.
    """
    if config.variant != "base" and store is None:
        raise DataError(f"variant {config.variant!r} needs a reasoning-trace store")
    train_examples = list(split.train)
    valid_examples = list(split.valid)
    if config.task == "retrieval":
        train_examples = [ex for ex in train_examples if ex.label == 1]
        valid_examples = [ex for ex in valid_examples if ex.label == 1]
    if not train_examples or not valid_examples:
        raise DataError("train and valid parts must both be non-empty")

    model = Model(vocab.field_sizes(), config)
    optimizer = Adam(model.store, lr=config.lr)
    prep_train = prepare_part(train_examples, vocab, store, encoder, config)
    prep_valid = prepare_part(valid_examples, vocab, store, encoder, config)
    valid_seen = seen_items(split, parts=("train",)) if config.task == "retrieval" else None

    monitor = monitored_metric(config.task)
    stopper = EarlyStopper(config.patience)
    best_arrays = model.store.clone_arrays()
    history: list[dict] = []
    n = len(train_examples)

    for epoch in range(1, config.epochs + 1):
        order = rng_for(config.seed, f"shuffle/{epoch}").permutation(n)
        softmax_rng = rng_for(config.seed, f"softmax/{epoch}")
        dropout_rng = (rng_for(config.seed, f"dropout/{epoch}")
                       if config.dropout > 0.0 else None)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size].tolist()
            sums += train_step(model, prep_train, batch, store, config, optimizer,
                               softmax_rng=softmax_rng, dropout_rng=dropout_rng)
            steps += 1
        valid_metrics = evaluate_part(model, prep_valid, store, config, seen=valid_seen)
        row = {"epoch": epoch,
               "train_loss": sums[0] / steps,
               "train_task_loss": sums[1] / steps,
               "train_recon_loss": sums[2] / steps}
        row.update({f"valid_{k}": v for k, v in valid_metrics.items()})
        history.append(row)
        log.info("epoch %d: loss %.5f, valid %s %.5f", epoch, row["train_loss"],
                 monitor, valid_metrics[monitor])
        stop = stopper.update(valid_metrics[monitor])
        if stopper.best_epoch == epoch:
            best_arrays = model.store.clone_arrays()
        if stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    model.store.load_arrays(best_arrays)
    result = TrainResult(best_epoch=stopper.best_epoch, best_metric=stopper.best,
                         history=history)
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        model.save(os.path.join(outdir, "model.ckpt"))
        write_ndjson(os.path.join(outdir, "history.jsonl"), history)
    return model, result


def evaluate_model(model: Model, split: DatasetSplit, part: str, vocab: Vocab,
                   store: CoTStore | None, encoder) -> MetricsReport:
    """Metrics report for one split part using a trained model."""
    config = model.config
    examples = list(split[part])
    if config.task == "retrieval":
        examples = [ex for ex in examples if ex.label == 1]
        seen_parts = ("train",) if part == "valid" else ("train", "valid")
        seen = seen_items(split, parts=seen_parts)
    else:
        seen = None
    prepared = prepare_part(examples, vocab, store, encoder, config)
    values = evaluate_part(model, prepared, store, config, seen=seen)
    return MetricsReport(task=config.task, split=part, n_examples=len(examples),
                         metrics=values, config=config.to_dict())


def run_ablation(base_config: TrainConfig, split: DatasetSplit, vocab: Vocab,
                 store: CoTStore, encoder, variants=("base", "full", "no_cot", "mean_pool")
                 ) -> dict[str, dict]:
    """Train each variant with shared data and seed; report test metrics."""
    out: dict[str, dict] = {}
    for variant in variants:
        config = dataclasses.replace(base_config, variant=variant)
        model, result = train(config, split, vocab, store, encoder)
        report = evaluate_model(model, split, "test", vocab, store, encoder)
        out[variant] = {"best_epoch": result.best_epoch,
                        "valid_metric": result.best_metric,
                        "test": report.metrics}
    return out


def run_length_sweep(base_config: TrainConfig, split: DatasetSplit, vocab: Vocab,
                     store: CoTStore, encoder, ks=(0, 2, 4, 6, 8),
                     include_unbalanced: bool = False) -> list[dict]:
    """Sweep the retrieved-context length, optionally adding an unbalanced
    k=4 cell; a failed cell is recorded and the sweep continues.

    The best cell (by the task's monitored test metric) is flagged.
    """
    cells = [{"k": int(k), "balance": True} for k in ks]
    if include_unbalanced:
        cells.append({"k": 4, "balance": False})
    monitor = monitored_metric(base_config.task)
    rows: list[dict] = []
    for cell in cells:
        variant = "full" if cell["balance"] else "no_balance"
        row = dict(cell)
        try:
            config = dataclasses.replace(base_config, k=cell["k"], variant=variant)
            model, result = train(config, split, vocab, store, encoder)
            report = evaluate_model(model, split, "test", vocab, store, encoder)
            row["best_epoch"] = result.best_epoch
            row["metrics"] = report.metrics
        except (DataError, NumericalError, ValueError) as exc:
            row["error"] = str(exc)
        rows.append(row)
    scored = [r for r in rows if "metrics" in r]
    if scored:
        best = max(scored, key=lambda r: r["metrics"][monitor])
        for r in rows:
            r["best"] = r is best
    return rows
