"""Streaming training loop with shard-aware loading and early stopping.

Partitions are assigned to loader workers as contiguous blocks (leftovers
round-robin onto the first workers, so nothing is dropped), and each worker
streams its partitions one at a time: memory stays bounded by one partition
plus one batch.  The optimizer is adaptive moments with decoupled weight
decay.  Validation uses distinct partitions (the dataset split is by user),
and early stopping returns the parameters of the best validation epoch,
not the last one.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .datamodel import (
    DatasetManifest,
    FeatureScalers,
    SampleBatch,
    TaskKind,
    TaskSpec,
    TrainingSample,
    WindowConfig,
    build_sample,
    collate,
    inverse_scale,
    list_partition_files,
    mask_supply,
    read_calendar,
    read_partition_file,
)
from .loss import compute_loss
from .model import Model, count_params, forward_arrays, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 50
    early_stopping_patience: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip_norm: float | None = None
    n_workers: int = 1
    sample_days: tuple[int, ...] | None = None
    mask_past_supply: bool = False
    mask_future_supply: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.early_stopping_patience < 1:
            raise ValueError("invalid epoch/patience settings")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.sample_days is not None:
            self.sample_days = tuple(int(d) for d in self.sample_days)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    metrics: dict[str, float | None]
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_val_loss: float | None = None

    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)


# --------------------------------------------------------------------------
# Shard-aware streaming
# --------------------------------------------------------------------------

def shard_partitions(n_partitions: int, worker_id: int, n_workers: int) -> list[int]:
    """Deterministic disjoint partition assignment: contiguous blocks, with
    the remainder handed round-robin to the first workers."""
    if not 0 <= worker_id < n_workers:
        raise ValueError(f"worker_id {worker_id} out of range for {n_workers} workers")
    if n_partitions < n_workers:
        raise ValueError(
            f"{n_partitions} partitions cannot feed {n_workers} workers"
        )
    per_worker = n_partitions // n_workers
    start = worker_id * per_worker
    assigned = list(range(start, start + per_worker))
    leftover = n_partitions - per_worker * n_workers
    if worker_id < leftover:
        assigned.append(per_worker * n_workers + worker_id)
    return assigned


def default_sample_days(manifest: DatasetManifest, window: WindowConfig) -> tuple[int, ...]:
    """Latest as-of day whose forecast window still fits in the calendar."""
    return (manifest.n_days - 1 - window.t_fut,)


def stream_batches(
    partition_dir: Path | str,
    worker_id: int,
    n_workers: int,
    window: WindowConfig,
    batch_size: int,
    epoch_seed: int,
    *,
    sample_days: Sequence[int] | None = None,
    mask_past_supply: bool = False,
    mask_future_supply: bool = False,
    manifest: DatasetManifest | None = None,
    calendar=None,
) -> Iterator[SampleBatch]:
    """Stream this worker's shard as collated batches, one partition in
    memory at a time, sample order shuffled per epoch_seed within each
    partition.  Users registered after an as-of day are skipped."""
    partition_dir = Path(partition_dir)
    if manifest is None:
        manifest = DatasetManifest.load(partition_dir)
    if calendar is None:
        calendar = read_calendar(partition_dir)
    files = list_partition_files(partition_dir)
    if not files:
        raise FileNotFoundError(f"no partition files in {partition_dir}")
    days = tuple(sample_days) if sample_days is not None else default_sample_days(manifest, window)

    assigned = shard_partitions(len(files), worker_id, n_workers)
    buffer: list[TrainingSample] = []
    for part_idx in assigned:
        records = read_partition_file(files[part_idx])
        keys = [(u, d) for u in range(len(records)) for d in days]
        rng = np.random.default_rng([epoch_seed & 0x7FFFFFFFFFFFFFFF, part_idx])
        rng.shuffle(keys)
        for u, day in keys:
            record = records[u]
            if day < record.registration_day:
                continue  # sample rejected: user not yet registered
            sample = build_sample(record, calendar, day, window, manifest.scalers)
            if mask_past_supply or mask_future_supply:
                sample = mask_supply(sample, mask_past_supply, mask_future_supply)
            buffer.append(sample)
            if len(buffer) == batch_size:
                yield collate(buffer)
                buffer = []
    if buffer:
        yield collate(buffer)


def _iter_epoch(
    data_dir: Path,
    window: WindowConfig,
    config: TrainConfig,
    epoch_seed: int,
    manifest: DatasetManifest,
    calendar,
) -> Iterator[SampleBatch]:
    common = dict(
        sample_days=config.sample_days,
        mask_past_supply=config.mask_past_supply,
        mask_future_supply=config.mask_future_supply,
        manifest=manifest,
        calendar=calendar,
    )
    if config.n_workers == 1:
        yield from stream_batches(
            data_dir, 0, 1, window, config.batch_size, epoch_seed, **common
        )
        return

    # Multiple loader workers prefetch their shards into a bounded queue.
    q: "queue.Queue[SampleBatch | None]" = queue.Queue(maxsize=2 * config.n_workers)

    def run(worker_id: int) -> None:
        try:
            for batch in stream_batches(
                data_dir, worker_id, config.n_workers, window,
                config.batch_size, epoch_seed, **common,
            ):
                q.put(batch)
        finally:
            q.put(None)

    threads = [threading.Thread(target=run, args=(w,), daemon=True)
               for w in range(config.n_workers)]
    for t in threads:
        t.start()
    finished = 0
    while finished < config.n_workers:
        item = q.get()
        if item is None:
            finished += 1
        else:
            yield item
    for t in threads:
        t.join()


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay.  Decay touches weight
    matrices only; biases, norm gains, positional tables, the pad vector and
    log-variances are left undecayed."""

    def __init__(
        self,
        model: Model,
        learning_rate: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        grad_clip_norm: float | None = None,
    ):
        self.model = model
        self.lr = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.grad_clip_norm = grad_clip_norm
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self) -> None:
        params = self.model.params
        if self.grad_clip_norm is not None:
            total = np.sqrt(sum(
                float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None
            ))
            if total > self.grad_clip_norm:
                scale = self.grad_clip_norm / (total + 1e-12)
                for p in params.values():
                    if p.grad is not None:
                        p.grad *= scale

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and p.data.ndim >= 2 and not name.startswith("pe_"):
                p.data -= self.lr * self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank statistic: probability a random positive outranks a random
    negative, ties counted half."""
    labels = np.asarray(labels).astype(float).ravel()
    scores = np.asarray(scores).ravel()
    if labels.shape != scores.shape:
        raise ValueError("labels and scores must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = (cum - counts + 1 + cum) / 2.0
    ranks = avg_rank[inverse]
    u = ranks[labels == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mape(actual: np.ndarray, predicted: np.ndarray) -> float:
    """Mean absolute percentage error over the supplied positions."""
    a = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("mape: all positions excluded")
    if np.any(a == 0.0):
        raise ValueError("mape undefined where actual value is zero")
    return float(np.mean(np.abs(a - p) / np.abs(a)) * 100.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _ValAccumulator:
    """Streams validation batches once, accumulating both the exact
    whole-split loss terms and the flattened predictions for metrics."""

    def __init__(self, task_specs: Sequence[TaskSpec]):
        self.task_specs = list(task_specs)
        d_u = len(self.task_specs)
        self.loss_sum = np.zeros(d_u)
        self.loss_count = np.zeros(d_u, dtype=np.int64)
        self.scores: dict[int, list[np.ndarray]] = {s.index: [] for s in self.task_specs}
        self.labels: dict[int, list[np.ndarray]] = {s.index: [] for s in self.task_specs}

    def add(self, preds: np.ndarray, batch: SampleBatch) -> None:
        targets = batch.targets
        mask = batch.activity_mask
        for spec in self.task_specs:
            i = spec.index
            col = preds[..., i]
            t = targets[..., i]
            if spec.kind is TaskKind.BINARY:
                x = col.ravel()
                elem = np.maximum(x, 0) - x * t.ravel() + np.log1p(np.exp(-np.abs(x)))
                self.loss_sum[i] += float(elem.sum())
                self.loss_count[i] += elem.size
                self.scores[i].append(_sigmoid(x))
                self.labels[i].append(t.ravel())
            else:
                m = mask[..., i]
                diff = (col - t) * m
                self.loss_sum[i] += float((diff ** 2).sum())
                self.loss_count[i] += int(m.sum())
                self.scores[i].append(col[m])
                self.labels[i].append(t[m])

    def per_dim_losses(self) -> np.ndarray:
        return self.loss_sum / np.maximum(self.loss_count, 1)

    def total_loss(self, log_vars: np.ndarray, variant: str) -> float:
        per_dim = self.per_dim_losses()
        weight = np.exp(-log_vars) * (0.5 if variant == "equation" else 1.0)
        return float(np.sum(weight * per_dim + log_vars))

    def metrics(self, scalers: FeatureScalers) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for spec in self.task_specs:
            i = spec.index
            scores = np.concatenate(self.scores[i]) if self.scores[i] else np.array([])
            labels = np.concatenate(self.labels[i]) if self.labels[i] else np.array([])
            if spec.kind is TaskKind.BINARY:
                try:
                    out[spec.name] = roc_auc(labels, scores)
                except ValueError:
                    out[spec.name] = None  # single class: AUC undefined
            else:
                params = scalers.user[i]
                actual = inverse_scale(labels, params)
                pred = inverse_scale(np.clip(scores, 0.0, 1.0), params)
                keep = actual != 0.0
                try:
                    out[spec.name] = mape(actual[keep], pred[keep])
                except ValueError:
                    out[spec.name] = None
        return out


# --------------------------------------------------------------------------
# Training / evaluation
# --------------------------------------------------------------------------

def _validation_pass(
    model: Model,
    data_dir: Path,
    task_specs: Sequence[TaskSpec],
    config: TrainConfig,
    manifest: DatasetManifest,
    calendar,
) -> _ValAccumulator:
    window = WindowConfig(model.config.t_hist, model.config.t_fut)
    acc = _ValAccumulator(task_specs)
    model.eval()
    with ad.no_grad():
        for batch in _iter_epoch(data_dir, window, config, 0, manifest, calendar):
            preds, _ = forward_arrays(
                batch.user_hist, batch.pad_mask, batch.static_features,
                batch.supply_hist, batch.supply_fut, model,
            )
            acc.add(preds.data, batch)
    return acc


def train(
    model: Model,
    train_dir: Path | str,
    val_dir: Path | str,
    task_specs: Sequence[TaskSpec],
    config: TrainConfig,
    out_dir: Path | str | None = None,
) -> tuple[Model, TrainHistory]:
    """Optimize the model with early stopping on validation loss.

    Fully deterministic for a single loader worker under a fixed seed.
    Returns the model restored to its best-validation-epoch parameters.
    """
    train_dir, val_dir = Path(train_dir), Path(val_dir)
    manifest = DatasetManifest.load(train_dir)
    calendar = read_calendar(train_dir)
    val_manifest = DatasetManifest.load(val_dir)
    val_calendar = read_calendar(val_dir)
    window = WindowConfig(model.config.t_hist, model.config.t_fut)
    variant = model.config.loss_variant

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        _write_run_manifest(out_path, model, config, manifest)
        (out_path / "history.jsonl").write_text("")

    history = TrainHistory()
    model.reset_rng(config.seed)
    optimizer = AdamW(
        model, config.learning_rate, config.weight_decay,
        grad_clip_norm=config.grad_clip_norm,
    )

    init_acc = _validation_pass(model, val_dir, task_specs, config, val_manifest, val_calendar)
    history.initial_val_loss = init_acc.total_loss(model.p("log_vars").data, variant)

    best_arrays = model.copy_param_arrays()
    best_val = np.inf
    bad_epochs = 0

    for epoch in range(1, config.max_epochs + 1):
        started = time.monotonic()
        model.train()
        epoch_seed = config.seed * 1_000_003 + epoch
        loss_total = 0.0
        n_seen = 0
        for batch in _iter_epoch(train_dir, window, config, epoch_seed, manifest, calendar):
            model.zero_grad()
            preds, _ = forward_arrays(
                batch.user_hist, batch.pad_mask, batch.static_features,
                batch.supply_hist, batch.supply_fut, model,
            )
            breakdown = compute_loss(preds, batch, task_specs, model)
            if not np.isfinite(breakdown.total):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} after {n_seen} samples: "
                    f"per-dim {breakdown.per_dim}, log_vars {breakdown.log_vars_snapshot}"
                )
            breakdown.node.backward()
            optimizer.step()
            loss_total += breakdown.total * len(batch)
            n_seen += len(batch)
        if n_seen == 0:
            raise RuntimeError(f"empty training dataset in {train_dir}")
        train_loss = loss_total / n_seen

        acc = _validation_pass(model, val_dir, task_specs, config, val_manifest, val_calendar)
        val_loss = acc.total_loss(model.p("log_vars").data, variant)
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            metrics=acc.metrics(manifest.scalers),
            seconds=time.monotonic() - started,
        )
        history.epochs.append(record)
        if out_path is not None:
            with (out_path / "history.jsonl").open("a") as fh:
                fh.write(json.dumps({
                    "epoch": record.epoch,
                    "train_loss": record.train_loss,
                    "val_loss": record.val_loss,
                    "metrics": record.metrics,
                    "seconds": record.seconds,
                }) + "\n")

        if val_loss < best_val:
            best_val = val_loss
            best_arrays = model.copy_param_arrays()
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stopping_patience:
                break

    if out_path is not None:
        save_checkpoint(model, out_path / "last.ckpt")
    model.load_param_arrays(best_arrays)
    model.eval()
    if out_path is not None:
        save_checkpoint(model, out_path / "best.ckpt")
    return model, history


def evaluate(
    model: Model,
    data_dir: Path | str,
    task_specs: Sequence[TaskSpec],
    scalers: FeatureScalers,
    *,
    sample_days: Sequence[int] | None = None,
    mask_past_supply: bool = False,
    mask_future_supply: bool = False,
    batch_size: int = 256,
) -> dict[str, dict]:
    """Held-out metrics per behavioral dimension: ROC-AUC for binary
    dimensions over all (sample, day) positions, MAPE in original units for
    continuous dimensions over active positions.  An undefined metric
    (single class, or nothing to score) reports value None."""
    config = TrainConfig(
        learning_rate=1.0, batch_size=batch_size, max_epochs=0,
        sample_days=tuple(sample_days) if sample_days is not None else None,
        mask_past_supply=mask_past_supply,
        mask_future_supply=mask_future_supply,
    )
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir)
    calendar = read_calendar(data_dir)
    acc = _validation_pass(model, data_dir, task_specs, config, manifest, calendar)
    values = acc.metrics(scalers)
    per_dim = acc.per_dim_losses()
    out = {}
    for spec in task_specs:
        out[spec.name] = {
            "metric": "roc_auc" if spec.kind is TaskKind.BINARY else "mape",
            "value": values[spec.name],
            "loss": float(per_dim[spec.index]),
        }
    return out


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

def max_relative_error(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    floor: float = 1e-8,
) -> float:
    worst = 0.0
    for name, gf in numeric.items():
        ga = analytic[name]
        err = np.abs(ga - gf) / np.maximum(np.abs(gf), floor)
        worst = max(worst, float(err.max()))
    return worst


def grad_check(
    model: Model,
    sample: TrainingSample,
    task_specs: Sequence[TaskSpec],
    epsilon: float = 1e-5,
) -> float:
    """Central-difference check of every parameter against the analytic
    gradients, in 64-bit mode.  Returns the max relative error."""
    m64 = model.astype("float64").eval()

    def loss_value() -> float:
        with ad.no_grad():
            preds, _ = forward_arrays(
                sample.user_hist, sample.pad_mask, sample.static_features,
                sample.supply_hist, sample.supply_fut, m64,
            )
            return compute_loss(preds, sample, task_specs, m64).total

    m64.zero_grad()
    preds, _ = forward_arrays(
        sample.user_hist, sample.pad_mask, sample.static_features,
        sample.supply_hist, sample.supply_fut, m64,
    )
    compute_loss(preds, sample, task_specs, m64).node.backward()
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in m64.params.items()
    }

    numeric = {}
    for name, p in m64.params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss_value()
            flat[i] = orig - epsilon
            lo = loss_value()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * epsilon)
        numeric[name] = g
    return max_relative_error(analytic, numeric)


# --------------------------------------------------------------------------
# Run manifest
# --------------------------------------------------------------------------

def _git_describe() -> str:
    try:
        return subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, check=False,
        ).stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _write_run_manifest(
    out_dir: Path, model: Model, config: TrainConfig, manifest: DatasetManifest
) -> None:
    payload = {
        "model_config": model.config.to_dict(),
        "train_config": {
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "max_epochs": config.max_epochs,
            "early_stopping_patience": config.early_stopping_patience,
            "weight_decay": config.weight_decay,
            "seed": config.seed,
            "grad_clip_norm": config.grad_clip_norm,
            "n_workers": config.n_workers,
            "sample_days": list(config.sample_days) if config.sample_days else None,
            "mask_past_supply": config.mask_past_supply,
            "mask_future_supply": config.mask_future_supply,
        },
        "dataset": manifest.to_dict(),
        "n_params": count_params(model),
        "git_describe": _git_describe(),
    }
    payload["config_hash"] = sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2) + "\n")
