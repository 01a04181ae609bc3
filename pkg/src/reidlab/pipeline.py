"""Training orchestration: PK batches, SGD with momentum, warmup+cosine
learning-rate schedule, the per-strategy epoch loop, and grid search.

A run is a pure function of (dataset, config): the model init, the batch
sequence, and every update are derived from named sub-streams of the
config seed, so identical inputs give bit-identical RunRecords. Under
unicat each stream's updates depend only on that stream's own loss and
its own named init stream, which makes joint training of M streams
exactly equivalent to training each stream alone.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import (
    ModelParams,
    grads_as_dict,
    head_backward,
    head_forward,
    init_model,
    iter_trainables,
    stream_backward,
    stream_forward,
)
from .numerics import Rng
from .objectives import (
    LossConfig,
    Strategy,
    fuse,
    inference_fusion_op,
    split_fusion_grad,
    strategy_loss,
)
from .synthdata import SPLIT_GALLERY, SPLIT_TRAIN, MultimodalDataset, split_query_gallery

LR_MIN_RATIO = 0.002


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = Strategy.UNICAT
    p: int = 8
    k: int = 4
    lr_base: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    warmup_epochs: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    hidden_dims: tuple = (64,)
    embed_dim: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.p < 2 or self.k < 2:
            raise ConfigError(f"P >= 2 and K >= 2 required for triplets, got P={self.p}, K={self.k}")
        if self.lr_base <= 0 or not np.isfinite(self.lr_base):
            raise ConfigError(f"lr_base must be finite and > 0, got {self.lr_base}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= warmup < epochs, got {self.warmup_epochs} vs {self.epochs}"
            )
        if self.embed_dim < 1 or any(d < 1 for d in self.hidden_dims):
            raise ConfigError("layer widths must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.p * self.k


def config_dict(cfg: TrainConfig) -> dict:
    return {
        "strategy": cfg.strategy.value,
        "p": cfg.p,
        "k": cfg.k,
        "lr_base": cfg.lr_base,
        "momentum": cfg.momentum,
        "epochs": cfg.epochs,
        "warmup_epochs": cfg.warmup_epochs,
        "lambda_ce": cfg.loss.lambda_ce,
        "margin": cfg.loss.margin,
        "hidden_dims": list(cfg.hidden_dims),
        "embed_dim": cfg.embed_dim,
        "seed": cfg.seed,
    }


def config_hash(obj) -> str:
    """sha256 over the canonical JSON form of a config mapping."""
    if isinstance(obj, TrainConfig):
        obj = config_dict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class OptState:
    velocity: dict
    step: int = 0

    @classmethod
    def for_params(cls, trainables: Sequence) -> "OptState":
        return cls(velocity={key: np.zeros_like(arr) for key, arr in trainables})


@dataclass
class RunRecord:
    config: TrainConfig
    seed: int
    epoch_losses: np.ndarray
    epoch_lrs: np.ndarray
    model: ModelParams
    config_hash: str


def pk_sample(y: np.ndarray, p: int, k: int, rng: Rng) -> np.ndarray:
    """Batch of P distinct identities x K samples each.

    Identities are drawn without replacement; within an identity,
    samples are drawn without replacement unless it has fewer than K
    samples, in which case replacement is allowed.
    """
    y = np.asarray(y)
    ids = np.unique(y)
    if ids.size < p:
        raise DataError(f"PK sampling needs >= {p} distinct ids, got {ids.size}")
    chosen = rng.choice(ids, size=p, replace=False)
    parts = []
    for identity in chosen:
        rows = np.nonzero(y == identity)[0]
        parts.append(rng.choice(rows, size=k, replace=rows.size < k))
    return np.concatenate(parts).astype(np.int64)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_base, then cosine decay to LR_MIN_RATIO*lr_base."""
    if not (0 <= epoch < cfg.epochs):
        raise ConfigError(f"epoch {epoch} out of range [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_base * (epoch + 1) / cfg.warmup_epochs
    lr_min = LR_MIN_RATIO * cfg.lr_base
    span = cfg.epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / span
    return lr_min + 0.5 * (cfg.lr_base - lr_min) * (1.0 + math.cos(math.pi * t))


def sgd_step(
    trainables: Sequence, grads: dict, state: OptState, lr: float, momentum: float
) -> None:
    """v <- momentum*v + g; p <- p - lr*v, in place on the live buffers."""
    for key, param in trainables:
        if key not in grads:
            raise ShapeError(f"missing gradient for parameter {key!r}")
        g = grads[key]
        if g.shape != param.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {param.shape} for {key!r}")
        v = state.velocity[key]
        v *= momentum
        v += g
        param -= lr * v
    state.step += 1


def _train_arrays(ds: MultimodalDataset):
    rows = ds.train_rows
    if rows.size == 0:
        raise DataError("dataset has no training rows")
    y_raw = ds.ids[rows]
    classes = np.unique(y_raw)
    y = np.searchsorted(classes, y_raw).astype(np.int64)
    xs = [np.ascontiguousarray(f[rows]) for f in ds.features]
    return xs, y, classes


def batch_gradients(
    model: ModelParams,
    x_batch: Sequence,
    y_batch: np.ndarray,
    loss_cfg: LossConfig,
    update_running: bool = True,
) -> tuple[float, dict]:
    """One strategy-aware forward/backward on a fixed batch.

    Returns the batch loss and gradients keyed like iter_trainables.
    With update_running=False the forward leaves BN running statistics
    untouched (loss values are unaffected: train mode normalizes by
    batch statistics), which makes repeated evaluation side-effect free
    for finite-difference checking.
    """
    num_streams = model.num_streams
    if len(x_batch) != num_streams:
        raise ShapeError(f"{len(x_batch)} input blocks for {num_streams} streams")
    outs = [
        stream_forward(model.streams[i], x_batch[i], train=True, update_running=update_running)
        for i in range(num_streams)
    ]
    head_out = None
    op = None
    if model.strategy.is_fusion:
        op = inference_fusion_op(model.strategy)
        z_fuse = fuse([o.z for o in outs], op)
        head_out = head_forward(model.fused, z_fuse, train=True, update_running=update_running)
    loss, sgrads = strategy_loss(outs, head_out, y_batch, model.strategy, loss_cfg)
    if model.strategy.is_fusion:
        head_grads, gz_fuse = head_backward(model.fused, head_out, sgrads.fused[0], sgrads.fused[1])
        per_stream_gz = split_fusion_grad(gz_fuse, op, [o.z.shape[1] for o in outs])
        stream_grads = [
            stream_backward(model.streams[i], outs[i], per_stream_gz[i], None)
            for i in range(num_streams)
        ]
    else:
        head_grads = None
        stream_grads = [
            stream_backward(model.streams[i], outs[i], gz, glog)
            for i, (gz, glog) in enumerate(sgrads.per_stream)
        ]
    return loss, grads_as_dict(model, stream_grads, head_grads)


def train(ds: MultimodalDataset, cfg: TrainConfig) -> RunRecord:
    """Full training run; deterministic given (ds, cfg)."""
    cfg.validate()
    ds.validate()
    xs, y, classes = _train_arrays(ds)
    if classes.size < cfg.p:
        raise DataError(f"config asks P={cfg.p} ids per batch, train set has {classes.size}")
    root = Rng(cfg.seed)
    model = init_model(
        [x.shape[1] for x in xs],
        ds.modality_names,
        cfg.strategy,
        classes.size,
        root,
        hidden_dims=cfg.hidden_dims,
        embed_dim=cfg.embed_dim,
    )
    trainables = iter_trainables(model)
    opt = OptState.for_params(trainables)
    sampler = root.split("batches")
    batches_per_epoch = max(1, math.ceil(y.size / cfg.batch_size))
    epoch_losses = np.empty(cfg.epochs, dtype=np.float64)
    epoch_lrs = np.empty(cfg.epochs, dtype=np.float64)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        batch_losses = np.empty(batches_per_epoch, dtype=np.float64)
        for b in range(batches_per_epoch):
            idx = pk_sample(y, cfg.p, cfg.k, sampler)
            loss, grads = batch_gradients(model, [x[idx] for x in xs], y[idx], cfg.loss)
            if not math.isfinite(loss):
                raise NumericError(f"training loss diverged at epoch {epoch}, batch {b}")
            sgd_step(trainables, grads, opt, lr, cfg.momentum)
            batch_losses[b] = loss
        epoch_losses[epoch] = batch_losses.mean()
        epoch_lrs[epoch] = lr
    model.validate()
    return RunRecord(
        config=cfg,
        seed=cfg.seed,
        epoch_losses=epoch_losses,
        epoch_lrs=epoch_lrs,
        model=model,
        config_hash=config_hash(cfg),
    )


def carve_validation(ds: MultimodalDataset, rng: Rng, id_fraction: float = 0.1) -> MultimodalDataset:
    """Hold out a fraction of train identities as a query/gallery split.

    Returns a dataset of the original train rows only: held-out ids
    become the validation query/gallery, the rest stay training rows.
    Test rows never enter, so model selection cannot leak test identity.
    """
    rows = ds.train_rows
    if rows.size == 0:
        raise DataError("dataset has no training rows to carve validation from")
    ids = np.unique(ds.ids[rows])
    n_val = max(2, int(round(id_fraction * ids.size)))
    if ids.size - n_val < 2:
        raise DataError(
            f"cannot hold out {n_val} of {ids.size} train ids and still train"
        )
    perm = rng.permutation(ids.size)
    val_ids = set(ids[perm[:n_val]].tolist())
    sub_ids = ds.ids[rows]
    split = np.full(rows.size, SPLIT_TRAIN, dtype=np.int8)
    is_val = np.isin(sub_ids, list(val_ids))
    split[is_val] = SPLIT_GALLERY
    sub = MultimodalDataset(
        features=[f[rows] for f in ds.features],
        ids=sub_ids,
        view_ids=ds.view_ids[rows],
        split=split,
        modality_names=list(ds.modality_names),
    )
    counts = np.bincount(np.searchsorted(np.unique(sub_ids[is_val]), sub_ids[is_val]))
    views_as_query = max(1, int(counts.min()) // 4)
    return split_query_gallery(sub, views_as_query, rng.split("val-query-split"))


@dataclass(frozen=True)
class GridCell:
    batch_size: int
    lr: float
    p: int
    k: int
    val_map: float
    val_rank1: float


@dataclass
class GridSearchResult:
    best: RunRecord  # best config retrained on the full train split
    best_cell: GridCell
    cells: list
    cell_records: list  # RunRecord per cell, trained on the carved split


def grid_search(
    ds: MultimodalDataset,
    batch_sizes: Sequence[int],
    lr_values: Sequence[float],
    base_cfg: TrainConfig,
) -> GridSearchResult:
    """Train every (batch size, lr) cell, select by validation mAP.

    The validation split is carved from train identities. Ties prefer
    the lower lr, then the smaller batch. The winning cell is retrained
    on the full train split and returned as `best`.
    """
    from . import evalkit  # local import, evalkit depends on this module

    if len(batch_sizes) == 0 or len(lr_values) == 0:
        raise ConfigError("grid_search needs at least one batch size and one lr")
    ds_val = carve_validation(ds, Rng(base_cfg.seed).split("grid-val"))
    cells = []
    cell_records = []
    scored = []
    for bs in batch_sizes:
        if bs % base_cfg.k != 0 or bs // base_cfg.k < 2:
            raise ConfigError(
                f"batch size {bs} is not a multiple of K={base_cfg.k} with P >= 2"
            )
        for lr in lr_values:
            cfg = replace(base_cfg, p=bs // base_cfg.k, lr_base=float(lr))
            rec = train(ds_val, cfg)
            report = evalkit.eval_multimodal(rec.model, ds_val)
            cell = GridCell(
                batch_size=int(bs),
                lr=float(lr),
                p=cfg.p,
                k=cfg.k,
                val_map=report.map,
                val_rank1=report.rank1,
            )
            cells.append(cell)
            cell_records.append(rec)
            scored.append(((-cell.val_map, cell.lr, cell.batch_size), cell, cfg))
    scored.sort(key=lambda item: item[0])
    _, best_cell, best_cfg = scored[0]
    best = train(ds, best_cfg)
    return GridSearchResult(best=best, best_cell=best_cell, cells=cells, cell_records=cell_records)
