"""Variational training: one-sample MC likelihood + l2 decay, optimised with Adam."""
from __future__ import annotations

import itertools
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .calib import auroc
from .data import Dataset, Record
from .grad import Tape, Tensor
from .infer import mc_predict_many
from .retain import (Dims, Draws, ModelParams, Variant, forward_batch, init_params, param_leaves,
                     sample_draws)

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
CHECKPOINT_VERSION = "1"

# hyperparameter ranges searched by the sweep
SWEEP_GRID = {
    "batch_size": [32, 64, 128, 256],
    "learning_rate": [1e-2, 1e-3, 1e-4],
    "l2_lambda": [0.02, 0.002, 0.0002, 0.0004],
    "dropout_rate": [0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5],
}


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    l2_lambda: float = 2e-4
    dropout_rate: float = 0.2
    max_steps: int = 100_000
    max_epochs: int = 200
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 20
    embed_dim: int = 16
    hidden: int = 16
    val_samples: int = 10

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.max_steps < 0 or self.max_epochs < 0:
            raise ValueError("max_steps and max_epochs must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.embed_dim < 1 or self.hidden < 1 or self.val_samples < 1:
            raise ValueError("embed_dim, hidden and val_samples must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    new_tensors, m, v = {}, {}, {}
    for name, value in params.tensors.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}")
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new_tensors[name] = value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return ModelParams(params.variant, params.dims, new_tensors), OptimizerState(m, v, t)


# ----------------------------------------------------------------------- loss

def group_by_length(records: list[Record]) -> list[list[Record]]:
    groups: dict[int, list[Record]] = defaultdict(list)
    for rec in records:
        groups[rec.T].append(rec)
    return list(groups.values())


def sample_batch_draws(records: list[Record], params: ModelParams, dropout_rate: float,
                       rng: np.random.Generator) -> list[Draws]:
    return [sample_draws(rng, len(g), g[0].T, params, dropout_rate) for g in group_by_length(records)]


def l2_penalty(tape: Tape, P: dict[str, Tensor], params: ModelParams, l2_lambda: float) -> Tensor:
    terms = [tape.sqnorm(P[name]) for name in params.weight_matrices()]
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    return tape.scale(total, l2_lambda)


def batch_loss(tape: Tape, P: dict[str, Tensor], records: list[Record], params: ModelParams,
               draws: list[Draws], l2_lambda: float) -> tuple[Tensor, Tensor]:
    """Mean binary cross-entropy over ``records`` plus l2 decay; returns ``(loss, nll)``."""
    if not records:
        raise ValueError("empty batch")
    groups = group_by_length(records)
    if len(draws) != len(groups):
        raise ValueError("need one Draws bundle per sequence-length group")
    total = None
    for group, d in zip(groups, draws):
        x = np.stack([r.x for r in group])
        y = np.array([r.label for r in group], dtype=np.float64)
        out = forward_batch(tape, P, x, d, params.variant)
        p = tape.clip(out.p_hat, P_CLAMP, 1.0 - P_CLAMP)
        one = tape.constant(np.ones_like(y))
        ll = tape.add(tape.mul(tape.log(p), tape.constant(y)),
                      tape.mul(tape.log(tape.sub(one, p)), tape.constant(1.0 - y)))
        s = tape.sum(ll)
        total = s if total is None else tape.add(total, s)
    nll = tape.scale(total, -1.0 / len(records))
    return tape.add(nll, l2_penalty(tape, P, params, l2_lambda)), nll


def loss(records: list[Record], params: ModelParams, rng: np.random.Generator | None = None,
         dropout_rate: float = 0.0, l2_lambda: float = 0.0,
         draws: list[Draws] | None = None) -> tuple[Tensor, Tape, dict[str, Tensor]]:
    """Build the training loss for one batch on a fresh tape.

    Draws are sampled from ``rng`` unless supplied. Returns the loss tensor,
    the tape and the parameter leaves (whose ``grad`` fills on backward).
    """
    if not records:
        raise ValueError("empty batch")
    if draws is None:
        draws = sample_batch_draws(records, params, dropout_rate, rng or np.random.default_rng())
    tape = Tape()
    P = param_leaves(tape, params)
    total, _ = batch_loss(tape, P, records, params, draws, l2_lambda)
    return total, tape, P


# ----------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_auroc: float | None = None


def validation_auroc(records: list[Record], params: ModelParams, config: TrainConfig) -> float | None:
    labels = [r.label for r in records]
    if len(set(labels)) < 2:
        return None
    dists = mc_predict_many(records, params, config.val_samples, seed=config.seed,
                            dropout_rate=config.dropout_rate)
    return auroc([d.mean for d in dists], labels)


def train(dataset: Dataset, variant: Variant, config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the training split with early stopping on validation AUROC.

    ``dataset`` must be preprocessed and carry a split. Returns the parameters
    from the epoch with the best validation AUROC.
    """
    config.validate()
    if dataset.split is None:
        raise ValueError("dataset has no split; call data.split first")
    index = {r.id: r for r in dataset.records}
    train_recs = [index[i] for i in dataset.split.train]
    val_recs = [index[i] for i in dataset.split.validation]
    if not train_recs:
        raise ValueError("empty training split")

    rng = np.random.default_rng(config.seed)
    dims = Dims(dataset.n_features, config.embed_dim, config.hidden)
    params = init_params(dims, variant, rng)
    result = TrainResult(params)
    if config.max_steps == 0 or config.max_epochs == 0:
        return result

    state = OptimizerState.zeros_like(params)
    best_params, best_score, stale = params, None, 0
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_recs))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_recs[i] for i in order[start:start + config.batch_size]]
            total, tape, P = loss(batch, params, rng, config.dropout_rate, config.l2_lambda)
            tape.backward(total)
            params, state = adam_step(params, {k: t.grad for k, t in P.items()}, state, config)
            batch_losses.append(float(total.value))
            steps += 1
            if steps >= config.max_steps:
                break
        score = validation_auroc(val_recs, params, config)
        result.history.append({"epoch": epoch, "steps": steps, "train_loss": float(np.mean(batch_losses)),
                               "val_auroc": score})
        log.debug("epoch %d loss %.5f val_auroc %s", epoch, np.mean(batch_losses), score)
        if score is None or best_score is None or score > best_score:
            best_params, best_score, stale = params, score, 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
        if steps >= config.max_steps:
            break
    result.params = best_params
    result.best_val_auroc = best_score
    return result


def sweep_cells(grid: dict[str, list] | None = None) -> list[dict]:
    grid = SWEEP_GRID if grid is None else grid
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(dataset: Dataset, variant: Variant, base: TrainConfig,
          grid: dict[str, list] | None = None) -> list[dict]:
    """Train one model per grid cell; rows carry the cell and its best validation AUROC."""
    rows = []
    for cell in sweep_cells(grid):
        config = TrainConfig(**{**asdict(base), **cell})
        res = train(dataset, variant, config)
        rows.append({**cell, "best_val_auroc": res.best_val_auroc, "best_epoch": res.best_epoch})
    return rows


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, params: ModelParams, config: TrainConfig, extra: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "variant": params.variant.value,
        "dims": asdict(params.dims),
        "config": asdict(config),
        "extra": extra or {},
        "tensors": {
            name: {"shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}
            for name, arr in sorted(params.tensors.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=int)):
            raise ValueError(f"{path}: tensor {name} has {values.size} values for shape {shape}")
        tensors[name] = values.reshape(shape)
    params = ModelParams(Variant(doc["variant"]), Dims(**doc["dims"]), tensors)
    return Checkpoint(params, TrainConfig.from_dict(doc["config"]), doc.get("extra", {}))
