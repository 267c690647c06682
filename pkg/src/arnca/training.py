"""Training loop, evaluation reports and reference predictors."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .grid import Env, SequenceChunk
from .metrics import auc_roc, f1_score
from .models import ArncaConfig, Model


def default_t_pred(env: Env | str) -> int:
    return 60 if Env.parse(env) == Env.FOREST else 30


@dataclass
class TrainConfig:
    model: str = "arnca"
    env: str = "forest"
    variant: str = "det"
    t_obs: int = 10
    t_pred: int | None = None
    epochs: int = 300
    lr: float = 3e-4
    batch: int = 4
    data_fraction: float = 1.0
    seed: int = 0
    u: int = 16
    radius: int = 1
    recurrent_cell: str = "lstm"
    attention_scale: bool = False
    prediction_input: str = "zeros"
    obs_loss: bool = False
    clip_norm: float = 1.0  # global gradient-norm cap; 0 disables
    eval_every: int = 0  # 0: validate only after the last epoch

    def __post_init__(self) -> None:
        if self.t_pred is None:
            self.t_pred = default_t_pred(self.env)
        if not 0 < self.t_obs < self.t_pred:
            raise ValueError("need 0 < t_obs < t_pred")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def arch(self) -> ArncaConfig:
        return ArncaConfig(kind=self.model, u=self.u, radius=self.radius,
                           recurrent_cell=self.recurrent_cell,
                           attention_scale=self.attention_scale,
                           prediction_input=self.prediction_input)


def subset_size(n_chunks: int, fraction: float) -> int:
    return int(math.floor(fraction * n_chunks + 1e-9))


def select_subset(n_chunks: int, fraction: float, seed: int) -> np.ndarray:
    """Chunk indices kept for training; chosen once per run by a seeded shuffle."""
    k = subset_size(n_chunks, fraction)
    if k < 1:
        raise ValueError(f"data_fraction={fraction} of {n_chunks} chunks leaves an empty training subset")
    return np.sort(np.random.default_rng(seed).permutation(n_chunks)[:k])


def _check_chunks(chunks: Sequence[SequenceChunk], env: Env | str, need_frames: int) -> None:
    env = Env.parse(env)
    for c in chunks:
        if c.env != env:
            raise ValueError(f"chunk env {c.env.label} does not match {env.label}")
        if c.T < need_frames:
            raise ValueError(f"chunk has {c.T} frames, needs {need_frames}")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    subset: np.ndarray

    def write_log(self, path: str | Path) -> None:
        write_log(self.log, path)


LOG_COLUMNS = ("epoch", "loss", "valid_f1", "valid_auc", "wall_seconds")


def write_log(log: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in log:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_COLUMNS})


def train(config: TrainConfig, train_chunks: Sequence[SequenceChunk],
          valid_chunks: Sequence[SequenceChunk] = (),
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise BCE over the prediction window with Adam.

    Deterministic given ``config.seed`` and the chunk contents.
    """
    _check_chunks(train_chunks, config.env, config.t_pred)
    _check_chunks(valid_chunks, config.env, config.t_pred)
    subset = select_subset(len(train_chunks), config.data_fraction, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    model = Model(config.arch(), seed=config.seed)
    dtype = ad.default_dtype()
    rgb = np.stack([train_chunks[i].rgb()[:config.t_obs] for i in subset]).astype(dtype)
    start = 0 if config.obs_loss else config.t_obs
    target = np.stack([train_chunks[i].masks()[start:config.t_pred] for i in subset]).astype(dtype)

    log: list[dict] = []
    clock = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(subset))
        losses = []
        for lo in range(0, len(order), config.batch):
            idx = order[lo:lo + config.batch]
            maps = model.rollout_batch(rgb[idx], config.t_obs, config.t_pred, decode_all=config.obs_loss)
            loss = ad.bce_loss(maps, target[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            loss.backward()
            ad.clip_grad_norm(model.params, config.clip_norm)
            ad.adam_step(model.params, config.lr)
            losses.append(value)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "valid_f1": None,
               "valid_auc": None, "wall_seconds": round(time.perf_counter() - clock, 3)}
        last = epoch == config.epochs - 1
        due = config.eval_every and (epoch + 1) % config.eval_every == 0
        if valid_chunks and (last or due):
            report = evaluate(model, valid_chunks, config.t_obs, config.t_pred)
            row["valid_f1"], row["valid_auc"] = report.f1_mean, report.auc_mean
        log.append(row)
        if progress:
            progress(row)
    return TrainResult(model, log, subset)


# ------------------------------------------------------------- evaluation

class Predictor(Protocol):
    def predict(self, chunks: Sequence[SequenceChunk], t_obs: int, t_pred: int) -> np.ndarray: ...


class OraclePredictor:
    """Emits the ground-truth masks; an upper bound for harness checks."""

    def predict(self, chunks, t_obs, t_pred):
        return np.stack([c.masks()[t_obs:t_pred] for c in chunks]).astype(np.float64)


class PersistencePredictor:
    """Repeats the last observed target mask over the whole prediction window."""

    def predict(self, chunks, t_obs, t_pred):
        return np.stack([np.stack(persistence_baseline(c, t_obs, t_pred))
                         if t_pred > t_obs else np.zeros((0, c.n, c.n)) for c in chunks])


@dataclass
class ConstantPredictor:
    value: float = 0.5

    def predict(self, chunks, t_obs, t_pred):
        return np.full((len(chunks), t_pred - t_obs, chunks[0].n, chunks[0].n), self.value)


def persistence_baseline(chunk: SequenceChunk, t_obs: int, t_pred: int) -> list[np.ndarray]:
    last = chunk.masks()[t_obs - 1].astype(np.float64)
    return [last.copy() for _ in range(t_pred - t_obs)]


@dataclass
class EvalReport:
    f1_mean: float
    f1_std: float
    auc_mean: float
    auc_std: float
    f1_per_chunk: list[float]
    auc_per_chunk: list[float]
    auc_excluded_frames: int
    runtime_seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = asdict(self)
        if not include_runtime:
            out.pop("runtime_seconds")
        return out

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(_json_safe(self.to_dict(include_runtime)), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([v for v in values if not np.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def evaluate(predictor: Predictor, test_chunks: Sequence[SequenceChunk], t_obs: int, t_pred: int,
             env: Env | str | None = None, batch: int = 8, config: dict | None = None) -> EvalReport:
    """Per-chunk F1 and AUC over the prediction window, then mean and std over chunks."""
    if env is not None:
        _check_chunks(test_chunks, env, t_pred)
    else:
        for c in test_chunks:
            if c.T < t_pred:
                raise ValueError(f"chunk has {c.T} frames, needs {t_pred}")
    clock = time.perf_counter()
    f1s: list[float] = []
    aucs: list[float] = []
    excluded = 0
    for lo in range(0, len(test_chunks), batch):
        group = list(test_chunks[lo:lo + batch])
        maps = predictor.predict(group, t_obs, t_pred)
        for chunk, chunk_maps in zip(group, maps):
            masks = chunk.masks()[t_obs:t_pred]
            f1s.append(f1_score(list(chunk_maps), list(masks)))
            auc, skipped = auc_roc(list(chunk_maps), list(masks), return_excluded=True)
            aucs.append(auc)
            excluded += skipped
    f1_mean, f1_std = _mean_std(f1s)
    auc_mean, auc_std = _mean_std(aucs)
    echo = {"t_obs": t_obs, "t_pred": t_pred, "n": test_chunks[0].n if test_chunks else None,
            "chunks": len(test_chunks)}
    if isinstance(predictor, Model):
        echo["model"] = predictor.config.to_json()
    else:
        echo["predictor"] = type(predictor).__name__
    echo.update(config or {})
    return EvalReport(f1_mean, f1_std, auc_mean, auc_std, f1s, aucs, excluded,
                      round(time.perf_counter() - clock, 3), echo)


def scale_transfer_eval(model: Model, test_chunks: Sequence[SequenceChunk], t_obs: int, t_pred: int,
                        n_train: int | None = None, env: Env | str | None = None) -> EvalReport:
    """Evaluate at whatever grid size the test chunks have; weights are used as-is."""
    n_test = test_chunks[0].n if test_chunks else None
    return evaluate(model, test_chunks, t_obs, t_pred, env=env,
                    config={"n_train": n_train, "n_test": n_test})
