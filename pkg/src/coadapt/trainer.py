"""Episodic meta-training with Adam, evaluation with 95% intervals, checkpoints and sweeps."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MODES, AdaptationResult, MABParameters, co_adapt, init_mab
from .encoder import EncoderParameters, encode, init_encoder
from .episodes import Dataset, DatasetError, Episode, sample_episode
from .protonet import ClassDistribution, classify, episode_accuracy, episode_loss, prototypes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CADW"
CKPT_VERSION = 1
CI_Z = 1.96
PARAMETRIC_MODES = ("full", "support_only", "query_only", "self_only")


class TrainingError(RuntimeError):
    """Training cannot continue (for example, the loss became non-finite)."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 1
    query: int = 15
    epochs: int = 60
    tasks_per_epoch: int = 100
    learning_rate: float = 0.003
    mode: str = "full"
    distance: str = "squared_euclidean"
    seed: int = 0
    encoder_kind: str = "mlp"
    hidden: tuple[int, ...] = (64,)
    embedding_dim: int = 64
    use_norm: bool = True
    query_aggregation: str = "mean"
    precision: int = 64
    val_episodes: int = 200
    val_seed: int = 1234

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        counts = dict(way=self.way, shot=self.shot, query=self.query, epochs=self.epochs,
                      tasks_per_epoch=self.tasks_per_epoch, embedding_dim=self.embedding_dim)
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.val_episodes < 0:
            raise ValueError(f"val_episodes must be non-negative, got {self.val_episodes}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @classmethod
    def paper_scale(cls, shot: int = 1, **overrides) -> TrainConfig:
        """Full protocol: 300 epochs for 1-shot, 200 otherwise, 200 tasks per epoch."""
        epochs = 300 if shot == 1 else 200
        return cls(shot=shot, epochs=epochs, tasks_per_epoch=200, **overrides)

    @property
    def total_tasks(self) -> int:
        return self.epochs * self.tasks_per_epoch

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    encoder: EncoderParameters
    mab: MABParameters | None

    def parameters(self) -> dict[str, nx.Tensor]:
        params = {f"encoder.{k}": t for k, t in self.encoder.tensors.items()}
        if self.mab is not None:
            params.update({f"mab.{k}": t for k, t in self.mab.tensors.items()})
        return params

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.parameters().items()}

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> Model:
        enc = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("encoder.")}
        mab = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("mab.")}
        return Model(
            self.encoder.with_arrays(enc, requires_grad),
            self.mab.with_arrays(mab, requires_grad) if self.mab is not None else None,
        )


def build_model(config: TrainConfig, input_shape: tuple[int, ...]) -> Model:
    """Initialize encoder and (for parametric modes) the shared attention block from ``config.seed``."""
    enc_seed, mab_seed = np.random.SeedSequence(config.seed).generate_state(2)
    in_dim = input_shape[0] if config.encoder_kind == "mlp" else input_shape[-1]
    dims = (in_dim, *config.hidden, config.embedding_dim)
    encoder = init_encoder(config.encoder_kind, dims, int(enc_seed), dtype=config.dtype)
    mab = None
    if config.mode in PARAMETRIC_MODES:
        mab = init_mab(config.embedding_dim, int(mab_seed), use_norm=config.use_norm, dtype=config.dtype)
    return Model(encoder, mab)


def forward(
    model: Model,
    episode: Episode,
    mode: str,
    distance: str = "squared_euclidean",
    query_aggregation: str = "mean",
) -> tuple[ClassDistribution, AdaptationResult]:
    """Encode, co-adapt, build prototypes and classify one episode."""
    n, k = episode.support.shape[:2]
    item_shape = episode.support.shape[2:]
    batch = np.concatenate([episode.support.reshape(n * k, *item_shape), episode.query], axis=0)
    dtype = next(iter(model.encoder.tensors.values())).dtype
    z = encode(model.encoder, nx.Tensor(batch, dtype=dtype))
    z_s = nx.reshape(nx.take(z, np.arange(n * k)), (n, k, z.shape[-1]))
    z_q = nx.take(z, np.arange(n * k, z.shape[0]))
    adapted = co_adapt(z_s, z_q, model.mab, mode=mode, query_aggregation=query_aggregation)
    dist = classify(adapted.z_q_adapted, prototypes(adapted.z_s_adapted), distance)
    return dist, adapted


# ------------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new parameter arrays and a new state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, replace(state, m=new_m, v=new_v, step=t)


# ------------------------------------------------------------------ evaluation


@dataclass(frozen=True)
class EvalReport:
    mean_accuracy: float
    ci95: float
    episodes: int
    accuracies: tuple[float, ...] = field(repr=False, default=())
    mode: str | None = None

    @classmethod
    def from_accuracies(cls, accuracies, mode: str | None = None) -> EvalReport:
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise ValueError("no episode accuracies to report")
        std = acc.std(ddof=1) if acc.size > 1 else 0.0
        return cls(float(acc.mean()), float(CI_Z * std / math.sqrt(acc.size)), int(acc.size),
                   tuple(acc.tolist()), mode)

    def to_dict(self, include_accuracies: bool = False) -> dict:
        d = {"mean": self.mean_accuracy, "ci95": self.ci95, "episodes": self.episodes}
        if self.mode is not None:
            d["mode"] = self.mode
        if include_accuracies:
            d["accuracies"] = list(self.accuracies)
        return d


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for episode ``index``; evaluation results never depend on worker count."""
    return np.random.default_rng([seed, index])


def _thread_count() -> int:
    raw = os.environ.get("CAD_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"CAD_THREADS must be an integer, got {raw!r}") from None


def evaluate_model(model: Model, ds: Dataset, n: int, k: int, q: int, episodes: int, seed: int,
                   mode: str, distance: str = "squared_euclidean", query_aggregation: str = "mean",
                   threads: int | None = None) -> np.ndarray:
    """Per-episode accuracies of ``model`` on ``episodes`` seeded episodes."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")

    def run(index: int) -> float:
        ep = sample_episode(ds, n, k, q, episode_rng(seed, index))
        dist, _ = forward(model, ep, mode, distance, query_aggregation)
        return episode_accuracy(dist, ep.query_labels)

    # surface sampler errors before fanning out
    sample_episode(ds, n, k, q, episode_rng(seed, 0))
    workers = threads if threads is not None else _thread_count()
    if workers <= 1:
        return np.array([run(i) for i in range(episodes)])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(run, range(episodes))))


def evaluate(checkpoint: Checkpoint, test_ds: Dataset, n: int = 5, k: int = 1, q: int = 15,
             episodes: int = 2000, seed: int = 0, threads: int | None = None) -> EvalReport:
    """Accuracy and 95% interval of a checkpoint over seeded test episodes."""
    cfg = checkpoint.config
    acc = evaluate_model(checkpoint.model(), test_ds, n, k, q, episodes, seed, cfg.mode, cfg.distance,
                         cfg.query_aggregation, threads)
    return EvalReport.from_accuracies(acc, mode=cfg.mode)


# -------------------------------------------------------------------- training


@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]
    input_shape: tuple[int, ...]
    rng_state: dict
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def model(self) -> Model:
        return build_model(self.config, self.input_shape).with_arrays(self.arrays)


def _check_dataset(ds: Dataset, config: TrainConfig, what: str):
    if len(ds.class_index) < config.way:
        raise DatasetError(f"{what} split has {len(ds.class_index)} classes, {config.way}-way needs more")
    if ds.min_class_size() < config.shot + config.query:
        raise DatasetError(
            f"{what} split: smallest class has {ds.min_class_size()} items, "
            f"{config.shot}-shot with {config.query} queries needs {config.shot + config.query}"
        )


def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset | None = None, metrics_path=None) -> Checkpoint:
    """Meta-train from scratch; keeps the parameters with the best validation accuracy.

    Without a validation split (or with ``val_episodes=0``) the final
    parameters are kept.  ``metrics_path`` receives one JSON line per epoch.
    """
    _check_dataset(train_ds, config, "train")
    use_val = val_ds is not None and config.val_episodes > 0
    if use_val:
        _check_dataset(val_ds, config, "validation")
    if train_ds.features.dtype != config.dtype:
        train_ds = Dataset(train_ds.features.astype(config.dtype), train_ds.labels, train_ds.split_tag)

    model = build_model(config, train_ds.item_shape)
    arrays = model.arrays()
    state = AdamState.zeros_like(arrays)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    best_arrays, best_acc, best_epoch = arrays, -1.0, -1
    history = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(config.epochs):
            losses = []
            for _ in range(config.tasks_per_epoch):
                ep = sample_episode(train_ds, config.way, config.shot, config.query, rng)
                live = model.with_arrays(arrays, requires_grad=True)
                dist, _ = forward(live, ep, config.mode, config.distance, config.query_aggregation)
                loss = episode_loss(dist, ep.query_labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, task {len(losses)}")
                grads = nx.backward(loss, live.parameters())
                arrays, state = adam_step(arrays, grads, state, config.learning_rate)
                losses.append(value)
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "tasks": (epoch + 1) * config.tasks_per_epoch}
            if use_val:
                acc = evaluate_model(model.with_arrays(arrays), val_ds, config.way, config.shot, config.query,
                                     config.val_episodes, config.val_seed, config.mode, config.distance,
                                     config.query_aggregation)
                record["val_accuracy"] = float(acc.mean())
                if record["val_accuracy"] > best_acc:
                    best_arrays, best_acc, best_epoch = arrays, record["val_accuracy"], epoch
            else:
                best_arrays, best_epoch = arrays, epoch
            history.append(record)
            log.info("epoch %d loss %.4f val %s", epoch, record["train_loss"], record.get("val_accuracy"))
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return Checkpoint(config, dict(best_arrays), tuple(train_ds.item_shape), rng.bit_generator.state,
                      history, best_epoch)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    dtype = np.dtype(ckpt.config.dtype).newbyteorder("<")
    meta = {
        "config": ckpt.config.to_dict(),
        "input_shape": list(ckpt.input_shape),
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "dtype": dtype.str,
    }
    block = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(block)))
        fh.write(block)
        for name, arr in ckpt.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()

    def need(offset: int, count: int):
        if offset + count > len(raw):
            raise CheckpointFormatError(f"{path}: truncated at byte {offset}")

    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: expected magic {CKPT_MAGIC!r}, found {raw[:4]!r}")
    need(4, 8)
    version, block_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    need(12, block_len)
    meta = json.loads(raw[12 : 12 + block_len].decode("utf-8"))
    dtype = np.dtype(meta["dtype"])
    pos = 12 + block_len
    arrays = {}
    while pos < len(raw):
        need(pos, 4)
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(pos, name_len + 4)
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(pos, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = int(np.prod(shape)) * dtype.itemsize
        need(pos, nbytes)
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    cfg = TrainConfig.from_dict(meta["config"])
    return Checkpoint(cfg, arrays, tuple(meta["input_shape"]), meta["rng_state"], meta["history"],
                      meta["best_epoch"])


# ----------------------------------------------------------------------- sweeps


ABLATION_MODES = ("support_only", "query_only", "self_only", "full", "none", "nonparam")


def ablation_sweep(config: TrainConfig, train_ds: Dataset, val_ds: Dataset | None, test_ds: Dataset,
                   modes=ABLATION_MODES, episodes: int = 2000, eval_seed: int = 0,
                   checkpoints: dict | None = None) -> dict[str, EvalReport]:
    """Train and evaluate one model per mode with the same training seed and the same test episodes."""
    reports = {}
    for mode in modes:
        ckpt = train(replace(config, mode=mode), train_ds, val_ds)
        if checkpoints is not None:
            checkpoints[mode] = ckpt
        reports[mode] = evaluate(ckpt, test_ds, config.way, config.shot, config.query, episodes, eval_seed)
        log.info("mode %s: %.4f +- %.4f", mode, reports[mode].mean_accuracy, reports[mode].ci95)
    return reports


def sweep_table(reports: dict[str, EvalReport], config: TrainConfig | None = None) -> dict:
    table = {"rows": [{"mode": m, **r.to_dict()} for m, r in reports.items()]}
    if config is not None:
        table["config"] = config.to_dict()
    return table
