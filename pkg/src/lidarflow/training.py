"""Two-phase training: multi-level photometric training, then masked fine-tuning.

Datasets are sequences of ``(I1, I2)`` pairs, each a ``(1, H, W)`` array of
normalized ranges.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
import struct
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import losses
from .errors import ChecksumError, ConfigError, DataError, FormatError, NonFiniteLossError
from .model import DEFAULT_CONFIG, ModelConfig, model_forward
from .optim import OptimizerConfig, ParameterStore, adam_step
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

PHASES = ("train", "finetune")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    phase: str = "train"
    epochs: int = 60
    batch_size: int = 4
    initial_lr: float = 1e-4
    step_decay_factor: float = 0.1
    step_decay_every: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 4
    plateau_threshold: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.step_decay_every <= 0 or self.plateau_patience <= 0:
            raise ConfigError("step_decay_every and plateau_patience must be positive")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        if phase == "finetune":
            base = dict(phase="finetune", epochs=40, batch_size=1, initial_lr=0.5e-4)
        else:
            base = dict(phase="train")
        base.update(overrides)
        return cls(**base)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.initial_lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)

    @classmethod
    def from_mapping(cls, values: Dict[str, str], phase: Optional[str] = None) -> "TrainConfig":
        """Build from string values (config file); unknown keys are ignored here."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        phase = values.get("phase", phase or "train")
        kwargs = {}
        for key, raw in values.items():
            if key not in fields or key == "phase":
                continue
            typ = fields[key].type
            try:
                kwargs[key] = int(raw) if typ in ("int", int) else float(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
        return cls.for_phase(phase, **kwargs)


def plateau_halvings(val_history: Sequence[float], patience: int = 4, threshold: float = 1e-4) -> int:
    """Number of learning-rate reductions triggered by ``val_history``.

    A round improves when it beats the best value so far by a relative margin
    of ``threshold``. After ``patience`` consecutive rounds without
    improvement the rate is reduced and the counter restarts.
    """
    best = math.inf
    wait = 0
    count = 0
    for v in val_history:
        if v < best * (1.0 - threshold) or best == math.inf:
            best = v
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                count += 1
                wait = 0
    return count


def lr_schedule(phase: str, epoch: int, val_history: Sequence[float] = (), config: Optional[TrainConfig] = None) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    config = config or TrainConfig.for_phase(phase)
    if phase == "train":
        return config.initial_lr * config.step_decay_factor ** (epoch // config.step_decay_every)
    if phase == "finetune":
        n = plateau_halvings(val_history, config.plateau_patience, config.plateau_threshold)
        return config.initial_lr * config.plateau_factor ** n
    raise ConfigError(f"unknown phase {phase!r}")


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"LFCK"
CKPT_VERSION = 1
MOMENT1_PREFIX = "adam.m/"
MOMENT2_PREFIX = "adam.v/"
META_PREFIX = "meta/"


def config_fingerprint(config: ModelConfig) -> str:
    text = repr(dataclasses.astuple(config)).encode()
    return hashlib.blake2b(text, digest_size=8).hexdigest()


@dataclasses.dataclass
class Checkpoint:
    params: ParameterStore
    epoch: int = 0
    phase: str = "train"
    best_validation_loss: float = math.inf
    fingerprint: str = ""
    val_history: List[float] = dataclasses.field(default_factory=list)
    train_history: List[float] = dataclasses.field(default_factory=list)

    @property
    def step_count(self) -> int:
        return self.params.step_count

    def to_bytes(self) -> bytes:
        entries = []
        for name, p in self.params.items():
            entries.append((name, p.data))
        if self.params.moment1 is not None:
            for name in self.params.names():
                entries.append((MOMENT1_PREFIX + name, self.params.moment1[name]))
            for name in self.params.names():
                entries.append((MOMENT2_PREFIX + name, self.params.moment2[name]))
        meta = [
            ("step_count", np.array([self.params.step_count])),
            ("epoch", np.array([self.epoch])),
            ("best_validation_loss", np.array([self.best_validation_loss])),
            ("val_history", np.array(self.val_history)),
            ("train_history", np.array(self.train_history)),
            ("phase/" + self.phase, np.zeros(0)),
            ("fingerprint/" + self.fingerprint, np.zeros(0)),
        ]
        entries.extend((META_PREFIX + k, v) for k, v in meta)

        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
        for name, arr in entries:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<Q", _checksum(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 20 or blob[:4] != CKPT_MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
        if _checksum(body) != stored:
            raise ChecksumError("checkpoint checksum mismatch; file is corrupt or truncated")
        version, count = struct.unpack_from("<II", body, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 12
        params = ParameterStore()
        m1, m2, meta = {}, {}, {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                name = body[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", body, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", body, pos)
                pos += 4 * rank
                size = int(np.prod(dims, dtype=np.int64))
                arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
                pos += 4 * size
                if name.startswith(MOMENT1_PREFIX):
                    m1[name[len(MOMENT1_PREFIX):]] = arr.astype(np.float32)
                elif name.startswith(MOMENT2_PREFIX):
                    m2[name[len(MOMENT2_PREFIX):]] = arr.astype(np.float32)
                elif name.startswith(META_PREFIX):
                    meta[name[len(META_PREFIX):]] = arr
                else:
                    params.add(name, Tensor(arr.astype(np.float32)))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"malformed checkpoint entry: {exc}") from None
        if pos != len(body):
            raise FormatError("trailing bytes after the last checkpoint entry")
        if m1:
            if set(m1) != set(params.names()) or set(m2) != set(params.names()):
                raise FormatError("optimizer state does not match the parameter set")
            params.moment1, params.moment2 = m1, m2
        params.step_count = int(meta["step_count"][0])
        phase = next(k.split("/", 1)[1] for k in meta if k.startswith("phase/"))
        fingerprint = next(k.split("/", 1)[1] for k in meta if k.startswith("fingerprint/"))
        return cls(
            params=params,
            epoch=int(meta["epoch"][0]),
            phase=phase,
            best_validation_loss=float(meta["best_validation_loss"][0]),
            fingerprint=fingerprint,
            val_history=[float(v) for v in meta["val_history"]],
            train_history=[float(v) for v in meta["train_history"]],
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


# --------------------------------------------------------------------------
# config files

def read_config_file(path, allowed_keys) -> Dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed_keys:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


TRAIN_KEYS = frozenset(f.name for f in dataclasses.fields(TrainConfig))


# --------------------------------------------------------------------------
# loops

def _stack(pairs) -> tuple:
    i1 = np.stack([p[0] for p in pairs]).astype(np.float32)
    i2 = np.stack([p[1] for p in pairs]).astype(np.float32)
    return Tensor(i1), Tensor(i2)


def _phase_loss(phase, flows, i1, i2, weights, params):
    if phase == "finetune":
        return losses.finetune_loss(flows, i1, i2, weights, params)
    return losses.training_loss(flows, i1, i2, weights)


def evaluate_loss(
    dataset: Sequence,
    params: ParameterStore,
    phase: str = "train",
    weights: losses.LossWeights = losses.DEFAULT_WEIGHTS,
    model_config: ModelConfig = DEFAULT_CONFIG,
    batch_size: int = 1,
) -> float:
    """Mean loss over ``dataset`` without touching parameters or gradients."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    total = 0.0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            i1, i2 = _stack(chunk)
            flows = model_forward(i1, i2, params, model_config)
            total += _phase_loss(phase, flows, i1, i2, weights, params).item() * len(chunk)
    return total / len(dataset)


def _run(
    dataset,
    config: TrainConfig,
    params: ParameterStore,
    checkpoint: Checkpoint,
    val_dataset,
    weights,
    model_config,
    out_dir,
    callback,
    max_steps,
) -> Checkpoint:
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    opt = config.optimizer
    steps = 0
    start_epoch = checkpoint.epoch
    for epoch in range(start_epoch, start_epoch + config.epochs):
        local_epoch = epoch - start_epoch
        lr = lr_schedule(config.phase, local_epoch, checkpoint.val_history, config)
        step_cfg = dataclasses.replace(opt, lr=lr)
        order = rng.permutation(len(dataset))
        batch_losses = []
        stop = False
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            i1, i2 = _stack([dataset[i] for i in idx])
            flows = model_forward(i1, i2, params, model_config)
            loss = _phase_loss(config.phase, flows, i1, i2, weights, params)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b} (pairs {idx.tolist()})"
                )
            backward(loss, params)
            adam_step(params, step_cfg)
            params.zero_grad()
            del loss, flows
            batch_losses.append(value)
            steps += 1
            if callback is not None and callback(
                dict(epoch=epoch, batch=b, step=params.step_count, loss=value, lr=lr, params=params)
            ):
                stop = True
            if max_steps is not None and steps >= max_steps:
                stop = True
            if stop:
                break
        train_loss = float(np.mean(batch_losses))
        if val_dataset is not None and len(val_dataset) > 0:
            val = evaluate_loss(val_dataset, params, config.phase, weights, model_config)
        else:
            val = train_loss
        checkpoint.train_history.append(train_loss)
        checkpoint.val_history.append(val)
        checkpoint.epoch = epoch + 1
        improved = val < checkpoint.best_validation_loss
        if improved:
            checkpoint.best_validation_loss = val
        log.info("%s epoch %d: lr=%.3g train=%.6f val=%.6f", config.phase, epoch, lr, train_loss, val)
        if out_dir is not None:
            checkpoint.save(Path(out_dir) / "last.lfck")
            if improved:
                checkpoint.save(Path(out_dir) / "best.lfck")
        if stop:
            break
    return checkpoint


def train(
    dataset: Sequence,
    config: Optional[TrainConfig] = None,
    params: Optional[ParameterStore] = None,
    *,
    val_dataset: Optional[Sequence] = None,
    weights: losses.LossWeights = losses.DEFAULT_WEIGHTS,
    model_config: ModelConfig = DEFAULT_CONFIG,
    out_dir=None,
    callback: Optional[Callable[[dict], bool]] = None,
    max_steps: Optional[int] = None,
) -> Checkpoint:
    """Train from ``params`` (fresh, seeded by ``config.seed``, if omitted).

    ``callback`` receives a dict after every optimizer step and may return
    True to stop early; ``max_steps`` caps the number of steps.
    """
    from .model import init_params

    config = config or TrainConfig.for_phase("train")
    if config.phase != "train":
        raise ConfigError("train() needs a config with phase='train'")
    if params is None:
        params = init_params(model_config, seed=config.seed)
    ckpt = Checkpoint(params=params, phase="train", fingerprint=config_fingerprint(model_config))
    return _run(dataset, config, params, ckpt, val_dataset, weights, model_config, out_dir, callback, max_steps)


def finetune(
    dataset: Sequence,
    config: Optional[TrainConfig],
    checkpoint: Checkpoint,
    *,
    val_dataset: Optional[Sequence] = None,
    weights: losses.LossWeights = losses.DEFAULT_WEIGHTS,
    model_config: ModelConfig = DEFAULT_CONFIG,
    out_dir=None,
    callback: Optional[Callable[[dict], bool]] = None,
    max_steps: Optional[int] = None,
) -> Checkpoint:
    """Continue from a train-phase checkpoint with the masked loss and plateau decay.

    The optimizer state carries over; epoch counters continue, the
    validation history restarts.
    """
    config = config or TrainConfig.for_phase("finetune")
    if config.phase != "finetune":
        raise ConfigError("finetune() needs a config with phase='finetune'")
    if checkpoint.fingerprint and checkpoint.fingerprint != config_fingerprint(model_config):
        raise ConfigError("checkpoint was produced by a different model configuration")
    ckpt = Checkpoint(
        params=checkpoint.params,
        epoch=checkpoint.epoch,
        phase="finetune",
        fingerprint=config_fingerprint(model_config),
    )
    return _run(dataset, config, ckpt.params, ckpt, val_dataset, weights, model_config, out_dir, callback, max_steps)
