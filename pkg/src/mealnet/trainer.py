"""SGD training loop with a two-phase learning rate, flips, checkpoints and resume."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import InstanceAnnotation, Sample, mask_to_bbox
from .geometry import DepthMap
from .model import ConfigError, MealNet, ModelConfig
from .model.network import depth_tensor, sample_targets, to_input

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"training diverged at iteration {iteration} (objective {value})")
        self.iteration = iteration
        self.value = value


class CheckpointError(RuntimeError):
    pass


class CheckpointMismatchError(CheckpointError, ConfigError):
    """The checkpoint was written for a different model or train config."""


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 5000
    lr_initial: float = 1e-3
    lr_drop_factor: float = 0.1
    lr_drop_fraction: float = 2 / 3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: int = 0  # 0 disables validation
    flip_lr: bool = True
    flip_ud: bool = True

    def __post_init__(self):
        if not self.lr_initial > 0:
            raise ConfigError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be >= 1")
        if not 0 < self.drop_iteration < self.total_iterations and self.total_iterations > 1:
            raise ConfigError(f"lr drop point {self.drop_iteration} must lie inside (0, {self.total_iterations})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be >= 0")

    @property
    def drop_iteration(self) -> int:
        return int(round(self.total_iterations * self.lr_drop_fraction))

    def lr_at(self, iteration: int) -> float:
        if iteration >= self.drop_iteration:
            return self.lr_initial * self.lr_drop_factor
        return self.lr_initial

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    iteration: int = 0
    best_val: float = math.inf
    best_iteration: int = -1


# --------------------------------------------------------------------------- #
# augmentation


def flip_augment(sample: Sample, lr: bool = False, ud: bool = False) -> Sample:
    """Flip every per-pixel field, recompute boxes, and mirror the principal point."""
    if not (lr or ud):
        return sample
    axes = tuple(a for a, f in ((0, ud), (1, lr)) if f)

    def flip(a):
        return np.ascontiguousarray(np.flip(a, axis=axes))

    instances = [
        InstanceAnnotation(i.class_id, mask_to_bbox(flip(i.mask)), flip(i.mask), i.volume_ml) for i in sample.instances
    ]
    return replace(
        sample,
        rgb=flip(sample.rgb),
        depth_gt=DepthMap(flip(sample.depth_gt.values)),
        camera=sample.camera.flipped(lr=lr, ud=ud),
        plate_mask=flip(sample.plate_mask),
        instances=instances,
    )


# --------------------------------------------------------------------------- #
# seeding and schedule


def build_model(model_config: ModelConfig = ModelConfig(), seed: int = 0) -> MealNet:
    """Initialize weights from the initialization stream of ``seed``."""
    torch.manual_seed(seed)
    return MealNet(model_config)


def _stream(seed: int, purpose: int, *index) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *index])


_DATA, _FLIP, _ROI, _VAL = 1, 2, 3, 4


def batch_indices(n: int, config: TrainConfig, iteration: int) -> list:
    """Sample indices of an iteration: epoch-wise permutations, a pure function of the index."""
    start = iteration * config.batch_size
    out = []
    for pos in range(start, start + config.batch_size):
        epoch, offset = divmod(pos, n)
        out.append(int(_stream(config.seed, _DATA, epoch).permutation(n)[offset]))
    return out


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on everything except normalization-layer parameters."""
    norm_params = set()
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            norm_params.update(id(p) for p in m.parameters())
    decay = [p for p in model.parameters() if id(p) not in norm_params]
    no_decay = [p for p in model.parameters() if id(p) in norm_params]
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.lr_initial,
        momentum=config.momentum,
    )


def collate(samples: list):
    """Network input, per-image targets and the depth batch."""
    x = to_input(np.stack([s.rgb for s in samples]))
    return x, [sample_targets(s) for s in samples], depth_tensor(samples)


# --------------------------------------------------------------------------- #
# checkpoints


def save_checkpoint(path, model: MealNet, optimizer, state: TrainState, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "state": asdict(state),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} not found") from exc
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint {path} has an unknown format")
    return payload


def load_model(path) -> MealNet:
    """Rebuild the network stored in a checkpoint."""
    payload = read_checkpoint(path)
    model = MealNet(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model"])
    return model


def load_checkpoint(path, model: MealNet, optimizer=None, config: TrainConfig | None = None) -> TrainState:
    """Restore weights (and optimizer) in place; configs must match the stored ones."""
    payload = read_checkpoint(path)
    if payload["model_config"] != model.config.to_dict():
        raise CheckpointMismatchError(f"checkpoint {path} was written for a different model config")
    if config is not None and payload["train_config"] != config.to_dict():
        raise CheckpointMismatchError(f"checkpoint {path} was written for a different train config")
    model.load_state_dict(payload["model"])
    if optimizer is not None:
        if payload["optimizer"] is None:
            raise CheckpointError(f"checkpoint {path} holds no optimizer state")
        optimizer.load_state_dict(payload["optimizer"])
    return TrainState(**payload["state"])


# --------------------------------------------------------------------------- #
# loop


@torch.no_grad()
def validation_loss(model: MealNet, samples: list, config: TrainConfig) -> float:
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(config.seed * 1000 + _VAL)
    total = 0.0
    for s in samples:
        x, tg, dg = collate([s])
        total += float(model.forward_train(x, tg, gen, dg).objective)
    model.train(was_training)
    return total / max(len(samples), 1)


def train(model: MealNet, samples: list, config: TrainConfig = TrainConfig(), out_dir=None,
          resume=None, val_samples=None, stop_at: int | None = None) -> TrainState:
    """Run SGD on ``samples`` (``Sample`` list) up to ``config.total_iterations``.

    Writes ``train_log.jsonl`` (one deterministic record per iteration),
    ``timing.jsonl`` (wall clock) and checkpoints under ``out_dir``.
    ``stop_at`` ends the run early at that iteration (used to test resume).
    """
    if not samples:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, config)
    state = TrainState()
    if resume is not None:
        state = load_checkpoint(resume, model, optimizer, config)
        log.info("resumed from %s at iteration %d", resume, state.iteration)
    mode = "a" if resume is not None else "w"
    log_fh = open(out / "train_log.jsonl", mode) if out is not None else None
    time_fh = open(out / "timing.jsonl", mode) if out is not None else None
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    model.train()
    t_start = time.perf_counter()
    try:
        while state.iteration < end:
            it = state.iteration
            t0 = time.perf_counter()
            lr = config.lr_at(it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            flips = _stream(config.seed, _FLIP, it).random((config.batch_size, 2)) < 0.5
            batch = [
                flip_augment(samples[i], lr=bool(f[0]) and config.flip_lr, ud=bool(f[1]) and config.flip_ud)
                for i, f in zip(batch_indices(len(samples), config, it), flips)
            ]
            x, targets, depth = collate(batch)
            gen = torch.Generator().manual_seed(int(_stream(config.seed, _ROI, it).integers(2**62)))
            losses = model.forward_train(x, targets, gen, depth)
            objective = losses.objective
            if not torch.isfinite(objective):
                record = {"iteration": it, "lr": lr, "diverged": True}
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                raise DivergenceError(it, float(objective.detach()))
            optimizer.zero_grad(set_to_none=True)
            objective.backward()
            optimizer.step()
            state.iteration = it + 1
            record = {"iteration": it, "lr": lr, **losses.as_dict()}
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                time_fh.write(json.dumps({"iteration": it, "seconds": time.perf_counter() - t0,
                                          "elapsed": time.perf_counter() - t_start}) + "\n")
            if it % 100 == 0:
                log.info("iter %d lr %.0e objective %.4f", it, lr, record["objective"])
            if val_samples and config.validate_every and state.iteration % config.validate_every == 0:
                v = validation_loss(model, val_samples, config)
                if v < state.best_val:
                    state.best_val, state.best_iteration = v, state.iteration
                    if out is not None:
                        save_checkpoint(out / "best.pt", model, optimizer, state, config)
            if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.iteration:06d}.pt", model, optimizer, state, config)
    finally:
        if log_fh:
            log_fh.close()
            time_fh.close()
    if out is not None:
        save_checkpoint(out / "last.pt", model, optimizer, state, config)
    return state


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
