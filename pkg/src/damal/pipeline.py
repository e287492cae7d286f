"""
Training with step-decayed SGD warm restarts, sliding-window inference,
checkpoint files and ``key = value`` config files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses
from .distance import compute_all_weight_maps
from .network import DAMNet, NetworkConfig, build_model
from .volume import (LabelVolume, SubjectRecord, VolumeValidationError, normalize_intensity,
                     sample_patch)

log = logging.getLogger(__name__)

LOSS_NAMES = ("combined", "dice", "attention", "ce", "focal")
LOG_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_attention", "loss_dice")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    base_lr: float = 0.01
    lr_decay_factor: float = 10.0
    decay_every: int = 40
    period_length: int = 200
    num_periods: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_dice: float = 1.0
    seed: int = 0
    steps_per_epoch: int = 50
    loss: str = "combined"
    focal_gamma: float = 2.0
    foreground_bias: bool = True
    checkpoint_every: int = 200  # epochs; 0 disables periodic checkpoints
    inference_stride: int = 16

    def __post_init__(self):
        ps = self.patch_size
        if isinstance(ps, int):
            ps = (ps, ps, ps)
        object.__setattr__(self, "patch_size", tuple(int(p) for p in ps))
        positive = ("batch_size", "base_lr", "lr_decay_factor", "decay_every", "period_length",
                    "num_periods", "steps_per_epoch", "inference_stride")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if any(p <= 0 for p in self.patch_size) or len(self.patch_size) != 3:
            raise ConfigError(f"patch_size must be three positive ints, got {self.patch_size}")
        if self.period_length % self.decay_every:
            raise ConfigError(
                f"decay_every ({self.decay_every}) must divide period_length ({self.period_length})"
            )
        if self.momentum < 0 or self.weight_decay < 0 or self.lambda_dice < 0:
            raise ConfigError("momentum, weight_decay and lambda_dice must be >= 0")
        if self.loss not in LOSS_NAMES:
            raise ConfigError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")

    @property
    def total_epochs(self) -> int:
        return self.period_length * self.num_periods

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    current_lr: float = 0.0
    best_val_dsc: Optional[float] = None
    rng_state: Optional[dict] = None


def warm_restart_lr(epoch: int, cfg: TrainConfig) -> float:
    """Step decay inside each period, hard reset to ``base_lr`` at every period start."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    drops = (epoch % cfg.period_length) // cfg.decay_every
    return cfg.base_lr / cfg.lr_decay_factor ** drops


# ---------------------------------------------------------------------------
# config files


def _coerce(value: str, ftype, name: str):
    text = value.strip()
    ftype = str(ftype)
    try:
        if "Tuple" in ftype or "tuple" in ftype:
            parts = text.replace(",", " ").split()
            return tuple(int(p) for p in parts)
        if ftype in ("bool", "<class 'bool'>"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype in ("int", "<class 'int'>"):
            return int(text)
        if ftype in ("float", "<class 'float'>"):
            return float(text)
        if "Optional[float]" in ftype:
            return None if text.lower() == "none" else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def parse_assignments(lines: Sequence[str], source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def build_configs(assignments: Dict[str, str]) -> Tuple[TrainConfig, NetworkConfig]:
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    net_fields = {f.name: f.type for f in fields(NetworkConfig)}
    train_kw, net_kw = {}, {}
    for key, value in assignments.items():
        if key in train_fields:
            train_kw[key] = _coerce(value, train_fields[key], key)
        elif key in net_fields:
            net_kw[key] = _coerce(value, net_fields[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(**train_kw), NetworkConfig(**net_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: Sequence[str] = ()) -> Tuple[TrainConfig, NetworkConfig]:
    path = Path(path)
    assignments = parse_assignments(path.read_text().splitlines(), str(path))
    assignments.update(parse_assignments(list(overrides), "<override>"))
    return build_configs(assignments)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic line, u64 little-endian header length, JSON header, payload.
# The header lists every tensor as (name, shape, offset, nbytes); payload is
# little-endian float32.

MAGIC = b"DAMAL-CKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net_cfg: NetworkConfig
    train_cfg: Optional[TrainConfig]
    state: TrainState
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, torch.Tensor] = field(default_factory=dict)

    def build_model(self) -> DAMNet:
        model = DAMNet(self.net_cfg)
        expected = model.state_dict()
        if set(expected) != set(self.model_state):
            missing = sorted(set(expected) - set(self.model_state))
            extra = sorted(set(self.model_state) - set(expected))
            raise CheckpointError(f"parameter keys differ from config: missing={missing[:3]} extra={extra[:3]}")
        for name, t in expected.items():
            if tuple(t.shape) != tuple(self.model_state[name].shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(self.model_state[name].shape)} "
                    f"!= config shape {tuple(t.shape)}"
                )
        model.load_state_dict(self.model_state)
        return model


def save_checkpoint(path, model: DAMNet, state: TrainState,
                    train_cfg: Optional[TrainConfig] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    path = Path(path)
    tensors = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    tensors.append((f"optimizer/{names[id(p)]}", buf))
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "network_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "state": dataclasses.asdict(state),
        "dtype": "<f4",
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    model_state, opt_state = {}, {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        t = torch.from_numpy(arr.copy())
        group, _, name = e["name"].partition("/")
        (model_state if group == "model" else opt_state)[name] = t
    tc = header.get("train_config")
    return Checkpoint(
        NetworkConfig.from_dict(header["network_config"]),
        TrainConfig.from_dict(tc) if tc else None,
        TrainState(**header["state"]),
        model_state,
        opt_state,
    )


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# data preparation


def prepare_subject(s: SubjectRecord, with_weights: bool = True) -> SubjectRecord:
    """Normalize every modality; compute full-volume weight maps once if labels exist."""
    mods = tuple(normalize_intensity(m) for m in s.modalities)
    weights = s.weight_maps
    if with_weights and weights is None and s.labels is not None and s.role == "train":
        weights = compute_all_weight_maps(s.labels)
    return dataclasses.replace(s, modalities=mods, weight_maps=weights)


def _batch(subjects, cfg: TrainConfig, rng: np.random.Generator):
    inputs, targets, weights = [], [], []
    for _ in range(cfg.batch_size):
        s = subjects[int(rng.integers(len(subjects)))]
        patch = sample_patch(s, cfg.patch_size, rng, training=True,
                             foreground_bias=cfg.foreground_bias)
        inputs.append(patch.input)
        targets.append(patch.target)
        weights.append(patch.weights)
    return (torch.from_numpy(np.stack(inputs)),
            torch.from_numpy(np.stack(targets).astype(np.int64)),
            torch.from_numpy(np.stack(weights).astype(np.float32)))


def compute_loss(probs, target, weights, cfg: TrainConfig) -> losses.LossValue:
    if cfg.loss == "combined":
        return losses.combined_loss(probs, target, weights, cfg.lambda_dice)
    if cfg.loss == "dice":
        d = losses.dice_loss(probs, target)
        return losses.LossValue(d, dice=d)
    if cfg.loss == "attention":
        a = losses.attention_loss(probs, target, weights)
        return losses.LossValue(a, attention=a)
    if cfg.loss == "ce":
        return losses.LossValue(losses.cross_entropy(probs, target))
    return losses.LossValue(losses.focal_loss(probs, target, cfg.focal_gamma))


@dataclass
class TrainResult:
    model: DAMNet
    state: TrainState
    history: List[dict]
    checkpoint: Optional[Path] = None


def train(cfg: TrainConfig, net_cfg: NetworkConfig, subjects: Sequence[SubjectRecord],
          out_dir=None, resume: Optional[Checkpoint] = None, max_steps: Optional[int] = None,
          on_step: Optional[Callable[[dict], None]] = None, prepared: bool = False) -> TrainResult:
    """Minimise the configured loss over random patches with SGD + warm restarts.

    ``max_steps`` caps the number of optimizer steps (desk-scale budgets);
    deterministic for a fixed seed in this single-worker loop.
    """
    if not subjects:
        raise ValueError("no training subjects")
    for s in subjects:
        if s.role == "test":
            raise PermissionError(f"subject {s.id} is a test subject; refusing to train on its labels")
        if s.labels is None:
            raise VolumeValidationError(f"training subject {s.id} has no labels")
    if not prepared:
        subjects = [prepare_subject(s) for s in subjects]

    torch.manual_seed(cfg.seed)
    if resume is not None:
        model = resume.build_model()
        state = dataclasses.replace(resume.state)
    else:
        model = build_model(net_cfg, cfg.seed)
        state = TrainState(current_lr=warm_restart_lr(0, cfg))
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=warm_restart_lr(state.epoch, cfg),
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if resume is not None and resume.optimizer_state:
        for name, p in model.named_parameters():
            if name in resume.optimizer_state:
                optimizer.state[p]["momentum_buffer"] = resume.optimizer_state[name].clone()

    rng = np.random.default_rng(cfg.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        new_file = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if new_file else "a", newline="")
        writer = csv.writer(log_fh)
        if new_file:
            writer.writerow(LOG_COLUMNS)

    history = []
    last_ckpt = None
    try:
        while state.epoch < cfg.total_epochs:
            lr = warm_restart_lr(state.epoch, cfg)
            state.current_lr = lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            for _ in range(cfg.steps_per_epoch):
                if max_steps is not None and state.global_step >= max_steps:
                    break
                x, t, w = _batch(subjects, cfg, rng)
                probs = torch.softmax(model(x), dim=1)
                loss = compute_loss(probs, t, w, cfg)
                terms = loss.terms()
                if not all(math.isfinite(v) for v in terms.values()):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {state.global_step} (epoch {state.epoch}, "
                        f"lr {lr:g}): {terms}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                optimizer.step()
                row = {
                    "step": state.global_step, "epoch": state.epoch, "lr": lr,
                    "loss_total": terms["total"],
                    "loss_attention": terms.get("attention", float("nan")),
                    "loss_dice": terms.get("dice", float("nan")),
                }
                history.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                if on_step is not None:
                    on_step(row)
                state.global_step += 1
            else:
                state.epoch += 1
                state.rng_state = rng.bit_generator.state
                if (out_dir is not None and cfg.checkpoint_every
                        and state.epoch % cfg.checkpoint_every == 0):
                    state.current_lr = warm_restart_lr(state.epoch, cfg)
                    last_ckpt = save_checkpoint(out_dir / f"epoch{state.epoch:05d}.ckpt", model,
                                                state, cfg, optimizer)
                continue
            break
    finally:
        if log_fh is not None:
            log_fh.close()

    state.rng_state = rng.bit_generator.state
    state.current_lr = warm_restart_lr(state.epoch, cfg)
    if out_dir is not None:
        last_ckpt = save_checkpoint(out_dir / "final.ckpt", model, state, cfg, optimizer)
    return TrainResult(model, state, history, last_ckpt)


# ---------------------------------------------------------------------------
# inference


def window_starts(n: int, patch: int, stride: int) -> List[int]:
    return list(range(0, n - patch + 1, stride))


def _pad_amounts(n: int, patch: int, stride: int) -> Tuple[int, int]:
    padded = max(n, patch)
    rem = (padded - patch) % stride
    if rem:
        padded += stride - rem
    extra = padded - n
    return extra // 2, extra - extra // 2


@torch.no_grad()
def sliding_window_predict(model: DAMNet, s: SubjectRecord, patch=(32, 32, 32),
                           stride=None, batch_size: int = 4):
    """Average softmax over overlapping windows; returns (probs (C,H,W,D), LabelVolume)."""
    patch = (patch,) * 3 if isinstance(patch, int) else tuple(patch)
    if stride is None:
        stride = tuple(p // 2 for p in patch)
    stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    if any(st <= 0 or st > p for st, p in zip(stride, patch)):
        raise ValueError(f"stride {stride} must be in [1, patch {patch}]")

    image = s.image()
    dims = image.shape[1:]
    pads = [_pad_amounts(n, p, st) for n, p, st in zip(dims, patch, stride)]
    mode = "reflect" if all(max(pb) < n for pb, n in zip(pads, dims)) else "symmetric"
    padded = np.pad(image, [(0, 0)] + pads, mode=mode)
    pdims = padded.shape[1:]
    if any(p > n for p, n in zip(patch, pdims)):
        raise ValueError(f"patch {patch} larger than padded volume {pdims}")

    num_classes = model.cfg.num_classes
    acc = np.zeros((num_classes,) + pdims, dtype=np.float64)
    counts = np.zeros(pdims, dtype=np.int64)
    corners = [(x, y, z)
               for x in window_starts(pdims[0], patch[0], stride[0])
               for y in window_starts(pdims[1], patch[1], stride[1])
               for z in window_starts(pdims[2], patch[2], stride[2])]
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(corners), batch_size):
            chunk = corners[i:i + batch_size]
            blocks = np.stack([padded[:, x:x + patch[0], y:y + patch[1], z:z + patch[2]]
                               for x, y, z in chunk])
            probs = torch.softmax(model(torch.from_numpy(blocks)), dim=1).double().numpy()
            for (x, y, z), pr in zip(chunk, probs):
                acc[:, x:x + patch[0], y:y + patch[1], z:z + patch[2]] += pr
                counts[x:x + patch[0], y:y + patch[1], z:z + patch[2]] += 1
    finally:
        model.train(was_training)
    if counts.min() < 1:
        raise RuntimeError("sliding window left voxels uncovered")
    acc /= counts
    crop = tuple(slice(pb, pb + n) for (pb, _), n in zip(pads, dims))
    probs = acc[(slice(None),) + crop]
    labels = LabelVolume(probs.argmax(0).astype(np.uint8), num_classes, s.spacing_mm)
    return probs, labels


def predict_subject(model: DAMNet, s: SubjectRecord, patch=(32, 32, 32), stride=None):
    """Normalize then run sliding-window inference."""
    return sliding_window_predict(model, prepare_subject(s, with_weights=False), patch, stride)
