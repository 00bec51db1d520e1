"""Velocity-loss training: optimizer steps, EMA tracking, checkpoints.

One training step samples a diffusion time per item from U(t_min, t_max),
noises the residual batch, regresses the predicted velocity onto
alpha * eps - sigma * r, and applies one optimizer update followed by an
EMA update. Checkpoints are a self-contained binary container (config text,
named float32 tensors for parameters / EMA shadows / optimizer state, and
RNG state) so that resumed runs reproduce uninterrupted ones bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .backbone import FlexConfig, FlexNet
from .dataio import ResidualSample
from .errors import CheckpointError, DataError, DivergenceError, ParameterError
from .schedule import CosineSchedule

__all__ = ["TrainConfig", "TrainState", "Lion", "new_state", "train_step",
           "train_step_multitask", "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = b"FLEXCK01"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    loss_kind: str = "l1"          # "l1" (default) or "l2"
    optimizer: str = "lion"        # "lion" or "adamw"
    base_lr: float = 1e-5
    lr_schedule: str = "cosine"    # "cosine" or "constant"
    total_steps: int = 0           # cosine horizon; 0 means constant lr
    ema_decay: float = 0.999
    batch_size: int = 8
    epochs: int = 1
    weight_decay: float = 0.0
    multitask: bool = False
    grad_mode: str = "two_steps"   # "two_steps" or "summed"

    def __post_init__(self):
        if self.loss_kind not in ("l1", "l2"):
            raise ParameterError(f"loss_kind must be l1 or l2, got {self.loss_kind!r}")
        if self.optimizer not in ("lion", "adamw"):
            raise ParameterError(f"optimizer must be lion or adamw, got {self.optimizer!r}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError("ema_decay must lie in (0, 1)")
        if self.base_lr <= 0.0:
            raise ParameterError("base_lr must be > 0")
        if self.grad_mode not in ("two_steps", "summed"):
            raise ParameterError(f"grad_mode must be two_steps or summed")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ParameterError("lr_schedule must be cosine or constant")


class Lion(torch.optim.Optimizer):
    """Sign-of-interpolated-momentum optimizer.

    update = sign(beta1 * m + (1 - beta1) * g);  p <- p - lr * (update + wd * p)
    m <- beta2 * m + (1 - beta2) * g
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.99), weight_decay=0.0):
        super().__init__(params, dict(lr=lr, betas=betas, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None if closure is None else closure()
        for group in self.param_groups:
            lr, (b1, b2) = group["lr"], group["betas"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                m = state["momentum"]
                update = m.mul(b1).add_(p.grad, alpha=1.0 - b1).sign_()
                if wd != 0.0:
                    update = update.add(p, alpha=wd)
                p.add_(update, alpha=-lr)
                m.mul_(b2).add_(p.grad, alpha=1.0 - b2)
        return loss


@dataclass
class TrainState:
    model: FlexNet
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    ema: dict[str, torch.Tensor]
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)


def _make_optimizer(model: FlexNet, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "lion":
        return Lion(model.parameters(), lr=config.base_lr,
                    weight_decay=config.weight_decay)
    return torch.optim.AdamW(model.parameters(), lr=config.base_lr,
                             weight_decay=config.weight_decay)


def new_state(model: FlexNet, config: TrainConfig, seed: int) -> TrainState:
    torch.manual_seed(seed)  # dropout draws
    ema = {name: p.detach().clone() for name, p in model.named_parameters()}
    return TrainState(model=model, config=config,
                      optimizer=_make_optimizer(model, config), ema=ema,
                      rng=np.random.default_rng(seed))


def _lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "constant" or config.total_steps <= 0:
        return config.base_lr
    frac = min(step / config.total_steps, 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def sample_times(rng: np.random.Generator, schedule: CosineSchedule,
                 n: int) -> np.ndarray:
    """Per-item diffusion times, uniform on the clamped interval."""
    return rng.uniform(schedule.t_min, schedule.t_max, size=n)


def _batch_loss(state: TrainState, batch: list[ResidualSample],
                schedule: CosineSchedule) -> torch.Tensor:
    if not batch:
        raise DataError("empty training batch")
    r = np.stack([np.asarray(s.residual, dtype=np.float32) for s in batch])[:, None]
    b = r.shape[0]
    t = sample_times(state.rng, schedule, b)
    eps = state.rng.standard_normal(r.shape, dtype=np.float32)
    alpha, sigma = schedule.alpha_sigma(t)
    a = alpha[:, None, None, None].astype(np.float32)
    s = sigma[:, None, None, None].astype(np.float32)
    z = a * r + s * eps
    v = a * eps - s * r
    v_hat = state.model.forward_batch(
        torch.as_tensor(t, dtype=torch.float32), torch.as_tensor(z),
        [item.context for item in batch])
    diff = v_hat - torch.as_tensor(v)
    if state.config.loss_kind == "l1":
        return diff.abs().mean()
    return diff.pow(2).mean()


def _apply_update(state: TrainState, loss: torch.Tensor, task: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {state.step}", step=state.step)
    lr = _lr_at(state.config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    decay = state.config.ema_decay
    gap = 0.0
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            shadow = state.ema[name]
            shadow.mul_(decay).add_(p, alpha=1.0 - decay)
            gap += float((p - shadow).abs().mean())
    state.step += 1
    state.history.append({"step": state.step, "task": task,
                          "loss": float(loss.detach()), "lr": lr,
                          "ema_gap": gap / max(len(state.ema), 1)})


def train_step(state: TrainState, batch: list[ResidualSample],
               schedule: CosineSchedule) -> TrainState:
    """One optimizer step on a single-task batch."""
    state.model.train()
    loss = _batch_loss(state, batch, schedule)
    _apply_update(state, loss, task=batch[0].context.task.value)
    return state


def train_step_multitask(state: TrainState, sr_batch: list[ResidualSample],
                         fc_batch: list[ResidualSample],
                         schedule: CosineSchedule) -> TrainState:
    """Joint step over both tasks.

    grad_mode "two_steps" updates the shared representation once per task
    (two sequential optimizer steps, EMA after each); "summed" takes one
    step on the sum of the two task losses.
    """
    if not sr_batch:
        return train_step(state, fc_batch, schedule)
    if not fc_batch:
        return train_step(state, sr_batch, schedule)
    state.model.train()
    if state.config.grad_mode == "two_steps":
        train_step(state, sr_batch, schedule)
        train_step(state, fc_batch, schedule)
        return state
    loss = _batch_loss(state, sr_batch, schedule) + _batch_loss(state, fc_batch, schedule)
    _apply_update(state, loss, task="multitask")
    return state


def ema_model(state: TrainState) -> FlexNet:
    """A copy of the model carrying the EMA weights (used for evaluation)."""
    import copy

    model = copy.deepcopy(state.model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(state.ema[name])
    model.eval()
    return model


# -- checkpoint container ------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_payload(model_config: FlexConfig, train_config: TrainConfig,
                    extra: dict) -> str:
    return _canonical_json({
        "model": asdict(model_config),
        "train": asdict(train_config),
        "extra": extra,
    })


def _collect_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for name, p in state.model.named_parameters():
        tensors[f"param/{name}"] = p.detach()
        tensors[f"ema/{name}"] = state.ema[name]
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for p, opt_state in state.optimizer.state.items():
        pname = name_of[id(p)]
        for key, value in opt_state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"opt/{pname}/{key}"] = value.detach()
    return tensors


def save_checkpoint(state: TrainState, path, extra_config: dict | None = None) -> None:
    """Write the training state as a self-describing binary container."""
    config_text = _config_payload(state.model.config, state.config,
                                  extra_config or {})
    tensors = _collect_tensors(state)
    scalar_opt_state = {}
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for p, opt_state in state.optimizer.state.items():
        scalars = {k: v for k, v in opt_state.items()
                   if not isinstance(v, torch.Tensor)}
        if scalars:
            scalar_opt_state[name_of[id(p)]] = scalars
    meta_text = _canonical_json({
        "step": state.step,
        "np_rng_state": state.rng.bit_generator.state,
        "torch_rng_hex": bytes(torch.get_rng_state().numpy().tobytes()).hex(),
        "scalar_opt_state": scalar_opt_state,
    })

    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        blob = config_text.encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            tensor = tensors[name].to(torch.float32).contiguous()
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(tensor.numpy().astype("<f4").tobytes())
        blob = meta_text.encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def read_checkpoint_config(path) -> dict:
    """Read just the config block of a checkpoint."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a flexdiff checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        return json.loads(_read_exact(fh, n).decode())


def load_checkpoint(path, expected_config: FlexConfig | None = None,
                    restore_rng: bool = True) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from a checkpoint; returns (state, extra_config).

    restore_rng also restores the global torch RNG (needed for bitwise
    training resume; harmless for inference).
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a flexdiff checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, n).decode())
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
            tensors[name] = torch.as_tensor(data.reshape(shape).copy())
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, n).decode())

    model_config = _config_from_dict(config["model"])
    if expected_config is not None and asdict(expected_config) != asdict(model_config):
        raise CheckpointError(
            "checkpoint model config does not match the expected config")
    train_config = TrainConfig(**config["train"])

    model = FlexNet(model_config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            p.copy_(tensors[key])
    ema = {}
    for name, _ in model.named_parameters():
        key = f"ema/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        ema[name] = tensors[key].clone()

    optimizer = _make_optimizer(model, train_config)
    params_by_name = dict(model.named_parameters())
    for key, tensor in tensors.items():
        if not key.startswith("opt/"):
            continue
        prefix, state_key = key.rsplit("/", 1)
        pname = prefix[len("opt/"):]
        optimizer.state[params_by_name[pname]][state_key] = tensor.clone()
    for pname, scalars in meta.get("scalar_opt_state", {}).items():
        optimizer.state[params_by_name[pname]].update(scalars)

    rng = np.random.default_rng()
    rng_state = meta["np_rng_state"]
    rng.bit_generator.state = rng_state
    if restore_rng:
        raw = bytes.fromhex(meta["torch_rng_hex"])
        torch.set_rng_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8).clone())

    state = TrainState(model=model, config=train_config, optimizer=optimizer,
                       ema=ema, rng=rng, step=int(meta["step"]))
    return state, config.get("extra", {})


def _config_from_dict(d: dict) -> FlexConfig:
    clean = dict(d)
    for key in ("enc_channels", "enc_blocks", "dec_channels", "dec_blocks", "tasks"):
        if clean.get(key) is not None:
            clean[key] = tuple(clean[key])
    return FlexConfig(**clean)
