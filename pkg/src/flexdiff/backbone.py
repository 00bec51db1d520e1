"""Hybrid convolutional / latent-transformer velocity denoiser.

The network predicts the diffusion velocity v_hat(t, z, context). Structure:

* a task-specific convolutional encoder per enabled task (super-resolution,
  forecasting) consuming the conditioning snapshots,
* a shared convolutional encoder consuming the noised residual, with the
  task encoder's shallow skips added elementwise at levels <= l_weak
  ("weak" conditioning),
* a transformer bottleneck over patch-size-1 tokens (one token per spatial
  location, learned 2D positional embeddings, one prepended conditioning
  token embedding time and scalar context),
* a convolutional decoder whose blocks concatenate the shared and task
  skip tensors along channels at every level ("strong" conditioning).

Skip tensors are re-injected into every decoder block of a level, keeping
residual pathways dense at each resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .conditioning import CONTEXT_DIM, ConditioningContext, Task, context_vector
from .errors import ConfigError, ConsistencyError, ContextError, ShapeError

__all__ = ["FlexConfig", "FlexNet", "build", "presets", "sequence_length",
           "parameter_count"]

N_TIME_FEATURES = 64  # sin/cos pairs over log-spaced frequencies in [1, 1000]


@dataclass(frozen=True)
class FlexConfig:
    enc_channels: tuple[int, ...] = (64, 128, 128, 256)
    enc_blocks: tuple[int, ...] = (2, 3, 3, 3)
    dec_channels: tuple[int, ...] | None = None   # None: same as encoder
    dec_blocks: tuple[int, ...] | None = None
    vit_depth: int = 13
    vit_heads: int = 4
    l_weak: int = 1
    tasks: tuple[str, ...] = ("sr",)
    in_channels: int = 1
    dropout: float = 0.1
    base_size: int = 256          # resolution the positional table is built for
    skip_fusion: str = "concat"   # "concat" or "sum"
    use_weak: bool = True
    use_strong: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "enc_blocks", tuple(self.enc_blocks))
        dec_c = self.dec_channels if self.dec_channels is not None else self.enc_channels
        dec_b = self.dec_blocks if self.dec_blocks is not None else self.enc_blocks
        object.__setattr__(self, "dec_channels", tuple(dec_c))
        object.__setattr__(self, "dec_blocks", tuple(dec_b))
        n = len(self.enc_channels)
        if not (len(self.enc_blocks) == len(self.dec_channels) == len(self.dec_blocks) == n):
            raise ConfigError("channel/block lists must share length")
        if n < 2:
            raise ConfigError("need at least two resolution levels")
        if self.token_dim % self.vit_heads != 0:
            raise ConfigError(
                f"vit_heads={self.vit_heads} must divide token dim {self.token_dim}")
        if not (0 <= self.l_weak <= self.levels):
            raise ConfigError(f"l_weak must lie in [0, {self.levels}]")
        if self.skip_fusion not in ("concat", "sum"):
            raise ConfigError(f"unknown skip_fusion {self.skip_fusion!r}")
        tasks = tuple(Task(t) for t in self.tasks)
        if not tasks:
            raise ConfigError("at least one task must be enabled")
        object.__setattr__(self, "tasks", tuple(t.value for t in tasks))
        for c in self.enc_channels + self.dec_channels:
            if c % min(8, c) != 0:
                raise ConfigError(f"channel width {c} not divisible by its norm groups")
        if self.base_size % (1 << self.levels) != 0:
            raise ConfigError("base_size must be divisible by 2^levels")

    @property
    def levels(self) -> int:
        """Number of downsampling steps L."""
        return len(self.enc_channels) - 1

    @property
    def token_dim(self) -> int:
        return self.enc_channels[-1]

    @property
    def emb_dim(self) -> int:
        return 4 * self.enc_channels[-1]


def presets() -> dict[str, FlexConfig]:
    return {
        "tiny": FlexConfig(enc_channels=(8, 16), enc_blocks=(1, 1), vit_depth=2,
                           vit_heads=2, base_size=32),
        "small": FlexConfig(enc_channels=(64, 128, 128, 256), enc_blocks=(2, 3, 3, 3),
                            vit_depth=13, vit_heads=4, base_size=256),
        "medium": FlexConfig(enc_channels=(64, 128, 256, 512), enc_blocks=(2, 3, 3, 4),
                             vit_depth=13, vit_heads=8, base_size=256),
        "large": FlexConfig(enc_channels=(128, 256, 512, 1152), enc_blocks=(2, 3, 3, 3),
                            vit_depth=21, vit_heads=16, base_size=256),
    }


def sequence_length(config: FlexConfig, height: int, width: int) -> int:
    """Transformer sequence length: one token per bottleneck cell plus one
    conditioning token."""
    f = 1 << config.levels
    if height % f or width % f:
        raise ShapeError(f"spatial size {height}x{width} not divisible by {f}")
    return (height // f) * (width // f) + 1


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- building blocks -----------------------------------------------------------

def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    """Two-conv residual block with scale-shift conditioning."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.emb_proj(torch.nn.functional.silu(emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class Encoder(nn.Module):
    """Stem + per-level residual blocks + strided-conv downsampling."""

    def __init__(self, in_ch: int, channels, blocks, emb_dim: int):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, channels[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for l, (c, b) in enumerate(zip(channels, blocks)):
            self.levels.append(nn.ModuleList(ResBlock(c, c, emb_dim) for _ in range(b)))
            if l < len(channels) - 1:
                self.downs.append(nn.Conv2d(c, channels[l + 1], 3, stride=2, padding=1))

    def forward(self, x, emb, weak_skips=None):
        """Returns (bottleneck, skips). weak_skips maps level -> tensor to
        add elementwise after that level's blocks."""
        h = self.stem(x)
        skips = []
        for l, level in enumerate(self.levels):
            for block in level:
                h = block(h, emb)
            if weak_skips is not None and l in weak_skips:
                h = h + weak_skips[l]
            skips.append(h)
            if l < len(self.downs):
                h = self.downs[l](h)
        return skips[-1], skips


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(mlp_ratio * d, d), nn.Dropout(dropout))

    def forward(self, x):
        y = self.norm1(x)
        y, _ = self.attn(y, y, y, need_weights=False)
        x = x + y
        return x + self.mlp(self.norm2(x))


class LatentTransformer(nn.Module):
    def __init__(self, d: int, depth: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, mlp_ratio, dropout) for _ in range(depth))
        self.final_norm = nn.LayerNorm(d)

    def forward(self, seq):
        for block in self.blocks:
            seq = block(seq)
        return self.final_norm(seq)


class Decoder(nn.Module):
    """Per-level blocks with skip concatenation re-injected at every block."""

    def __init__(self, config: FlexConfig):
        super().__init__()
        cfg = config
        enc_c, dec_c, dec_b = cfg.enc_channels, cfg.dec_channels, cfg.dec_blocks
        if cfg.use_strong:
            extra = [2 * c if cfg.skip_fusion == "concat" else c for c in enc_c]
        else:
            extra = list(enc_c)
        self.levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        top = cfg.levels
        for l in range(top, -1, -1):
            entry = cfg.token_dim if l == top else dec_c[l]
            blocks = nn.ModuleList()
            for b in range(dec_b[l]):
                c_in = (entry if b == 0 else dec_c[l]) + extra[l]
                blocks.append(ResBlock(c_in, dec_c[l], cfg.emb_dim))
            self.levels.append(blocks)
            if l > 0:
                self.ups.append(nn.Conv2d(dec_c[l], dec_c[l - 1], 3, padding=1))
        self.out_norm = _norm(dec_c[0])
        self.out_conv = nn.Conv2d(dec_c[0], cfg.in_channels, 3, padding=1)
        self._fusion = cfg.skip_fusion
        self._strong = cfg.use_strong

    def forward(self, h, skips_common, skips_task, emb):
        top = len(self.levels) - 1
        for idx, blocks in enumerate(self.levels):
            l = top - idx
            if self._strong:
                if self._fusion == "concat":
                    extras = (skips_common[l], skips_task[l])
                else:
                    extras = (skips_common[l] + skips_task[l],)
            else:
                extras = (skips_common[l],)
            for block in blocks:
                h = block(torch.cat((h,) + extras, dim=1), emb)
            if l > 0:
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[idx](h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


# -- the full network ------------------------------------------------------------

class FlexNet(nn.Module):
    """Velocity predictor v_hat = net(t, z, context)."""

    def __init__(self, config: FlexConfig):
        super().__init__()
        self.config = config
        cfg = config
        d, emb = cfg.token_dim, cfg.emb_dim

        self.task_encoders = nn.ModuleDict()
        for task in cfg.tasks:
            n_snaps = 1 if Task(task) is Task.SR else 2
            self.task_encoders[task] = Encoder(
                n_snaps * cfg.in_channels, cfg.enc_channels, cfg.enc_blocks, emb)
        self.shared_encoder = Encoder(cfg.in_channels, cfg.enc_channels,
                                      cfg.enc_blocks, emb)
        self.latent = LatentTransformer(d, cfg.vit_depth, cfg.vit_heads,
                                        cfg.mlp_ratio, cfg.dropout)
        base_tokens = (cfg.base_size // (1 << cfg.levels)) ** 2
        self.pos_emb = nn.Parameter(torch.zeros(1, base_tokens, d))
        self.cond_mlp = nn.Sequential(
            nn.Linear(N_TIME_FEATURES + CONTEXT_DIM, d), nn.SiLU(), nn.Linear(d, d))
        self.time_mlp = nn.Sequential(
            nn.Linear(N_TIME_FEATURES + CONTEXT_DIM, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.task_mlp = nn.Sequential(
            nn.Linear(CONTEXT_DIM, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.decoder = Decoder(cfg)

        freqs = torch.logspace(0.0, 3.0, N_TIME_FEATURES // 2)
        self.register_buffer("time_freqs", freqs, persistent=False)

    # -- feature helpers -----------------------------------------------------

    def _time_features(self, t: torch.Tensor) -> torch.Tensor:
        ang = t[:, None] * self.time_freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    def _context_batch(self, contexts) -> torch.Tensor:
        vecs = np.stack([context_vector(c) for c in contexts])
        return torch.as_tensor(vecs, dtype=self.pos_emb.dtype,
                               device=self.pos_emb.device)

    def _pos_table(self, hb: int, wb: int) -> torch.Tensor:
        base = int(round(math.sqrt(self.pos_emb.shape[1])))
        if (hb, wb) == (base, base):
            return self.pos_emb
        table = self.pos_emb.reshape(1, base, base, -1).permute(0, 3, 1, 2)
        table = torch.nn.functional.interpolate(
            table, size=(hb, wb), mode="bilinear", align_corners=False)
        return table.permute(0, 2, 3, 1).reshape(1, hb * wb, -1)

    def _snapshots_tensor(self, contexts) -> torch.Tensor:
        stacks = [np.stack([np.asarray(s) for s in c.snapshots]) for c in contexts]
        return torch.as_tensor(np.stack(stacks), dtype=self.pos_emb.dtype,
                               device=self.pos_emb.device)

    # -- encoders ---------------------------------------------------------------

    def encode_task(self, context: ConditioningContext):
        """Bottleneck feature and multi-scale skips for one conditioning input."""
        h, skips = self._encode_task_batch([context])
        return h[0], [s[0] for s in skips]

    def _encode_task_batch(self, contexts):
        task = contexts[0].task
        if any(c.task is not task for c in contexts):
            raise ConsistencyError("mixed tasks in a single-task encoder call")
        if task.value not in self.task_encoders:
            raise ConfigError(f"task {task.value!r} not enabled in this model")
        x = self._snapshots_tensor(contexts)
        emb = self.task_mlp(self._context_batch(contexts))
        return self.task_encoders[task.value](x, emb)

    # -- full forward --------------------------------------------------------------

    def forward(self, t, z, context: ConditioningContext, *,
                mask_task_skip_levels=(), zero_cond_token: bool = False):
        """Single-sample forward; t scalar, z (H, W) or (C, H, W) tensor/array."""
        z_t = torch.as_tensor(np.asarray(z), dtype=self.pos_emb.dtype,
                              device=self.pos_emb.device)
        if z_t.ndim == 2:
            z_t = z_t[None, None]
        elif z_t.ndim == 3:
            z_t = z_t[None]
        else:
            raise ShapeError(f"z must be (H, W) or (C, H, W), got {tuple(z_t.shape)}")
        t_vec = torch.full((1,), float(t), dtype=self.pos_emb.dtype)
        out = self.forward_batch(t_vec, z_t, [context],
                                 mask_task_skip_levels=mask_task_skip_levels,
                                 zero_cond_token=zero_cond_token)
        return out[0, 0] if np.asarray(z).ndim == 2 else out[0]

    def forward_batch(self, t: torch.Tensor, z: torch.Tensor, contexts, *,
                      mask_task_skip_levels=(), zero_cond_token: bool = False):
        """Batched forward. contexts must be grouped with SR items first."""
        cfg = self.config
        if z.ndim != 4:
            raise ShapeError(f"z must be (B, C, H, W), got {tuple(z.shape)}")
        b, _, height, width = z.shape
        f = 1 << cfg.levels
        if height % f or width % f:
            raise ShapeError(f"spatial size {height}x{width} not divisible by {f}")
        if len(contexts) != b:
            raise ShapeError("one context per batch item required")
        for c in contexts:
            if c.spatial_shape != (height, width):
                raise ContextError(
                    f"context snapshots {c.spatial_shape} do not match z {height}x{width}")

        skips_task = self._fused_task_skips(contexts)
        for lvl in mask_task_skip_levels:
            skips_task[lvl] = torch.zeros_like(skips_task[lvl])

        ctx_vecs = self._context_batch(contexts)
        feats = torch.cat([self._time_features(t.to(self.pos_emb.dtype)), ctx_vecs],
                          dim=-1)
        emb = self.time_mlp(feats)

        weak = None
        if cfg.use_weak:
            weak = {l: skips_task[l] for l in range(min(cfg.l_weak, cfg.levels) + 1)}
        h_common, skips_common = self.shared_encoder(z, emb, weak_skips=weak)

        # bottleneck: one token per spatial cell, conditioning token prepended
        hb, wb = height // f, width // f
        tokens = h_common.flatten(2).transpose(1, 2)  # (B, N, d)
        tokens = tokens + self._pos_table(hb, wb)
        cond = self.cond_mlp(feats)[:, None, :]
        if zero_cond_token:
            cond = torch.zeros_like(cond)
        seq = torch.cat([cond, tokens], dim=1)
        seq = self.latent(seq)
        h = seq[:, 1:, :].transpose(1, 2).reshape(b, cfg.token_dim, hb, wb)

        return self.decoder(h, skips_common, skips_task, emb)

    def _fused_task_skips(self, contexts):
        """Per-level task skips, vstacked across the SR/FC partitions."""
        tasks = [c.task for c in contexts]
        try:
            split = tasks.index(Task.FC)
        except ValueError:
            split = len(tasks)
        if any(t is Task.FC for t in tasks[:split]) or \
           any(t is Task.SR for t in tasks[split:]):
            raise ConsistencyError("batch must be grouped with SR items before FC items")
        parts = []
        if split > 0:
            parts.append(self._encode_task_batch(contexts[:split])[1])
        if split < len(tasks):
            parts.append(self._encode_task_batch(contexts[split:])[1])
        if len(parts) == 1:
            return list(parts[0])
        return [torch.vstack([a, b]) for a, b in zip(parts[0], parts[1])]

    # -- adapters --------------------------------------------------------------------

    def as_predictor(self):
        """Wrap the network as a numpy velocity predictor (t, z, context) -> v.

        Accepts z of shape (H, W) with a single context, or (B, H, W) with a
        list of contexts. Runs in eval mode without gradients.
        """
        def predict(t, z, context):
            was_training = self.training
            self.eval()
            try:
                with torch.no_grad():
                    z = np.asarray(z, dtype=np.float32)
                    if z.ndim == 2:
                        out = self.forward(t, z, context)
                        return out.numpy()
                    contexts = list(context)
                    zt = torch.as_tensor(z[:, None], dtype=self.pos_emb.dtype)
                    tt = torch.full((z.shape[0],), float(t), dtype=self.pos_emb.dtype)
                    out = self.forward_batch(tt, zt, contexts)
                    return out[:, 0].numpy()
            finally:
                self.train(was_training)

        return predict


# -- construction ------------------------------------------------------------------

def build(config: FlexConfig, seed: int, verify: bool = True) -> FlexNet:
    """Construct a FlexNet and initialize it deterministically from seed."""
    model = FlexNet(config)
    _init_parameters(model, seed)
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise ConfigError(f"non-finite parameter after init: {name}")
    if verify:
        _verify_finite_forward(model)
    return model


def _init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init, independent of torch's global RNG and registration order."""
    rng = np.random.default_rng(seed)
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if "pos_emb" in name:
                vals = 0.02 * rng.standard_normal(tuple(p.shape))
            elif p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                vals = rng.standard_normal(tuple(p.shape)) / math.sqrt(fan_in)
            elif name.endswith("bias"):
                vals = np.zeros(tuple(p.shape))
            else:
                # norm scales and any other 1D weights
                vals = np.ones(tuple(p.shape))
            p.copy_(torch.as_tensor(vals, dtype=p.dtype))


def _verify_finite_forward(model: FlexNet) -> None:
    cfg = model.config
    size = 4 * (1 << cfg.levels)
    task = Task(cfg.tasks[0])
    n_snaps = 1 if task is Task.SR else 2
    ctx = ConditioningContext(
        task=task, snapshots=tuple(np.zeros((size, size), dtype=np.float32)
                                   for _ in range(n_snaps)),
        re_tag=0.0, upsample_factor=4 if task is Task.SR else 1)
    model.eval()
    with torch.no_grad():
        out = model.forward(0.5, np.zeros((size, size), dtype=np.float32), ctx)
    if not torch.all(torch.isfinite(out)):
        raise ConfigError("zero-input forward produced non-finite values")
