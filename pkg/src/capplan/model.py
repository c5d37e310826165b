"""Context-augmented non-autoregressive plan generator and its critic.

Layout of one decoder block::

    x = LN(x + SelfAttn(x))
    x = LN(x + CrossAttn(Q = W_x x + W_c [cxt_start, cxt_goal], K = V = memory))
    x = LN(x + FFN(x))

The memory bank is a single learned (n, d) matrix read by every block and
every sample.  Context tokens enter only through the cross-attention query;
with the context path disabled the W_c term is dropped.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ShapeError, ValidationError

NORM_EPS = 1e-6
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class GeneratorConfig:
    num_actions: int = 12
    max_horizon: int = 6
    obs_dim: int = 512
    hidden_dim: int = 128
    embed_hidden: int = 256
    context_hidden: int = 256
    num_layers: int = 2
    num_heads: int = 8
    memory_size: int = 128
    z_dim: int = 32
    ffn_mult: int = 4
    use_context: bool = True

    def __post_init__(self):
        for name in ("num_actions", "max_horizon", "obs_dim", "hidden_dim", "embed_hidden",
                     "context_hidden", "num_layers", "num_heads", "memory_size", "z_dim", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"GeneratorConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class CriticConfig:
    hidden: tuple = (256, 64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ValidationError("critic hidden sizes must be positive")


def mlp(sizes, final_activation=False) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or final_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def sinusoidal_positions(T: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal codes for positions 1..T."""
    pos = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def attend(self, q, kv):
        # q: (B, Lq, d) already projected; kv: (B, Lk, d) or (Lk, d) shared
        B, Lq, d = q.shape
        h = self.heads
        dh = d // h
        k = self.k(kv)
        v = self.v(kv)
        if k.dim() == 2:
            # shared K/V (the memory bank): fold batch into rows instead of broadcasting
            q = q.reshape(B * Lq, h, dh).transpose(0, 1)             # (h, B*Lq, dh)
            k = k.view(-1, h, dh).transpose(0, 1)                    # (h, n, dh)
            v = v.view(-1, h, dh).transpose(0, 1)
            out = F.scaled_dot_product_attention(q, k, v)
            out = out.transpose(0, 1).reshape(B, Lq, d)
        else:
            q = q.view(B, Lq, h, dh).transpose(1, 2)
            k = k.view(B, -1, h, dh).transpose(1, 2)
            v = v.view(B, -1, h, dh).transpose(1, 2)
            out = F.scaled_dot_product_attention(q, k, v)
            out = out.transpose(1, 2).reshape(B, Lq, d)
        return self.o(out)

    def forward(self, x, kv=None):
        return self.attend(self.q(x), x if kv is None else kv)


class ContextDecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn_mult: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        self.cross_attn = MultiHeadAttention(d, heads)
        # context enters Q through its own projection (no bias): zero context == no context
        self.context_q = nn.Linear(2 * d, d, bias=False)
        self.ffn = mlp([d, ffn_mult * d, d])
        self.norm1 = nn.LayerNorm(d, eps=NORM_EPS)
        self.norm2 = nn.LayerNorm(d, eps=NORM_EPS)
        self.norm3 = nn.LayerNorm(d, eps=NORM_EPS)

    def forward(self, x, memory, context=None):
        x = self.norm1(x + self.self_attn(x))
        q = self.cross_attn.q(x)
        if context is not None:
            q = q + self.context_q(context.flatten(-2)).unsqueeze(-2)
        x = self.norm2(x + self.cross_attn.attend(q, memory))
        return self.norm3(x + self.ffn(x))


class Critic(nn.Module):
    """Scores a (T, N) action-probability sequence in (0, 1).

    The sequence is zero-padded to ``max_horizon`` steps, flattened, and
    linearly projected to the first hidden width before the MLP.
    """

    def __init__(self, max_horizon: int, num_actions: int, config: CriticConfig):
        super().__init__()
        self.max_horizon = max_horizon
        self.num_actions = num_actions
        self.proj = nn.Linear(max_horizon * num_actions, config.hidden[0])
        self.mlp = mlp([*config.hidden, 1])

    def forward(self, seq: torch.Tensor, validate: bool = True) -> torch.Tensor:
        B, T, N = seq.shape
        if N != self.num_actions or T > self.max_horizon:
            raise ShapeError(f"critic expects (B, <= {self.max_horizon}, {self.num_actions}), got {tuple(seq.shape)}")
        if validate:
            with torch.no_grad():
                if torch.any(seq < -SIMPLEX_TOL) or torch.any((seq.sum(-1) - 1).abs() > SIMPLEX_TOL):
                    raise ValidationError("critic input rows must lie in the probability simplex")
        if T < self.max_horizon:
            seq = F.pad(seq, (0, 0, 0, self.max_horizon - T))
        h = torch.relu(self.proj(seq.reshape(B, -1)))
        return torch.sigmoid(self.mlp(h)).squeeze(-1)


class PlannerModel(nn.Module):
    """All learnable state: embedders, context head, queries, memory, decoder, head, critic."""

    def __init__(self, config: GeneratorConfig, critic_config: CriticConfig | None = None):
        super().__init__()
        self.config = config
        self.critic_config = critic_config or CriticConfig()
        c = config
        d = c.hidden_dim
        self.obs_embed = mlp([c.obs_dim, c.embed_hidden, d])
        self.cap_embed = mlp([c.obs_dim, c.embed_hidden, d])
        self.context_head = mlp([2 * c.obs_dim, c.context_hidden, 2 * d])
        self.queries = nn.Parameter(torch.zeros(c.max_horizon, d))
        self.memory = nn.Parameter(torch.zeros(c.memory_size, d))
        self.noise_proj = nn.Linear(c.z_dim, d)
        self.blocks = nn.ModuleList(
            ContextDecoderBlock(d, c.num_heads, c.ffn_mult) for _ in range(c.num_layers))
        self.head = mlp([d, d, c.num_actions])
        self.critic = Critic(c.max_horizon, c.num_actions, self.critic_config)
        self.register_buffer("positions", sinusoidal_positions(c.max_horizon, d), persistent=False)

    @property
    def dtype(self):
        return self.queries.dtype

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def critic_parameters(self):
        return list(self.critic.parameters())

    def _check_dim(self, x, dim, what):
        if x.shape[-1] != dim:
            raise ShapeError(f"{what}: expected last dimension {dim}, got {tuple(x.shape)}")

    def embed_observation(self, obs: torch.Tensor) -> torch.Tensor:
        self._check_dim(obs, self.config.obs_dim, "observation")
        return self.obs_embed(obs)

    def embed_caption(self, caption_emb: torch.Tensor) -> torch.Tensor:
        self._check_dim(caption_emb, self.config.obs_dim, "caption embedding")
        return l2_normalize(self.cap_embed(caption_emb))

    def compute_context(self, v_start: torch.Tensor, v_goal: torch.Tensor) -> torch.Tensor:
        """Two unit-norm context tokens (start, goal) from the concatenated raw observations."""
        self._check_dim(v_start, self.config.obs_dim, "start observation")
        self._check_dim(v_goal, self.config.obs_dim, "goal observation")
        out = self.context_head(torch.cat([v_start, v_goal], dim=-1))
        out = out.view(*out.shape[:-1], 2, self.config.hidden_dim)
        return l2_normalize(out)

    def build_queries(self, T: int, start_emb: torch.Tensor, goal_emb: torch.Tensor,
                      z: torch.Tensor) -> torch.Tensor:
        """(B, T, d) queries: learned + positional + projected noise; start/goal added to first/last."""
        if not 1 <= T <= self.config.max_horizon:
            raise ValidationError(f"horizon T={T} outside 1..{self.config.max_horizon}")
        self._check_dim(z, self.config.z_dim, "noise")
        base = self.queries[:T] + self.positions[:T]
        first = torch.zeros(T, 1, dtype=base.dtype)
        last = torch.zeros(T, 1, dtype=base.dtype)
        first[0] = 1.0
        last[T - 1] = 1.0
        return (base + self.noise_proj(z).unsqueeze(-2)
                + first * start_emb.unsqueeze(-2) + last * goal_emb.unsqueeze(-2))

    def decode(self, queries: torch.Tensor, context: torch.Tensor | None = None,
               memory: torch.Tensor | None = None) -> torch.Tensor:
        if queries.dim() != 3 or queries.shape[-1] != self.config.hidden_dim:
            raise ShapeError(f"queries must be (B, T, {self.config.hidden_dim}), got {tuple(queries.shape)}")
        if context is not None and context.shape != (queries.shape[0], 2, self.config.hidden_dim):
            raise ShapeError(f"context must be (B, 2, d), got {tuple(context.shape)}")
        mem = self.memory if memory is None else memory
        x = queries
        for block in self.blocks:
            x = block(x, mem, context)
        return self.head(x)

    def forward(self, start_obs, goal_obs, z, T: int):
        """Training-time pass: returns (logits (B, T, N), context tokens (B, 2, d) or None)."""
        q = self.build_queries(T, self.embed_observation(start_obs), self.embed_observation(goal_obs), z)
        context = self.compute_context(start_obs, goal_obs) if self.config.use_context else None
        return self.decode(q, context), context

    def generate(self, start_obs, goal_obs, z, T: int) -> torch.Tensor:
        """Sampling pass: start/goal (G, D), z (G, K, z_dim) -> logits (G, K, T, N).

        Embeddings and context are computed once per window and shared by its K draws.
        """
        G, K = z.shape[:2]
        s = self.embed_observation(start_obs)
        g = self.embed_observation(goal_obs)
        q = self.build_queries(T, s[:, None].expand(G, K, -1), g[:, None].expand(G, K, -1), z)
        q = q.reshape(G * K, T, -1)
        context = None
        if self.config.use_context:
            context = self.compute_context(start_obs, goal_obs)
            context = context[:, None].expand(G, K, 2, -1).reshape(G * K, 2, -1)
        return self.decode(q, context).view(G, K, T, -1)

    def critic_forward(self, seq: torch.Tensor, validate: bool = True) -> torch.Tensor:
        return self.critic(seq, validate)


def init_parameters(config: GeneratorConfig, seed: int = 0,
                    critic_config: CriticConfig | None = None,
                    dtype: torch.dtype = torch.float32) -> PlannerModel:
    """Deterministic init: N(0, 1/fan_in) weights, zero biases, unit LayerNorm gains."""
    model = PlannerModel(config, critic_config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if ".norm" in name:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                fan_in = p.shape[1]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in))
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: PlannerModel, epoch: int, seed: int,
                    extra_meta: dict | None = None, extra_arrays: dict | None = None):
    """Zip container: meta.json plus one .npy per named parameter (byte-stable)."""
    meta = {
        "generator_config": asdict(model.config),
        "critic_config": {"hidden": list(model.critic_config.hidden)},
        "dtype": str(model.dtype).replace("torch.", ""),
        "epoch": int(epoch),
        "seed": int(seed),
    }
    if extra_meta:
        meta.update(extra_meta)
    path = Path(path)
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, p in model.state_dict().items():
            _write_member(zf, f"params/{name}.npy", _array_bytes(p.detach().cpu().numpy()))
        for name, arr in sorted((extra_arrays or {}).items()):
            _write_member(zf, f"extra/{name}.npy", _array_bytes(np.asarray(arr)))


def load_checkpoint(path):
    """Returns (model, meta, extra_arrays); every parameter shape is checked against the config."""
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays, extra = {}, {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                if name.startswith("params/"):
                    arrays[name[len("params/"):-4]] = arr
                elif name.startswith("extra/"):
                    extra[name[len("extra/"):-4]] = arr
    config = GeneratorConfig(**meta["generator_config"])
    critic_config = CriticConfig(tuple(meta["critic_config"]["hidden"]))
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = PlannerModel(config, critic_config).to(dtype)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    bad = [f"{k}: checkpoint {arrays[k].shape} vs config {tuple(expected[k].shape)}"
           for k in expected if k in arrays and tuple(arrays[k].shape) != tuple(expected[k].shape)]
    if missing or unexpected or bad:
        raise ShapeError(f"checkpoint does not match its config: missing={missing} "
                         f"unexpected={unexpected} mismatched={bad}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model, meta, extra
