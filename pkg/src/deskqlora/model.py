"""A small decoder-only transformer on a frozen NF4 base with LoRA adapters.

Every linear layer (attention q/k/v/output projection, both MLP matrices,
and the vocabulary head) computes ``dequantize(base) @ x`` plus an adapter
contribution. The token embedding stays unquantized at bf16 precision.
Attention supports grouped key/value heads and a sliding causal window.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lora import SITES, AdapterSet, LoraAdapter, lora_forward, lora_init
from .numerics import Rng, ShapeError, bf16_round
from .quant import QuantizedTensor, dequantize_tensor, quantize_tensor

__all__ = [
    "ModelConfig",
    "QuantizedLinear",
    "QLoraModel",
    "attention",
    "attention_mask",
    "TokenRangeError",
    "SequenceOverflowError",
]


class TokenRangeError(ValueError):
    pass


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    window: int | None = 32  # None: full causal attention
    max_seq: int = 2500
    d_ff: int = 256
    lora_r: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    lora_sites: tuple[str, ...] = SITES
    rope_base: float = 10000.0
    init_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        unknown = set(self.lora_sites) - set(SITES)
        if unknown:
            raise ValueError(f"unknown adapter sites: {sorted(unknown)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def groups(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_sites"] = list(self.lora_sites)
        return d

    def digest(self) -> str:
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def attention_mask(t: int, causal: bool = True, window: int | None = None) -> torch.Tensor:
    """Boolean (t, t) mask, True where query i may attend to key j."""
    i = torch.arange(t)[:, None]
    j = torch.arange(t)[None, :]
    allowed = torch.ones(t, t, dtype=torch.bool)
    if causal:
        allowed &= j <= i
    if window is not None:
        allowed &= (i - j) < window
    return allowed


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    causal: bool = True,
    window: int | None = None,
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over (..., heads, T, d) inputs.

    Query head h reads key/value head h // groups, where
    groups = q_heads / kv_heads.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"head dims differ: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if q.shape[-2] != k.shape[-2]:
        raise ShapeError("query and key sequence lengths differ")
    hq, hkv = q.shape[-3], k.shape[-3]
    if hq % hkv:
        raise ShapeError(f"{hq} query heads cannot share {hkv} kv heads")
    groups = hq // hkv
    if groups > 1:
        k = k.repeat_interleave(groups, dim=-3)
        v = v.repeat_interleave(groups, dim=-3)
    t = q.shape[-2]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    mask = attention_mask(t, causal, window).to(q.device)
    scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def _rotary(x: torch.Tensor, base: float) -> torch.Tensor:
    # x: (..., T, d), rotate channel pairs (2i, 2i+1)
    t, d = x.shape[-2], x.shape[-1]
    inv_freq = 1.0 / (base ** (torch.arange(0, d, 2, dtype=torch.float64) / d))
    ang = torch.arange(t, dtype=torch.float64)[:, None] * inv_freq[None, :]
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class QuantizedLinear(nn.Module):
    """y = x @ dequantize(W)^T (+ LoRA). No bias."""

    def __init__(self, name: str, qweight: QuantizedTensor, adapter: LoraAdapter | None = None):
        super().__init__()
        if len(qweight.shape) != 2:
            raise ShapeError("base weight must be 2-D")
        self.name = name
        self.qweight = qweight
        self.lora = adapter
        if adapter is not None and (adapter.d_out, adapter.d_in) != qweight.shape:
            raise ShapeError(f"{name}: adapter ({adapter.d_out}, {adapter.d_in}) vs base {qweight.shape}")
        self._cache: dict[torch.dtype, torch.Tensor] = {}
        self.adapters_enabled = True

    @property
    def out_features(self) -> int:
        return self.qweight.shape[0]

    @property
    def in_features(self) -> int:
        return self.qweight.shape[1]

    def base_weight(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        w = self._cache.get(dtype)
        if w is None:
            w = torch.from_numpy(dequantize_tensor(self.qweight)).to(dtype)
            self._cache[dtype] = w
        return w

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        base = x @ self.base_weight(x.dtype).T
        if self.lora is None or not self.adapters_enabled:
            return base
        return lora_forward(self.lora, x, base, self.training, generator)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        # frozen gain; not part of the trainable set
        self.register_buffer("gain", torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.gain.to(x.dtype)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, layers: dict[str, QuantizedLinear]):
        super().__init__()
        self.cfg = cfg
        self.norm1 = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.norm2 = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.query = layers["query"]
        self.key = layers["key"]
        self.value = layers["value"]
        self.projection = layers["projection"]
        self.mlp_up = layers["mlp_up"]
        self.mlp_down = layers["mlp_down"]

    def forward(self, x, generator=None):
        cfg = self.cfg
        *lead, t, _ = x.shape
        h = self.norm1(x)
        q = self.query(h, generator).view(*lead, t, cfg.n_heads, cfg.head_dim).transpose(-2, -3)
        k = self.key(h, generator).view(*lead, t, cfg.n_kv_heads, cfg.head_dim).transpose(-2, -3)
        v = self.value(h, generator).view(*lead, t, cfg.n_kv_heads, cfg.head_dim).transpose(-2, -3)
        q, k = _rotary(q, cfg.rope_base), _rotary(k, cfg.rope_base)
        a = attention(q, k, v, causal=True, window=cfg.window)
        a = a.transpose(-2, -3).reshape(*lead, t, cfg.d_model)
        x = x + self.projection(a, generator)
        h = self.norm2(x)
        return x + self.mlp_down(F.silu(self.mlp_up(h, generator)), generator)


# (site flag, layer attribute, out, in) for one transformer block
def _block_shapes(cfg: ModelConfig):
    kv = cfg.n_kv_heads * cfg.head_dim
    return [
        ("query", "query", cfg.d_model, cfg.d_model),
        ("key", "key", kv, cfg.d_model),
        ("value", "value", kv, cfg.d_model),
        ("projection", "projection", cfg.d_model, cfg.d_model),
        ("mlp", "mlp_up", cfg.d_ff, cfg.d_model),
        ("mlp", "mlp_down", cfg.d_model, cfg.d_ff),
    ]


class QLoraModel(nn.Module):
    """Frozen quantized base + trainable adapters. Build with :meth:`build`."""

    def __init__(self, cfg: ModelConfig, embedding: np.ndarray, base: dict[str, QuantizedTensor], adapter_seed: int):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("embedding", torch.tensor(bf16_round(embedding), dtype=torch.float32))
        self.base = dict(base)
        rng = Rng(adapter_seed)
        linears: dict[str, QuantizedLinear] = {}
        for name in sorted(self.base):
            site = _site_of(name)
            adapter = None
            if site in cfg.lora_sites:
                out_f, in_f = self.base[name].shape
                adapter = lora_init(rng, in_f, out_f, cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, name=name)
            linears[name] = QuantizedLinear(name, self.base[name], adapter)
        self.blocks = nn.ModuleList(
            Block(cfg, {attr: linears[f"layers.{i}.{attr}"] for _, attr, _, _ in _block_shapes(cfg)})
            for i in range(cfg.n_layers)
        )
        self.norm_f = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.head = linears["output.head"]
        self._linears = linears

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0, adapter_seed: int | None = None) -> "QLoraModel":
        """Random base weights (std init_std), NF4-quantized, plus fresh adapters."""
        rng = Rng(seed)
        resid_std = cfg.init_std / math.sqrt(2 * max(cfg.n_layers, 1))
        emb = rng.normal((cfg.vocab_size, cfg.d_model), 0.0, cfg.init_std)
        base = {}
        for i in range(cfg.n_layers):
            for _, attr, out_f, in_f in _block_shapes(cfg):
                std = resid_std if attr in ("projection", "mlp_down") else cfg.init_std
                base[f"layers.{i}.{attr}"] = quantize_tensor(rng.normal((out_f, in_f), 0.0, std))
        base["output.head"] = quantize_tensor(rng.normal((cfg.vocab_size, cfg.d_model), 0.0, cfg.init_std))
        return cls(cfg, emb, base, adapter_seed if adapter_seed is not None else seed + 1)

    # adapters -----------------------------------------------------------

    def linears(self) -> dict[str, QuantizedLinear]:
        return dict(self._linears)

    @property
    def adapter_set(self) -> AdapterSet:
        s = AdapterSet(sites=frozenset(self.cfg.lora_sites))
        for name in sorted(self._linears):
            lin = self._linears[name]
            if lin.lora is not None:
                s.add(lin.lora)
        return s

    def adapter_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.adapter_set.named_tensors().items()}

    def load_adapter_state(self, state: dict[str, torch.Tensor]) -> None:
        own = self.adapter_set.named_tensors()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"adapter state mismatch: missing={missing} unexpected={extra}")
        with torch.no_grad():
            for name, t in own.items():
                src = torch.as_tensor(state[name])
                if src.shape != t.shape:
                    raise ShapeError(f"{name}: {tuple(src.shape)} vs {tuple(t.shape)}")
                t.copy_(src.to(t.dtype))

    def full_state(self) -> dict[str, torch.Tensor]:
        """Every named tensor: dequantized bases, embedding, norm gains, adapters."""
        out: dict[str, torch.Tensor] = {"embedding.weight": self.embedding}
        for name, lin in self._linears.items():
            out[f"{name}.weight"] = lin.base_weight(torch.float32)
        for name, buf in self.named_buffers():
            if name.endswith("gain"):
                out[name] = buf
        out.update(self.adapter_set.named_tensors())
        return out

    @contextmanager
    def adapters_disabled(self):
        prev = {n: lin.adapters_enabled for n, lin in self._linears.items()}
        for lin in self._linears.values():
            lin.adapters_enabled = False
        try:
            yield self
        finally:
            for n, lin in self._linears.items():
                lin.adapters_enabled = prev[n]

    def base_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base):
            h.update(name.encode())
            h.update(self.base[name].to_bytes())
        return h.hexdigest()

    # forward ------------------------------------------------------------

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise TokenRangeError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if tokens.shape[-1] > self.cfg.max_seq:
            raise SequenceOverflowError(f"sequence length {tokens.shape[-1]} exceeds max_seq {self.cfg.max_seq}")

    def forward(self, tokens, generator: torch.Generator | None = None) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        self._check_tokens(tokens)
        dtype = self.dtype
        x = self.embedding[tokens].to(dtype)
        for block in self.blocks:
            x = block(x, generator)
        return self.head(self.norm_f(x), generator)

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return self.embedding.dtype

    @torch.no_grad()
    def generate(
        self,
        prompt,
        max_new: int,
        mode: str = "greedy",
        temperature: float = 1.0,
        generator: torch.Generator | None = None,
        eos_id: int | None = None,
    ) -> list[int]:
        ids = [int(t) for t in prompt]
        if not ids:
            raise ValueError("prompt must be nonempty")
        if len(ids) > self.cfg.max_seq:
            raise SequenceOverflowError(f"prompt length {len(ids)} exceeds max_seq {self.cfg.max_seq}")
        if mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        was_training = self.training
        self.eval()
        try:
            for _ in range(max_new):
                if len(ids) >= self.cfg.max_seq:
                    break
                logits = self.forward(torch.tensor(ids))[-1]
                if mode == "greedy":
                    nxt = int(torch.argmax(logits))
                else:
                    probs = torch.softmax(logits.double() / temperature, dim=-1)
                    nxt = int(torch.multinomial(probs, 1, generator=generator))
                ids.append(nxt)
                if eos_id is not None and nxt == eos_id:
                    break
        finally:
            self.train(was_training)
        return ids


def _site_of(name: str) -> str:
    attr = name.rsplit(".", 1)[-1]
    if attr in ("mlp_up", "mlp_down"):
        return "mlp"
    return attr
