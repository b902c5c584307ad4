"""A toy decoder-only transformer with a hand-written backward pass.

Architecture: token embedding, then ``n_layers`` pre-norm blocks of
(RMS-norm, rotary multi-head attention, residual, RMS-norm, SwiGLU MLP,
residual), a final RMS-norm and an untied output projection.

Attention runs over a :class:`~prefix_dpo.masks.BlockMask`: Empty tiles are
skipped entirely, Partial tiles apply the mask predicate element-wise and
Full tiles are used unmasked.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError, StaleCacheError
from .masks import BlockMask

CHECKPOINT_VERSION = 1


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    rope_theta: float = nx.ROPE_THETA
    precision: str = "f64"
    seed: int = 0
    init_std: float = 0.02
    rms_eps: float = nx.RMS_EPS

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ConfigError(f"head dim {self.d_head} must be even for rotary embeddings")
        nx.resolve_dtype(self.precision)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self) -> np.dtype:
        return nx.resolve_dtype(self.precision)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.config, tensors)

    def copy(self) -> "ModelParams":
        return self.replace({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, precision) -> "ModelParams":
        dtype = nx.resolve_dtype(precision)
        cfg = ModelConfig(**{**asdict(self.config), "precision": "f32" if dtype == np.float32 else "f64"})
        return ModelParams(cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init(config: ModelConfig) -> ModelParams:
    """Seeded init: normal(0, init_std) weights, unit norm gains."""
    rng = rng_stream(config.seed, "init")
    dtype = config.dtype
    d, f = config.d_model, config.d_ff
    normal = lambda *shape: (rng.standard_normal(shape) * config.init_std).astype(dtype)
    ones = lambda n: np.ones(n, dtype=dtype)
    t = {"embed": normal(config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        t[p + "attn_norm"] = ones(d)
        t[p + "wq"] = normal(d, d)
        t[p + "wk"] = normal(d, d)
        t[p + "wv"] = normal(d, d)
        t[p + "wo"] = normal(d, d)
        t[p + "mlp_norm"] = ones(d)
        t[p + "w_gate"] = normal(d, f)
        t[p + "w_up"] = normal(d, f)
        t[p + "w_down"] = normal(f, d)
    t["final_norm"] = ones(d)
    t["head"] = normal(d, config.vocab_size)
    return ModelParams(config, t)


def _key_index(keys: np.ndarray):
    if len(keys) and keys[-1] - keys[0] + 1 == len(keys):
        return slice(int(keys[0]), int(keys[-1]) + 1)
    return keys


def block_attention(q, k, v, mask: BlockMask, scale: float):
    """Block-sparse attention over ``(B, H, L, dh)`` inputs.

    Returns the output and the per-tile probabilities needed for backward.
    """
    B, H, L, _ = q.shape
    if mask.batch_size != B or mask.seq_len != L:
        raise ShapeError(f"block mask is for {(mask.batch_size, mask.seq_len)}, inputs are {(B, L)}")
    out = np.zeros_like(q)
    saved = {}
    for b in range(B):
        for i in range(mask.num_q_blocks):
            qr = mask.block_range(i)
            keys, allowed = mask.query_plan(b, i)
            ki = _key_index(keys)
            qs = q[b, :, qr.start:qr.stop]
            scores = (qs @ k[b][:, ki].transpose(0, 2, 1)) * scale
            probs = nx.masked_softmax(scores, allowed)
            out[b, :, qr.start:qr.stop] = probs @ v[b][:, ki]
            saved[b, i] = probs
    return out, saved


def block_attention_backward(q, k, v, mask: BlockMask, scale: float, saved, dout):
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for (b, i), probs in saved.items():
        qr = mask.block_range(i)
        keys, _ = mask.query_plan(b, i)
        ki = _key_index(keys)
        do = dout[b, :, qr.start:qr.stop]
        dv[b][:, ki] += probs.transpose(0, 2, 1) @ do
        dscores = nx.softmax_backward(probs, do @ v[b][:, ki].transpose(0, 2, 1)) * scale
        dq[b, :, qr.start:qr.stop] = dscores @ k[b][:, ki]
        dk[b][:, ki] += dscores.transpose(0, 2, 1) @ q[b, :, qr.start:qr.stop]
    return dq, dk, dv


def dense_attention(q, k, v, mask: np.ndarray, scale: float):
    """Reference attention with a materialised ``(B, L, L)`` boolean mask."""
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    return nx.masked_softmax(scores, mask[:, None]) @ v


@dataclass
class ForwardCache:
    params: ModelParams
    tokens: np.ndarray
    positions: np.ndarray
    block_mask: BlockMask
    layers: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_h: np.ndarray | None = None


def _split_heads(x, n_heads):
    B, L, D = x.shape
    return x.reshape(B, L, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def forward(params: ModelParams, tokens, position_ids, block_mask: BlockMask):
    """Logits ``(B, L, V)`` and the activation cache for :func:`backward`."""
    cfg = params.config
    tokens = np.asarray(tokens)
    positions = np.asarray(position_ids)
    if tokens.ndim != 2 or positions.shape != tokens.shape:
        raise ShapeError(f"tokens {tokens.shape} and position_ids {positions.shape} must match (B, L)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ShapeError("token ID outside the vocabulary")
    t = params.tensors
    eps = cfg.rms_eps
    scale = 1.0 / np.sqrt(cfg.d_head)
    rope_pos = positions[:, None, :]
    cache = ForwardCache(params, tokens, positions, block_mask)
    x = t["embed"][tokens]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = nx.rms_norm(x, t[p + "attn_norm"], eps)
        q = nx.rope_apply(_split_heads(h @ t[p + "wq"], cfg.n_heads), rope_pos, cfg.rope_theta)
        k = nx.rope_apply(_split_heads(h @ t[p + "wk"], cfg.n_heads), rope_pos, cfg.rope_theta)
        v = _split_heads(h @ t[p + "wv"], cfg.n_heads)
        o, probs = block_attention(q, k, v, block_mask, scale)
        o = _merge_heads(o)
        x1 = x + o @ t[p + "wo"]
        h2 = nx.rms_norm(x1, t[p + "mlp_norm"], eps)
        gate = h2 @ t[p + "w_gate"]
        up = h2 @ t[p + "w_up"]
        m = nx.swiglu(gate, up)
        cache.layers.append(dict(x=x, h=h, q=q, k=k, v=v, probs=probs, o=o,
                                 x1=x1, h2=h2, gate=gate, up=up, m=m))
        x = x1 + m @ t[p + "w_down"]
    hf = nx.rms_norm(x, t["final_norm"], eps)
    cache.final_x, cache.final_h = x, hf
    return hf @ t["head"], cache


def _wgrad(a, g):
    # sum over tokens of outer(a, g)
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def backward(params: ModelParams, cache: ForwardCache, dlogits) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given ``dloss/dlogits``."""
    if cache is None or cache.final_h is None:
        raise StaleCacheError("backward needs the cache from a completed forward call")
    if cache.params is not params:
        raise StaleCacheError("forward cache was produced with different parameters")
    cfg = params.config
    t = params.tensors
    eps = cfg.rms_eps
    scale = 1.0 / np.sqrt(cfg.d_head)
    rope_pos = cache.positions[:, None, :]
    dlogits = np.asarray(dlogits, dtype=cfg.dtype)
    g: dict[str, np.ndarray] = {}
    g["head"] = _wgrad(cache.final_h, dlogits)
    dx, g["final_norm"] = nx.rms_norm_backward(cache.final_x, t["final_norm"], dlogits @ t["head"].T, eps)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = cache.layers[i]
        g[p + "w_down"] = _wgrad(c["m"], dx)
        dgate, dup = nx.swiglu_backward(c["gate"], c["up"], dx @ t[p + "w_down"].T)
        g[p + "w_gate"] = _wgrad(c["h2"], dgate)
        g[p + "w_up"] = _wgrad(c["h2"], dup)
        dh2 = dgate @ t[p + "w_gate"].T + dup @ t[p + "w_up"].T
        dx1_norm, g[p + "mlp_norm"] = nx.rms_norm_backward(c["x1"], t[p + "mlp_norm"], dh2, eps)
        dx1 = dx + dx1_norm
        g[p + "wo"] = _wgrad(c["o"], dx1)
        do = _split_heads(dx1 @ t[p + "wo"].T, cfg.n_heads)
        dq, dk, dv = block_attention_backward(c["q"], c["k"], c["v"], cache.block_mask,
                                              scale, c["probs"], do)
        dq = _merge_heads(nx.rope_apply(dq, rope_pos, cfg.rope_theta, inverse=True))
        dk = _merge_heads(nx.rope_apply(dk, rope_pos, cfg.rope_theta, inverse=True))
        dv = _merge_heads(dv)
        g[p + "wq"] = _wgrad(c["h"], dq)
        g[p + "wk"] = _wgrad(c["h"], dk)
        g[p + "wv"] = _wgrad(c["h"], dv)
        dh = dq @ t[p + "wq"].T + dk @ t[p + "wk"].T + dv @ t[p + "wv"].T
        dx_norm, g[p + "attn_norm"] = nx.rms_norm_backward(c["x"], t[p + "attn_norm"], dh, eps)
        dx = dx1 + dx_norm
    dembed = np.zeros_like(t["embed"])
    np.add.at(dembed, cache.tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    g["embed"] = dembed
    return {name: g[name] for name in t}


# -- optimisers ---------------------------------------------------------------

def _check_grads(grads):
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; aborting step")


def sgd_step(params: ModelParams, grads, lr: float) -> ModelParams:
    _check_grads(grads)
    return params.replace({k: v - lr * grads[k] for k, v in params.tensors.items()})


def adamw_step(params: ModelParams, grads, state: dict, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> ModelParams:
    """One AdamW update with bias correction; ``state`` is updated in place."""
    _check_grads(grads)
    b1, b2 = betas
    step = state.get("step", 0) + 1
    state["step"] = step
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    out = {}
    for name, w in params.tensors.items():
        gr = grads[name]
        m[name] = b1 * m.get(name, 0.0) + (1 - b1) * gr
        v[name] = b2 * v.get(name, 0.0) + (1 - b2) * gr * gr
        mhat = m[name] / (1 - b1**step)
        vhat = v[name] / (1 - b2**step)
        out[name] = (w - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * w)).astype(w.dtype)
    return params.replace(out)


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr
        self.state: dict = {}

    def step(self, params, grads):
        self.state["step"] = self.state.get("step", 0) + 1
        return sgd_step(params, grads, self.lr)


class AdamW:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, params, grads):
        return adamw_step(params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def make_optimizer(name: str, lr: float, **kwargs):
    name = name.lower()
    if name == "sgd":
        return SGD(lr)
    if name == "adamw":
        return AdamW(lr, **kwargs)
    raise ConfigError(f"unknown optimizer {name!r}")


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, step: int = 0, optimizer=None, extra: dict | None = None):
    """Write an ``.npz`` checkpoint.

    Layout: ``meta`` holds a JSON string with ``version``, ``config``, ``step``,
    ``optimizer`` (name and hyperparameters) and ``extra``; each parameter is
    stored as ``param/<name>``; optimizer moments as ``opt/m/<name>`` and
    ``opt/v/<name>``.
    """
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config), "step": int(step),
            "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    if optimizer is not None:
        opt_meta = {"name": type(optimizer).__name__.lower(), "lr": optimizer.lr,
                    "state_step": optimizer.state.get("step", 0)}
        if isinstance(optimizer, AdamW):
            opt_meta.update(betas=list(optimizer.betas), eps=optimizer.eps,
                            weight_decay=optimizer.weight_decay)
            for slot in ("m", "v"):
                for k, val in optimizer.state.get(slot, {}).items():
                    arrays[f"opt/{slot}/{k}"] = val
        meta["optimizer"] = opt_meta
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Return ``(params, step, optimizer_or_None, extra)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        tensors = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        optimizer = None
        om = meta.get("optimizer")
        if om is not None:
            if om["name"] == "adamw":
                optimizer = AdamW(om["lr"], om["betas"], om["eps"], om["weight_decay"])
                for slot in ("m", "v"):
                    prefix = f"opt/{slot}/"
                    optimizer.state[slot] = {k[len(prefix):]: data[k] for k in data.files
                                             if k.startswith(prefix)}
            else:
                optimizer = SGD(om["lr"])
            optimizer.state["step"] = om["state_step"]
    return ModelParams(config, tensors), meta["step"], optimizer, meta["extra"]
