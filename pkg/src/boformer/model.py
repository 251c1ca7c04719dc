"""Causal-attention Q-network over Q-augmented observation histories.

A history frame contributes three tokens (frame features, reward, target Q);
the candidate frame contributes one. All tokens of a timestep share one
positional embedding, positions counted from the start of the window. The Q
value is read from the candidate token.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"BOFQ"
VERSION = 1
LN_EPS = 1e-5
INIT_STD = 0.02


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not match the requested configuration."""


class TrainingError(RuntimeError):
    """Loss became non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    K: int = 2
    n_layers: int = 8
    n_heads: int = 4
    hidden: int = 128
    dropout: float = 0.1
    window: int = 31

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError("hidden must be divisible by n_heads")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def feature_dim(self) -> int:
        return 3 * self.K + 1


def expected_param_count(cfg: ModelConfig) -> int:
    H, Fd = cfg.hidden, cfg.feature_dim
    embed = Fd * H + H + 2 * (H + H) + cfg.window * H
    per_layer = 12 * H * H + 13 * H
    return embed + cfg.n_layers * per_layer + 2 * H + H + 1


@dataclass
class QParams:
    """Configuration plus named parameter tensors (the parameter store)."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor]

    def clone(self) -> QParams:
        return QParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> QParams:
        return QParams(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    H = cfg.hidden
    shapes = [
        ("embed.frame.w", (cfg.feature_dim, H)), ("embed.frame.b", (H,)),
        ("embed.reward.w", (1, H)), ("embed.reward.b", (H,)),
        ("embed.q.w", (1, H)), ("embed.q.b", (H,)),
        ("embed.pos", (cfg.window, H)),
    ]
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        shapes += [
            (p + "ln1.g", (H,)), (p + "ln1.b", (H,)),
            (p + "attn.qkv.w", (H, 3 * H)), (p + "attn.qkv.b", (3 * H,)),
            (p + "attn.proj.w", (H, H)), (p + "attn.proj.b", (H,)),
            (p + "ln2.g", (H,)), (p + "ln2.b", (H,)),
            (p + "mlp.fc.w", (H, 4 * H)), (p + "mlp.fc.b", (4 * H,)),
            (p + "mlp.proj.w", (4 * H, H)), (p + "mlp.proj.b", (H,)),
        ]
    shapes += [("ln_f.g", (H,)), ("ln_f.b", (H,)), ("head.w", (H, 1)), ("head.b", (1,))]
    return shapes


EMBEDDING_NAMES = ("embed.frame.w", "embed.frame.b")


def _seed_of(seed) -> int:
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(2**63 - 1))
    return int(seed)


def init_params(cfg: ModelConfig, seed=0, dtype: torch.dtype = torch.float32) -> QParams:
    """Weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1, output head 0."""
    gen = torch.Generator().manual_seed(_seed_of(seed))
    tensors = {}
    for name, shape in _shapes(cfg):
        if name.startswith("head."):
            t = torch.zeros(shape, dtype=dtype)
        elif name.endswith(".g"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * INIT_STD
        tensors[name] = t
    return QParams(cfg, tensors)


def reinit_frame_embedding(params: QParams, new_K: int, seed=0, init: str = "random") -> QParams:
    """Copy of ``params`` for ``new_K`` objectives with a new frame embedding.

    ``init="random"`` draws the embedding afresh. ``init="warm"`` maps it from
    the source: rows of objectives the source knew are copied, rows of extra
    objectives take the mean of their feature group, and the t/T row and bias
    are kept.
    """
    cfg = ModelConfig(**{**asdict(params.config), "K": new_K})
    tensors = {k: v.detach().clone() for k, v in params.tensors.items()}
    if init == "random":
        gen = torch.Generator().manual_seed(_seed_of(seed))
        w = torch.randn((cfg.feature_dim, cfg.hidden), generator=gen, dtype=torch.float64) * INIT_STD
        tensors["embed.frame.w"] = w.to(params.dtype)
        tensors["embed.frame.b"] = torch.zeros(cfg.hidden, dtype=params.dtype)
    elif init == "warm":
        src = params["embed.frame.w"]
        Ks = params.config.K
        rows = []
        for g in range(3):
            group = src[g * Ks:(g + 1) * Ks]
            rows += [group[k] if k < Ks else group.mean(dim=0) for k in range(new_K)]
        rows.append(src[3 * Ks])
        tensors["embed.frame.w"] = torch.stack(rows).clone()
    else:
        raise ValueError(f"unknown embedding init {init!r}")
    return QParams(cfg, tensors)


@dataclass
class History:
    """Past frames with their rewards and target-network Q values (oldest first)."""

    frames: np.ndarray
    rewards: np.ndarray
    qvals: np.ndarray

    @classmethod
    def empty(cls, feature_dim: int) -> History:
        return cls(np.empty((0, feature_dim)), np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.frames.shape[0]

    def tail(self, n: int) -> History:
        if n <= 0:
            return History(self.frames[:0], self.rewards[:0], self.qvals[:0])
        return History(self.frames[-n:], self.rewards[-n:], self.qvals[-n:])


@dataclass
class SeqBatch:
    """Left-padded histories: frames (B, L, F), rewards/qvals (B, L), lengths (B,)."""

    frames: np.ndarray
    rewards: np.ndarray
    qvals: np.ndarray
    lengths: np.ndarray = field(default=None)

    @classmethod
    def from_histories(cls, histories, feature_dim: int) -> SeqBatch:
        B = len(histories)
        lengths = np.array([len(h) for h in histories], dtype=np.int64)
        L = int(lengths.max()) if B else 0
        frames = np.zeros((B, L, feature_dim))
        rewards = np.zeros((B, L))
        qvals = np.zeros((B, L))
        for b, h in enumerate(histories):
            m = len(h)
            if m:
                frames[b, L - m:] = h.frames
                rewards[b, L - m:] = h.rewards
                qvals[b, L - m:] = h.qvals
        return cls(frames, rewards, qvals, lengths)


def _t(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _dropout(x, p, gen):
    if gen is None or p <= 0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _embed_prefix(P: dict, cfg: ModelConfig, seq: SeqBatch, dtype):
    """Token embeddings for the history part: (B, 3L, H) and key validity (B, 3L)."""
    B, L = seq.rewards.shape
    H = cfg.hidden
    lengths = torch.as_tensor(seq.lengths)
    if L == 0:
        return torch.zeros((B, 0, H), dtype=dtype), torch.zeros((B, 0), dtype=torch.bool), lengths
    frames = _t(seq.frames, dtype)
    ef = frames @ P["embed.frame.w"] + P["embed.frame.b"]
    er = _t(seq.rewards, dtype)[..., None] * P["embed.reward.w"][0] + P["embed.reward.b"]
    eq = _t(seq.qvals, dtype)[..., None] * P["embed.q.w"][0] + P["embed.q.b"]
    slot = torch.arange(L)[None, :]
    pad = (L - lengths)[:, None]
    valid = slot >= pad
    pos = P["embed.pos"][(slot - pad).clamp(min=0)]
    tokens = torch.stack([ef + pos, er + pos, eq + pos], dim=2).reshape(B, 3 * L, H)
    valid3 = valid[:, :, None].expand(B, L, 3).reshape(B, 3 * L)
    return tokens, valid3, lengths


def _split_heads(x, nh):
    B, S, H = x.shape
    return x.view(B, S, nh, H // nh).transpose(1, 2)


def _merge_heads(x):
    B, nh, S, hd = x.shape
    return x.transpose(1, 2).reshape(B, S, nh * hd)


def _mlp(P, p, x, cfg, gen):
    h = F.layer_norm(x, (cfg.hidden,), P[p + "ln2.g"], P[p + "ln2.b"], LN_EPS)
    h = F.gelu(h @ P[p + "mlp.fc.w"] + P[p + "mlp.fc.b"])
    h = h @ P[p + "mlp.proj.w"] + P[p + "mlp.proj.b"]
    return x + _dropout(h, cfg.dropout, gen)


def _full_forward(P: dict, cfg: ModelConfig, seq: SeqBatch, cand: np.ndarray, gen=None) -> torch.Tensor:
    """Plain causal pass over [history tokens, candidate] for each batch item."""
    dtype = P["head.w"].dtype
    prefix, valid, lengths = _embed_prefix(P, cfg, seq, dtype)
    B = prefix.shape[0]
    if lengths.numel() and int(lengths.max()) > cfg.window - 1:
        raise ValueError(f"history longer than window - 1 = {cfg.window - 1}")
    c = _t(cand, dtype) @ P["embed.frame.w"] + P["embed.frame.b"] + P["embed.pos"][lengths]
    x = torch.cat([prefix, c[:, None, :]], dim=1)
    valid = torch.cat([valid, torch.ones((B, 1), dtype=torch.bool)], dim=1)
    S = x.shape[1]
    causal = torch.ones((S, S), dtype=torch.bool).tril()
    mask = (causal[None] & valid[:, None, :]) | torch.eye(S, dtype=torch.bool)[None]
    mask = mask[:, None]
    x = _dropout(x, cfg.dropout, gen)
    nh = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.hidden // nh)
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        h = F.layer_norm(x, (cfg.hidden,), P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)
        q, k, v = (h @ P[p + "attn.qkv.w"] + P[p + "attn.qkv.b"]).split(cfg.hidden, dim=2)
        q, k, v = _split_heads(q, nh), _split_heads(k, nh), _split_heads(v, nh)
        att = (q @ k.transpose(-1, -2)) * scale
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        att = _dropout(att, cfg.dropout, gen)
        y = _merge_heads(att @ v) @ P[p + "attn.proj.w"] + P[p + "attn.proj.b"]
        x = x + _dropout(y, cfg.dropout, gen)
        x = _mlp(P, p, x, cfg, gen)
    out = F.layer_norm(x[:, -1], (cfg.hidden,), P["ln_f.g"], P["ln_f.b"], LN_EPS)
    return (out @ P["head.w"] + P["head.b"])[:, 0]


def _shared_prefix_forward(P: dict, cfg: ModelConfig, seq: SeqBatch, cands: np.ndarray) -> torch.Tensor:
    """Q for M candidates per history, running each history prefix once.

    ``cands`` has shape (B, M, F). Candidates attend to the cached prefix
    keys/values and to themselves, never to each other.
    """
    dtype = P["head.w"].dtype
    xp, valid, lengths = _embed_prefix(P, cfg, seq, dtype)
    if lengths.numel() and int(lengths.max()) > cfg.window - 1:
        raise ValueError(f"history longer than window - 1 = {cfg.window - 1}")
    B, Sp, H = xp.shape
    xc = _t(cands, dtype) @ P["embed.frame.w"] + P["embed.frame.b"] + P["embed.pos"][lengths][:, None, :]
    nh = cfg.n_heads
    scale = 1.0 / math.sqrt(H // nh)
    causal = torch.ones((Sp, Sp), dtype=torch.bool).tril()
    pmask = ((causal[None] & valid[:, None, :]) | torch.eye(Sp, dtype=torch.bool)[None])[:, None]
    kmask = valid[:, None, None, :]
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        W, bias = P[p + "attn.qkv.w"], P[p + "attn.qkv.b"]
        hc = F.layer_norm(xc, (H,), P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)
        qc, kc, vc = (hc @ W + bias).split(H, dim=2)
        qc, kc, vc = _split_heads(qc, nh), _split_heads(kc, nh), _split_heads(vc, nh)
        self_score = (qc * kc).sum(-1, keepdim=True) * scale
        if Sp:
            hp = F.layer_norm(xp, (H,), P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)
            qp, kp, vp = (hp @ W + bias).split(H, dim=2)
            qp, kp, vp = _split_heads(qp, nh), _split_heads(kp, nh), _split_heads(vp, nh)
            cross = (qc @ kp.transpose(-1, -2)) * scale
            cross = cross.masked_fill(~kmask, float("-inf"))
            att = torch.cat([cross, self_score], dim=-1).softmax(dim=-1)
            yc = att[..., :Sp] @ vp + att[..., Sp:] * vc
            # advance the prefix itself through this layer
            patt = ((qp @ kp.transpose(-1, -2)) * scale).masked_fill(~pmask, float("-inf")).softmax(-1)
            yp = _merge_heads(patt @ vp) @ P[p + "attn.proj.w"] + P[p + "attn.proj.b"]
            xp = _mlp(P, p, xp + yp, cfg, None)
        else:
            yc = vc
        yc = _merge_heads(yc) @ P[p + "attn.proj.w"] + P[p + "attn.proj.b"]
        xc = _mlp(P, p, xc + yc, cfg, None)
    out = F.layer_norm(xc, (H,), P["ln_f.g"], P["ln_f.b"], LN_EPS)
    return (out @ P["head.w"] + P["head.b"])[..., 0]


def _check_history(params: QParams, history: History) -> None:
    if len(history) > params.config.window - 1:
        raise ValueError(f"history has {len(history)} frames; window allows {params.config.window - 1}"
                         " (truncate to the newest frames)")


def forward(params: QParams, history: History, candidate) -> float:
    """Q value of ``candidate`` given ``history`` (inference mode)."""
    _check_history(params, history)
    seq = SeqBatch.from_histories([history], params.config.feature_dim)
    with torch.no_grad():
        q = _full_forward(params.tensors, params.config, seq, np.asarray(candidate)[None])
    return float(q[0])


def forward_batch(params: QParams, histories, candidates) -> np.ndarray:
    """Q for paired (history, candidate) items via the plain causal pass."""
    seq = SeqBatch.from_histories(histories, params.config.feature_dim)
    with torch.no_grad():
        q = _full_forward(params.tensors, params.config, seq, np.asarray(candidates))
    return q.double().numpy()


def forward_candidates(params: QParams, history: History, candidates) -> np.ndarray:
    """Q for every row of ``candidates`` (M, F) under one shared history."""
    _check_history(params, history)
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    seq = SeqBatch.from_histories([history], params.config.feature_dim)
    with torch.no_grad():
        q = _shared_prefix_forward(params.tensors, params.config, seq, cands[None])
    return q[0].double().numpy()


def forward_candidates_batch(params: QParams, histories, candidates) -> np.ndarray:
    """Batched :func:`forward_candidates`: ``candidates`` is (B, M, F), result (B, M)."""
    seq = SeqBatch.from_histories(histories, params.config.feature_dim)
    with torch.no_grad():
        q = _shared_prefix_forward(params.tensors, params.config, seq, np.asarray(candidates))
    return q.double().numpy()


def backward(params: QParams, histories, candidates, td_targets, dropout_seed: int | None = None,
             trainable=None) -> tuple[dict[str, torch.Tensor], float]:
    """Sum of squared TD residuals over the batch and its exact gradients.

    Dropout is active (with a mask seeded by ``dropout_seed``) only when a
    seed is supplied and the config's dropout rate is positive.
    """
    cfg = params.config
    names = list(params.tensors) if trainable is None else [n for n in params.tensors if n in trainable]
    leaves = {k: (v.detach().requires_grad_(True) if k in names else v.detach())
              for k, v in params.tensors.items()}
    gen = None
    if dropout_seed is not None and cfg.dropout > 0:
        gen = torch.Generator().manual_seed(int(dropout_seed))
    seq = SeqBatch.from_histories(histories, cfg.feature_dim)
    q = _full_forward(leaves, cfg, seq, np.asarray(candidates), gen)
    target = torch.as_tensor(np.asarray(td_targets, dtype=float), dtype=q.dtype)
    loss = ((q - target) ** 2).sum()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    # tensors outside the graph (e.g. history embeddings when no item has history) get zeros
    grads = [torch.zeros_like(leaves[n]) if g is None else g for n, g in zip(names, grads)]
    return dict(zip(names, grads)), float(loss.detach())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: QParams, grads: dict[str, torch.Tensor], lr: float, weight_decay: float,
              state: AdamState) -> QParams:
    """One Adam update, then decoupled weight decay, on the tensors in ``grads``.

    Tensors absent from ``grads`` are left untouched (frozen).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params.tensors[name]
        g = g.detach().to(p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = p - lr * (m / c1) / ((v / c2).sqrt() + state.eps)
        params.tensors[name] = p * (1.0 - lr * weight_decay)
    return params


# Checkpoint: magic, version, config, then named little-endian float32 tensors.

_HEADER = struct.Struct("<4sI5Id")


def save_checkpoint(path, params: QParams, extras: dict[str, torch.Tensor] | None = None) -> None:
    cfg = params.config
    named = list(params.tensors.items()) + list((extras or {}).items())
    out = bytearray(_HEADER.pack(MAGIC, VERSION, cfg.K, cfg.n_layers, cfg.n_heads, cfg.hidden,
                                 cfg.window, cfg.dropout))
    out += struct.pack("<I", len(named))
    for name, t in named:
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expect: ModelConfig | None = None,
                    dtype: torch.dtype = torch.float32) -> tuple[QParams, dict[str, torch.Tensor]]:
    """Read a checkpoint; returns parameters and any extra tensors."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise CheckpointError("not a BOFormer checkpoint (bad magic)")
    magic, version, K, n_layers, n_heads, hidden, window, dropout = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(K, n_layers, n_heads, hidden, float(dropout), window)
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected {expect}")
    off = _HEADER.size
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32)).to(dtype)
    params = {}
    for name, shape in _shapes(cfg):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        params[name] = tensors.pop(name)
    return QParams(cfg, params), tensors
