"""The forecasting network.

Daily history tokens are built by embedding each modality (user activity,
event context, static attributes) with its own MLP, concatenating, and
projecting to the model width.  An encoder stack (pre-norm self-attention
with SwiGLU feed-forwards) contextualizes the history; the decoder queries
it with embedded future event context through cross-attention only — there
is no self-attention between future steps, so each forecast day depends
solely on its own event context and the encoded history.  Per-dimension
projection heads emit one scalar per behavioral dimension per future day
(logits for binary dimensions).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datamodel import TrainingSample


class PositionalKind(str, Enum):
    LEARNED = "learned"
    SINUSOIDAL = "sinusoidal"
    ABSOLUTE = "absolute"


@dataclass
class ModelConfig:
    d_u: int = 4
    d_s: int = 3
    d_static: int = 4
    t_hist: int = 360
    t_fut: int = 7
    d_model: int = 512
    n_heads: int = 8
    n_enc_layers: int = 6
    n_dec_layers: int = 1
    dim_ff: int = 2048
    dim_user_embed: int = 128
    dim_supply_embed: int = 64
    dim_static_embed: int = 32
    embedding_depth: int = 2
    dropout: float = 0.1
    positional: PositionalKind = PositionalKind.LEARNED
    loss_variant: str = "equation"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        self.positional = PositionalKind(self.positional)
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        for name in ("d_u", "d_s", "d_static", "t_hist", "t_fut", "d_model",
                     "n_heads", "n_enc_layers", "n_dec_layers", "dim_ff",
                     "dim_user_embed", "dim_supply_embed", "dim_static_embed",
                     "embedding_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.loss_variant not in ("equation", "appendix"):
            raise ValueError(f"unknown loss_variant {self.loss_variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["positional"] = self.positional.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionTrace:
    """Cross-attention weights per decoder layer, shape (n_heads, t_fut, t_hist)
    for a single sample or (batch, n_heads, t_fut, t_hist) for a batch."""

    layers: list[np.ndarray] = field(default_factory=list)

    def head_mean(self, layer: int = 0) -> np.ndarray:
        """Average over heads (and batch, if present) -> (t_fut, t_hist)."""
        w = self.layers[layer]
        while w.ndim > 2:
            w = w.mean(axis=0)
        return w

    def row_sum_error(self) -> float:
        return max(float(np.abs(w.sum(axis=-1) - 1.0).max()) for w in self.layers)


class Model:
    """Parameter container plus train/eval mode switch.

    ``params`` is an ordered name -> Tensor map; the declared order is the
    checkpoint layout.  Forward passes live in module-level functions.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.training = False
        self._rng = np.random.default_rng([config.seed, 0xD0])
        self._pe_cache: dict[tuple, Tensor] = {}

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def reset_rng(self, seed: int) -> None:
        self._rng = np.random.default_rng([seed, 0xD0])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy_param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = arrays[k].astype(p.data.dtype)

    def astype(self, dtype: str) -> "Model":
        """Return a copy of this model in the given numeric mode."""
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "dtype": dtype})
        other = init_model(cfg)
        for k, p in self.params.items():
            other.params[k].data = p.data.astype(cfg.np_dtype)
        return other

    def _add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(data, dtype=self.config.np_dtype), requires_grad=True)
        self.params[name] = t
        return t

    def p(self, name: str) -> Tensor:
        return self.params[name]


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------

def init_model(config: ModelConfig) -> Model:
    """Build a model with deterministic scaled-uniform initialization.

    Learned positional tables start at exactly zero; weight matrices draw
    from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and log-variances start
    at zero.
    """
    model = Model(config)
    rng = np.random.default_rng(config.seed)

    def linear(name: str, d_in: int, d_out: int) -> None:
        # biases share the fan-in-scaled uniform init so that all-zero input
        # rows (inactive days, event-free context) never land pre-activations
        # exactly on the ReLU kink
        bound = 1.0 / np.sqrt(d_in)
        model._add_param(f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
        model._add_param(f"{name}.b", rng.uniform(-bound, bound, size=d_out))

    def mlp(name: str, d_in: int, d_out: int, depth: int) -> None:
        for i in range(depth):
            linear(f"{name}.{i}", d_in if i == 0 else d_out, d_out)

    def layer_norm_params(name: str, width: int) -> None:
        model._add_param(f"{name}.g", np.ones(width))
        model._add_param(f"{name}.b", np.zeros(width))

    def attention(name: str, width: int) -> None:
        # no key bias: a constant shift of every key moves all of a query's
        # scores equally, which softmax cancels exactly, so the parameter
        # would be inert
        linear(f"{name}.wq", width, width)
        bound = 1.0 / np.sqrt(width)
        model._add_param(f"{name}.wk.w", rng.uniform(-bound, bound, size=(width, width)))
        linear(f"{name}.wv", width, width)
        linear(f"{name}.wo", width, width)

    def block(name: str, width: int, dim_ff: int) -> None:
        layer_norm_params(f"{name}.ln1", width)
        attention(f"{name}.attn", width)
        layer_norm_params(f"{name}.ln2", width)
        linear(f"{name}.ffn.w1", width, dim_ff)
        linear(f"{name}.ffn.w3", width, dim_ff)
        linear(f"{name}.ffn.w2", dim_ff, width)

    c = config
    mlp("user_mlp", c.d_u, c.dim_user_embed, c.embedding_depth)
    mlp("static_mlp", c.d_static, c.dim_static_embed, c.embedding_depth)
    mlp("event_mlp", c.d_s, c.dim_supply_embed, c.embedding_depth)
    mlp("future_event_mlp", c.d_s, c.d_model, c.embedding_depth)
    concat_width = c.dim_user_embed + c.dim_static_embed + c.dim_supply_embed
    mlp("proj_mlp", concat_width, c.d_model, c.embedding_depth)
    model._add_param("u_pad", rng.uniform(-1.0, 1.0, size=c.d_u) / np.sqrt(c.d_u))

    if c.positional is PositionalKind.LEARNED:
        model._add_param("pe_hist", np.zeros((c.t_hist, c.d_model)))
        model._add_param("pe_fut", np.zeros((c.t_fut, c.d_model)))

    for l in range(c.n_enc_layers):
        block(f"enc.{l}", c.d_model, c.dim_ff)
    layer_norm_params("enc_norm", c.d_model)

    for l in range(c.n_dec_layers):
        block(f"dec.{l}", c.d_model, c.dim_ff)

    for k in range(c.d_u):
        linear(f"head.{k}.0", c.d_model, c.d_model)
        linear(f"head.{k}.1", c.d_model, c.d_model)
        linear(f"head.{k}.2", c.d_model, 1)

    model._add_param("log_vars", np.zeros(c.d_u))
    return model


def count_params(model: Model) -> int:
    """Number of scalar learnables (log-variances and learned tables included)."""
    return sum(int(p.data.size) for p in model.params.values())


# --------------------------------------------------------------------------
# Forward components
# --------------------------------------------------------------------------

def _run_mlp(model: Model, name: str, x: Tensor) -> Tensor:
    depth = model.config.embedding_depth
    for i in range(depth):
        x = x @ model.p(f"{name}.{i}.w") + model.p(f"{name}.{i}.b")
        if i < depth - 1:
            x = x.relu()
    return x


def _as_batch(arr: np.ndarray, ndim: int, dtype) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim == ndim:
        return arr[None], True
    return arr, False


def embed_tokens(
    user_hist: np.ndarray,
    pad_mask: np.ndarray,
    static_features: np.ndarray,
    supply_hist: np.ndarray,
    model: Model,
) -> Tensor:
    """Daily history tokens: per-modality MLPs, concatenation, projection to
    d_model.  Pre-registration rows are replaced by the learned pad vector
    before the user pathway; the static embedding is computed once per user
    and broadcast across time."""
    c = model.config
    dt = c.np_dtype
    U, single = _as_batch(user_hist, 2, dt)
    S, _ = _as_batch(supply_hist, 2, dt)
    pad = np.asarray(pad_mask, dtype=dt)
    if pad.ndim == 1:
        pad = pad[None]
    x_st = np.asarray(static_features, dtype=dt)
    if x_st.ndim == 1:
        x_st = x_st[None]
    B, T, _ = U.shape

    pad3 = Tensor(pad[:, :, None])
    u_eff = Tensor(U) * Tensor((1.0 - pad)[:, :, None]) + model.p("u_pad") * pad3
    h_user = _run_mlp(model, "user_mlp", u_eff)
    h_event = _run_mlp(model, "event_mlp", Tensor(S))
    h_static = _run_mlp(model, "static_mlp", Tensor(x_st))
    h_static = h_static.reshape(B, 1, -1) + Tensor(np.zeros((B, T, 1), dtype=dt))

    z = _run_mlp(model, "proj_mlp", ad.concat([h_user, h_static, h_event], axis=-1))
    return z.reshape(T, c.d_model) if single else z


def embed_future(supply_fut: np.ndarray, model: Model) -> Tensor:
    """Future tokens from event context alone, via the dedicated future
    pathway (parameters disjoint from the history event pathway)."""
    c = model.config
    S, single = _as_batch(supply_fut, 2, c.np_dtype)
    z = _run_mlp(model, "future_event_mlp", Tensor(S))
    return z.reshape(S.shape[1], c.d_model) if single else z


def positional(kind: PositionalKind | str, length: int, d_model: int, model: Model) -> Tensor:
    """Positional table of the requested kind.

    learned: the model's trainable table (zeros at init).
    sinusoidal: interleaved sin/cos over geometric frequencies.
    absolute: raw position index in channel 0, zeros elsewhere.
    """
    kind = PositionalKind(kind)
    if kind is PositionalKind.LEARNED:
        c = model.config
        if length == c.t_hist:
            return model.p("pe_hist")
        if length == c.t_fut:
            return model.p("pe_fut")
        raise ValueError(f"no learned positional table of length {length}")

    key = (kind.value, length, d_model)
    cached = model._pe_cache.get(key)
    if cached is not None:
        return cached
    table = np.zeros((length, d_model), dtype=model.config.np_dtype)
    if kind is PositionalKind.SINUSOIDAL:
        pos = np.arange(length, dtype=np.float64)[:, None]
        idx = np.arange(0, d_model, 2, dtype=np.float64)
        angles = pos / np.power(10000.0, idx / d_model)
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    elif kind is PositionalKind.ABSOLUTE:
        table[:, 0] = np.arange(length)
    out = Tensor(table)
    model._pe_cache[key] = out
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, D = x.shape
    dk = D // n_heads
    return x.reshape(B, T, n_heads, dk).transpose(0, 2, 1, 3).reshape(B * n_heads, T, dk)


def _merge_heads(x: Tensor, n_heads: int, batch: int) -> Tensor:
    BH, T, dk = x.shape
    return x.reshape(batch, n_heads, T, dk).transpose(0, 2, 1, 3).reshape(batch, T, n_heads * dk)


def _attention(
    model: Model, name: str, x_q: Tensor, x_kv: Tensor
) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention; returns output and the
    softmax weights as (batch, heads, t_q, t_k)."""
    c = model.config
    B, Tq, _ = x_q.shape
    Tk = x_kv.shape[1]
    dk = c.d_model // c.n_heads

    q = _split_heads(x_q @ model.p(f"{name}.wq.w") + model.p(f"{name}.wq.b"), c.n_heads)
    k = _split_heads(x_kv @ model.p(f"{name}.wk.w"), c.n_heads)
    v = _split_heads(x_kv @ model.p(f"{name}.wv.w") + model.p(f"{name}.wv.b"), c.n_heads)

    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
    weights = ad.softmax(scores, axis=-1)
    ctx = _merge_heads(weights @ v, c.n_heads, B)
    out = ctx @ model.p(f"{name}.wo.w") + model.p(f"{name}.wo.b")
    trace = weights.data.reshape(B, c.n_heads, Tq, Tk).copy()
    return out, trace


def _maybe_dropout(model: Model, x: Tensor) -> Tensor:
    if model.training and model.config.dropout > 0.0:
        return ad.dropout(x, model.config.dropout, model._rng)
    return x


def _ffn(model: Model, name: str, x: Tensor) -> Tensor:
    """SwiGLU feed-forward: gate = silu(x W1), value = x W3, out = (gate*value) W2."""
    gate = (x @ model.p(f"{name}.w1.w") + model.p(f"{name}.w1.b")).silu()
    value = x @ model.p(f"{name}.w3.w") + model.p(f"{name}.w3.b")
    return (gate * value) @ model.p(f"{name}.w2.w") + model.p(f"{name}.w2.b")


def _ln(model: Model, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, model.p(f"{name}.g"), model.p(f"{name}.b"))


def encode(
    z_hist: Tensor,
    pe_hist: Tensor,
    model: Model,
    captured_attention: list[np.ndarray] | None = None,
) -> Tensor:
    """Pre-norm self-attention encoder with SwiGLU blocks and a final norm."""
    single = z_hist.ndim == 2
    x = z_hist + pe_hist
    if single:
        x = x.reshape(1, *x.shape)
    for l in range(model.config.n_enc_layers):
        name = f"enc.{l}"
        h = _ln(model, f"{name}.ln1", x)
        attn_out, weights = _attention(model, f"{name}.attn", h, h)
        if captured_attention is not None:
            captured_attention.append(weights)
        x = x + _maybe_dropout(model, attn_out)
        x = x + _maybe_dropout(model, _ffn(model, f"{name}.ffn", _ln(model, f"{name}.ln2", x)))
    x = _ln(model, "enc_norm", x)
    return x.reshape(*x.shape[1:]) if single else x


def decode(
    z_fut: Tensor,
    pe_fut: Tensor,
    h_enc: Tensor,
    model: Model,
) -> tuple[Tensor, AttentionTrace]:
    """Cross-attention-only decoder: queries from the future event stream,
    keys/values from encoded history.  No self-attention, so forecast steps
    never see each other."""
    single = z_fut.ndim == 2
    x = z_fut + pe_fut
    if single:
        x = x.reshape(1, *x.shape)
        h_enc = h_enc.reshape(1, *h_enc.shape)
    trace = AttentionTrace()
    for l in range(model.config.n_dec_layers):
        name = f"dec.{l}"
        q_in = _ln(model, f"{name}.ln1", x)
        attn_out, weights = _attention(model, f"{name}.attn", q_in, h_enc)
        trace.layers.append(weights[0] if single else weights)
        x = x + _maybe_dropout(model, attn_out)
        x = x + _maybe_dropout(model, _ffn(model, f"{name}.ffn", _ln(model, f"{name}.ln2", x)))
    return (x.reshape(*x.shape[1:]) if single else x), trace


def project_heads(h_dec: Tensor, model: Model) -> Tensor:
    """Independent per-dimension heads, two ReLU hidden layers each, one
    scalar per future step.  Binary dimensions emit logits."""
    c = model.config
    outs = []
    for k in range(c.d_u):
        h = (h_dec @ model.p(f"head.{k}.0.w") + model.p(f"head.{k}.0.b")).relu()
        h = (h @ model.p(f"head.{k}.1.w") + model.p(f"head.{k}.1.b")).relu()
        outs.append(h @ model.p(f"head.{k}.2.w") + model.p(f"head.{k}.2.b"))
    return ad.concat(outs, axis=-1)


def forward(sample: TrainingSample, model: Model) -> tuple[Tensor, AttentionTrace]:
    """Full pass for one sample: history tokens -> encoder -> future-context
    decoding -> per-dimension predictions of shape (t_fut, d_u)."""
    preds, trace = forward_arrays(
        sample.user_hist, sample.pad_mask, sample.static_features,
        sample.supply_hist, sample.supply_fut, model,
    )
    return preds, trace


def forward_arrays(
    user_hist: np.ndarray,
    pad_mask: np.ndarray,
    static_features: np.ndarray,
    supply_hist: np.ndarray,
    supply_fut: np.ndarray,
    model: Model,
) -> tuple[Tensor, AttentionTrace]:
    """Forward pass over raw arrays; accepts a single sample (2-d sequences)
    or a batch (3-d)."""
    c = model.config
    z_hist = embed_tokens(user_hist, pad_mask, static_features, supply_hist, model)
    pe_h = positional(c.positional, c.t_hist, c.d_model, model)
    h_enc = encode(z_hist, pe_h, model)
    z_fut = embed_future(supply_fut, model)
    pe_f = positional(c.positional, c.t_fut, c.d_model, model)
    h_dec, trace = decode(z_fut, pe_f, h_enc, model)
    return project_heads(h_dec, model), trace


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: Model, path: Path | str, manifest_ref: str = "") -> None:
    """Self-describing .npz: config JSON, manifest reference, and every
    parameter array under its declared name."""
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    with open(Path(path), "wb") as fh:
        np.savez(
            fh,
            __config__=np.frombuffer(json.dumps(model.config.to_dict()).encode(), dtype=np.uint8),
            __manifest_ref__=np.frombuffer(manifest_ref.encode(), dtype=np.uint8),
            **arrays,
        )


def load_checkpoint(path: Path | str) -> tuple[Model, str]:
    with np.load(Path(path)) as data:
        config = ModelConfig.from_dict(json.loads(bytes(data["__config__"]).decode()))
        manifest_ref = bytes(data["__manifest_ref__"]).decode()
        model = init_model(config)
        arrays = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    model.load_param_arrays(arrays)
    return model, manifest_ref
