"""Bidirectional LSTM encoder, LSTM decoder, dot/MLP attention and copy switch.

All functions work on batches: source ids are ``(B, m)`` with a 0/1 mask,
per-step decoder inputs are ``(B,)``.  A single sequence is a batch of one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ShapeMismatch

# Added to attention scores of padded source positions.
MASK_BIAS = -1e30

ATTENTION_KINDS = ("dot", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    embed_size: int = 750
    hidden_size: int = 750
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_kind: str = "dot"
    dropout_p: float = 0.2
    copy_enabled: bool = True
    init_scale: float = 0.1

    def __post_init__(self):
        for name in ("embed_size", "hidden_size", "encoder_layers", "decoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % 2:
            raise ValueError("hidden_size must be even (it is split across directions)")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderOutput:
    states: Tensor  # (B, m, H)
    mask: np.ndarray  # (B, m)
    final_h: list  # per layer, (B, H)
    final_c: list
    keys: Tensor | None = None  # precomputed MLP keys for generation attention
    copy_keys: Tensor | None = None

    @property
    def length(self):
        return self.states.shape[1]


@dataclass
class DecoderStepOutput:
    gen_log_probs: Tensor  # (B, V)
    copy_attn: Tensor  # (B, m)
    rank_attn: Tensor  # (B, m)
    copy_logit: Tensor | None  # (B,) pre-sigmoid switch score; None without copy
    state: list  # per layer (h, c)

    @property
    def gen_dist(self):
        return np.exp(self.gen_log_probs.data)

    @property
    def p_copy(self):
        if self.copy_logit is None:
            return np.zeros(self.gen_log_probs.shape[0], dtype=self.gen_log_probs.data.dtype)
        return 0.5 * (1.0 + np.tanh(0.5 * self.copy_logit.data))


# ---------------------------------------------------------------- parameters


def init_params(config, vocab_size, rng, dtype=None):
    """Uniformly initialised parameters for one model."""
    dtype = dtype or ad.get_dtype()
    E, H, s = config.embed_size, config.hidden_size, config.init_scale
    half = H // 2
    store = ParamStore()

    def u(*shape):
        return rng.uniform(-s, s, size=shape).astype(dtype)

    store.add("embed.src", u(vocab_size, E))
    store.add("embed.tgt", u(vocab_size, E))
    for layer in range(config.encoder_layers):
        d_in = E if layer == 0 else H
        for direction in ("fwd", "bwd"):
            prefix = f"enc.l{layer}.{direction}"
            store.add(f"{prefix}.W", u(d_in, 4 * half))
            store.add(f"{prefix}.U", u(half, 4 * half))
            store.add(f"{prefix}.b", np.zeros(4 * half, dtype=dtype))
    for layer in range(config.decoder_layers):
        d_in = E if layer == 0 else H
        prefix = f"dec.l{layer}"
        store.add(f"{prefix}.W", u(d_in, 4 * H))
        store.add(f"{prefix}.U", u(H, 4 * H))
        store.add(f"{prefix}.b", np.zeros(4 * H, dtype=dtype))
        store.add(f"dec.init.l{layer}.Wh", u(H, H))
        store.add(f"dec.init.l{layer}.bh", np.zeros(H, dtype=dtype))
        store.add(f"dec.init.l{layer}.Wc", u(H, H))
        store.add(f"dec.init.l{layer}.bc", np.zeros(H, dtype=dtype))
    attn_names = ["attn.gen"] + (["attn.copy"] if config.copy_enabled else [])
    if config.attention_kind == "mlp":
        for prefix in attn_names:
            store.add(f"{prefix}.Wq", u(H, H))
            store.add(f"{prefix}.Wk", u(H, H))
            store.add(f"{prefix}.u", u(H, 1))
    store.add("out.combine", u(2 * H, H))
    store.add("out.W", u(H, vocab_size))
    store.add("out.b", np.zeros(vocab_size, dtype=dtype))
    if config.copy_enabled:
        store.add("copy.v", u(H))
    return store


# ---------------------------------------------------------------- layers


def lstm_cell(x_proj, h, c, U, hidden):
    """One LSTM step given the precomputed input projection ``x W + b``."""
    gates = x_proj + h @ U
    i = ad.sigmoid(gates[:, :hidden])
    f = ad.sigmoid(gates[:, hidden : 2 * hidden])
    g = ad.tanh(gates[:, 2 * hidden : 3 * hidden])
    o = ad.sigmoid(gates[:, 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def _masked(new, old, m):
    if m is None:
        return new
    return new * m + old * (1.0 - m)


def _run_direction(x_proj, mask, U, hidden, reverse):
    B, m = mask.shape
    dtype = x_proj.data.dtype
    h = Tensor(np.zeros((B, hidden), dtype=dtype))
    c = Tensor(np.zeros((B, hidden), dtype=dtype))
    outs = [None] * m
    steps = range(m - 1, -1, -1) if reverse else range(m)
    for t in steps:
        h_new, c_new = lstm_cell(x_proj[:, t, :], h, c, U, hidden)
        col = mask[:, t]
        mt = None if col.all() else col[:, None].astype(dtype)
        h, c = _masked(h_new, h, mt), _masked(c_new, c, mt)
        outs[t] = h
    return ad.stack(outs, axis=1), h, c


def encode(source_ids, params, config, train=False, rng=None, mask=None):
    """Run the bidirectional encoder.

    Returns per-position states (forward and backward halves concatenated)
    and the final state of every layer for decoder initialisation.
    """
    source_ids = np.atleast_2d(np.asarray(source_ids, dtype=np.int64))
    if source_ids.shape[1] == 0:
        raise ShapeMismatch("empty source sequence")
    if mask is None:
        mask = np.ones(source_ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != source_ids.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs source {source_ids.shape}")
    half = config.hidden_size // 2
    x = ad.embedding(params["embed.src"], source_ids)
    final_h, final_c = [], []
    for layer in range(config.encoder_layers):
        x = ad.dropout(x, config.dropout_p, train, rng)
        outs, hs, cs = [], [], []
        for direction, reverse in (("fwd", False), ("bwd", True)):
            prefix = f"enc.l{layer}.{direction}"
            x_proj = x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]
            out, h, c = _run_direction(x_proj, mask, params[f"{prefix}.U"], half, reverse)
            outs.append(out)
            hs.append(h)
            cs.append(c)
        x = ad.concat(outs, axis=-1)
        final_h.append(ad.concat(hs, axis=-1))
        final_c.append(ad.concat(cs, axis=-1))
    enc = EncoderOutput(states=x, mask=mask, final_h=final_h, final_c=final_c)
    if config.attention_kind == "mlp":
        enc.keys = x @ params["attn.gen.Wk"]
        if config.copy_enabled:
            enc.copy_keys = x @ params["attn.copy.Wk"]
    return enc


def init_decoder_state(enc, params, config):
    """Learned linear map from the encoder's final states."""
    state = []
    for layer in range(config.decoder_layers):
        src = min(layer, config.encoder_layers - 1)
        p = f"dec.init.l{layer}"
        h = ad.tanh(enc.final_h[src] @ params[f"{p}.Wh"] + params[f"{p}.bh"])
        c = enc.final_c[src] @ params[f"{p}.Wc"] + params[f"{p}.bc"]
        state.append((h, c))
    return state


def _mask_bias(mask, dtype):
    if mask.all():
        return None
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def attention_scores(query, states, kind, params=None, prefix="attn.gen", keys=None):
    """Unnormalised scores ``(B, m)`` of ``query (B, H)`` against ``states (B, m, H)``."""
    if query.ndim != 2 or states.ndim != 3 or query.shape[0] != states.shape[0]:
        raise ShapeMismatch(f"attention: query {query.shape} vs states {states.shape}")
    B, m, H = states.shape
    if kind == "dot":
        if query.shape[1] != H:
            raise ShapeMismatch(f"dot attention: query size {query.shape[1]} != state size {H}")
        return (states @ query.reshape(B, H, 1)).reshape(B, m)
    if kind == "mlp":
        if keys is None:
            keys = states @ params[f"{prefix}.Wk"]
        q = (query @ params[f"{prefix}.Wq"]).reshape(B, 1, -1)
        return (ad.tanh(keys + q) @ params[f"{prefix}.u"]).reshape(B, m)
    raise ValueError(f"unknown attention kind {kind!r}")


def attention(query, states, kind, params=None, prefix="attn.gen", mask=None, keys=None):
    """Softmax-normalised attention weights over source positions."""
    scores = attention_scores(query, states, kind, params, prefix, keys)
    if mask is not None:
        bias = _mask_bias(np.asarray(mask, dtype=bool), scores.data.dtype)
        if bias is not None:
            scores = scores + bias
    return ad.softmax(scores, axis=-1)


def decode_step(prev_ids, state, enc, params, config, train=False, rng=None, x_proj0=None):
    """One decoder step.

    ``x_proj0`` optionally supplies the first layer's precomputed input
    projection (teacher forcing); otherwise ``prev_ids`` are embedded here.
    """
    H = config.hidden_size
    if x_proj0 is None:
        emb = ad.embedding(params["embed.tgt"], np.asarray(prev_ids, dtype=np.int64))
        emb = ad.dropout(emb, config.dropout_p, train, rng)
        x_proj0 = emb @ params["dec.l0.W"] + params["dec.l0.b"]
    new_state = []
    x_proj = x_proj0
    for layer in range(config.decoder_layers):
        if layer > 0:
            inp = ad.dropout(new_state[-1][0], config.dropout_p, train, rng)
            x_proj = inp @ params[f"dec.l{layer}.W"] + params[f"dec.l{layer}.b"]
        h, c = state[layer]
        new_state.append(lstm_cell(x_proj, h, c, params[f"dec.l{layer}.U"], H))
    h_top = new_state[-1][0]
    S = enc.states
    B, m, _ = S.shape
    a = attention(h_top, S, config.attention_kind, params, "attn.gen", enc.mask, enc.keys)
    context = (a.reshape(B, 1, m) @ S).reshape(B, H)
    h_att = ad.tanh(ad.concat([context, h_top], axis=-1) @ params["out.combine"])
    h_att = ad.dropout(h_att, config.dropout_p, train, rng)
    gen_log_probs = ad.log_softmax(h_att @ params["out.W"] + params["out.b"], axis=-1)
    if config.copy_enabled:
        copy_attn = attention(
            h_att, S, config.attention_kind, params, "attn.copy", enc.mask, enc.copy_keys
        )
        copy_logit = (h_att @ params["copy.v"].reshape(H, 1)).reshape(B)
    else:
        copy_attn, copy_logit = a, None
    return DecoderStepOutput(gen_log_probs, copy_attn, a, copy_logit, new_state)


def joint_token_distribution(gen_dist, copy_attn, p_copy, source_ext_ids, ext_size=None):
    """Mix generation and copy distributions over the extended vocabulary.

    Works on one step (1-D inputs) or a batch of steps (leading axis).
    Copy mass of repeated source tokens is summed.
    """
    gen_dist = np.asarray(gen_dist)
    single = gen_dist.ndim == 1
    gen = np.atleast_2d(gen_dist)
    attn = np.atleast_2d(np.asarray(copy_attn))
    pc = np.atleast_1d(np.asarray(p_copy, dtype=gen.dtype))
    src = np.atleast_2d(np.asarray(source_ext_ids, dtype=np.int64))
    if src.shape[0] == 1 and gen.shape[0] > 1:
        src = np.broadcast_to(src, (gen.shape[0], src.shape[1]))
    if pc.shape[0] == 1 and gen.shape[0] > 1:
        pc = np.broadcast_to(pc, (gen.shape[0],))
    B, V = gen.shape
    if attn.shape != src.shape:
        raise ShapeMismatch(f"copy attention {attn.shape} vs source ids {src.shape}")
    size = max(V, int(src.max()) + 1 if src.size else V)
    if ext_size is not None:
        size = max(size, ext_size)
    out = np.zeros((B, size), dtype=gen.dtype)
    out[:, :V] = (1.0 - pc)[:, None] * gen
    rows = np.repeat(np.arange(B), src.shape[1])
    np.add.at(out, (rows, src.reshape(-1)), (pc[:, None] * attn).reshape(-1))
    return out[0] if single else out


class Seq2Seq:
    """Bundle of configuration and parameters with convenience wrappers."""

    def __init__(self, config, params, vocab_size):
        self.config = config
        self.params = params
        self.vocab_size = vocab_size

    @classmethod
    def create(cls, config, vocab_size, rng):
        return cls(config, init_params(config, vocab_size, rng), vocab_size)

    def encode(self, source_ids, train=False, rng=None, mask=None):
        return encode(source_ids, self.params, self.config, train, rng, mask)

    def initial_state(self, enc):
        return init_decoder_state(enc, self.params, self.config)

    def decode_step(self, prev_ids, state, enc, train=False, rng=None):
        return decode_step(prev_ids, state, enc, self.params, self.config, train, rng)
