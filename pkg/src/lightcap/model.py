"""Conditional-GRU caption decoder over a pooled image vector.

One decoder step, for a batch of B rows (row-vector convention)::

    e   = E[y_prev]                          embedding, (B, d)
    x   = e @ Wx                             shared input for all GRU1 gates
    h'  = GRU1(x, h_prev)                    intermediate proposal
    c   = h' * tanh(V @ Wimg)                pooled attention (or multi-head)
    h   = GRU2(c, h')                        gates read c through Wz, Wr, W
    b   = f_bot(e, h, h', c)                 linear or deep-GRU bottleneck, (B, d)
    p   = softmax(b @ E.T)                   tied output projection

Every GRU block uses the same gate layout: the update gate multiplies the
previous state, ``h = (1 - z) * h_tilde + z * h_prev``.

Gradients are hand-derived and accumulate into ``Parameter.grad``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .bpe import BOS
from .numerics import (Parameter, ShapeError, log_softmax_rows, make_rng,
                       sigmoid, softmax_rows)

ATTENTION_MODES = ("pooled", "mha")
BOTTLENECK_MODES = ("linear", "deep_gru")
INIT_MODES = ("shared", "separate")


@dataclass
class ModelConfig:
    d: int = 128
    h: int = 256
    v_dim: int = 2048
    vocab_size: int = 5066
    attention_mode: str = "pooled"
    mha_heads: int = 3
    mha_dq: int = 0  # 0 means "same as h"
    mha_regions: int = 196
    mha_feat_dim: int = 1024
    bottleneck_mode: str = "deep_gru"
    tie_weights: bool = True
    max_len: int = 50
    dropout_p: float = 0.5
    width_multiplier: int = 1
    init_hidden: str = "shared"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d", "h", "v_dim", "vocab_size", "mha_heads", "mha_regions",
                     "mha_feat_dim", "width_multiplier"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mha_dq < 0:
            raise ValueError("mha_dq must be non-negative")
        if self.max_len < 0:
            raise ValueError("max_len must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.bottleneck_mode not in BOTTLENECK_MODES:
            raise ValueError(f"bottleneck_mode must be one of {BOTTLENECK_MODES}")
        if self.init_hidden not in INIT_MODES:
            raise ValueError(f"init_hidden must be one of {INIT_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def emb_dim(self) -> int:
        return self.d * self.width_multiplier

    @property
    def hid_dim(self) -> int:
        return self.h * self.width_multiplier

    @property
    def dq(self) -> int:
        return self.mha_dq * self.width_multiplier if self.mha_dq else self.hid_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in names:
                continue
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    word = str(val).lower()
                    if word not in ("1", "true", "yes", "0", "false", "no"):
                        raise ValueError(f"{key} expects a boolean, got {val!r}")
                    val = word in ("1", "true", "yes")
            elif isinstance(default, int):
                val = int(val)
            elif isinstance(default, float):
                val = float(val)
            kwargs[key] = val
        return cls(**kwargs)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``name -> (rows, cols)`` for every parameter the config uses."""
    d, h, V = cfg.emb_dim, cfg.hid_dim, cfg.vocab_size
    shapes = {"E": (V, d), "Wx": (d, h)}
    for g in ("z", "r", "h"):
        shapes[f"gru1_U{g}"] = (h, h)
    for g in ("z", "r", "h"):
        shapes[f"gru1_b{g}"] = (1, h)
    for g in ("z", "r", "h"):
        shapes[f"gru2_W{g}"] = (h, h)
    for g in ("z", "r", "h"):
        shapes[f"gru2_U{g}"] = (h, h)
    for g in ("z", "r", "h"):
        shapes[f"gru2_b{g}"] = (1, h)
    if cfg.attention_mode == "pooled":
        shapes["Wimg"] = (cfg.v_dim, h)
    else:
        dq, f = cfg.dq, cfg.mha_feat_dim
        for k in range(cfg.mha_heads):
            shapes[f"mha_Q{k}"] = (h, dq)
            shapes[f"mha_K{k}"] = (f, dq)
            shapes[f"mha_V{k}"] = (f, dq)
        shapes["mha_O"] = (cfg.mha_heads * dq, h)
    if needs_winit(cfg):
        shapes["Winit"] = (cfg.v_dim, h)
    if cfg.bottleneck_mode == "linear":
        shapes["Wbot"] = (d + 2 * h, d)
    else:
        for g in ("z", "r", "h"):
            shapes[f"gru3_W{g}"] = (d + 2 * h, h)
        for g in ("z", "r", "h"):
            shapes[f"gru3_U{g}"] = (h, h)
        for g in ("z", "r", "h"):
            shapes[f"gru3_b{g}"] = (1, h)
        shapes["Wshrink"] = (h, d)
    if not cfg.tie_weights:
        shapes["Wout"] = (d, V)
    shapes["Wbase"] = (h, 1)
    shapes["bbase"] = (1, 1)
    return shapes


def needs_winit(cfg: ModelConfig) -> bool:
    return cfg.attention_mode == "mha" or cfg.init_hidden == "separate"


def count_params(cfg: ModelConfig):
    """Total trainable scalars and the per-matrix breakdown summing to it."""
    breakdown = {name: r * c for name, (r, c) in param_shapes(cfg).items()}
    return sum(breakdown.values()), breakdown


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Uniform init: +-1/sqrt(fan_in) for matrices, +-0.08 for E, zero biases."""
    rng = make_rng(seed)
    dtype = cfg.np_dtype
    params = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        if name == "E":
            val = rng.uniform(-0.08, 0.08, size=(rows, cols))
        elif rows == 1:
            val = np.zeros((rows, cols))
        else:
            k = 1.0 / math.sqrt(rows)
            val = rng.uniform(-k, k, size=(rows, cols))
        params[name] = Parameter(name, val.astype(dtype))
    return params


# -- GRU block ---------------------------------------------------------------

def gru_forward(in_z, in_r, in_h, h_prev, Uz, Ur, U, bz, br, bh):
    """One GRU block given the three input pre-activations.

    Returns the new state and a cache for :func:`gru_backward`.
    """
    z = sigmoid(in_z + h_prev @ Uz + bz)
    r = sigmoid(in_r + h_prev @ Ur + br)
    uh = h_prev @ U
    h_tilde = np.tanh(in_h + r * uh + bh)
    h = (1.0 - z) * h_tilde + z * h_prev
    return h, (h_prev, z, r, uh, h_tilde)


def gru_backward(dh, cache, Uz: Parameter, Ur: Parameter, U: Parameter,
                 bz: Parameter, br: Parameter, bh: Parameter):
    """Accumulate weight gradients; return (d_in_z, d_in_r, d_in_h, dh_prev)."""
    h_prev, z, r, uh, h_tilde = cache
    dh_tilde = dh * (1.0 - z)
    dz = dh * (h_prev - h_tilde)
    dh_prev = dh * z
    dah = dh_tilde * (1.0 - h_tilde * h_tilde)
    dr = dah * uh
    duh = dah * r
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    U.grad += h_prev.T @ duh
    Uz.grad += h_prev.T @ daz
    Ur.grad += h_prev.T @ dar
    bz.grad += daz.sum(axis=0, keepdims=True)
    br.grad += dar.sum(axis=0, keepdims=True)
    bh.grad += dah.sum(axis=0, keepdims=True)
    dh_prev += duh @ U.value.T + daz @ Uz.value.T + dar @ Ur.value.T
    return daz, dar, dah, dh_prev


class CGRUDecoder:
    """Parameters plus forward/backward passes of the captioning decoder."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if list(self.params) != list(expected):
            raise ShapeError(f"parameter set {sorted(self.params)} does not match config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def policy_parameters(self):
        return [p for n, p in self.params.items() if n not in ("Wbase", "bbase")]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def output_matrix(self) -> Parameter:
        return self.params["E"] if self.cfg.tie_weights else self.params["Wout"]

    # -- visual context ------------------------------------------------------

    def _gru(self, prefix):
        P = self.params
        return (P[f"{prefix}_Uz"], P[f"{prefix}_Ur"], P[f"{prefix}_Uh"],
                P[f"{prefix}_bz"], P[f"{prefix}_br"], P[f"{prefix}_bh"])

    def encode_visual(self, V, grid=None) -> dict:
        """Per-sequence visual quantities reused at every step."""
        cfg = self.cfg
        V = np.asarray(V, dtype=cfg.np_dtype)
        if V.ndim == 1:
            V = V[None, :]
        if V.shape[1] != cfg.v_dim:
            raise ShapeError(f"expected features of dim {cfg.v_dim}, got {V.shape[1]}")
        ctx = {"V": V}
        if cfg.attention_mode == "pooled":
            ctx["g"] = np.tanh(V @ self.params["Wimg"].value)
        else:
            if grid is None:
                raise ShapeError("multi-head attention needs a feature grid")
            grid = np.asarray(grid, dtype=cfg.np_dtype)
            if grid.ndim == 2:
                grid = grid[None]
            if grid.shape[0] != V.shape[0] or grid.shape[2] != cfg.mha_feat_dim:
                raise ShapeError(f"expected grid (B, N, {cfg.mha_feat_dim}), got {grid.shape}")
            ctx["grid"] = grid
            ctx["K"] = [grid @ self.params[f"mha_K{k}"].value for k in range(cfg.mha_heads)]
            ctx["Vv"] = [grid @ self.params[f"mha_V{k}"].value for k in range(cfg.mha_heads)]
        return ctx

    def init_hidden(self, ctx) -> np.ndarray:
        if needs_winit(self.cfg):
            return np.tanh(ctx["V"] @ self.params["Winit"].value)
        return ctx["g"].copy()

    def _visual_grads(self, ctx) -> dict:
        B = ctx["V"].shape[0]
        if self.cfg.attention_mode == "pooled":
            return {"g": np.zeros((B, self.cfg.hid_dim), dtype=ctx["V"].dtype)}
        return {"K": [np.zeros_like(k) for k in ctx["K"]],
                "Vv": [np.zeros_like(v) for v in ctx["Vv"]]}

    def _init_hidden_backward(self, dh0, ctx, vgrads):
        if needs_winit(self.cfg):
            h0 = np.tanh(ctx["V"] @ self.params["Winit"].value)
            self.params["Winit"].grad += ctx["V"].T @ (dh0 * (1.0 - h0 * h0))
        else:
            vgrads["g"] += dh0

    def _encode_visual_backward(self, ctx, vgrads):
        P = self.params
        if self.cfg.attention_mode == "pooled":
            g = ctx["g"]
            P["Wimg"].grad += ctx["V"].T @ (vgrads["g"] * (1.0 - g * g))
        else:
            grid = ctx["grid"]
            for k in range(self.cfg.mha_heads):
                P[f"mha_K{k}"].grad += np.einsum("bnf,bnd->fd", grid, vgrads["K"][k])
                P[f"mha_V{k}"].grad += np.einsum("bnf,bnd->fd", grid, vgrads["Vv"][k])

    # -- attention -----------------------------------------------------------

    def attend(self, h_mid, ctx):
        if self.cfg.attention_mode == "pooled":
            return h_mid * ctx["g"], None
        return self._attend_mha(h_mid, ctx)

    def _attend_mha(self, h_mid, ctx):
        P = self.params
        scale = 1.0 / math.sqrt(self.cfg.dq)
        heads, cache = [], []
        for k in range(self.cfg.mha_heads):
            q = h_mid @ P[f"mha_Q{k}"].value
            scores = np.einsum("bd,bnd->bn", q, ctx["K"][k]) * scale
            a = softmax_rows(scores)
            heads.append(np.einsum("bn,bnd->bd", a, ctx["Vv"][k]))
            cache.append((q, a))
        cat = np.concatenate(heads, axis=1)
        return cat @ P["mha_O"].value, (cat, cache)

    def attention_weights(self, h_mid, ctx):
        """Per-head attention distributions over regions (multi-head mode)."""
        _, (_, cache) = self._attend_mha(h_mid, ctx)
        return [a for _, a in cache]

    def _attend_backward(self, dc, h_mid, att_cache, ctx, vgrads):
        if self.cfg.attention_mode == "pooled":
            vgrads["g"] += dc * h_mid
            return dc * ctx["g"]
        P = self.params
        cat, cache = att_cache
        dq_dim = self.cfg.dq
        scale = 1.0 / math.sqrt(dq_dim)
        P["mha_O"].grad += cat.T @ dc
        dcat = dc @ P["mha_O"].value.T
        dh_mid = np.zeros_like(h_mid)
        for k, (q, a) in enumerate(cache):
            dhead = dcat[:, k * dq_dim:(k + 1) * dq_dim]
            da = np.einsum("bd,bnd->bn", dhead, ctx["Vv"][k])
            vgrads["Vv"][k] += a[:, :, None] * dhead[:, None, :]
            ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
            dq = np.einsum("bn,bnd->bd", ds, ctx["K"][k])
            vgrads["K"][k] += ds[:, :, None] * q[:, None, :]
            P[f"mha_Q{k}"].grad += h_mid.T @ dq
            dh_mid += dq @ P[f"mha_Q{k}"].value.T
        return dh_mid

    # -- single step ---------------------------------------------------------

    def step(self, y_prev, h_prev, ctx, dropout_rng=None):
        """Advance one timestep; returns (h, logits, cache).

        Dropout on the bottleneck is applied only when ``dropout_rng`` is
        given and ``dropout_p > 0``.
        """
        P, cfg = self.params, self.cfg
        y_prev = np.asarray(y_prev, dtype=np.int64)
        if np.any(y_prev < 0) or np.any(y_prev >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        e = P["E"].value[y_prev]
        x = e @ P["Wx"].value
        gru1 = self._gru("gru1")
        h_mid, c1 = gru_forward(x, x, x, h_prev, *(p.value for p in gru1))
        c, att_cache = self.attend(h_mid, ctx)
        gru2 = self._gru("gru2")
        h, c2 = gru_forward(c @ P["gru2_Wz"].value, c @ P["gru2_Wr"].value,
                            c @ P["gru2_Wh"].value, h_mid, *(p.value for p in gru2))
        if cfg.bottleneck_mode == "linear":
            cat = np.concatenate([e, h, c], axis=1)
            b = cat @ P["Wbot"].value
            bot_cache = cat
        else:
            cat = np.concatenate([e, h_mid, c], axis=1)
            g3, c3 = gru_forward(cat @ P["gru3_Wz"].value, cat @ P["gru3_Wr"].value,
                                 cat @ P["gru3_Wh"].value, h,
                                 *(p.value for p in self._gru("gru3")))
            b = g3 @ P["Wshrink"].value
            bot_cache = (cat, g3, c3)
        mask = None
        if dropout_rng is not None and cfg.dropout_p > 0:
            keep = 1.0 - cfg.dropout_p
            mask = ((dropout_rng.random(b.shape) < keep) / keep).astype(b.dtype)
            b = b * mask
        W = self.output_matrix.value
        logits = b @ W.T if cfg.tie_weights else b @ W
        cache = (y_prev, e, x, c1, h_mid, c, att_cache, c2, h, bot_cache, mask, b)
        return h, logits, cache

    def step_backward(self, dlogits, dh, cache, ctx, vgrads):
        """Backprop one step; returns the gradient w.r.t. ``h_prev``."""
        P, cfg = self.params, self.cfg
        y_prev, e, x, c1, h_mid, c, att_cache, c2, h, bot_cache, mask, b = cache
        d = cfg.emb_dim
        hd = cfg.hid_dim
        out = self.output_matrix
        if cfg.tie_weights:
            out.grad += dlogits.T @ b
            db = dlogits @ out.value
        else:
            out.grad += b.T @ dlogits
            db = dlogits @ out.value.T
        if mask is not None:
            db = db * mask

        dh = dh.copy()
        if cfg.bottleneck_mode == "linear":
            P["Wbot"].grad += bot_cache.T @ db
            dcat = db @ P["Wbot"].value.T
            de = dcat[:, :d].copy()
            dh += dcat[:, d:d + hd]
            dc = dcat[:, d + hd:].copy()
            dh_mid = np.zeros_like(h_mid)
        else:
            cat, g3, c3 = bot_cache
            P["Wshrink"].grad += g3.T @ db
            dg3 = db @ P["Wshrink"].value.T
            dz, dr, dhh, dh_from3 = gru_backward(dg3, c3, *self._gru("gru3"))
            dh += dh_from3
            dcat = np.zeros_like(cat)
            for gate, dgate in (("z", dz), ("r", dr), ("h", dhh)):
                W3 = P[f"gru3_W{gate}"]
                W3.grad += cat.T @ dgate
                dcat += dgate @ W3.value.T
            de = dcat[:, :d].copy()
            dh_mid = dcat[:, d:d + hd].copy()
            dc = dcat[:, d + hd:].copy()

        dz, dr, dhh, dh_mid2 = gru_backward(dh, c2, *self._gru("gru2"))
        dh_mid += dh_mid2
        for gate, dgate in (("z", dz), ("r", dr), ("h", dhh)):
            W2 = P[f"gru2_W{gate}"]
            W2.grad += c.T @ dgate
            dc += dgate @ W2.value.T

        dh_mid += self._attend_backward(dc, h_mid, att_cache, ctx, vgrads)

        dz, dr, dhh, dh_prev = gru_backward(dh_mid, c1, *self._gru("gru1"))
        dx = dz + dr + dhh
        P["Wx"].grad += e.T @ dx
        de += dx @ P["Wx"].value.T
        np.add.at(P["E"].grad, y_prev, de)
        return dh_prev

    # -- full sequences ------------------------------------------------------

    def sequence_loss(self, V, inputs, targets, mask=None, weights=None, grid=None,
                      dropout_rng=None, backward=True):
        """Teacher-forced weighted negative log-likelihood of ``targets``.

        ``inputs`` and ``targets`` are (B, T) id arrays (inputs start with
        BOS, targets end with EOS); ``mask`` marks real positions and
        ``weights``, shaped (B,) or (B, T), scales each row's or each
        position's loss. With ``backward`` the gradient of the returned loss
        is accumulated into the parameters.

        Returns (loss, per-row log-probability sums, hidden states (B, T, h)).
        """
        inputs = np.asarray(inputs, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        if inputs.ndim == 1:
            inputs, targets = inputs[None], targets[None]
        B, T = inputs.shape
        if targets.shape != (B, T):
            raise ShapeError(f"inputs {inputs.shape} and targets {targets.shape} differ")
        dtype = self.cfg.np_dtype
        mask = np.ones((B, T), dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
        weights = np.ones(B, dtype=dtype) if weights is None else np.asarray(weights, dtype=dtype)
        if weights.ndim == 1:
            weights = np.repeat(weights[:, None], T, axis=1)
        scale = weights * mask

        ctx = self.encode_visual(V, grid)
        h = self.init_hidden(ctx)
        caches, probs, hs = [], [], []
        logp_sum = np.zeros(B, dtype=np.float64)
        loss = 0.0
        rows = np.arange(B)
        for t in range(T):
            h, logits, cache = self.step(inputs[:, t], h, ctx, dropout_rng)
            logp = log_softmax_rows(logits)
            picked = logp[rows, targets[:, t]]
            logp_sum += mask[:, t] * picked
            loss -= float((scale[:, t] * picked).sum())
            hs.append(h)
            if backward:
                caches.append(cache)
                probs.append(np.exp(logp))

        if backward:
            vgrads = self._visual_grads(ctx)
            dh = np.zeros_like(h)
            for t in reversed(range(T)):
                w = scale[:, t]
                dlogits = probs[t] * w[:, None]
                dlogits[rows, targets[:, t]] -= w
                dh = self.step_backward(dlogits, dh, caches[t], ctx, vgrads)
            self._init_hidden_backward(dh, ctx, vgrads)
            self._encode_visual_backward(ctx, vgrads)
        return loss, logp_sum, np.stack(hs, axis=1)

    # -- baseline head -------------------------------------------------------

    def baseline_steps(self, hs):
        """Per-step reward estimates ``h_t @ Wbase + bbase``, shape ``(B, T)``."""
        return (hs @ self.params["Wbase"].value)[..., 0] + self.params["bbase"].value[0, 0]


def output_distribution(model: CGRUDecoder, b: np.ndarray) -> np.ndarray:
    W = model.output_matrix.value
    logits = b @ W.T if model.cfg.tie_weights else b @ W
    return softmax_rows(logits)


def embed_prev(model: CGRUDecoder, y_prev) -> np.ndarray:
    """``x_t`` for the previous token ids."""
    y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
    if np.any(y_prev < 0) or np.any(y_prev >= model.cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {model.cfg.vocab_size})")
    return model["E"].value[y_prev] @ model["Wx"].value


def teacher_forcing_arrays(captions, pad_to: Optional[int] = None):
    """(inputs, targets, mask) for id sequences wrapped as BOS ... EOS."""
    from .bpe import EOS, PAD
    if not captions:
        raise ValueError("no captions given")
    for cap in captions:
        if len(cap) == 0:
            raise ValueError("cannot train on an empty caption")
    T = max(len(c) for c in captions) + 1
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(captions)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, cap in enumerate(captions):
        n = len(cap)
        inputs[i, 0] = BOS
        inputs[i, 1:n + 1] = cap
        targets[i, :n] = cap
        targets[i, n] = EOS
        mask[i, :n + 1] = 1.0
    return inputs, targets, mask
