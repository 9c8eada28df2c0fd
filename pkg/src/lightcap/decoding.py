"""Greedy and beam-search caption generation.

PAD, BOS and UNK are masked out of every decoding step (when the vocabulary
contains them), so they never appear in a generated caption.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bpe import BOS, EOS, PAD, UNK
from .numerics import log_softmax_rows


def default_banned(vocab_size: int) -> tuple:
    return tuple(i for i in (PAD, BOS, UNK) if i < vocab_size and i != EOS)


def select_ctx(ctx: dict, idx) -> dict:
    """Row-select every per-image array in a visual context."""
    out = {}
    for key, val in ctx.items():
        if isinstance(val, list):
            out[key] = [v[idx] for v in val]
        else:
            out[key] = val[idx]
    return out


def _masked_logprobs(logits, banned):
    if banned:
        logits = logits.copy()
        logits[:, list(banned)] = -np.inf
    return log_softmax_rows(logits)


def greedy_decode_batch(model, V, max_len=None, grid=None, banned=None,
                        bos=BOS, eos=EOS):
    """Argmax decoding for a batch of images; returns one id list per image.

    Ties resolve to the lowest token id. EOS is not included in the output.
    """
    cfg = model.cfg
    max_len = cfg.max_len if max_len is None else max_len
    banned = default_banned(cfg.vocab_size) if banned is None else tuple(banned)
    ctx = model.encode_visual(V, grid)
    B = ctx["V"].shape[0]
    h = model.init_hidden(ctx)
    y = np.full(B, bos, dtype=np.int64)
    out = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for _ in range(max_len):
        h, logits, _ = model.step(y, h, ctx)
        y = np.argmax(_masked_logprobs(logits, banned), axis=1)
        for i in np.flatnonzero(alive):
            if y[i] == eos:
                alive[i] = False
            else:
                out[i].append(int(y[i]))
        if not alive.any():
            break
    return out


def greedy_decode(model, V, max_len=None, grid=None, **kwargs) -> list:
    grid = None if grid is None else np.asarray(grid)[None]
    return greedy_decode_batch(model, np.asarray(V).reshape(1, -1), max_len, grid, **kwargs)[0]


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def normalized(self) -> float:
        return self.logprob / max(self.length, 1)


def beam_search(model, V, beam: int = 3, max_len=None, grid=None, banned=None,
                bos=BOS, eos=EOS):
    """Best caption by length-normalized log probability.

    Hypotheses that emit EOS move to a completed pool; the search ends when
    no live hypotheses remain or after ``max_len`` steps. If nothing
    completed, the best live hypothesis is returned. Returns
    ``(tokens, normalized_score, hypothesis)`` with EOS stripped from
    ``tokens`` (but counted in the length used for normalization).
    """
    if int(beam) < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    cfg = model.cfg
    max_len = cfg.max_len if max_len is None else max_len
    banned = default_banned(cfg.vocab_size) if banned is None else tuple(banned)
    if max_len == 0:
        return [], 0.0, Hypothesis()

    grid = None if grid is None else np.asarray(grid)[None]
    ctx1 = model.encode_visual(np.asarray(V).reshape(1, -1), grid)
    live = [Hypothesis()]
    h = model.init_hidden(ctx1)
    last = np.array([bos], dtype=np.int64)
    completed = []
    for _ in range(max_len):
        ctx = select_ctx(ctx1, np.zeros(len(live), dtype=np.int64))
        h, logits, _ = model.step(last, h, ctx)
        logp = _masked_logprobs(logits, banned)
        scores = np.array([hyp.logprob for hyp in live])[:, None] + logp
        flat = scores.ravel()
        # stable ordering: higher score first, then lower (hyp, token) index
        order = np.lexsort((np.arange(flat.size), -flat))
        order = [i for i in order if np.isfinite(flat[i])][:beam]
        next_live, rows, toks = [], [], []
        V_size = logp.shape[1]
        for idx in order:
            r, tok = divmod(int(idx), V_size)
            hyp = Hypothesis(live[r].tokens + [tok], float(flat[idx]))
            if tok == eos:
                hyp.finished = True
                completed.append(hyp)
            else:
                next_live.append(hyp)
                rows.append(r)
                toks.append(tok)
        if not next_live:
            break
        live = next_live
        h = h[rows]
        last = np.array(toks, dtype=np.int64)

    pool = completed if completed else live
    best = _first_max(pool)
    tokens = best.tokens[:-1] if best.finished else list(best.tokens)
    return tokens, best.normalized, best


def _first_max(pool):
    best = pool[0]
    for hyp in pool[1:]:
        if hyp.normalized > best.normalized:
            best = hyp
    return best


def decode_batch(model, V, beam: int = 3, max_len=None, grid=None) -> list:
    """Token id lists for a batch of images; beam 1 uses the batched greedy path."""
    if beam == 1:
        return greedy_decode_batch(model, V, max_len, grid)
    V = np.asarray(V)
    return [beam_search(model, V[i], beam, max_len,
                        None if grid is None else np.asarray(grid)[i])[0]
            for i in range(V.shape[0])]
