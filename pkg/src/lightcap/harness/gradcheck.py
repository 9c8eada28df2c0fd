"""Finite-difference verification of the full decoder loss in every
attention x bottleneck x tying configuration."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from ..model import CGRUDecoder, ModelConfig, teacher_forcing_arrays
from ..numerics import finite_diff_gradcheck, make_rng

TOLERANCE = 1e-4
# balances truncation (~eps^2) against round-off (~1e-16 |f| / eps) in float64
DEFAULT_EPS = 5e-5


@dataclass
class CellResult:
    attention_mode: str
    bottleneck_mode: str
    tie_weights: bool
    max_rel_error: float
    n_params: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def line(self) -> str:
        tied = "tied" if self.tie_weights else "untied"
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.attention_mode:6s} {self.bottleneck_mode:8s} {tied:6s} "
                f"max_rel_err={self.max_rel_error:.3e} params={self.n_params} {self.seconds:.1f}s")


def tiny_config(attention_mode="pooled", bottleneck_mode="linear", tie_weights=True) -> ModelConfig:
    return ModelConfig(d=8, h=16, v_dim=32, vocab_size=20, attention_mode=attention_mode,
                       bottleneck_mode=bottleneck_mode, tie_weights=tie_weights, dtype="float64",
                       mha_heads=2, mha_regions=5, mha_feat_dim=12, dropout_p=0.5, max_len=10)


def check_cell(cfg: ModelConfig, seed: int = 5, eps: float = DEFAULT_EPS, scale: float = 0.5) -> float:
    """Max relative gradient error of the XE loss (with dropout) on a random instance.

    Parameters are redrawn from U(-scale, scale), biases included, so that
    gradients sit well above the finite-difference noise floor.
    """
    model = CGRUDecoder(cfg, seed=seed)
    rng = make_rng(seed)
    for p in model.parameters():
        p.value[...] = rng.uniform(-scale, scale, size=p.shape)
    V = rng.normal(size=(2, cfg.v_dim))
    grid = rng.normal(size=(2, cfg.mha_regions, cfg.mha_feat_dim)) if cfg.attention_mode == "mha" else None
    caps = [rng.integers(4, cfg.vocab_size, size=4), rng.integers(4, cfg.vocab_size, size=2)]
    inputs, targets, mask = teacher_forcing_arrays(caps)

    def loss(backward):
        return model.sequence_loss(V, inputs, targets, mask, grid=grid,
                                   dropout_rng=make_rng(seed + 1), backward=backward)[0]

    return finite_diff_gradcheck(lambda: loss(True), model.parameters(), eps, lambda: loss(False))


def run_suite(eps: float = DEFAULT_EPS, seed: int = 5, report=None) -> list:
    results = []
    for att, bot, tie in itertools.product(("pooled", "mha"), ("linear", "deep_gru"), (True, False)):
        cfg = tiny_config(att, bot, tie)
        t0 = time.perf_counter()
        err = check_cell(cfg, seed=seed, eps=eps)
        n = sum(r * c for r, c in (p.shape for p in CGRUDecoder(cfg).parameters()))
        res = CellResult(att, bot, tie, err, n, time.perf_counter() - t0)
        results.append(res)
        if report:
            report(res)
    return results
