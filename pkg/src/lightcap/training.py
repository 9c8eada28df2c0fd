"""Cross-entropy training, REINFORCE fine-tuning and early stopping."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .bpe import BOS, EOS, PAD
from .decoding import decode_batch
from .metrics import CiderD, bleu4, sentence_bleu4
from .model import CGRUDecoder, teacher_forcing_arrays
from .numerics import adam_step, log_softmax_rows, make_rng, sample_categorical_rows

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    patience_epochs: int = 10
    max_epochs: int = 100
    rl_samples: int = 1
    rl_reward_metric: str = "cider_d"
    rl_lr: float = 1e-4
    rl_baseline_lr: float = 1e-2
    rl_epochs: int = 50
    rl_patience_epochs: int = 50
    val_beam: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "rl_samples", "rl_lr", "rl_baseline_lr",
                     "val_beam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience_epochs < 1 or self.rl_patience_epochs < 1:
            raise ValueError("patience must be positive")
        if self.rl_reward_metric not in ("cider_d", "bleu4"):
            raise ValueError("rl_reward_metric must be cider_d or bleu4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                default = getattr(cls, f.name)
                kwargs[f.name] = type(default)(values[f.name])
        return cls(**kwargs)


@dataclass
class EncodedSplit:
    """Features plus BPE id sequences and raw reference strings per image."""
    ids: list
    features: np.ndarray
    captions: list          # per image: list of id arrays
    references: list        # per image: list of strings
    grid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.ids)

    def subset_grid(self, idx):
        return None if self.grid is None else self.grid[idx]


@dataclass
class RewardSample:
    tokens: list
    logprob_sum: float
    reward: float = 0.0
    baseline: float = 0.0


@dataclass
class EpochLog:
    epoch: int
    value: float
    bleu4: float
    cider_d: float
    elapsed: float

    def line(self, timing: bool = True) -> str:
        elapsed = f"{self.elapsed:.2f}" if timing else "0.00"
        return f"{self.epoch}\t{self.value:.6f}\t{self.bleu4:.6f}\t{self.cider_d:.6f}\t{elapsed}"


def optimizer_step(params, cfg: TrainConfig, lr: Optional[float] = None):
    for p in params:
        adam_step(p, lr or cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def reset_optimizer(params) -> None:
    """Forget ADAM moments, e.g. when switching from XE to RL."""
    for p in params:
        p.adam_m[...] = 0.0
        p.adam_v[...] = 0.0
        p.step_count = 0
        p.zero_grad()


def early_stop(history: Sequence[float], patience: int):
    """(stop, best_epoch) with 1-based epochs; stop once the best is
    ``patience`` epochs old. Ties keep the earliest best."""
    if not history:
        return False, 0
    best = int(np.argmax(history)) + 1
    return len(history) - best >= patience, best


# -- cross-entropy -----------------------------------------------------------

def xe_loss(model: CGRUDecoder, features, caption, rng=None, grid=None, backward=True) -> float:
    """Summed teacher-forced NLL of one caption (BOS ... EOS), EOS step included."""
    caption = np.asarray(caption, dtype=np.int64)
    if caption.size == 0:
        raise ValueError("cannot compute the loss of an empty caption")
    inputs, targets, mask = teacher_forcing_arrays([caption])
    g = None if grid is None else np.asarray(grid)[None]
    loss, _, _ = model.sequence_loss(np.asarray(features).reshape(1, -1), inputs, targets, mask,
                                     grid=g, dropout_rng=rng, backward=backward)
    return loss


def _pairs(split: EncodedSplit):
    return [(i, j) for i, caps in enumerate(split.captions) for j in range(len(caps))]


def xe_epoch(model: CGRUDecoder, split: EncodedSplit, cfg: TrainConfig, rng) -> float:
    pairs = _pairs(split)
    order = rng.permutation(len(pairs))
    total, count = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [pairs[k] for k in order[start:start + cfg.batch_size]]
        img = np.array([i for i, _ in chunk])
        caps = [split.captions[i][j] for i, j in chunk]
        inputs, targets, mask = teacher_forcing_arrays(caps)
        weights = np.full(len(chunk), 1.0 / len(chunk))
        loss, _, _ = model.sequence_loss(split.features[img], inputs, targets, mask, weights,
                                         grid=split.subset_grid(img), dropout_rng=rng)
        optimizer_step(model.parameters(), cfg)
        total += loss * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def evaluate(model: CGRUDecoder, split: EncodedSplit, detok: Callable, beam: int = 1,
             max_len=None, scorer: Optional[CiderD] = None):
    """Corpus BLEU-4 and CIDEr-D of decoded captions; returns (bleu, cider, texts)."""
    texts = []
    bs = 64
    for start in range(0, len(split), bs):
        idx = np.arange(start, min(start + bs, len(split)))
        for ids in decode_batch(model, split.features[idx], beam, max_len, split.subset_grid(idx)):
            texts.append(detok(ids))
    scorer = scorer or CiderD(split.references)
    return bleu4(texts, split.references), scorer.corpus_score(texts, split.references), texts


class _Snapshot:
    def __init__(self, model):
        self.values = {n: p.value.copy() for n, p in model.params.items()}

    def restore(self, model):
        for n, p in model.params.items():
            p.value[...] = self.values[n]


def train_xe(model: CGRUDecoder, train: EncodedSplit, val: EncodedSplit, cfg: TrainConfig,
             detok: Callable, on_epoch: Optional[Callable] = None):
    """Mini-batch XE training with per-epoch validation CIDEr-D and early stopping.

    The model ends up holding the best-validation parameters. Returns the
    list of :class:`EpochLog`.
    """
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = make_rng(cfg.seed)
    val_scorer = CiderD(val.references)
    history, logs = [], []
    best = _Snapshot(model)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        loss = xe_epoch(model, train, cfg, rng)
        b4, cd, _ = evaluate(model, val, detok, cfg.val_beam, scorer=val_scorer)
        entry = EpochLog(epoch, loss, b4, cd, time.perf_counter() - t0)
        logs.append(entry)
        history.append(cd)
        log.info("xe epoch %d loss %.4f val bleu4 %.4f cider-d %.4f", epoch, loss, b4, cd)
        if on_epoch:
            on_epoch(entry)
        stop, best_epoch = early_stop(history, cfg.patience_epochs)
        if best_epoch == epoch:
            best = _Snapshot(model)
        if stop:
            break
    best.restore(model)
    return logs


# -- REINFORCE ---------------------------------------------------------------

def sample_captions(model: CGRUDecoder, V, rng, max_len=None, grid=None,
                    bos: int = BOS, eos: Optional[int] = EOS):
    """Ancestral sampling at temperature 1 for a batch of images.

    Returns one target sequence per image (EOS included when emitted) and
    the summed log probability of each sequence. No dropout, no masking.
    """
    max_len = model.cfg.max_len if max_len is None else max_len
    ctx = model.encode_visual(V, grid)
    B = ctx["V"].shape[0]
    h = model.init_hidden(ctx)
    y = np.full(B, bos, dtype=np.int64)
    seqs = [[] for _ in range(B)]
    logp_sum = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    rows = np.arange(B)
    for _ in range(max_len):
        h, logits, _ = model.step(y, h, ctx)
        logp = log_softmax_rows(logits.astype(np.float64))
        y = sample_categorical_rows(np.exp(logp), rng)
        logp_sum += np.where(alive, logp[rows, y], 0.0)
        for i in np.flatnonzero(alive):
            seqs[i].append(int(y[i]))
            if eos is not None and y[i] == eos:
                alive[i] = False
        if not alive.any():
            break
    return seqs, logp_sum


def sample_caption(model: CGRUDecoder, features, rng, max_len=None, grid=None) -> RewardSample:
    g = None if grid is None else np.asarray(grid)[None]
    seqs, lp = sample_captions(model, np.asarray(features).reshape(1, -1), rng, max_len, g)
    return RewardSample(seqs[0], float(lp[0]))


def sequence_arrays(seqs, bos: int = BOS):
    """Teacher-forcing arrays that reproduce already-sampled sequences."""
    T = max(len(s) for s in seqs)
    B = len(seqs)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, s in enumerate(seqs):
        n = len(s)
        inputs[i, 0] = bos
        inputs[i, 1:n] = s[:-1]
        targets[i, :n] = s
        mask[i, :n] = 1.0
    return inputs, targets, mask


def reinforce_update(model: CGRUDecoder, V, reward_fn: Callable, rng, grid=None,
                     max_len=None, n_samples: int = 1, use_baseline: bool = True,
                     bos: int = BOS, eos: Optional[int] = EOS, scale: Optional[float] = None):
    """Accumulate the REINFORCE gradient for a batch of images.

    For each sample Y with reward r, every step t contributes
    ``-(r - b_t) * grad log p(y_t | y_<t)``, where ``b_t = h_t @ Wbase + bbase``
    is read from the decoder state that produced ``p_t``. Because ``h_t``
    only depends on earlier tokens the baseline leaves the expected
    gradient unchanged. The baseline head is fitted by squared error on
    its own parameters; nothing flows from it into the policy.

    ``reward_fn(seqs, image_index)`` returns one reward per sequence.
    Returns a dict of batch statistics and the list of :class:`RewardSample`.
    """
    V = np.asarray(V)
    if V.ndim == 1:
        V = V[None]
    img = np.repeat(np.arange(V.shape[0]), n_samples)
    Vb = V[img]
    gb = None if grid is None else np.asarray(grid)[img]
    seqs, logp_sum = sample_captions(model, Vb, rng, max_len, gb, bos=bos, eos=eos)
    if any(len(s) == 0 for s in seqs):
        raise ValueError("max_len must be at least 1 for sampling")
    rewards = np.asarray(reward_fn(seqs, img), dtype=np.float64)
    inputs, targets, mask = sequence_arrays(seqs, bos=bos)
    n = len(seqs)
    scale = 1.0 / n if scale is None else scale

    # forward once without gradients to read the per-step baselines
    _, _, hs = model.sequence_loss(Vb, inputs, targets, mask, grid=gb, backward=False)
    per_step = model.baseline_steps(hs)
    base = per_step if use_baseline else np.zeros_like(per_step)
    advantage = (rewards[:, None] - base) * mask
    model.sequence_loss(Vb, inputs, targets, mask, weights=advantage * scale, grid=gb)

    if use_baseline:
        dbase = 2.0 * (per_step - rewards[:, None]) * mask * scale
        model["Wbase"].grad += np.einsum("bt,bth->h", dbase, hs)[:, None].astype(hs.dtype)
        model["bbase"].grad += dbase.sum()

    lengths = mask.sum(axis=1)
    seq_base = (base * mask).sum(axis=1) / lengths
    samples = [RewardSample(s, float(lp), float(r), float(b))
               for s, lp, r, b in zip(seqs, logp_sum, rewards, seq_base)]
    stats = {
        "mean_reward": float(rewards.mean()),
        "mean_baseline": float(seq_base.mean()),
        "baseline_mse": float((((per_step - rewards[:, None]) ** 2) * mask).sum() / mask.sum()),
    }
    return stats, samples


def make_reward_fn(split: EncodedSplit, detok: Callable, metric: str = "cider_d",
                   scorer: Optional[CiderD] = None):
    """Sentence-level reward against all references of the sampled image."""
    if any(len(r) == 0 for r in split.references):
        raise ValueError("every image needs at least one reference for the reward")
    if metric == "cider_d":
        scorer = scorer or CiderD(split.references)
        score = scorer.sentence_score
    elif metric == "bleu4":
        score = sentence_bleu4
    else:
        raise ValueError(f"unknown reward metric {metric!r}")

    def reward_fn(seqs, img_index):
        out = []
        for s, i in zip(seqs, img_index):
            toks = s[:-1] if s and s[-1] == EOS else s
            out.append(score(detok(toks), split.references[i]))
        return out

    return reward_fn


def train_rl(model: CGRUDecoder, train: EncodedSplit, val: EncodedSplit, cfg: TrainConfig,
             detok: Callable, on_epoch: Optional[Callable] = None, eval_beam: Optional[int] = None):
    """REINFORCE fine-tuning on sentence-level rewards with early stopping on
    validation CIDEr-D. Epoch 0 records the starting point; the model ends
    with the best-validation parameters."""
    if len(train) == 0:
        raise ValueError("training split is empty")
    rng = make_rng(cfg.seed)
    reward_fn = make_reward_fn(train, detok, cfg.rl_reward_metric)
    val_scorer = CiderD(val.references)
    beam = eval_beam or cfg.val_beam
    t0 = time.perf_counter()
    b4, cd, _ = evaluate(model, val, detok, beam, scorer=val_scorer)
    logs = [EpochLog(0, 0.0, b4, cd, 0.0)]
    history = [cd]
    best = _Snapshot(model)
    if on_epoch:
        on_epoch(logs[0])
    n_img = len(train)
    reset_optimizer(model.parameters())
    policy = model.policy_parameters()
    head = [model["Wbase"], model["bbase"]]
    warm = False
    for epoch in range(1, cfg.rl_epochs + 1):
        order = rng.permutation(n_img)
        rewards = []
        for start in range(0, n_img, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            stats, samples = reinforce_update(
                model, train.features[idx],
                lambda seqs, img, idx=idx: reward_fn(seqs, idx[img]),
                rng, grid=train.subset_grid(idx), n_samples=cfg.rl_samples,
                use_baseline=warm)
            if not warm:
                # the first batch only calibrates the baseline bias
                model["bbase"].value[...] = stats["mean_reward"]
                model.zero_grad()
                warm = True
                continue
            optimizer_step(policy, cfg, cfg.rl_lr)
            optimizer_step(head, cfg, cfg.rl_baseline_lr)
            rewards.append(stats["mean_reward"])
        b4, cd, _ = evaluate(model, val, detok, beam, scorer=val_scorer)
        mean_reward = float(np.mean(rewards)) if rewards else 0.0
        entry = EpochLog(epoch, mean_reward, b4, cd, time.perf_counter() - t0)
        logs.append(entry)
        history.append(cd)
        log.info("rl epoch %d reward %.4f val bleu4 %.4f cider-d %.4f", epoch, entry.value, b4, cd)
        if on_epoch:
            on_epoch(entry)
        stop, best_epoch = early_stop(history, cfg.rl_patience_epochs)
        if best_epoch == epoch + 1:
            best = _Snapshot(model)
        if stop:
            break
    best.restore(model)
    return logs
