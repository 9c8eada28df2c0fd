"""scikit-learn style front end: ``CaptionGenerator().fit(X, y).predict(X)``.

``X`` is an ``(n_images, v_dim)`` array of pooled image features and ``y``
a list holding, per image, a list of reference caption strings.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .bpe import BPETokenizer
from .decoding import decode_batch
from .metrics import CiderD, bleu4
from .model import CGRUDecoder, ModelConfig
from .training import EncodedSplit, TrainConfig, evaluate, train_rl, train_xe


def _check_references(y, n):
    y = [list(refs) if not isinstance(refs, str) else [refs] for refs in y]
    check_consistent_length(np.empty(n), y)
    for refs in y:
        if not refs or not all(isinstance(r, str) and r.strip() for r in refs):
            raise ValueError("each image needs at least one non-empty reference caption")
    return y


class CaptionGenerator(BaseEstimator):
    """Conditional-GRU captioner trained with cross-entropy, optionally
    fine-tuned with REINFORCE through :meth:`finetune`."""

    def __init__(self, d=32, h=64, attention_mode="pooled", bottleneck_mode="deep_gru",
                 tie_weights=True, dropout_p=0.5, max_len=50, init_hidden="shared",
                 mha_heads=3, mha_regions=196, mha_feat_dim=1024, width_multiplier=1,
                 n_merges=200, tokenizer=None, lr=4e-4, batch_size=32, max_epochs=100,
                 patience_epochs=10, beam=3, val_beam=1, rl_lr=1e-4, rl_epochs=50,
                 rl_samples=5, rl_patience_epochs=50, rl_reward_metric="cider_d", seed=0, dtype="float32"):
        self.d = d
        self.h = h
        self.attention_mode = attention_mode
        self.bottleneck_mode = bottleneck_mode
        self.tie_weights = tie_weights
        self.dropout_p = dropout_p
        self.max_len = max_len
        self.init_hidden = init_hidden
        self.mha_heads = mha_heads
        self.mha_regions = mha_regions
        self.mha_feat_dim = mha_feat_dim
        self.width_multiplier = width_multiplier
        self.n_merges = n_merges
        self.tokenizer = tokenizer
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience_epochs = patience_epochs
        self.beam = beam
        self.val_beam = val_beam
        self.rl_lr = rl_lr
        self.rl_epochs = rl_epochs
        self.rl_samples = rl_samples
        self.rl_patience_epochs = rl_patience_epochs
        self.rl_reward_metric = rl_reward_metric
        self.seed = seed
        self.dtype = dtype

    # -- helpers -------------------------------------------------------------

    def _model_config(self, v_dim, vocab_size) -> ModelConfig:
        return ModelConfig(d=self.d, h=self.h, v_dim=v_dim, vocab_size=vocab_size,
                           attention_mode=self.attention_mode, mha_heads=self.mha_heads,
                           mha_regions=self.mha_regions, mha_feat_dim=self.mha_feat_dim,
                           bottleneck_mode=self.bottleneck_mode, tie_weights=self.tie_weights,
                           max_len=self.max_len, dropout_p=self.dropout_p,
                           width_multiplier=self.width_multiplier,
                           init_hidden=self.init_hidden, dtype=self.dtype)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience_epochs=self.patience_epochs, val_beam=self.val_beam,
                           rl_lr=self.rl_lr, rl_epochs=self.rl_epochs, rl_samples=self.rl_samples,
                           rl_patience_epochs=self.rl_patience_epochs,
                           rl_reward_metric=self.rl_reward_metric, seed=self.seed)

    def _grid(self, X):
        if self.attention_mode != "mha":
            return None
        from .harness.synth import synth_grid
        return synth_grid(X, self.mha_regions, self.mha_feat_dim, seed=self.seed)

    def _split(self, X, y, ids=None) -> EncodedSplit:
        X = check_array(X, dtype=np.float64)
        y = _check_references(y, X.shape[0])
        caps = [self.tokenizer_.transform(refs) for refs in y]
        ids = ids if ids is not None else [str(i) for i in range(X.shape[0])]
        return EncodedSplit(ids, X, caps, y, self._grid(X))

    def detokenize(self, ids) -> str:
        return self.tokenizer_.inverse_transform([ids])[0]

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, on_epoch=None):
        """Learn BPE (unless a fitted tokenizer was given) and train with XE.

        Early stopping watches CIDEr-D on ``(X_val, y_val)``, or on the
        training data when no validation set is given.
        """
        X = check_array(X, dtype=np.float64)
        y = _check_references(y, X.shape[0])
        if self.tokenizer is not None and hasattr(self.tokenizer, "vocab_"):
            self.tokenizer_ = self.tokenizer
        else:
            base = self.tokenizer if self.tokenizer is not None else BPETokenizer(self.n_merges)
            self.tokenizer_ = clone(base).fit([c for refs in y for c in refs])
        self.n_features_in_ = X.shape[1]
        cfg = self._model_config(X.shape[1], len(self.tokenizer_.vocab_))
        self.decoder_ = CGRUDecoder(cfg, seed=self.seed)
        train = self._split(X, y)
        val = train if X_val is None else self._split(X_val, y_val)
        self.history_ = train_xe(self.decoder_, train, val, self._train_config(),
                                 self.detokenize, on_epoch)
        return self

    def finetune(self, X, y, X_val=None, y_val=None, on_epoch=None):
        """REINFORCE fine-tuning of an already fitted model."""
        check_is_fitted(self, "decoder_")
        train = self._split(X, y)
        val = train if X_val is None else self._split(X_val, y_val)
        self.rl_history_ = train_rl(self.decoder_, train, val, self._train_config(),
                                    self.detokenize, on_epoch, eval_beam=self.beam)
        return self

    def predict_ids(self, X, beam=None, max_len=None):
        check_is_fitted(self, "decoder_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return decode_batch(self.decoder_, X, beam or self.beam, max_len, self._grid(X))

    def predict(self, X, beam=None, max_len=None):
        return [self.detokenize(ids) for ids in self.predict_ids(X, beam, max_len)]

    def evaluate(self, X, y, beam=None) -> dict:
        y = _check_references(y, len(X))
        texts = self.predict(X, beam)
        return {"bleu4": bleu4(texts, y), "cider_d": CiderD(y).corpus_score(texts, y)}

    def score(self, X, y):
        """Corpus CIDEr-D (0-10 scale) with IDF taken from ``y``."""
        return self.evaluate(X, y)["cider_d"]

    @classmethod
    def from_decoder(cls, decoder: CGRUDecoder, tokenizer: BPETokenizer, **params):
        cfg = decoder.cfg
        est = cls(d=cfg.d, h=cfg.h, attention_mode=cfg.attention_mode,
                  bottleneck_mode=cfg.bottleneck_mode, tie_weights=cfg.tie_weights,
                  dropout_p=cfg.dropout_p, max_len=cfg.max_len, init_hidden=cfg.init_hidden,
                  mha_heads=cfg.mha_heads, mha_regions=cfg.mha_regions,
                  mha_feat_dim=cfg.mha_feat_dim, width_multiplier=cfg.width_multiplier,
                  tokenizer=tokenizer, dtype=cfg.dtype, **params)
        est.tokenizer_ = tokenizer
        est.decoder_ = decoder
        est.n_features_in_ = cfg.v_dim
        return est
