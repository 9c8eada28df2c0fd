"""Command line front end: ``lightcap <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, config or data),
2 I/O error. Every failure prints one line starting with ``error:``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..bpe import BPETokenizer, SPECIALS
from ..decoding import decode_batch
from ..metrics import CiderD, bleu4
from ..model import CGRUDecoder, ModelConfig, count_params
from ..training import EncodedSplit, train_rl, train_xe
from . import config as cfgmod
from .checkpoint import checkpoint_load, checkpoint_save
from .dataset import DatasetError, load_dataset, read_tsv, write_splits
from .gradcheck import DEFAULT_EPS, run_suite
from .synth import synth_generate, synth_grid

FULL_CONFIG = {"d": 128, "h": 256, "v_dim": 2048, "vocab_size": 5066,
               "bottleneck_mode": "deep_gru", "tie_weights": True}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lightcap", description="Conditional-GRU image captioning toolkit.")
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate the synthetic scene dataset")
    s.add_argument("--out", required=True, help="output directory for train/val/test.jsonl")
    s.add_argument("--n", type=int, help="number of examples (default 500)")

    s = sub.add_parser("bpe-learn", help="learn BPE merges and vocabulary")
    s.add_argument("--input", required=True, help="JSONL dataset or plain text, one sentence per line")
    s.add_argument("--out", required=True, help="directory for merges.txt and vocab.txt")
    s.add_argument("--merges", type=int, help="number of merge operations")

    s = sub.add_parser("bpe-apply", help="segment text with learned merges")
    s.add_argument("--bpe", required=True, help="directory holding merges.txt and vocab.txt")
    s.add_argument("--input", help="text file (default: stdin)")
    s.add_argument("--out", help="output file (default: stdout)")

    s = sub.add_parser("train", help="cross-entropy training")
    s.add_argument("--data", required=True, help="directory with train.jsonl and val.jsonl")
    s.add_argument("--bpe", required=True)
    s.add_argument("--out", required=True, help="directory for model.ckpt and train.log")
    s.add_argument("--no-timing", action="store_true", help="log 0.00 instead of elapsed seconds")

    s = sub.add_parser("finetune-rl", help="REINFORCE fine-tuning of a trained checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--bpe", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="directory for model.ckpt and rl.log")
    s.add_argument("--beam", type=int, default=3, help="beam used for validation decoding")
    s.add_argument("--no-timing", action="store_true")

    s = sub.add_parser("decode", help="caption a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bpe", required=True)
    s.add_argument("--input", required=True, help="JSONL dataset")
    s.add_argument("--out", help="output file (default: stdout)")
    s.add_argument("--beam", type=int, default=3)
    s.add_argument("--max-len", type=int)

    s = sub.add_parser("score", help="BLEU-4 and CIDEr-D of a candidate file")
    s.add_argument("--candidates", required=True, help="id<TAB>caption file")
    s.add_argument("--references", required=True,
                   help="id<TAB>caption file (several lines per id) or JSONL dataset")

    s = sub.add_parser("params", help="parameter count breakdown")
    s.add_argument("--preset", choices=("full", "desk"), default="full")
    s.add_argument("--bpe", help="take vocab_size from this BPE directory")

    s = sub.add_parser("gradcheck", help="finite-difference check of every model variant")
    s.add_argument("--eps", type=float, default=DEFAULT_EPS)
    return p


# -- helpers -----------------------------------------------------------------

def _values(args, desk=True) -> dict:
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    return cfgmod.resolve(file_values, {"seed": args.seed}, desk=desk)


def _seed(values) -> int:
    return int(values.get("seed", 0))


def _open_out(path):
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def _load_tokenizer(directory) -> BPETokenizer:
    directory = Path(directory)
    return BPETokenizer.from_files(directory / "merges.txt", directory / "vocab.txt")


def _encode(examples, tok: BPETokenizer, mcfg: ModelConfig, seed: int) -> EncodedSplit:
    if not examples:
        raise DatasetError("dataset split is empty")
    feats = np.stack([ex.features for ex in examples])
    grid = None
    if mcfg.attention_mode == "mha":
        grid = synth_grid(feats, mcfg.mha_regions, mcfg.mha_feat_dim, seed=seed)
    refs = [list(ex.captions) for ex in examples]
    caps = [tok.transform(r) for r in refs]
    return EncodedSplit([ex.id for ex in examples], feats, caps, refs, grid)


def _detok(tok):
    return lambda ids: tok.inverse_transform([ids])[0]


def _sentences(path) -> list:
    path = Path(path)
    if path.suffix == ".jsonl":
        return [c for ex in load_dataset(path) for c in ex.captions]
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_log(path, logs, timing):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in logs:
            fh.write(entry.line(timing) + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_synth_data(args):
    values = _values(args)
    n = args.n if args.n is not None else int(values.get("n_examples", 500))
    splits = synth_generate(n, int(values["v_dim"]), seed=_seed(values))
    write_splits(splits, args.out)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def cmd_bpe_learn(args):
    values = _values(args)
    n_merges = args.merges if args.merges is not None else int(values["n_merges"])
    tok = BPETokenizer(n_merges).fit(_sentences(args.input))
    tok.save(args.out)
    n_vocab = len(tok.vocab_)
    print(f"merges={len(tok.merges_)} vocab={n_vocab} "
          f"vocab_without_specials={n_vocab - len(SPECIALS)}")


def cmd_bpe_apply(args):
    tok = _load_tokenizer(args.bpe)
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    out = _open_out(args.out)
    try:
        for line in src:
            out.write(" ".join(tok.encode(line)) + "\n")
    finally:
        if args.input:
            src.close()
        if args.out:
            out.close()


def _model_config(values, tok) -> ModelConfig:
    return cfgmod.model_config(values, vocab_size=len(tok.vocab_))


def cmd_train(args):
    values = _values(args)
    seed = _seed(values)
    tok = _load_tokenizer(args.bpe)
    mcfg = _model_config(values, tok)
    tcfg = cfgmod.train_config(values)
    data = Path(args.data)
    train = _encode(load_dataset(data / "train.jsonl", mcfg.v_dim), tok, mcfg, seed)
    val = _encode(load_dataset(data / "val.jsonl", mcfg.v_dim), tok, mcfg, seed)
    model = CGRUDecoder(mcfg, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = train_xe(model, train, val, tcfg, _detok(tok),
                    on_epoch=lambda e: print(e.line(not args.no_timing), flush=True))
    checkpoint_save(model, out / "model.ckpt")
    _write_log(out / "train.log", logs, not args.no_timing)


def cmd_finetune_rl(args):
    values = _values(args)
    seed = _seed(values)
    tok = _load_tokenizer(args.bpe)
    model = checkpoint_load(args.checkpoint)
    if model.cfg.vocab_size != len(tok.vocab_):
        raise ValueError(f"checkpoint vocabulary {model.cfg.vocab_size} != BPE vocabulary {len(tok.vocab_)}")
    tcfg = cfgmod.train_config(values)
    data = Path(args.data)
    train = _encode(load_dataset(data / "train.jsonl", model.cfg.v_dim), tok, model.cfg, seed)
    val = _encode(load_dataset(data / "val.jsonl", model.cfg.v_dim), tok, model.cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = train_rl(model, train, val, tcfg, _detok(tok), eval_beam=args.beam,
                    on_epoch=lambda e: print(e.line(not args.no_timing), flush=True))
    checkpoint_save(model, out / "model.ckpt")
    _write_log(out / "rl.log", logs, not args.no_timing)


def cmd_decode(args):
    if args.beam < 1:
        raise ValueError(f"--beam must be >= 1, got {args.beam}")
    if args.max_len is not None and args.max_len < 0:
        raise ValueError("--max-len must be non-negative")
    values = _values(args)
    tok = _load_tokenizer(args.bpe)
    model = checkpoint_load(args.checkpoint)
    examples = load_dataset(args.input, model.cfg.v_dim)
    split = _encode(examples, tok, model.cfg, _seed(values))
    detok = _detok(tok)
    out = _open_out(args.out)
    try:
        for start in range(0, len(split), 64):
            idx = np.arange(start, min(start + 64, len(split)))
            ids = decode_batch(model, split.features[idx], args.beam, args.max_len,
                               split.subset_grid(idx))
            for i, seq in zip(idx, ids):
                out.write(f"{split.ids[i]}\t{detok(seq)}\n")
    finally:
        if args.out:
            out.close()


def _references(path) -> "OrderedDict[str, list]":
    refs = OrderedDict()
    if Path(path).suffix == ".jsonl":
        for ex in load_dataset(path):
            refs[ex.id] = list(ex.captions)
    else:
        for key, text in read_tsv(path):
            refs.setdefault(key, []).append(text)
    return refs


def cmd_score(args):
    cands = read_tsv(args.candidates)
    refs = _references(args.references)
    missing = [k for k, _ in cands if k not in refs]
    if missing:
        raise ValueError(f"no references for ids {missing[:5]}")
    if not cands:
        raise ValueError("candidate file is empty")
    texts = [t for _, t in cands]
    ref_sets = [refs[k] for k, _ in cands]
    b = bleu4(texts, ref_sets)
    c = CiderD(ref_sets).corpus_score(texts, ref_sets)
    print(f"BLEU4={b:.6f} CIDErD={c:.6f} CIDErD/10={c / 10:.6f}")


def cmd_params(args):
    if args.preset == "full":
        values = dict(FULL_CONFIG)
        if args.config:
            values.update(cfgmod.load_config_file(args.config))
    else:
        values = _values(args)
    if args.bpe:
        values["vocab_size"] = len(_load_tokenizer(args.bpe).vocab_)
    mcfg = cfgmod.model_config(values)
    total, breakdown = count_params(mcfg)
    width = max(len(n) for n in breakdown)
    for name, n in breakdown.items():
        print(f"{name:<{width}}  {n:>10d}")
    print(f"{'total':<{width}}  {total:>10d}  ({total / 1e6:.2f} M)")


def cmd_gradcheck(args):
    results = run_suite(eps=args.eps, report=lambda r: print(r.line(), flush=True))
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e}")
    return 0 if ok else 1


COMMANDS = {
    "synth-data": cmd_synth_data, "bpe-learn": cmd_bpe_learn, "bpe-apply": cmd_bpe_apply,
    "train": cmd_train, "finetune-rl": cmd_finetune_rl, "decode": cmd_decode,
    "score": cmd_score, "params": cmd_params, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args) or 0
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
