"""JSON-lines dataset files: one ``{"id", "features", "captions"}`` object per line."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .synth import Example


class DatasetError(ValueError):
    pass


def dump_examples(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {"id": ex.id, "features": [float(x) for x in ex.features],
                      "captions": list(ex.captions)}
            fh.write(json.dumps(record) + "\n")


def load_dataset(path, v_dim=None) -> list:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not {"id", "features", "captions"} <= rec.keys():
                raise DatasetError(f"{path}:{lineno}: expected keys id, features, captions")
            feats = rec["features"]
            if not isinstance(feats, list) or not all(isinstance(x, (int, float)) for x in feats):
                raise DatasetError(f"{path}:{lineno}: features must be a list of numbers")
            if v_dim is not None and len(feats) != v_dim:
                raise DatasetError(
                    f"{path}:{lineno}: features length {len(feats)}, expected {v_dim}")
            caps = rec["captions"]
            if not isinstance(caps, list) or not caps or not all(isinstance(c, str) and c.strip() for c in caps):
                raise DatasetError(f"{path}:{lineno}: captions must be a non-empty list of strings")
            examples.append(Example(str(rec["id"]), np.asarray(feats, dtype=np.float64), caps))
    if examples and v_dim is None:
        dims = {len(ex.features) for ex in examples}
        if len(dims) != 1:
            raise DatasetError(f"{path}: inconsistent feature lengths {sorted(dims)}")
    return examples


def write_splits(splits: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, examples in splits.items():
        dump_examples(examples, directory / f"{name}.jsonl")


def read_tsv(path) -> list:
    """``(id, text)`` pairs from an ``id<TAB>sentence`` file."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DatasetError(f"{path}:{lineno}: expected 'id<TAB>sentence'")
            key, text = line.split("\t", 1)
            rows.append((key, text))
    return rows
