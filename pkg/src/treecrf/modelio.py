"""Model and checkpoint files.

Layout (all integers little-endian)::

    magic    8 bytes  b"TREECRF\\0"
    version  uint32
    hlen     uint64   length of the JSON header
    header   hlen bytes, UTF-8 JSON: config, vocabularies, array directory
    arrays   float64 little-endian, in directory order

A checkpoint is a model file whose directory also lists optimizer arrays
(``section: "optimizer"``) and whose header carries the optimizer step.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from treecrf.scorer import Scorer, ScorerConfig, Vocab, init_params
from treecrf.treebank import LabelVocab

MAGIC = b"TREECRF\0"
VERSION = 1


class ModelFileError(ValueError):
    pass


def save(path, scorer: Scorer, extra: dict | None = None, optimizer=None) -> None:
    arrays = [("model", k, v) for k, v in scorer.params.items()]
    header = {
        "config": scorer.config_dict(),
        "words": scorer.words.items,
        "chars": scorer.chars.items,
        "labels": scorer.labels.labels,
        "extra": extra or {},
    }
    if optimizer is not None:
        header["optimizer"] = {"step": optimizer.step}
        arrays += [("optimizer", f"m.{k}", v) for k, v in optimizer.m.items()]
        arrays += [("optimizer", f"v.{k}", v) for k, v in optimizer.v.items()]
    header["arrays"] = [{"section": s, "name": k, "shape": list(np.shape(v))} for s, k, v in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for _, _, v in arrays:
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load(path, with_optimizer: bool = False):
    """Read a model file; returns the scorer and the header's ``extra`` block.

    With ``with_optimizer`` the optimizer arrays and step are returned too,
    as a third element (``None`` for a plain model file).
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ModelFileError(f"{path}: format version {version}, expected {VERSION}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    config = ScorerConfig(**header["config"])
    words = Vocab.from_items(header["words"])
    chars = Vocab.from_items(header["chars"])
    labels = LabelVocab(header["labels"])
    expected = {k: v.shape for k, v in
                init_params(config, len(words), len(chars), len(labels)).items()}
    params = {}
    opt = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise ModelFileError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).reshape(shape)
        offset += size
        if entry["section"] == "model":
            params[entry["name"]] = arr.astype(np.float64)
        else:
            opt[entry["name"]] = arr.astype(np.float64)
    if set(params) != set(expected):
        raise ModelFileError(f"{path}: parameter set does not match the configuration")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ModelFileError(f"{path}: {k} has shape {params[k].shape}, config implies {shape}")
    scorer = Scorer(config, words, chars, labels, params=params)
    if not with_optimizer:
        return scorer, header.get("extra", {})
    state = None
    if "optimizer" in header:
        state = {"step": header["optimizer"]["step"],
                 "m": {k[2:]: v for k, v in opt.items() if k.startswith("m.")},
                 "v": {k[2:]: v for k, v in opt.items() if k.startswith("v.")}}
    return scorer, header.get("extra", {}), state
