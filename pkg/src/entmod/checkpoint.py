"""Checkpoint container: JSON manifest plus raw little-endian tensor payload.

Layout: 4-byte magic, 8-byte little-endian manifest length, UTF-8 JSON
manifest, then the tensor bytes at the offsets the manifest records.
Tensors are stored in sorted-name order and the manifest is serialized
with sorted keys, so identical models produce identical files.  Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import ModifierSchema
from .encoder import EncoderConfig
from .featurize import TokenizerVocab
from .model import ClassificationHead, MultiTaskModel

MAGIC = b"EMCK"
FORMAT_VERSION = 1


class CheckpointVersionMismatch(Exception):
    pass


@dataclass
class Checkpoint:
    schema: ModifierSchema
    encoder_config: EncoderConfig
    params: dict[str, np.ndarray]
    heads: dict[str, ClassificationHead]
    vocab: TokenizerVocab
    train_fingerprint: str = ""
    history: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: MultiTaskModel, vocab: TokenizerVocab,
                   train_fingerprint: str = "", history=None) -> "Checkpoint":
        """Snapshot (deep-copies every tensor)."""
        return cls(
            schema=model.schema,
            encoder_config=model.config,
            params={k: v.copy() for k, v in model.params.items()},
            heads={
                name: ClassificationHead(name, head.W.copy(), head.b.copy())
                for name, head in model.heads.items()
            },
            vocab=vocab,
            train_fingerprint=train_fingerprint,
            history=list(history or []),
        )

    def to_model(self) -> MultiTaskModel:
        """Materialize a model; tensors are copied so the checkpoint stays
        immutable no matter what happens to the model."""
        return MultiTaskModel(
            self.schema,
            self.encoder_config,
            {k: v.copy() for k, v in self.params.items()},
            {
                name: ClassificationHead(name, head.W.copy(), head.b.copy())
                for name, head in self.heads.items()
            },
        )

    def head_labels(self, name: str) -> tuple[str, ...]:
        return self.schema[name].labels

    def save(self, path) -> None:
        tensors = dict(self.params)
        for name, head in self.heads.items():
            tensors[f"head.{name}.W"] = head.W
            tensors[f"head.{name}.b"] = head.b

        directory = {}
        payload = bytearray()
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            raw = arr.tobytes()
            directory[name] = {
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": len(payload),
                "nbytes": len(raw),
            }
            payload.extend(raw)

        manifest = {
            "format_version": self.format_version,
            "schema": self.schema.to_dict(),
            "encoder_config": self.encoder_config.to_dict(),
            "heads": [
                {"name": name, "labels": list(self.schema[name].labels)}
                for name in sorted(self.heads)
            ],
            "vocab": self.vocab.to_dict(),
            "train_fingerprint": self.train_fingerprint,
            "history": self.history,
            "tensors": directory,
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(bytes(payload))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise CheckpointVersionMismatch(f"{path}: not a checkpoint file")
            (length,) = struct.unpack("<Q", fh.read(8))
            manifest = json.loads(fh.read(length).decode("utf-8"))
            payload = fh.read()
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointVersionMismatch(
                f"{path}: format version {manifest.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}"
            )

        tensors = {}
        for name, info in manifest["tensors"].items():
            start, nbytes = info["offset"], info["nbytes"]
            arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(info["dtype"]))
            tensors[name] = arr.reshape(info["shape"]).copy()

        schema = ModifierSchema.from_dict(manifest["schema"])
        heads = {}
        for entry in manifest["heads"]:
            name = entry["name"]
            heads[name] = ClassificationHead(
                name, tensors.pop(f"head.{name}.W"), tensors.pop(f"head.{name}.b")
            )
        return cls(
            schema=schema,
            encoder_config=EncoderConfig.from_dict(manifest["encoder_config"]),
            params=tensors,
            heads=heads,
            vocab=TokenizerVocab.from_dict(manifest["vocab"]),
            train_fingerprint=manifest.get("train_fingerprint", ""),
            history=manifest.get("history", []),
        )
