"""Checkpoint container and byte-exact persistence.

On disk: an 8-byte magic, a length-prefixed JSON header (config, vocabulary,
tensor index, provenance, section checksums), the raw little-endian float64
tensor data, and a trailing SHA-256 over everything before it. Loading a
checkpoint and saving it again reproduces the original bytes exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Tokenizer
from .errors import CheckpointCorruptError, CheckpointVersionError, ContractError
from .model import PROMPT_PARAM, TASK_ENTITY, TASK_SUMMARY, ModelConfig, backbone_names
from .tensor import ParamGroup, Tensor

MAGIC = b"PSCKPT01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: list[str]
    params: ParamGroup
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab)

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            vocab=list(self.vocab),
            params=self.params.clone(),
            provenance=dict(self.provenance),
            format_version=self.format_version,
        )

    def backbone_checksum(self) -> str:
        return self.params.checksum(backbone_names(self.params))

    def prompt_checksum(self, task: str) -> str:
        return self.params.checksum([PROMPT_PARAM[task]])

    def params_checksum(self) -> str:
        return self.params.checksum()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the checkpoint; returns the SHA-256 of the file contents."""
    names = ckpt.params.names()
    blobs = []
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name].values, dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab,
        "tensors": index,
        "provenance": ckpt.provenance,
        "checksums": {
            "data": hashlib.sha256(data).hexdigest(),
            "backbone": ckpt.backbone_checksum(),
            "prompt_E": ckpt.prompt_checksum(TASK_ENTITY),
            "prompt_S": ckpt.prompt_checksum(TASK_SUMMARY),
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack(">I", len(header_bytes)) + header_bytes + data
    trailer = hashlib.sha256(body).hexdigest().encode()
    payload = body + trailer
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + 64 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    body, trailer = raw[:-64], raw[-64:]
    if hashlib.sha256(body).hexdigest().encode() != trailer:
        raise CheckpointCorruptError(f"{path}: trailer checksum mismatch")
    header_len = struct.unpack(">I", body[len(MAGIC): len(MAGIC) + 4])[0]
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(body[header_start: header_start + header_len].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('format_version')} "
            f"(supported: {FORMAT_VERSION}); no migration path")
    data = body[header_start + header_len:]
    if hashlib.sha256(data).hexdigest() != header["checksums"]["data"]:
        raise CheckpointCorruptError(f"{path}: tensor data checksum mismatch")

    config = ModelConfig.from_dict(header["config"])
    params = ParamGroup()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8 if shape else 8
        chunk = data[entry["offset"]: entry["offset"] + size]
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        params.add(entry["name"], Tensor(arr.copy()))
    for task in (TASK_ENTITY, TASK_SUMMARY):
        name = PROMPT_PARAM[task]
        if name not in params:
            raise CheckpointCorruptError(f"{path}: missing {name}")
        if params[name].shape != (config.prompt_len, config.d_model):
            raise CheckpointCorruptError(f"{path}: {name} shape does not match config")
    ckpt = Checkpoint(
        config=config,
        vocab=list(header["vocab"]),
        params=params,
        provenance=dict(header["provenance"]),
        format_version=header["format_version"],
    )
    for key, task in (("backbone", None), ("prompt_E", TASK_ENTITY), ("prompt_S", TASK_SUMMARY)):
        expected = header["checksums"][key]
        actual = ckpt.backbone_checksum() if task is None else ckpt.prompt_checksum(task)
        if actual != expected:
            raise CheckpointCorruptError(f"{path}: {key} checksum mismatch")
    return ckpt


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def new_checkpoint(config: ModelConfig, vocab: list[str], params: ParamGroup,
                   stage: str, seed: int, parent: Checkpoint | None = None) -> Checkpoint:
    if len(vocab) != config.vocab_size:
        raise ContractError(f"vocab of {len(vocab)} tokens vs config vocab_size {config.vocab_size}")
    return Checkpoint(
        config=config,
        vocab=list(vocab),
        params=params,
        provenance={
            "stage": stage,
            "seed": seed,
            "parent_checksum": parent.params_checksum() if parent else "",
        },
    )
