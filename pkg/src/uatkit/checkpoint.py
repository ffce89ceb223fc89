"""Versioned model checkpoint files.

Layout (all integers little-endian):

    4 bytes   magic "UATF"
    u32       format version (currently 1)
    u64       header length in bytes
    header    UTF-8 canonical JSON: architecture, vocabulary, tie flag,
              training metadata, array manifest (name / shape / byte offset)
    blob      concatenated little-endian float32 arrays in manifest order

Loading then saving reproduces a byte-identical file.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor
from .model import MlmConfig, MlmModel
from .vocab import Vocabulary

MAGIC = b"UATF"
VERSION = 1


class CheckpointError(ValueError):
    """Structured checkpoint failure; ``kind`` is machine-checkable."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: MlmModel, path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data.astype("<f4"))
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "architecture": model.config.to_dict(),
        "vocabulary": list(model.vocab.id_to_token),
        "tied_output": True,
        "training": model.train_log,
        "manifest": manifest,
    }
    header_bytes = _canonical_header(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> MlmModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise CheckpointError("truncated", f"file too short ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic", f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int.from_bytes(raw[4:8], "little")
    if version != VERSION:
        raise CheckpointError(
            "version", f"unsupported checkpoint version {version}, expected {VERSION}"
        )
    header_len = int.from_bytes(raw[8:16], "little")
    if 16 + header_len > len(raw):
        raise CheckpointError("truncated", "header extends past end of file")
    try:
        header = json.loads(raw[16: 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("bad header", f"unparsable header: {exc}") from exc

    for key in ("architecture", "vocabulary", "manifest"):
        if key not in header:
            raise CheckpointError("bad header", f"header missing '{key}'")
    config = MlmConfig(**header["architecture"])
    vocab = Vocabulary.from_lines(header["vocabulary"])
    blob = raw[16 + header_len:]

    params: dict[str, Tensor] = {}
    expected = 0
    for entry in header["manifest"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 4
        if offset != expected:
            raise CheckpointError(
                "shape mismatch",
                f"shape mismatch for array '{name}': offset {offset} != expected {expected}",
            )
        if offset + nbytes > len(blob):
            raise CheckpointError(
                "truncated", f"blob truncated inside array '{name}'"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        expected = offset + nbytes
    if expected != len(blob):
        raise CheckpointError(
            "blob length", f"blob has {len(blob)} bytes, manifest declares {expected}"
        )

    _validate_shapes(config, params)
    model = MlmModel(config, vocab, dtype=dtype, params=params)
    model.train_log = header.get("training", {})
    return model


def expected_shapes(config: MlmConfig) -> dict[str, tuple[int, ...]]:
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (v, d),
        "emb.pos": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}"
        shapes[f"{pre}.ln1.gamma"] = (d,)
        shapes[f"{pre}.ln1.beta"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{pre}.attn.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{pre}.attn.{name}"] = (d,)
        shapes[f"{pre}.ln2.gamma"] = (d,)
        shapes[f"{pre}.ln2.beta"] = (d,)
        shapes[f"{pre}.ffn.w1"] = (d, ff)
        shapes[f"{pre}.ffn.b1"] = (ff,)
        shapes[f"{pre}.ffn.w2"] = (ff, d)
        shapes[f"{pre}.ffn.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["out_bias"] = (v,)
    return shapes


def _validate_shapes(config: MlmConfig, params: dict[str, Tensor]) -> None:
    want = expected_shapes(config)
    got = {k: t.shape for k, t in params.items()}
    if want.keys() != got.keys():
        missing = sorted(want.keys() ^ got.keys())
        raise CheckpointError("bad header", f"manifest arrays do not match architecture: {missing}")
    for name in want:
        if want[name] != got[name]:
            raise CheckpointError(
                "shape mismatch",
                f"shape mismatch for array '{name}': header {got[name]}, architecture wants {want[name]}",
            )
