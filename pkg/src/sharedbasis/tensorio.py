"""Persistence of matrices, vocabularies and model bundles.

EMB1 container layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"EMB1"
    4       4     u32    version (= 1)
    8       8     u64    rows
    16      8     u64    cols
    24      1     u8     dtype (1 = f32, 2 = f64)
    25      ...   payload, row-major, little-endian

A bundle is a directory holding a ``manifest.json`` that names the member
files, a JSON-lines vocabulary and one or two EMB1 containers.
"""

from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    BundleError,
    TruncatedPayloadError,
    UnknownDtypeError,
)

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {"float32": 1, "float64": 2}

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "sharedbasis.bundle"


# --------------------------------------------------------------------------
# matrices
# --------------------------------------------------------------------------

def encode_matrix(matrix: np.ndarray) -> bytes:
    """Serialize a 2-D float32/float64 array to EMB1 bytes."""
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    rows, cols = m.shape
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix must be at least 1x1, got {rows}x{cols}")
    code = _CODE_FOR.get(m.dtype.name)
    if code is None:
        raise ValueError(f"unsupported dtype {m.dtype}; use float32 or float64")
    payload = np.ascontiguousarray(m, dtype=_DTYPE_CODES[code]).tobytes(order="C")
    return _HEADER.pack(MAGIC, VERSION, rows, cols, code) + payload


def decode_matrix(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_matrix`; keeps the stored dtype."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(
            f"header needs {_HEADER.size} bytes, got {len(buf)}")
    _, version, rows, cols, code = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise BadMagicError(f"unsupported EMB1 version {version}")
    if code not in _DTYPE_CODES:
        raise UnknownDtypeError(f"dtype byte {code} not in {{1, 2}}")
    dtype = _DTYPE_CODES[code]
    expected = rows * cols * dtype.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload is {len(payload)} bytes, header implies {expected}")
    if rows < 1 or cols < 1:
        raise TruncatedPayloadError(f"degenerate shape {rows}x{cols}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    # native-endian copy so callers get a writable, ordinary array
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_matrix(path: str | os.PathLike, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_matrix(matrix))
    return path


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def roundtrip_matrix(matrix: np.ndarray, path: str | os.PathLike) -> np.ndarray:
    write_matrix(path, matrix)
    return read_matrix(path)


# --------------------------------------------------------------------------
# vocabularies
# --------------------------------------------------------------------------

class Vocab(Sequence[str]):
    """Ordered token strings; a token's id is its position."""

    def __init__(self, tokens: Iterable[str]):
        self._tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            dup = next(t for t, n in Counter(self._tokens).items() if n > 1)
            raise BundleError(f"duplicate token {dup!r}")
        for t in self._tokens:
            if not isinstance(t, str):
                raise BundleError(f"token {t!r} is not a string")

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, int]]) -> "Vocab":
        pairs = list(entries)
        ids = sorted(i for _, i in pairs)
        if ids != list(range(len(pairs))):
            raise BundleError("vocab ids must be exactly 0..n-1 without gaps or duplicates")
        tokens = [None] * len(pairs)
        for tok, i in pairs:
            tokens[i] = tok
        return cls(tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __getitem__(self, i):
        return self._tokens[i]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tokens)

    def __contains__(self, token) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def __repr__(self) -> str:
        return f"Vocab(n={len(self)})"

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def get(self, token: str, default=None):
        return self._index.get(token, default)

    def extended(self, tokens: Iterable[str]) -> "Vocab":
        return Vocab(self._tokens + tuple(tokens))


def write_vocab(path: str | os.PathLike, vocab: Vocab) -> Path:
    path = Path(path)
    lines = (json.dumps({"token": t, "id": i}, ensure_ascii=False) for i, t in enumerate(vocab))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_vocab(path: str | os.PathLike) -> Vocab:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append((rec["token"], int(rec["id"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise BundleError(f"{path}:{lineno}: malformed vocab entry ({exc})") from None
    return Vocab.from_entries(entries)


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ModelBundle:
    """Embedding matrix, optional LM head, and vocabulary of one model.

    Matrices are held as float64 regardless of the stored dtype. A tied
    bundle has no separate head; :attr:`head_view` then returns the
    embeddings.
    """

    embeddings: np.ndarray
    vocab: Vocab
    head: np.ndarray | None = None
    tied: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.head is not None:
            self.head = np.asarray(self.head, dtype=np.float64)
        if not isinstance(self.vocab, Vocab):
            self.vocab = Vocab(self.vocab)
        self.validate()

    def validate(self) -> None:
        E = self.embeddings
        if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
            raise BundleError(f"embeddings must be a non-empty 2-D matrix, got shape {E.shape}")
        if E.shape[0] != len(self.vocab):
            raise BundleError(
                f"vocab has {len(self.vocab)} tokens but embeddings have {E.shape[0]} rows")
        if self.head is not None:
            if self.tied:
                raise BundleError("tied bundle must not carry a separate head")
            if self.head.shape != E.shape:
                raise BundleError(
                    f"head shape {self.head.shape} does not match embeddings {E.shape}")

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def head_view(self) -> np.ndarray:
        return self.embeddings if self.head is None else self.head

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            embeddings=self.embeddings.copy(),
            vocab=self.vocab,
            head=None if self.head is None else self.head.copy(),
            tied=self.tied,
            meta=dict(self.meta),
        )

    def equals(self, other: "ModelBundle") -> bool:
        """Bitwise equality of vocab, tie flag and matrices."""
        if self.tied != other.tied or self.vocab != other.vocab:
            return False
        if (self.head is None) != (other.head is None):
            return False
        if not np.array_equal(self.embeddings, other.embeddings):
            return False
        return self.head is None or np.array_equal(self.head, other.head)


def write_bundle(directory: str | os.PathLike, bundle: ModelBundle, dtype: str = "f64") -> Path:
    """Write ``bundle`` into ``directory`` (created if missing)."""
    np_dtype = {"f64": np.float64, "f32": np.float32}[dtype]
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "embeddings.emb", bundle.embeddings.astype(np_dtype))
    head_name = None
    if bundle.head is not None:
        head_name = "head.emb"
        write_matrix(d / head_name, bundle.head.astype(np_dtype))
    elif (d / "head.emb").exists():
        (d / "head.emb").unlink()
    write_vocab(d / "vocab.jsonl", bundle.vocab)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": VERSION,
        "embeddings": "embeddings.emb",
        "head": head_name,
        "vocab": "vocab.jsonl",
        "tied": bool(bundle.tied),
        "meta": bundle.meta,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return d


def load_bundle(directory: str | os.PathLike) -> ModelBundle:
    d = Path(directory)
    mpath = d / MANIFEST_NAME
    if not mpath.is_file():
        raise BundleError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"unreadable manifest {mpath}: {exc}") from None
    for key in ("embeddings", "vocab", "tied"):
        if key not in manifest:
            raise BundleError(f"manifest {mpath} lacks field {key!r}")
    embeddings = read_matrix(d / manifest["embeddings"])
    head = read_matrix(d / manifest["head"]) if manifest.get("head") else None
    vocab = read_vocab(d / manifest["vocab"])
    return ModelBundle(
        embeddings=embeddings,
        vocab=vocab,
        head=head,
        tied=bool(manifest["tied"]),
        meta=manifest.get("meta") or {},
    )
