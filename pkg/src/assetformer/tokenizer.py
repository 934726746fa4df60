"""Asset <-> token sequence mapping and primitive ordering policies.

Layout of the 214-id vocabulary::

    class     [0, 25)
    rotation  [25, 29)
    x0        [29, 88)
    x1        [88, 132)
    x2        [132, 213)
    eos       213

A primitive is five consecutive ids (class, rotation, x0, x1, x2); a
sequence ends with a single EOS placed at a tuple boundary.
"""

from __future__ import annotations

import hashlib
import os
import random
import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import BinaryIO, Sequence

import numpy as np

from .asset_model import (
    GRID_SHAPE,
    NUM_CLASSES,
    NUM_ROTATIONS,
    Asset,
    Primitive,
    build_adjacency,
    connected_components,
    lower_corner_key,
)


class TokenType(IntEnum):
    CLASS = 0
    ROTATION = 1
    X0 = 2
    X1 = 3
    X2 = 4
    EOS = 5


TUPLE_LEN = 5
_SIZES = (NUM_CLASSES, NUM_ROTATIONS, *GRID_SHAPE)
OFFSETS = tuple(int(v) for v in np.concatenate([[0], np.cumsum(_SIZES)]))
EOS_ID = OFFSETS[-1]
VOCAB_SIZE = EOS_ID + 1
assert VOCAB_SIZE == 214

_LAYOUT = "class:25,rotation:4,x0:59,x1:44,x2:81,eos:1"
VOCAB_HASH = hashlib.sha256(_LAYOUT.encode()).hexdigest()[:16]


def segment(t: TokenType) -> range:
    if t is TokenType.EOS:
        return range(EOS_ID, EOS_ID + 1)
    return range(OFFSETS[t], OFFSETS[t + 1])


def token_type_at(position: int) -> TokenType:
    """Slot type for an unbounded sequence; EOS is additionally legal at CLASS slots."""
    if position < 0:
        raise ValueError("position must be >= 0")
    return TokenType(position % TUPLE_LEN)


def valid_token_set(t: TokenType) -> list[int]:
    ids = list(segment(t))
    if t is TokenType.CLASS:
        ids.append(EOS_ID)
    return ids


def _build_masks() -> np.ndarray:
    masks = np.zeros((len(TokenType), VOCAB_SIZE), dtype=bool)
    for t in TokenType:
        masks[t, valid_token_set(t)] = True
    masks.setflags(write=False)
    return masks


# VALID_MASKS[t] is True on every id allowed at a slot of type t.
VALID_MASKS = _build_masks()


def token_type_of_id(token_id: int) -> TokenType:
    if token_id == EOS_ID:
        return TokenType.EOS
    if not 0 <= token_id < EOS_ID:
        raise ValueError(f"token id {token_id} outside vocabulary")
    return TokenType(int(np.searchsorted(OFFSETS, token_id, side="right")) - 1)


# ---------------------------------------------------------------------------
# Ordering


class OrderingMethod(str, Enum):
    RAW = "raw"
    DFS = "dfs"
    BFS = "bfs"
    RANDOM = "random"


def _component_starts(asset: Asset, comps: list[set[int]]) -> list[int]:
    prims = asset.primitives
    key = lambda i: (lower_corner_key(prims[i]), i)  # noqa: E731
    return sorted((min(c, key=key) for c in comps), key=key)


def reorder(asset: Asset, method: OrderingMethod | str, seed: int | None = None) -> list[int]:
    """Permutation ``tau``: position k of the new sequence holds primitive ``tau[k]``.

    DFS/BFS start from each component's lower corner (min of (x1, x0, x2)) and
    visit components in the order of those corners. With a seed, ties among
    frontier nodes are broken uniformly at random; without one, by index.
    """
    method = OrderingMethod(method)
    n = len(asset)
    if method is OrderingMethod.RAW:
        return list(range(n))
    rng = random.Random(seed)
    if method is OrderingMethod.RANDOM:
        tau = list(range(n))
        rng.shuffle(tau)
        return tau

    graph = build_adjacency(asset)
    starts = _component_starts(asset, connected_components(graph))
    visited = [False] * n
    order: list[int] = []

    def frontier(u: int) -> list[int]:
        nbrs = [v for v in graph.neighbors[u] if not visited[v]]
        if seed is not None:
            rng.shuffle(nbrs)
        return nbrs

    for start in starts:
        if method is OrderingMethod.DFS:
            stack = [start]
            while stack:
                u = stack.pop()
                if visited[u]:
                    continue
                visited[u] = True
                order.append(u)
                stack.extend(reversed(frontier(u)))
        else:
            visited[start] = True
            queue = deque([start])
            while queue:
                u = queue.popleft()
                order.append(u)
                for v in frontier(u):
                    visited[v] = True
                    queue.append(v)
    return order


# ---------------------------------------------------------------------------
# Tokenization


class TokenScheduleError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"position {position}: {message}")
        self.position = position


def primitive_tokens(p: Primitive) -> list[int]:
    x0, x1, x2 = p.position
    return [
        p.cls + OFFSETS[0],
        p.rotation + OFFSETS[1],
        x0 + OFFSETS[2],
        x1 + OFFSETS[3],
        x2 + OFFSETS[4],
    ]


def tokenize(asset: Asset, order: Sequence[int] | None = None) -> list[int]:
    if order is None:
        order = range(len(asset))
    elif sorted(order) != list(range(len(asset))):
        raise ValueError("order is not a permutation of the asset's primitive indices")
    ids: list[int] = []
    for i in order:
        p = asset.primitives[i]
        if not p.in_range():
            raise ValueError(f"primitive {i} out of range: {p}")
        ids.extend(primitive_tokens(p))
    ids.append(EOS_ID)
    return ids


def check_schedule(tokens: Sequence[int], terminated: bool = True) -> None:
    """Raise ``TokenScheduleError`` at the first slot holding a disallowed id."""
    n = len(tokens)
    for i, tok in enumerate(tokens):
        t = token_type_at(i)
        if tok == EOS_ID:
            if t is not TokenType.CLASS:
                raise TokenScheduleError(i, "EOS inside a primitive tuple (truncated tuple)")
            if i != n - 1:
                raise TokenScheduleError(i + 1, "tokens after EOS")
            if not terminated:
                raise TokenScheduleError(i, "unexpected EOS in prefix")
            return
        if not (0 <= tok < VOCAB_SIZE) or not VALID_MASKS[t, tok]:
            raise TokenScheduleError(i, f"id {tok} not valid for slot {t.name}")
    if terminated:
        raise TokenScheduleError(n, "missing EOS")
    if n % TUPLE_LEN:
        raise TokenScheduleError(n, "prefix ends inside a primitive tuple")


def detokenize(tokens: Sequence[int]) -> Asset:
    tokens = [int(t) for t in tokens]
    check_schedule(tokens, terminated=True)
    prims = []
    for k in range(0, len(tokens) - 1, TUPLE_LEN):
        c, r, a, b, d = tokens[k:k + TUPLE_LEN]
        prims.append(Primitive(c - OFFSETS[0], r - OFFSETS[1],
                               (a - OFFSETS[2], b - OFFSETS[3], d - OFFSETS[4])))
    return Asset(tuple(prims))


# ---------------------------------------------------------------------------
# Tokenized dataset file
#
# All integers little-endian.
# header:  magic b"AFTK" | u16 version | 16 bytes ascii vocab hash |
#          16 bytes ascii phrase-vocab hash | u32 max_seq_len | u32 n_records
# record:  4 x u16 condition phrase ids | u32 n_tokens | n_tokens x u16 ids

TOKFILE_MAGIC = b"AFTK"
TOKFILE_VERSION = 1
_HEADER = struct.Struct("<4sH16s16sII")
_RECORD = struct.Struct("<4HI")


class TokenFileError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedRecord:
    condition: tuple[int, int, int, int]
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class TokenizedDataset:
    records: list[TokenizedRecord]
    max_seq_len: int
    vocab_hash: str = VOCAB_HASH
    phrase_hash: str = ""


def phrase_vocab_hash(phrases: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(phrases).encode()).hexdigest()[:16]


def write_tokenized(ds: TokenizedDataset, dest: str | os.PathLike | BinaryIO) -> None:
    def _write(fh):
        fh.write(_HEADER.pack(TOKFILE_MAGIC, TOKFILE_VERSION, ds.vocab_hash.encode(),
                              ds.phrase_hash.encode().ljust(16, b"0"), ds.max_seq_len,
                              len(ds.records)))
        for rec in ds.records:
            fh.write(_RECORD.pack(*rec.condition, len(rec.tokens)))
            fh.write(np.asarray(rec.tokens, dtype="<u2").tobytes())

    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            _write(fh)
    else:
        _write(dest)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TokenFileError("truncated tokenized dataset")
    return data


def read_tokenized(src: str | os.PathLike | BinaryIO) -> TokenizedDataset:
    def _read(fh):
        magic, version, vhash, phash, max_len, n = _HEADER.unpack(_read_exact(fh, _HEADER.size))
        if magic != TOKFILE_MAGIC:
            raise TokenFileError("not a tokenized dataset (bad magic)")
        if version != TOKFILE_VERSION:
            raise TokenFileError(f"unsupported tokenized dataset version {version}")
        records = []
        for _ in range(n):
            *cond, length = _RECORD.unpack(_read_exact(fh, _RECORD.size))
            ids = np.frombuffer(_read_exact(fh, 2 * length), dtype="<u2")
            records.append(TokenizedRecord(tuple(cond), tuple(int(v) for v in ids)))
        return TokenizedDataset(records, max_len, vhash.decode(), phash.decode())

    if isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as fh:
            return _read(fh)
    return _read(src)


def prepare(
    records: Sequence,
    method: OrderingMethod | str,
    seed: int = 0,
    max_seq_len: int | None = None,
) -> TokenizedDataset:
    """Tokenize dataset records under one ordering policy.

    Record ``i`` is ordered with its own derived seed, so a record's tokens do
    not depend on its neighbours in the file.
    """
    from .pcg import PHRASE_VOCAB, phrase_ids, record_seed

    out = []
    for i, rec in enumerate(records):
        tau = reorder(rec.asset, method, record_seed(seed, i))
        ids = tokenize(rec.asset, tau)
        out.append(TokenizedRecord(tuple(phrase_ids(rec.caption)), tuple(ids)))
    longest = max((len(r.tokens) for r in out), default=1)
    return TokenizedDataset(out, max_seq_len or longest, VOCAB_HASH, phrase_vocab_hash(PHRASE_VOCAB))
