"""Primitives, assets, the adjacency graph and file interchange.

Coordinates live on an integer grid. ``x1`` is the vertical axis: rotations
turn about it and "lower" always refers to it.
"""

from __future__ import annotations

import io
import json
import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

NUM_CLASSES = 25
NUM_ROTATIONS = 4
GRID_SHAPE = (59, 44, 81)
MAX_PRIMITIVES = 1000
SCHEMA_VERSION = 1

PathOrStream = Union[str, os.PathLike, IO[str]]


class Category(str, Enum):
    ROOF = "Roof"
    WALL = "Wall"
    COMPONENT = "Component"


def category_of(class_id: int) -> Category:
    """Map a class id to its category (0-7 roof, 8-15 wall, 16-24 component)."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class id {class_id} outside [0, {NUM_CLASSES})")
    if class_id < 8:
        return Category.ROOF
    if class_id < 16:
        return Category.WALL
    return Category.COMPONENT


# Named ids used by the generator and the captioner.
FLAT_ROOF = 0
ROOF_SLOPE = 1
ROOF_RIDGE = 3
WALL = 8
WINDOW = 9
DOOR = 10
PILLAR = 15
FLOOR = 16
STAIR = 17


@dataclass(frozen=True)
class PhraseBundle:
    """Four-phrase text condition: type, height phrase and two features."""

    building_type: str
    height_phrase: str
    feature_phrases: tuple[str, str]

    def __post_init__(self):
        if len(self.feature_phrases) != 2:
            raise ValueError("a phrase bundle carries exactly two feature phrases")
        object.__setattr__(self, "feature_phrases", tuple(self.feature_phrases))

    def phrases(self) -> list[str]:
        return [self.building_type, self.height_phrase, *self.feature_phrases]

    @classmethod
    def from_phrases(cls, phrases: Sequence[str]) -> "PhraseBundle":
        if len(phrases) != 4:
            raise ValueError(f"expected 4 phrases, got {len(phrases)}")
        return cls(phrases[0], phrases[1], (phrases[2], phrases[3]))


@dataclass(frozen=True)
class Primitive:
    """One building block. Ranges are not enforced here; see ``in_range``."""

    cls: int
    rotation: int
    position: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(int(v) for v in self.position))

    @property
    def category(self) -> Category:
        return category_of(self.cls)

    def in_range(self) -> bool:
        return (
            0 <= self.cls < NUM_CLASSES
            and 0 <= self.rotation < NUM_ROTATIONS
            and all(0 <= v < n for v, n in zip(self.position, GRID_SHAPE))
        )

    def key(self) -> tuple[int, int, int, int, int]:
        return (self.cls, self.rotation, *self.position)


@dataclass(frozen=True)
class Asset:
    primitives: tuple[Primitive, ...]
    caption: PhraseBundle | None = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def __len__(self) -> int:
        return len(self.primitives)

    def positions(self) -> np.ndarray:
        if not self.primitives:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array([p.position for p in self.primitives], dtype=np.int64)

    def reordered(self, order: Sequence[int]) -> "Asset":
        return Asset(tuple(self.primitives[i] for i in order), self.caption)

    def multiset(self) -> list[tuple[int, int, int, int, int]]:
        return sorted(p.key() for p in self.primitives)


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected graph over primitive indices.

    Two primitives are adjacent when their cells are within Chebyshev
    distance 1 (shared face, edge or corner), including coincident cells.
    """

    n: int
    edges: frozenset[tuple[int, int]]
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "AdjacencyGraph":
        norm = frozenset((min(i, j), max(i, j)) for i, j in edges if i != j)
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for i, j in sorted(norm):
            nbrs[i].append(j)
            nbrs[j].append(i)
        return cls(n, norm, tuple(tuple(sorted(a)) for a in nbrs))

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges


def build_adjacency(asset: Asset) -> AdjacencyGraph:
    pos = asset.positions()
    n = len(pos)
    if n < 2:
        return AdjacencyGraph.from_edges(n, ())
    pairs = cKDTree(pos).query_pairs(r=1.0, p=np.inf, output_type="ndarray")
    return AdjacencyGraph.from_edges(n, map(tuple, pairs.tolist()))


def connected_components(graph: AdjacencyGraph) -> list[set[int]]:
    """Union-find labelling; components ordered by their smallest index."""
    parent = list(range(graph.n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in graph.edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, set[int]] = {}
    for i in range(graph.n):
        groups.setdefault(find(i), set()).add(i)
    return [groups[k] for k in sorted(groups)]


def connected_components_bfs(graph: AdjacencyGraph) -> list[set[int]]:
    """Breadth-first labelling; same output contract as ``connected_components``."""
    seen = [False] * graph.n
    out = []
    for start in range(graph.n):
        if seen[start]:
            continue
        seen[start] = True
        comp = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in graph.neighbors[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.add(v)
                    queue.append(v)
        out.append(comp)
    return out


def lower_corner_key(p: Primitive) -> tuple[int, int, int]:
    x0, x1, x2 = p.position
    return (x1, x0, x2)


# ---------------------------------------------------------------------------
# Validation


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Finding:
    severity: Severity
    code: str
    message: str
    index: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]
    n_components: int
    roof_violations: int

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.ERROR]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.WARNING]

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_components": self.n_components,
            "roof_violations": self.roof_violations,
            "findings": [
                {"severity": f.severity.value, "code": f.code, "message": f.message, "index": f.index}
                for f in self.findings
            ],
        }


def _roof_supported(p: Primitive, occupied: dict[tuple[int, int, int], list[int]]) -> bool:
    x0, x1, x2 = p.position
    for d0 in (-1, 0, 1):
        for d2 in (-1, 0, 1):
            for c in occupied.get((x0 + d0, x1 - 1, x2 + d2), ()):
                if 0 <= c < NUM_CLASSES and category_of(c) in (Category.ROOF, Category.WALL):
                    return True
    return False


def validate_asset(asset: Asset, max_primitives: int = MAX_PRIMITIVES) -> ValidationReport:
    """Check ranges, duplicates, connectivity and the roof-support rule.

    The roof rule is evaluated while popping nodes off a depth-first stack
    that starts at each component's lower corner: a popped Roof primitive
    needs a Wall or Roof primitive somewhere in the 3x3 cells directly
    beneath it.
    """
    findings: list[Finding] = []
    prims = asset.primitives
    n = len(prims)
    if n == 0:
        findings.append(Finding(Severity.ERROR, "empty", "asset has no primitives"))
    elif n > max_primitives:
        findings.append(
            Finding(Severity.ERROR, "too_many", f"{n} primitives exceeds limit {max_primitives}")
        )

    for i, p in enumerate(prims):
        if not p.in_range():
            findings.append(Finding(Severity.ERROR, "out_of_range", f"primitive {p} out of range", i))

    seen_keys: dict[tuple, int] = {}
    seen_pos: dict[tuple, int] = {}
    for i, p in enumerate(prims):
        if p.key() in seen_keys:
            findings.append(
                Finding(Severity.ERROR, "duplicate", f"duplicates primitive {seen_keys[p.key()]}", i)
            )
            continue
        seen_keys[p.key()] = i
        if p.position in seen_pos:
            findings.append(
                Finding(
                    Severity.WARNING,
                    "position_collision",
                    f"shares cell {p.position} with primitive {seen_pos[p.position]}",
                    i,
                )
            )
        else:
            seen_pos[p.position] = i

    graph = build_adjacency(asset)
    comps = connected_components(graph)

    occupied: dict[tuple[int, int, int], list[int]] = {}
    for p in prims:
        occupied.setdefault(p.position, []).append(p.cls)

    violations = 0
    starts = sorted((min(c, key=lambda k: (lower_corner_key(prims[k]), k)) for c in comps),
                    key=lambda k: (lower_corner_key(prims[k]), k))
    visited = [False] * n
    for start in starts:
        stack = [start]
        while stack:
            u = stack.pop()
            if visited[u]:
                continue
            visited[u] = True
            p = prims[u]
            if 0 <= p.cls < 8 and not _roof_supported(p, occupied):
                violations += 1
                findings.append(
                    Finding(Severity.ERROR, "roof_unsupported", f"roof at {p.position} lacks support", u)
                )
            stack.extend(v for v in reversed(graph.neighbors[u]) if not visited[v])

    return ValidationReport(tuple(findings), len(comps), violations)


# ---------------------------------------------------------------------------
# JSON interchange


class AssetFormatError(ValueError):
    pass


def asset_to_dict(asset: Asset) -> dict:
    out: dict = {"schema_version": SCHEMA_VERSION}
    if asset.caption is not None:
        out["caption"] = asset.caption.phrases()
    out["primitives"] = [
        {"c": p.cls, "r": p.rotation, "x": list(p.position)} for p in asset.primitives
    ]
    return out


_KNOWN_FIELDS = {"schema_version", "caption", "primitives", "source"}


def asset_from_dict(data: dict) -> Asset:
    if not isinstance(data, dict):
        raise AssetFormatError("asset document must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise AssetFormatError(f"unsupported schema_version {version!r}")
    unknown = set(data) - _KNOWN_FIELDS
    if unknown:
        warnings.warn(f"ignoring unknown asset fields: {sorted(unknown)}", stacklevel=2)
    caption = None
    if data.get("caption") is not None:
        caption = PhraseBundle.from_phrases([str(s) for s in data["caption"]])
    prims = []
    for i, raw in enumerate(data.get("primitives", [])):
        try:
            c, r, x = int(raw["c"]), int(raw["r"]), [int(v) for v in raw["x"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise AssetFormatError(f"primitive {i}: malformed entry {raw!r}") from exc
        if len(x) != 3:
            raise AssetFormatError(f"primitive {i}: position must have 3 coordinates")
        p = Primitive(c, r, tuple(x))
        if not p.in_range():
            raise AssetFormatError(f"primitive {i}: value out of range {raw!r}")
        prims.append(p)
    return Asset(tuple(prims), caption)


def write_asset(asset: Asset, dest: PathOrStream, allow_duplicates: bool = False) -> None:
    """Serialise ``asset`` as JSON.

    Out-of-range values and oversized assets are always refused. Exact
    duplicates are refused unless ``allow_duplicates`` is set, which lets raw
    model output be stored and judged later by ``validate_asset``.
    """
    report = validate_asset(asset)
    refuse = {"out_of_range", "too_many"} | (set() if allow_duplicates else {"duplicate"})
    bad = [f for f in report.errors if f.code in refuse]
    if bad:
        raise AssetFormatError(f"refusing to write invalid asset: {bad[0].message}")
    text = json.dumps(asset_to_dict(asset), separators=(",", ":")) + "\n"
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        dest.write(text)


def read_asset(src: PathOrStream) -> Asset:
    if isinstance(src, (str, os.PathLike)):
        with open(src, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = src.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AssetFormatError(f"malformed JSON: {exc}") from exc
    return asset_from_dict(data)


# ---------------------------------------------------------------------------
# OBJ export

_BOX_VERTS = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
_BOX_TRIS = [
    (0, 2, 1), (0, 3, 2),  # z=0
    (4, 5, 6), (4, 6, 7),  # z=1
    (0, 1, 5), (0, 5, 4),  # y=0
    (3, 7, 6), (3, 6, 2),  # y=1
    (0, 4, 7), (0, 7, 3),  # x=0
    (1, 2, 6), (1, 6, 5),  # x=1
]
# Wedge rising along +z at rotation 0: low edge at z=0, ridge along z=1.
_WEDGE_VERTS = [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1), (0, 1, 1), (1, 1, 1)]
_WEDGE_TRIS = [
    (0, 1, 2), (0, 2, 3),  # base
    (0, 4, 5), (0, 5, 1),  # slope
    (3, 2, 5), (3, 5, 4),  # back
    (0, 3, 4),             # side x=0
    (1, 5, 2),             # side x=1
]


def _rotate_local(v: tuple[int, int, int], quarter_turns: int) -> tuple[float, float, float]:
    # quarter turns about the vertical axis through the cell centre
    x, y, z = v[0] - 0.5, v[1], v[2] - 0.5
    for _ in range(quarter_turns % 4):
        x, z = z, -x
    return (x + 0.5, y, z + 0.5)


def primitive_mesh(p: Primitive) -> tuple[list[tuple[float, float, float]], list[tuple[int, int, int]]]:
    """Unit-cell mesh for one primitive in world coordinates (y = x1 is up)."""
    if p.category is Category.ROOF:
        verts = [_rotate_local(v, p.rotation) for v in _WEDGE_VERTS]
        tris = _WEDGE_TRIS
    else:
        verts = [tuple(float(c) for c in v) for v in _BOX_VERTS]
        tris = _BOX_TRIS
    x0, x1, x2 = p.position
    return [(vx + x0, vy + x1, vz + x2) for vx, vy, vz in verts], list(tris)


def export_mesh(asset: Asset, path: PathOrStream) -> None:
    buf = io.StringIO()
    buf.write(f"# {len(asset)} primitives\n")
    base = 1
    for i, p in enumerate(asset.primitives):
        verts, tris = primitive_mesh(p)
        buf.write(f"g prim_{i}_c{p.cls}_r{p.rotation}\n")
        for v in verts:
            buf.write("v {:g} {:g} {:g}\n".format(*v))
        for a, b, c in tris:
            buf.write(f"f {a + base} {b + base} {c + base}\n")
        base += len(verts)
    if isinstance(path, (str, os.PathLike)):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    else:
        path.write(buf.getvalue())
