"""Procedural building synthesis and rule-based captions.

Buildings are stacked storeys on a ``width x length`` footprint placed at the
grid origin. Each storey is one floor plane followed by
``wall_height_per_storey`` wall layers; the roof starts on the layer above
the last wall layer.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .asset_model import (
    DOOR,
    FLAT_ROOF,
    FLOOR,
    GRID_SHAPE,
    MAX_PRIMITIVES,
    PILLAR,
    ROOF_RIDGE,
    ROOF_SLOPE,
    STAIR,
    WALL,
    WINDOW,
    Asset,
    AssetFormatError,
    PhraseBundle,
    Primitive,
    asset_from_dict,
    asset_to_dict,
)

BUILDING_TYPES = (
    "castle", "skyscraper", "courtyard", "mansion",
    "townhouse", "apartment", "cottage", "tower",
)
HEIGHT_PHRASES = ("single-story", "multi-story", "high-rise")
FEATURE_PHRASES = (
    "pitched roof", "flat roof", "lots of windows", "few windows", "minimal windows",
    "magnificent", "dull", "with stairs", "with courtyard",
)
PHRASE_VOCAB = BUILDING_TYPES + HEIGHT_PHRASES + FEATURE_PHRASES
PHRASE_INDEX = {p: i for i, p in enumerate(PHRASE_VOCAB)}

SOURCES = ("Synthesized", "Collected")


@dataclass(frozen=True)
class PcgParams:
    max_width: int = 8
    max_length: int = 8
    max_floor_height: int = 5
    wall_height_per_storey: int = 2
    # (flat, pitched)
    roof_style_weights: tuple[float, float] = (0.5, 0.5)
    decoration_rates: dict = field(
        default_factory=lambda: {"door": 0.9, "window": 0.3, "stair": 0.5}
    )

    def __hash__(self):
        return hash((self.max_width, self.max_length, self.max_floor_height,
                     self.wall_height_per_storey, self.roof_style_weights,
                     tuple(sorted(self.decoration_rates.items()))))

    def check(self) -> None:
        """Raise ``ValueError`` if the largest possible building cannot fit the grid."""
        for name in ("max_width", "max_length", "max_floor_height", "wall_height_per_storey"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_width > GRID_SHAPE[0]:
            raise ValueError(f"max_width {self.max_width} exceeds x0 range {GRID_SHAPE[0]}")
        if self.max_length > GRID_SHAPE[2]:
            raise ValueError(f"max_length {self.max_length} exceeds x2 range {GRID_SHAPE[2]}")
        w, l, s, h = self.max_width, self.max_length, self.max_floor_height, self.wall_height_per_storey
        height = s * (h + 1) + math.ceil(min(w, l) / 2)
        if height > GRID_SHAPE[1]:
            raise ValueError(f"tallest building needs {height} layers, x1 range is {GRID_SHAPE[1]}")
        worst = _max_primitives(w, l, s, h)
        if worst > MAX_PRIMITIVES:
            raise ValueError(f"largest building may hold {worst} primitives (> {MAX_PRIMITIVES})")
        if len(self.roof_style_weights) != 2 or min(self.roof_style_weights) < 0 or sum(self.roof_style_weights) <= 0:
            raise ValueError("roof_style_weights must be two non-negative weights")
        for k in ("door", "window", "stair"):
            if not 0.0 <= self.decoration_rates.get(k, 0.0) <= 1.0:
                raise ValueError(f"decoration rate {k!r} must be in [0, 1]")


def _perimeter_count(w: int, l: int) -> int:
    return w * l if min(w, l) <= 2 else 2 * (w + l) - 4


def _max_primitives(w: int, l: int, s: int, h: int) -> int:
    area = w * l
    pillars = len(_cover(w)) * len(_cover(l)) * h
    roof = max(area + pillars, sum(_perimeter_count(w - 2 * k, l - 2 * k)
                                   for k in range(math.ceil(min(w, l) / 2))))
    return s * (area + h * _perimeter_count(w, l) + 1) + roof


def _cover(n: int) -> list[int]:
    """Pillar coordinates so every cell in [2, n-3] is within 1 of one."""
    out = []
    start = 2
    while start <= n - 3:
        p = min(start + 1, n - 3)
        out.append(p)
        start = p + 2
    return out


def _ring(x_lo: int, x_hi: int, z_lo: int, z_hi: int) -> list[tuple[int, int, int]]:
    """Perimeter cells of a rectangle with the outward-facing rotation of each."""
    cells = []
    for x in range(x_lo, x_hi + 1):
        for z in range(z_lo, z_hi + 1):
            if z == z_lo:
                rot = 0
            elif x == x_hi:
                rot = 1
            elif z == z_hi:
                rot = 2
            elif x == x_lo:
                rot = 3
            else:
                continue
            cells.append((x, z, rot))
    return cells


@dataclass(frozen=True)
class PcgTrace:
    width: int
    length: int
    storeys: int
    roof_style: str


def _generate(params: PcgParams, seed: int) -> tuple[Asset, PcgTrace]:
    params.check()
    rng = random.Random(seed)
    width = rng.randint(1, params.max_width)
    length = rng.randint(1, params.max_length)
    storeys = rng.randint(1, params.max_floor_height)
    h = params.wall_height_per_storey
    flat_w, pitched_w = params.roof_style_weights
    roof_style = "flat" if rng.random() * (flat_w + pitched_w) < flat_w else "pitched"
    rates = params.decoration_rates

    prims: list[Primitive] = []
    perimeter = _ring(0, width - 1, 0, length - 1)

    # walls; doors and windows replace wall cells
    door_at = None
    if rng.random() < rates.get("door", 0.0):
        door_at = rng.randrange(len(perimeter))
    for s in range(storeys):
        for k in range(1, h + 1):
            y = s * (h + 1) + k
            for idx, (x, z, rot) in enumerate(perimeter):
                if s == 0 and k == 1 and idx == door_at:
                    cls = DOOR
                elif rng.random() < rates.get("window", 0.0):
                    cls = WINDOW
                else:
                    cls = WALL
                prims.append(Primitive(cls, rot, (x, y, z)))

    # one floor plane per storey, stairs lead up to the next storey
    for s in range(storeys):
        y = s * (h + 1)
        for x in range(width):
            for z in range(length):
                prims.append(Primitive(FLOOR, 0, (x, y, z)))
        if s < storeys - 1 and width >= 3 and length >= 3 and rng.random() < rates.get("stair", 0.0):
            sx = rng.randint(1, width - 2)
            sz = rng.randint(1, length - 2)
            prims.append(Primitive(STAIR, rng.randrange(4), (sx, y + 1, sz)))

    top = storeys * (h + 1)
    if roof_style == "flat":
        # pillars in the top storey carry interior roof tiles
        for px in _cover(width):
            for pz in _cover(length):
                for k in range(1, h + 1):
                    prims.append(Primitive(PILLAR, 0, (px, top - h - 1 + k, pz)))
        for x in range(width):
            for z in range(length):
                prims.append(Primitive(FLAT_ROOF, 0, (x, top, z)))
    else:
        k = 0
        while 2 * k < width and 2 * k < length:
            x_hi, z_hi = width - 1 - k, length - 1 - k
            last = min(x_hi - k, z_hi - k) <= 1
            for x, z, rot in _ring(k, x_hi, k, z_hi):
                prims.append(Primitive(ROOF_RIDGE if last else ROOF_SLOPE, rot, (x, top + k, z)))
            k += 1

    return Asset(tuple(prims)), PcgTrace(width, length, storeys, roof_style)


def generate_pcg(params: PcgParams, seed: int) -> Asset:
    """Synthesize one building; deterministic in ``seed``."""
    return _generate(params, seed)[0]


def generate_pcg_traced(params: PcgParams, seed: int) -> tuple[Asset, PcgTrace]:
    """Like ``generate_pcg`` but also returns the drawn footprint, storeys and roof style."""
    return _generate(params, seed)


def infer_storeys(asset: Asset) -> int:
    levels = {p.position[1] for p in asset.primitives if p.cls == FLOOR}
    if levels:
        return len(levels)
    walls = {p.position[1] for p in asset.primitives if 8 <= p.cls < 16}
    return max(1, len(walls))


def caption(asset: Asset) -> PhraseBundle:
    """Deterministic phrase bundle from footprint, storey count, roof and windows."""
    storeys = infer_storeys(asset)
    body = [p for p in asset.primitives if not 0 <= p.cls < 8] or list(asset.primitives)
    if body:
        xs = [p.position[0] for p in body]
        zs = [p.position[2] for p in body]
        w, l = max(xs) - min(xs) + 1, max(zs) - min(zs) + 1
    else:
        w = l = 0
    area = w * l
    windows = sum(1 for p in asset.primitives if p.cls == WINDOW)
    pitched = any(1 <= p.cls < 8 for p in asset.primitives)

    if storeys == 1:
        height = "single-story"
    elif storeys <= 5:
        height = "multi-story"
    else:
        height = "high-rise"

    if storeys >= 6:
        btype = "skyscraper" if area >= 9 else "tower"
    elif storeys == 1:
        btype = "courtyard" if area >= 30 else "cottage"
    elif storeys >= 3 and area >= 36 and pitched:
        btype = "castle"
    elif area >= 36:
        btype = "mansion"
    elif windows > 15:
        btype = "apartment"
    elif min(w, l) <= 2:
        btype = "tower" if storeys >= 4 else "townhouse"
    else:
        btype = "apartment" if storeys >= 3 else "townhouse"

    if windows > 15:
        win = "lots of windows"
    elif windows >= 3:
        win = "few windows"
    else:
        win = "minimal windows"
    return PhraseBundle(btype, height, ("pitched roof" if pitched else "flat roof", win))


def phrase_ids(bundle: PhraseBundle) -> list[int]:
    try:
        return [PHRASE_INDEX[p] for p in bundle.phrases()]
    except KeyError as exc:
        raise ValueError(f"phrase {exc.args[0]!r} not in the caption vocabulary") from None


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class DatasetRecord:
    asset: Asset
    caption: PhraseBundle
    source: str = "Synthesized"
    seed: int | None = None

    def to_dict(self) -> dict:
        d = asset_to_dict(Asset(self.asset.primitives, self.caption))
        d["source"] = self.source
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        d = dict(d)
        source = d.pop("source", "Collected")
        seed = d.pop("seed", None)
        if source not in SOURCES:
            raise AssetFormatError(f"unknown record source {source!r}")
        asset = asset_from_dict(d)
        cap = asset.caption if asset.caption is not None else caption(asset)
        return cls(Asset(asset.primitives), cap, source, seed)


def record_seed(seed: int, index: int) -> int:
    """Per-record seed so any record can be rebuilt without its predecessors."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def make_record(params: PcgParams, seed: int, index: int) -> DatasetRecord:
    s = record_seed(seed, index)
    asset = generate_pcg(params, s)
    return DatasetRecord(asset, caption(asset), "Synthesized", s)


def build_dataset(n: int, params: PcgParams, seed: int, path: str | os.PathLike) -> int:
    """Stream ``n`` synthesized records to a line-delimited JSON file."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params.check()
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            rec = make_record(params, seed, i)
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")
    return n


def read_dataset(path: str | os.PathLike) -> Iterator[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield DatasetRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise AssetFormatError(f"{path}:{lineno}: malformed JSON") from exc


def distinct_caption_records(n: int, params: PcgParams, seed: int, max_draws: int = 100_000) -> list[DatasetRecord]:
    """First ``n`` synthesized records (in index order) with pairwise distinct captions.

    A conditional model can only memorise a set exactly when no caption maps
    to two different assets; the toy overfitting sets are drawn this way.
    """
    out: list[DatasetRecord] = []
    seen: set[PhraseBundle] = set()
    for i in range(max_draws):
        rec = make_record(params, seed, i)
        if rec.caption not in seen:
            seen.add(rec.caption)
            out.append(rec)
            if len(out) == n:
                return out
    raise ValueError(f"only {len(out)} distinct captions reachable with {params}")


# Small buildings for overfitting runs: narrow footprints, up to six storeys.
TOY_PARAMS = PcgParams(
    max_width=2, max_length=2, max_floor_height=6, wall_height_per_storey=1,
    decoration_rates={"door": 0.9, "window": 0.6, "stair": 0.5},
)
