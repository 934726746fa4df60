"""Primitive-space statistics for comparing generated and reference sets."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .asset_model import GRID_SHAPE, NUM_CLASSES, NUM_ROTATIONS, Asset, validate_asset

AXES = ("x0", "x1", "x2")
BINS = {"class": NUM_CLASSES, "rotation": NUM_ROTATIONS, **dict(zip(AXES, GRID_SHAPE))}


def histograms(assets: Sequence[Asset]) -> dict[str, np.ndarray]:
    """Normalised frequency tables for class, rotation and each position axis."""
    if not assets:
        raise ValueError("histograms need at least one asset")
    counts = {k: np.zeros(n) for k, n in BINS.items()}
    for a in assets:
        for p in a.primitives:
            counts["class"][p.cls] += 1
            counts["rotation"][p.rotation] += 1
            for axis, v in zip(AXES, p.position):
                counts[axis][v] += 1
    total = counts["class"].sum()
    if total == 0:
        raise ValueError("assets contain no primitives")
    return {k: c / total for k, c in counts.items()}


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats (0 ln 0 = 0); lies in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share their support")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


@dataclass
class EvalReport:
    class_histogram_js: float
    rotation_histogram_js: float
    position_histogram_js: dict
    validity_rate: float
    connectivity_rate: float
    mean_primitives: float
    n_generated: int
    n_reference: int
    tokens_per_second: float | None = None
    acceptance_rate: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _rates(assets: Sequence[Asset]) -> tuple[float, float]:
    valid = connected = 0
    for a in assets:
        r = validate_asset(a)
        valid += r.ok
        connected += r.n_components == 1
    return valid / len(assets), connected / len(assets)


def evaluate(generated: Sequence[Asset], reference: Sequence[Asset], timing: dict | None = None) -> EvalReport:
    if not generated or not reference:
        raise ValueError("both asset lists must be non-empty")
    hg, hr = histograms(generated), histograms(reference)
    validity, connectivity = _rates(generated)
    timing = timing or {}
    return EvalReport(
        class_histogram_js=js_divergence(hg["class"], hr["class"]),
        rotation_histogram_js=js_divergence(hg["rotation"], hr["rotation"]),
        position_histogram_js={a: js_divergence(hg[a], hr[a]) for a in AXES},
        validity_rate=validity,
        connectivity_rate=connectivity,
        mean_primitives=float(np.mean([len(a) for a in generated])),
        n_generated=len(generated),
        n_reference=len(reference),
        tokens_per_second=timing.get("tokens_per_second"),
        acceptance_rate=timing.get("acceptance_rate"),
    )


def measure_throughput(run: Callable[[int], tuple[int, float]], runs: int = 3, warmup: int = 1) -> float:
    """Median tokens/second of ``run(i) -> (tokens, seconds)`` after warm-up calls."""
    for i in range(warmup):
        run(-1 - i)
    rates = []
    for i in range(max(runs, 3)):
        tokens, seconds = run(i)
        rates.append(tokens / seconds)
    return statistics.median(rates)
