"""Beer-Lambert underwater image formation.

    I_c = J_c * exp(-K_c * d) + B_c * (1 - exp(-K_c * d))

J is the clean radiance, d the per-pixel distance in meters, K_c the
attenuation coefficient and B_c the background (veiling) light.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .formats import check_depth, check_rgb

FIELDS = ("name", "K_r", "K_g", "K_b", "B_r", "B_g", "B_b")


class WaterTypeError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class WaterType:
    name: str
    K: tuple[float, float, float]
    B: tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.K) != 3 or len(self.B) != 3:
            raise WaterTypeError(f"{self.name}: need 3 K and 3 B values")
        object.__setattr__(self, "K", tuple(float(k) for k in self.K))
        object.__setattr__(self, "B", tuple(float(b) for b in self.B))
        if any(not np.isfinite(k) or k < 0 for k in self.K):
            raise WaterTypeError(f"{self.name}: attenuation K must be finite and >= 0, got {self.K}")
        if any(not np.isfinite(b) or not 0 <= b <= 1 for b in self.B):
            raise WaterTypeError(f"{self.name}: background light B must be in [0, 1], got {self.B}")


def render_underwater(clean: np.ndarray, depth: np.ndarray, water: WaterType) -> np.ndarray:
    """Degrade a clean (H, W, 3) image seen through ``depth`` meters of ``water``."""
    clean = check_rgb(clean).astype(np.float64)
    depth = check_depth(depth, like=clean).astype(np.float64)
    K = np.asarray(water.K, dtype=np.float64)
    B = np.asarray(water.B, dtype=np.float64)
    t = np.exp(-K * depth[..., None])
    # B + (J - B) t is monotone in t; the clip pins rounding inside [J, B]
    out = B + (clean - B) * t
    out = np.clip(out, np.minimum(clean, B), np.maximum(clean, B))
    return np.where(t == 1.0, clean, out)


def _parse_rows(text: str, source: str) -> list[WaterType]:
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise WaterTypeError(f"{source}: no header row")
    header_line, header = lines[0]
    cols = [c.strip() for c in next(csv.reader([header]))]
    if sorted(cols) != sorted(FIELDS):
        raise WaterTypeError(f"header must contain exactly {', '.join(FIELDS)}; got {cols}", header_line)
    types: list[WaterType] = []
    seen: set[str] = set()
    for lineno, raw in lines[1:]:
        cells = [c.strip() for c in next(csv.reader([raw]))]
        if len(cells) != len(cols):
            raise WaterTypeError(f"expected {len(cols)} fields, got {len(cells)}", lineno)
        row = dict(zip(cols, cells))
        name = row["name"]
        if not name:
            raise WaterTypeError("empty name", lineno)
        if name in seen:
            raise WaterTypeError(f"duplicate water type {name!r}", lineno)
        try:
            K = tuple(float(row[f"K_{c}"]) for c in "rgb")
            B = tuple(float(row[f"B_{c}"]) for c in "rgb")
        except ValueError as exc:
            raise WaterTypeError(f"non-numeric coefficient ({exc})", lineno) from None
        try:
            types.append(WaterType(name, K, B))
        except WaterTypeError as exc:
            raise WaterTypeError(str(exc), lineno) from None
        seen.add(name)
    if not types:
        raise WaterTypeError(f"{source}: no water types defined")
    return types


def load_water_types(path=None) -> list[WaterType]:
    """Read a water-type table (CSV with a header row); ``None`` loads the bundled defaults."""
    if path is None:
        text = resources.files("discgan").joinpath("data/water_types.csv").read_text()
        return _parse_rows(text, "default water types")
    return _parse_rows(Path(path).read_text(), str(path))


def dumps_water_types(types: list[WaterType]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for w in types:
        # repr round-trips floats exactly
        writer.writerow([w.name, *map(repr, w.K), *map(repr, w.B)])
    return buf.getvalue()


def save_water_types(path, types: list[WaterType]) -> None:
    Path(path).write_text(dumps_water_types(types))
