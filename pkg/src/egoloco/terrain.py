"""Procedural 1-D heightfields: seven terrain families, fractal overlay, curriculum grid."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

SUBTERRAIN_LENGTH = 8.0
DEFAULT_DX = 0.01
PIT_DEPTH = -1.0
LEAD_IN = 1.5
STAIR_RUN = 0.28
STONE_LENGTH = 0.25
N_GAPS = 5
GAP_PITCH = 1.0

# (low, high) of the geometric parameter each family maps difficulty onto
DIFFICULTY_RANGES = {
    "stair_rise": (0.05, 0.25),
    "gap_width": (0.05, 0.30),
    "obstacle_height": (0.05, 0.26),
    "slope_grade": (0.0, 0.4),
    "stone_gap": (0.05, 0.25),
}

FRACTAL_FLAT = 0.10
FRACTAL_RANGE = (0.02, 0.04)


class TerrainKind(enum.Enum):
    FLAT = "flat"
    SLOPE = "slope"
    STAIRS_UP = "stairs_up"
    STAIRS_DOWN = "stairs_down"
    DISCRETE_OBSTACLES = "discrete_obstacles"
    GAPS = "gaps"
    STEPPING_STONES = "stepping_stones"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        raise ValueError(f"unknown terrain kind {name!r}")


@dataclass
class Heightfield:
    """Uniformly spaced terrain heights; ``pits`` marks gap samples."""

    samples: np.ndarray
    dx: float = DEFAULT_DX
    x0: float = 0.0
    pits: np.ndarray = None
    kind: TerrainKind = TerrainKind.FLAT
    difficulty: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.pits is None:
            self.pits = np.zeros(self.samples.shape, dtype=bool)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("heightfield samples must be finite")

    @property
    def n(self):
        return len(self.samples)

    @property
    def length(self):
        return self.n * self.dx

    @property
    def xs(self):
        return self.x0 + self.dx * np.arange(self.n)

    def height_at(self, x):
        return height_at(self, x)[0]


def _param(name, difficulty):
    lo, hi = DIFFICULTY_RANGES[name]
    return lo + (hi - lo) * difficulty


def terrain_parameter(kind, difficulty):
    """The governing geometric parameter of ``kind`` at ``difficulty`` (meters or grade)."""
    kind = TerrainKind.parse(kind)
    return {
        TerrainKind.FLAT: 0.0,
        TerrainKind.SLOPE: _param("slope_grade", difficulty),
        TerrainKind.STAIRS_UP: _param("stair_rise", difficulty),
        TerrainKind.STAIRS_DOWN: _param("stair_rise", difficulty),
        TerrainKind.DISCRETE_OBSTACLES: _param("obstacle_height", difficulty),
        TerrainKind.GAPS: _param("gap_width", difficulty),
        TerrainKind.STEPPING_STONES: _param("stone_gap", difficulty),
    }[kind]


def _n_samples(length, dx):
    return int(round(length / dx))


def generate_terrain(kind, difficulty, seed=0, length=SUBTERRAIN_LENGTH, dx=DEFAULT_DX,
                     lead_in=LEAD_IN, n_gaps=N_GAPS):
    """Build one heightfield of ``kind`` at ``difficulty`` in [0, 1] (no fractal).

    Features start after a flat ``lead_in`` where the walker spawns.  Gap and
    stone families fill gaps with pits at ``PIT_DEPTH``.
    """
    kind = TerrainKind.parse(kind)
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    n = _n_samples(length, dx)
    xs = dx * np.arange(n)
    h = np.zeros(n)
    pits = np.zeros(n, dtype=bool)
    i0 = int(round(lead_in / dx))
    p = terrain_parameter(kind, difficulty)

    if kind in (TerrainKind.STAIRS_UP, TerrainKind.STAIRS_DOWN):
        run = int(round(STAIR_RUN / dx))
        sign = 1.0 if kind is TerrainKind.STAIRS_UP else -1.0
        steps = np.maximum(0, (np.arange(n) - i0) // run + 1)
        steps[: i0] = 0
        h = sign * p * steps
    elif kind is TerrainKind.SLOPE:
        top = i0 + (n - i0) // 2
        up = np.clip(xs - xs[i0], 0.0, None)
        down = np.clip(xs - xs[top], 0.0, None)
        h = p * (up - 2.0 * down)
    elif kind is TerrainKind.DISCRETE_OBSTACLES:
        i = i0 + int(round(rng.uniform(0.2, 0.6) / dx))
        while i < n:
            width = int(round(rng.uniform(0.2, 0.6) / dx))
            h[i: i + width] = p * rng.uniform(0.5, 1.0)
            i += width + int(round(rng.uniform(0.4, 1.0) / dx))
    elif kind is TerrainKind.GAPS:
        width = max(1, int(round(p / dx)))
        pitch = int(round(GAP_PITCH / dx))
        for g in range(n_gaps):
            start = i0 + g * pitch + int(round(0.5 / dx))
            if start + width >= n - 1:
                raise ValueError("terrain too short for the configured number of gaps")
            pits[start: start + width] = True
    elif kind is TerrainKind.STEPPING_STONES:
        stone = int(round(STONE_LENGTH / dx))
        gap = max(1, int(round(p / dx)))
        i = i0
        # keep a landing strip at the far end
        end = n - int(round(0.5 / dx))
        while i + gap < end:
            pits[i: i + gap] = True
            i += gap + stone
    h = np.where(pits, PIT_DEPTH, h)
    return Heightfield(h, dx=dx, x0=0.0, pits=pits, kind=kind, difficulty=float(difficulty))


def _value_noise(rng, n, dx, wavelength):
    n_knots = int(np.ceil((n - 1) * dx / wavelength)) + 2
    knots = rng.uniform(-1.0, 1.0, size=n_knots)
    u = np.arange(n) * dx / wavelength
    i = np.floor(u).astype(int)
    f = u - i
    f = f * f * (3.0 - 2.0 * f)
    return knots[i] * (1.0 - f) + knots[i + 1] * f


def add_fractal(hf, amplitude, seed=0, octaves=4, persistence=0.5, base_wavelength=1.0):
    """Overlay multi-octave value noise whose peak magnitude equals ``amplitude``.

    Pit samples are left at their sentinel depth.
    """
    if amplitude < 0:
        raise ValueError("fractal amplitude must be non-negative")
    if amplitude == 0:
        return Heightfield(hf.samples.copy(), hf.dx, hf.x0, hf.pits.copy(), hf.kind, hf.difficulty)
    rng = np.random.default_rng(seed)
    noise = np.zeros(hf.n)
    weight, wavelength = 1.0, base_wavelength
    for _ in range(octaves):
        noise += weight * _value_noise(rng, hf.n, hf.dx, wavelength)
        weight *= persistence
        wavelength *= 0.5
    peak = np.max(np.abs(noise[~hf.pits])) if np.any(~hf.pits) else 0.0
    if peak > 0:
        noise *= amplitude / peak
    noise[hf.pits] = 0.0
    return Heightfield(hf.samples + noise, hf.dx, hf.x0, hf.pits.copy(), hf.kind, hf.difficulty)


def height_at(hf, x):
    """Linear interpolation of ``hf`` at ``x``.

    Returns ``(heights, out_of_bounds)``; queries outside the field are clamped
    to the nearest end sample and flagged.
    """
    x = np.asarray(x, dtype=float)
    u = (x - hf.x0) / hf.dx
    oob = (u < 0) | (u > hf.n)
    u = np.clip(u, 0.0, hf.n - 1)
    i = np.minimum(np.floor(u).astype(int), hf.n - 2)
    f = u - i
    s = hf.samples
    return s[i] * (1.0 - f) + s[i + 1] * f, oob


@dataclass
class TerrainGrid:
    kinds: list
    difficulties: np.ndarray
    cells: list = field(default_factory=list)  # cells[row][col]

    @property
    def shape(self):
        return len(self.kinds), len(self.difficulties)

    def cell(self, row, col):
        return self.cells[row][col]


DEFAULT_ROW_KINDS = [
    TerrainKind.SLOPE,
    TerrainKind.STAIRS_UP,
    TerrainKind.STAIRS_DOWN,
    TerrainKind.DISCRETE_OBSTACLES,
    TerrainKind.STEPPING_STONES,
    TerrainKind.GAPS,
    TerrainKind.FLAT,
]


def fractal_amplitude(kind, rng, difficulty=1.0):
    """Roughness for one cell.  Flat ground gets the rough treatment, ramped with
    difficulty up to ``FRACTAL_FLAT``; every other kind draws from ``FRACTAL_RANGE``."""
    if kind is TerrainKind.FLAT:
        return FRACTAL_FLAT * float(difficulty)
    return float(rng.uniform(*FRACTAL_RANGE))


def build_grid(rows=6, cols=10, seed=0, kinds=None, fractal=True, length=SUBTERRAIN_LENGTH,
               dx=DEFAULT_DX):
    """Curriculum grid: one terrain kind per row, difficulty ``c / (cols - 1)`` per column."""
    if kinds is None:
        if rows > len(DEFAULT_ROW_KINDS):
            raise ValueError(f"at most {len(DEFAULT_ROW_KINDS)} distinct rows are available")
        kinds = DEFAULT_ROW_KINDS[:rows]
    kinds = [TerrainKind.parse(k) for k in kinds]
    if len(kinds) != rows:
        raise ValueError("number of kinds must equal number of rows")
    difficulties = np.linspace(0.0, 1.0, cols) if cols > 1 else np.zeros(1)
    seeds = np.random.SeedSequence(seed).spawn(rows * cols)
    grid = TerrainGrid(kinds=kinds, difficulties=difficulties)
    for r, kind in enumerate(kinds):
        row = []
        for c, d in enumerate(difficulties):
            rng = np.random.default_rng(seeds[r * cols + c])
            geo_seed, noise_seed = (int(v) for v in rng.integers(0, 2**31, size=2))
            hf = generate_terrain(kind, float(d), geo_seed, length=length, dx=dx)
            if fractal:
                hf = add_fractal(hf, fractal_amplitude(kind, rng, d), noise_seed)
            row.append(hf)
        grid.cells.append(row)
    return grid


def build_course(kind, difficulty, length, seed=0, fractal=True, dx=DEFAULT_DX):
    """A long single-kind course for evaluation runs."""
    kind = TerrainKind.parse(kind)
    n_gaps = max(1, int((length - LEAD_IN - 1.0) / GAP_PITCH))
    rng = np.random.default_rng(seed)
    hf = generate_terrain(kind, difficulty, int(rng.integers(2**31)), length=length, dx=dx,
                          n_gaps=n_gaps)
    if fractal:
        hf = add_fractal(hf, fractal_amplitude(kind, rng, difficulty),
                        int(rng.integers(2**31)))
    return hf


class TerrainBank:
    """Equal-length heightfields stacked for vectorized per-environment lookup."""

    def __init__(self, fields):
        if not fields:
            raise ValueError("empty terrain bank")
        n, dx = fields[0].n, fields[0].dx
        if any(f.n != n or f.dx != dx for f in fields):
            raise ValueError("all heightfields in a bank must share length and spacing")
        self.fields = list(fields)
        self.samples = np.stack([f.samples for f in fields])
        self.pits = np.stack([f.pits for f in fields])
        self.x0 = np.array([f.x0 for f in fields])
        self.dx = dx
        self.n = n

    @classmethod
    def from_grid(cls, grid):
        return cls([hf for row in grid.cells for hf in row])

    def __len__(self):
        return len(self.fields)

    def height(self, idx, x):
        """Heights at ``x`` for terrain indices ``idx`` (broadcast together)."""
        idx = np.asarray(idx)
        u = (np.asarray(x, dtype=float) - self.x0[idx]) / self.dx
        u = np.clip(u, 0.0, self.n - 1)
        i = np.minimum(u.astype(int), self.n - 2)
        f = u - i
        return self.samples[idx, i] * (1.0 - f) + self.samples[idx, i + 1] * f

    def height_and_slope(self, idx, x):
        idx = np.asarray(idx)
        u = (np.asarray(x, dtype=float) - self.x0[idx]) / self.dx
        u = np.clip(u, 0.0, self.n - 1)
        i = np.minimum(u.astype(int), self.n - 2)
        f = u - i
        lo = self.samples[idx, i]
        hi = self.samples[idx, i + 1]
        return lo * (1.0 - f) + hi * f, (hi - lo) / self.dx

    def max_height(self, idx, x_lo, x_hi):
        """Highest sample within [x_lo, x_hi] per query (window clipped to the field)."""
        idx = np.asarray(idx)
        a = np.clip(np.floor((x_lo - self.x0[idx]) / self.dx).astype(int), 0, self.n - 1)
        b = np.clip(np.ceil((x_hi - self.x0[idx]) / self.dx).astype(int), 0, self.n - 1)
        width = int(np.max(b - a)) + 1 if np.size(a) else 1
        offs = np.arange(width)
        cols = np.minimum(a[..., None] + offs, b[..., None])
        return np.max(self.samples[np.asarray(idx)[..., None], cols], axis=-1)

    def end_x(self, idx):
        return self.x0[idx] + self.n * self.dx


# -- import / export ---------------------------------------------------------

def export_csv(hf, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "height"])
        for x, h in zip(hf.xs, hf.samples):
            w.writerow([repr(float(x)), repr(float(h))])


def import_csv(path):
    xs, hs = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(float(row["x"]))
            hs.append(float(row["height"]))
    xs = np.array(xs)
    dx = float(np.round(xs[1] - xs[0], 12)) if len(xs) > 1 else DEFAULT_DX
    hs = np.array(hs)
    return Heightfield(hs, dx=dx, x0=float(xs[0]), pits=hs <= PIT_DEPTH)


def export_binary(hf, path):
    with open(path, "wb") as fh:
        np.savez(fh, samples=hf.samples, pits=hf.pits,
                 meta=np.array([hf.dx, hf.x0, hf.difficulty]), kind=np.array(hf.kind.value))


def import_binary(path):
    with np.load(path, allow_pickle=False) as d:
        dx, x0, diff = d["meta"]
        return Heightfield(d["samples"].copy(), float(dx), float(x0), d["pits"].copy(),
                           TerrainKind.parse(str(d["kind"])), float(diff))
