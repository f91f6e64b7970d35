"""Synthetic time-lapse cell cultures with dot annotations.

Cells advance through a division cycle at ``cycle_frequency`` cycles/hour,
so the expected population follows ``n0 * 2**(t * f)``.  Appearance depends
on cycle phase: round, then elongated, then a pinched dumbbell just before
the split.  Frames add an illumination gradient, static debris and noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ProliferationParams:
    n0: int = 8
    cycle_frequency: float = 1.0 / 16.0  # cycles per hour

    def __post_init__(self):
        if self.n0 < 0 or self.cycle_frequency < 0:
            raise ValueError("n0 and cycle_frequency must be non-negative")


def expected_population(p: ProliferationParams, t: float) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return p.n0 * 2.0 ** (t * p.cycle_frequency)


@dataclass
class CellState:
    id: int
    center: tuple[float, float]
    radius: float
    phase: float
    orientation: float


@dataclass
class Background:
    base: float = 0.45
    gradient: tuple[float, float] = (0.0, 0.0)  # intensity change across full width / height
    debris: list = field(default_factory=list)  # (x, y, radius, amplitude)
    noise: float = 0.0


@dataclass
class SimConfig:
    frame_size: tuple[int, int] = (256, 256)
    duration: float = 40.0
    sampling_interval: float = 1.0
    proliferation: ProliferationParams = field(default_factory=ProliferationParams)
    noise: float = 0.06
    debris_count: int = 12
    debris_amplitude: float = 0.25
    illumination: float = 0.15
    cell_radius: tuple[float, float] = (4.0, 6.0)
    drift: float = 0.6  # random-walk px per sqrt(hour)
    phase_jitter: float = 0.1  # relative sd of per-step phase advance
    max_cells: int = 2000
    elongate_at: float = 0.6
    pinch_at: float = 0.9
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.sampling_interval <= 0:
            raise ValueError("sampling_interval must be > 0")
        if self.duration < self.sampling_interval:
            raise ValueError(f"duration {self.duration} h shorter than sampling interval {self.sampling_interval} h")
        if isinstance(self.proliferation, dict):
            self.proliferation = ProliferationParams(**self.proliferation)
        self.frame_size = tuple(self.frame_size)
        self.cell_radius = tuple(self.cell_radius)

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration / self.sampling_interval + 1e-9)) + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CultureScene:
    cells: list[CellState]
    clock: float
    rng: np.random.Generator
    background: Background
    frame_size: tuple[int, int]
    cycle_frequency: float
    drift: float = 0.0
    phase_jitter: float = 0.0
    max_cells: int = 2000
    saturated: bool = False
    next_id: int = 0

    def __len__(self):
        return len(self.cells)


def _stable_phases(rng, n):
    # age density of an exponentially growing population: p(phi) = 2 ln2 2^-phi
    u = rng.random(n)
    return -np.log2(1.0 - u / 2.0)


def init_scene(cfg: SimConfig) -> CultureScene:
    rng = np.random.default_rng(cfg.seed)
    w, h = cfg.frame_size
    a = cfg.illumination
    bg = Background(
        base=0.45 + rng.uniform(-0.05, 0.05),
        gradient=(rng.uniform(-a, a), rng.uniform(-a, a)),
        noise=cfg.noise,
    )
    for _ in range(cfg.debris_count):
        bg.debris.append((rng.uniform(0, w), rng.uniform(0, h), rng.uniform(1.5, 3.5),
                          rng.uniform(0.3, 1.0) * cfg.debris_amplitude * rng.choice([-1.0, 1.0])))
    n0 = cfg.proliferation.n0
    rmin, rmax = cfg.cell_radius
    phases = _stable_phases(rng, n0)
    cells = []
    for i in range(n0):
        cells.append(CellState(
            id=i,
            center=(rng.uniform(rmax, w - rmax), rng.uniform(rmax, h - rmax)),
            radius=rng.uniform(rmin, rmax),
            phase=float(min(phases[i], np.nextafter(1.0, 0.0))),
            orientation=rng.uniform(0, np.pi),
        ))
    return CultureScene(cells=cells, clock=0.0, rng=rng, background=bg, frame_size=(w, h),
                        cycle_frequency=cfg.proliferation.cycle_frequency, drift=cfg.drift,
                        phase_jitter=cfg.phase_jitter, max_cells=cfg.max_cells, next_id=n0)


def _clip_center(x, y, size):
    w, h = size
    return (float(np.clip(x, 0.0, w - 1.0)), float(np.clip(y, 0.0, h - 1.0)))


def advance_culture(scene: CultureScene, dt: float) -> CultureScene:
    """Advance the scene in place by ``dt`` hours and return it."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    rng = scene.rng
    f = scene.cycle_frequency
    just_below_one = float(np.nextafter(1.0, 0.0))
    population = len(scene.cells)
    out = []
    for cell in scene.cells:
        step = dt * f
        if scene.phase_jitter > 0 and step > 0:
            step = max(0.0, step * (1.0 + scene.phase_jitter * rng.standard_normal()))
        sd = scene.drift * math.sqrt(dt)
        dx, dy = rng.normal(0.0, sd, size=2) if sd > 0 else (0.0, 0.0)
        cx, cy = _clip_center(cell.center[0] + dx, cell.center[1] + dy, scene.frame_size)
        phase = cell.phase + step
        if phase < 1.0:
            out.append(CellState(cell.id, (cx, cy), cell.radius, phase, cell.orientation))
            continue
        if population >= scene.max_cells:
            # hold at the end of the cycle instead of dividing
            scene.saturated = True
            out.append(CellState(cell.id, (cx, cy), cell.radius, just_below_one, cell.orientation))
            continue
        population += 1
        # split along the orientation axis; daughters keep the phase overshoot
        rest = min(phase - 1.0, just_below_one)
        ux, uy = math.cos(cell.orientation), math.sin(cell.orientation)
        for sign in (1.0, -1.0):
            c = _clip_center(cx + sign * cell.radius * ux, cy + sign * cell.radius * uy, scene.frame_size)
            out.append(CellState(scene.next_id, c, cell.radius, rest, rng.uniform(0, np.pi)))
            scene.next_id += 1
    scene.cells = out
    scene.clock += dt
    return scene


@dataclass
class Frame:
    pixels: np.ndarray  # (H, W) in [0, 1]
    timestamp: float
    annotations: list[tuple[float, float]]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def count(self) -> int:
        return len(self.annotations)


def _cell_profile(d2):
    # bright core with a dark phase-contrast halo; d2 is squared distance in radius units
    return 0.38 * np.exp(-1.5 * d2) - 0.12 * np.exp(-((np.sqrt(d2) - 1.35) ** 2) / 0.08)


def _render_cell(img, cell: CellState, cfg: SimConfig):
    h, w = img.shape
    r = cell.radius
    ext = int(math.ceil(3.2 * r))
    cx, cy = cell.center
    x0, x1 = max(0, int(cx) - ext), min(w, int(cx) + ext + 2)
    y0, y1 = max(0, int(cy) - ext), min(h, int(cy) + ext + 2)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx - cx, yy - cy
    ux, uy = math.cos(cell.orientation), math.sin(cell.orientation)
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    p = cell.phase
    if p < cfg.elongate_at:
        img[y0:y1, x0:x1] += _cell_profile((along ** 2 + across ** 2) / r ** 2)
    elif p < cfg.pinch_at:
        s = (p - cfg.elongate_at) / (cfg.pinch_at - cfg.elongate_at)
        a, b = r * (1.0 + 0.45 * s), r * (1.0 - 0.2 * s)
        img[y0:y1, x0:x1] += _cell_profile(along ** 2 / a ** 2 + across ** 2 / b ** 2)
    else:
        s = (p - cfg.pinch_at) / (1.0 - cfg.pinch_at)
        sep = r * (0.55 + 0.4 * s)
        lobe = r * 0.78
        d_a = ((along - sep) ** 2 + across ** 2) / lobe ** 2
        d_b = ((along + sep) ** 2 + across ** 2) / lobe ** 2
        img[y0:y1, x0:x1] += np.maximum(_cell_profile(d_a), _cell_profile(d_b)) \
            + np.minimum(_cell_profile(d_a), _cell_profile(d_b)).clip(max=0.0)


def render_frame(scene: CultureScene, cfg: SimConfig) -> Frame:
    """Pure function of (scene, cfg): noise is seeded from cfg.seed and the clock."""
    w, h = cfg.frame_size
    bg = scene.background
    ys, xs = np.mgrid[0:h, 0:w]
    img = bg.base + bg.gradient[0] * (xs / max(w - 1, 1) - 0.5) + bg.gradient[1] * (ys / max(h - 1, 1) - 0.5)
    img = img.astype(np.float64)
    for x, y, rad, amp in bg.debris:
        img += amp * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * rad ** 2))
    for cell in scene.cells:
        _render_cell(img, cell, cfg)
    if bg.noise > 0:
        nrng = np.random.default_rng([cfg.seed, int(round(scene.clock * 1000))])
        img += nrng.normal(0.0, bg.noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    dots = [tuple(c.center) for c in scene.cells]
    return Frame(pixels=img, timestamp=scene.clock, annotations=dots)


def simulate(cfg: SimConfig):
    """Yield frames at the configured sampling cadence, starting at t=0."""
    scene = init_scene(cfg)
    for k in range(cfg.n_frames):
        if k:
            advance_culture(scene, cfg.sampling_interval)
        yield render_frame(scene, cfg)


# ---------------------------------------------------------------- files

def write_pgm(path: str | Path, pixels: np.ndarray):
    """Binary P5 greyscale, 8 bit, maxval 255."""
    img = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 file into float64 intensities in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.float64) / maxval


@dataclass
class FrameEntry:
    image: str
    annotation: str
    timestamp_h: float


@dataclass
class CultureEntry:
    name: str
    seed: int
    frames: list[FrameEntry]
    config: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    cultures: list[CultureEntry]
    root: Path = Path(".")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.cultures]

    def culture(self, name: str) -> CultureEntry:
        for c in self.cultures:
            if c.name == name:
                return c
        raise KeyError(name)

    def load_frames(self, name: str) -> list[Frame]:
        return [load_frame(self.root / fe.image, self.root / fe.annotation)
                for fe in self.culture(name).frames]

    def to_json(self) -> dict:
        return {"cultures": [
            {"name": c.name, "seed": c.seed, "config": c.config,
             "frames": [asdict(fe) for fe in c.frames]} for c in self.cultures]}

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        cultures = [CultureEntry(c["name"], c.get("seed", 0), [FrameEntry(**fe) for fe in c["frames"]],
                                 c.get("config", {})) for c in doc["cultures"]]
        return cls(cultures, path.parent)


def load_frame(image_path: str | Path, annotation_path: str | Path | None = None) -> Frame:
    pixels = read_pgm(image_path)
    ts, dots = 0.0, []
    if annotation_path is not None and Path(annotation_path).exists():
        doc = json.loads(Path(annotation_path).read_text())
        ts, dots = float(doc["timestamp_h"]), [tuple(d) for d in doc["dots"]]
    return Frame(pixels, ts, dots)


def generate_dataset(configs: list[SimConfig], out_dir: str | Path) -> DatasetManifest:
    """Write one directory per culture plus ``manifest.json`` in ``out_dir``."""
    if len(configs) < 2:
        raise ValueError("need at least two culture configs")
    seeds = [c.seed for c in configs]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"culture seeds must be distinct, got {seeds}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    cultures = []
    for i, cfg in enumerate(configs):
        name = cfg.name or f"culture{i + 1:02d}"
        cdir = out / name
        try:
            cdir.mkdir(exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {cdir}: {exc}") from exc
        entries = []
        for k, frame in enumerate(simulate(cfg)):
            img_rel = f"{name}/frame_{k:04d}.pgm"
            ann_rel = f"{name}/frame_{k:04d}.json"
            try:
                write_pgm(out / img_rel, frame.pixels)
                (out / ann_rel).write_text(json.dumps(
                    {"timestamp_h": frame.timestamp, "dots": [list(d) for d in frame.annotations]}))
            except OSError as exc:
                raise OSError(f"cannot write {out / img_rel}: {exc}") from exc
            entries.append(FrameEntry(img_rel, ann_rel, frame.timestamp))
        cultures.append(CultureEntry(name, cfg.seed, entries, cfg.to_dict()))
    manifest = DatasetManifest(cultures, out)
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1))
    return manifest


def default_configs(n: int = 5, seed: int = 0, **overrides) -> list[SimConfig]:
    """``n`` cultures with seeds derived from ``seed`` and mildly varied growth."""
    rng = np.random.default_rng(seed)
    configs = []
    for i in range(n):
        prolif = ProliferationParams(n0=int(rng.integers(6, 11)),
                                     cycle_frequency=float(rng.uniform(1 / 20, 1 / 14)))
        kw = dict(proliferation=prolif, seed=seed * 1000 + i + 1, name=f"culture{i + 1:02d}")
        kw.update(overrides)
        configs.append(SimConfig(**kw))
    return configs
