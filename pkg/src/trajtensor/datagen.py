"""Synthetic camera-network scenarios, labeling, multi-target grouping and
the on-disk dataset format.

Agents walk a corridor graph on a floorplan (metres) sampled at 5 Hz. A
camera sees an axis-aligned floor rectangle and projects agents inside it
to a normalized bounding box. One sample is emitted per departure event: the
last step an agent is visible in a camera before it is absent there, provided
it shows up in some view within the forecast horizon.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor_core import BoundingBox, build_trajectory_tensor, save_tensor

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SAMPLE_RATE_HZ = 5
TARGET_GRID = (16, 9)


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """``fov`` is ``(xmin, ymin, xmax, ymax)`` on the floor; ``view_axis`` is the
    floor direction the camera looks along (``+x``, ``-x``, ``+y``, ``-y``)."""

    id: int
    fov: tuple[float, float, float, float]
    view_axis: str = "+y"
    near_height: float = 0.6
    far_height: float = 0.2
    position: Optional[tuple[float, float]] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.fov
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"camera {self.id}: field of view must have positive area")
        if not 0 < self.far_height < self.near_height <= 1:
            raise ConfigError(f"camera {self.id}: need 0 < far_height < near_height <= 1")
        if self.view_axis not in ("+x", "-x", "+y", "-y"):
            raise ConfigError(f"camera {self.id}: bad view axis {self.view_axis!r}")
        if self.position is None:
            object.__setattr__(self, "position", (0.5 * (x0 + x1), 0.5 * (y0 + y1)))

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.fov
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class ScenarioConfig:
    cameras: list[CameraModel]
    nodes: dict[str, tuple[float, float]]
    edges: list[tuple[str, str]]
    agents: int = 40
    days: int = 10
    speed_range: tuple[float, float] = (1.1, 1.7)
    n: int = 10
    m: int = 60
    jitter: float = 0.005
    seed: int = 0
    # walk shape
    walk_edges: tuple[int, int] = (30, 60)
    lateral_spread: float = 1.2
    dwell_steps: tuple[int, int] = (0, 40)
    start_window: int = 2000
    spawn_nodes: Optional[list[str]] = None

    @property
    def k(self) -> int:
        return len(self.cameras)

    def validate(self) -> None:
        if self.agents < 1:
            raise ConfigError("scenario needs at least one agent")
        if self.days < 1:
            raise ConfigError("scenario needs at least one day")
        ids = [c.id for c in self.cameras]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"camera ids must be 1..k in order, got {ids}")
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ConfigError(f"edge {a}-{b} references an unknown node")
        if not self.nodes:
            raise ConfigError("corridor graph has no nodes")
        adj = _adjacency(self)
        start = next(iter(self.nodes))
        seen, stack = {start}, [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(self.nodes):
            raise ConfigError(f"corridor graph is disconnected: unreachable {sorted(set(self.nodes) - seen)}")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad speed range {self.speed_range}")
        for node in self.spawn_nodes or []:
            if node not in self.nodes:
                raise ConfigError(f"unknown spawn node {node!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["cameras"] = [CameraModel(**{**c, "fov": tuple(c["fov"]),
                                       "position": tuple(c["position"]) if c.get("position") else None})
                        for c in d["cameras"]]
        d["nodes"] = {k: tuple(v) for k, v in d["nodes"].items()}
        d["edges"] = [tuple(e) for e in d["edges"]]
        for key in ("speed_range", "walk_edges", "dwell_steps"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """H-shaped corridor with five cameras; cameras 4 and 5 overlap at the right junction."""
    nodes = {
        "LT": (0.0, 30.0), "LM": (0.0, 15.0), "LB": (0.0, 0.0),
        "RT": (30.0, 30.0), "RM": (30.0, 15.0), "RB": (30.0, 0.0),
    }
    edges = [("LT", "LM"), ("LM", "LB"), ("RT", "RM"), ("RM", "RB"), ("LM", "RM")]
    cameras = [
        CameraModel(1, (-2.0, 20.0, 2.0, 27.0), "+y"),
        CameraModel(2, (-2.0, 3.0, 2.0, 10.0), "-y"),
        CameraModel(3, (8.0, 13.0, 22.0, 17.0), "+x", near_height=0.5, far_height=0.15),
        CameraModel(4, (28.0, 13.0, 32.0, 26.0), "+y"),
        CameraModel(5, (28.0, 4.0, 32.0, 17.0), "-y"),
    ]
    cfg = ScenarioConfig(cameras=cameras, nodes=nodes, edges=edges, seed=seed)
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


def _adjacency(cfg: ScenarioConfig) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {name: [] for name in cfg.nodes}
    for a, b in cfg.edges:
        adj[a].append(b)
        adj[b].append(a)
    for name in adj:
        adj[name].sort()
    return adj


# --- projection -----------------------------------------------------------------


def project(
    position: tuple[float, float],
    camera: CameraModel,
    jitter: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Optional[BoundingBox]:
    """Image-space box of an agent at ``position``, or None outside the view.

    Depth along the view axis moves the box from the bottom of the frame
    (near edge, height ``near_height``) to the top (far edge, ``far_height``);
    the lateral axis maps to image x. Width is 0.4 x height.
    """
    x, y = position
    if not camera.contains(x, y):
        return None
    x0, y0, x1, y1 = camera.fov
    dx, dy = x1 - x0, y1 - y0
    depth, lateral = {
        "+y": ((y - y0) / dy, (x - x0) / dx),
        "-y": ((y1 - y) / dy, (x1 - x) / dx),
        "+x": ((x - x0) / dx, (y1 - y) / dy),
        "-x": ((x1 - x) / dx, (y - y0) / dy),
    }[camera.view_axis]
    near = camera.near_height
    bh = near + (camera.far_height - near) * depth
    bw = 0.4 * bh
    cy = near / 2 + (1.0 - depth) * (1.0 - near)
    cx = 0.2 * near + lateral * (1.0 - 0.4 * near)
    coords = np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
    if jitter > 0:
        if rng is None:
            raise ValueError("jitter needs an rng")
        coords = coords + rng.uniform(-jitter, jitter, size=4)
    coords = np.clip(np.round(coords, 5), 0.0, 1.0)
    return BoundingBox(*(float(v) for v in coords))


# --- samples ----------------------------------------------------------------------

TrackGrid = list[list[Optional[BoundingBox]]]


@dataclass
class MctfSample:
    sample_id: int
    day: int
    departure_camera: int
    departure_step: int
    inputs: TrackGrid  # k cameras x n steps
    future: TrackGrid  # k cameras x m steps

    @property
    def k(self) -> int:
        return len(self.inputs)

    def departure_track(self) -> np.ndarray:
        """(n, 4) boxes of the departure camera, zeros where absent."""
        rows = self.inputs[self.departure_camera - 1]
        return np.array([b.as_array() if b is not None else np.zeros(4) for b in rows])

    def input_tensor(self, w: int, h: int, sigma: float) -> np.ndarray:
        return build_trajectory_tensor(self.inputs, self.k, len(self.inputs[0]), w, h, sigma)

    def targets(self):
        return label(self.future)


def label(future: TrackGrid, grid: tuple[int, int] = TARGET_GRID):
    """(which, when, where) binary targets of a k x m future track grid."""
    k, m = len(future), len(future[0])
    when = np.array([[b is not None for b in row] for row in future], dtype=np.uint8)
    if not when.any():
        raise DatasetError("no future boxes in any camera")
    which = when.any(axis=1).astype(np.uint8)
    where = build_trajectory_tensor(future, k, m, grid[0], grid[1], 0.0).astype(np.uint8)
    return which, when, where


@dataclass
class Dataset:
    k: int
    n: int
    m: int
    samples: list[MctfSample]
    distances: np.ndarray
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def days(self) -> list[int]:
        return sorted({s.day for s in self.samples})

    def subset(self, samples: Sequence[MctfSample]) -> "Dataset":
        return Dataset(self.k, self.n, self.m, list(samples), self.distances, self.config)


# --- simulation -----------------------------------------------------------------------


def _walk(cfg: ScenarioConfig, adj, rng: np.random.Generator) -> list[str]:
    spawn = cfg.spawn_nodes or [n for n, nb in adj.items() if len(nb) <= 1] or sorted(cfg.nodes)
    node = spawn[rng.integers(len(spawn))]
    path, prev = [node], None
    lo, hi = cfg.walk_edges
    for _ in range(int(rng.integers(lo, hi + 1))):
        options = [nb for nb in adj[node] if nb != prev] or adj[node]
        if not options:
            break
        prev, node = node, options[rng.integers(len(options))]
        path.append(node)
    return path


def _positions(cfg: ScenarioConfig, path: list[str], speed: float, offset: float, rng) -> np.ndarray:
    """Per-step floor positions along the walk, including dwell at dead ends."""
    dt = 1.0 / SAMPLE_RATE_HZ
    step_len = speed * dt
    adj_deg = {name: 0 for name in cfg.nodes}
    for a, b in cfg.edges:
        adj_deg[a] += 1
        adj_deg[b] += 1
    pts = [np.array(cfg.nodes[path[0]], dtype=float)]
    carry = 0.0
    for i in range(len(path) - 1):
        a = np.array(cfg.nodes[path[i]], dtype=float)
        b = np.array(cfg.nodes[path[i + 1]], dtype=float)
        seg = b - a
        length = float(np.hypot(*seg))
        if length == 0:
            continue
        normal = np.array([-seg[1], seg[0]]) / length
        s = carry
        while s < length:
            pts.append(a + seg * (s / length) + normal * offset)
            s += step_len
        carry = s - length
        if i + 1 < len(path) - 1 and adj_deg[path[i + 1]] <= 1:
            lo, hi = cfg.dwell_steps
            pts.extend([b.copy()] * int(rng.integers(lo, hi + 1)))
    return np.array(pts)


def _observe(cfg: ScenarioConfig, pos: np.ndarray, rng) -> list[list[Optional[BoundingBox]]]:
    boxes = [[None] * len(pos) for _ in cfg.cameras]
    for t, (x, y) in enumerate(pos):
        for c, cam in enumerate(cfg.cameras):
            if cam.contains(x, y):
                boxes[c][t] = project((x, y), cam, cfg.jitter, rng)
    return boxes


def generate(cfg: ScenarioConfig, seed: Optional[int] = None) -> Dataset:
    """Simulate the scenario and return every labeled departure sample.

    Agents are spread round-robin over days; all randomness comes from
    ``seed`` (``cfg.seed`` when omitted).
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    adj = _adjacency(cfg)
    k, n, m = cfg.k, cfg.n, cfg.m
    samples: list[MctfSample] = []
    for agent in range(cfg.agents):
        day = agent % cfg.days
        start = int(rng.integers(0, max(cfg.start_window, 1)))
        speed = float(rng.uniform(*cfg.speed_range))
        offset = float(rng.uniform(-cfg.lateral_spread, cfg.lateral_spread))
        path = _walk(cfg, adj, rng)
        pos = _positions(cfg, path, speed, offset, rng)
        boxes = _observe(cfg, pos, rng)
        life = len(pos)
        for s in range(life - 1):
            for c in range(k):
                if boxes[c][s] is None or boxes[c][s + 1] is not None:
                    continue
                fut = [[boxes[j][t] if t < life else None for t in range(s + 1, s + 1 + m)] for j in range(k)]
                if not any(b is not None for row in fut for b in row):
                    continue
                inp = [[boxes[j][t] if t >= 0 else None for t in range(s - n + 1, s + 1)] for j in range(k)]
                samples.append(MctfSample(len(samples), day, c + 1, start + s, inp, fut))
    samples.sort(key=lambda sm: (sm.day, sm.departure_step, sm.departure_camera, sm.sample_id))
    for i, sm in enumerate(samples):
        sm.sample_id = i
    return Dataset(k, n, m, samples, distance_matrix(cfg.cameras), cfg.to_dict())


def distance_matrix(cameras: Sequence[CameraModel]) -> np.ndarray:
    pos = np.array([c.position for c in cameras], dtype=np.float64)
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


# --- multi-target grouping ----------------------------------------------------------------


@dataclass
class MultiTargetGroup:
    day: int
    bin_index: int
    samples: list[MctfSample]

    def __len__(self):
        return len(self.samples)

    def stacked_inputs(self, w: int, h: int, sigma: float) -> np.ndarray:
        """Inputs stacked along a leading batch axis: (b, k, n, w, h)."""
        return np.stack([s.input_tensor(w, h, sigma) for s in self.samples])


def group_multi_target(dataset: Dataset, bin_size: int = 10) -> list[MultiTargetGroup]:
    """Group samples departing in the same ``bin_size``-step window of the same day;
    singletons are dropped."""
    bins: dict[tuple[int, int], list[MctfSample]] = defaultdict(list)
    for s in dataset.samples:
        bins[(s.day, s.departure_step // bin_size)].append(s)
    return [MultiTargetGroup(day, b, members) for (day, b), members in sorted(bins.items()) if len(members) > 1]


# --- persistence -----------------------------------------------------------------------------


def _encode_grid(grid: TrackGrid) -> dict:
    out = {}
    for c, row in enumerate(grid, start=1):
        entries = [[t, b.x1, b.y1, b.x2, b.y2] for t, b in enumerate(row) if b is not None]
        if entries:
            out[str(c)] = entries
    return out


def _decode_grid(obj: dict, k: int, length: int) -> TrackGrid:
    grid: TrackGrid = [[None] * length for _ in range(k)]
    for cam, entries in obj.items():
        c = int(cam)
        if not 1 <= c <= k:
            raise ValueError(f"camera {c} outside 1..{k}")
        for t, x1, y1, x2, y2 in entries:
            if not 0 <= t < length:
                raise ValueError(f"timestep {t} outside 0..{length - 1}")
            grid[c - 1][t] = BoundingBox(x1, y1, x2, y2)
    return grid


def save_dataset(dataset: Dataset, out_dir: str | Path, cache_targets: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "k": dataset.k,
        "n": dataset.n,
        "m": dataset.m,
        "sample_count": len(dataset.samples),
        "distance_file": "distances.txt",
        "config": dataset.config,
    }
    (out / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    save_distance_matrix(out / "distances.txt", dataset.distances)
    with open(out / "samples.ndrec", "w") as f:
        for s in dataset.samples:
            rec = {
                "id": s.sample_id,
                "day": s.day,
                "camera": s.departure_camera,
                "step": s.departure_step,
                "inputs": _encode_grid(s.inputs),
                "future": _encode_grid(s.future),
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    if cache_targets:
        tdir = out / "targets"
        tdir.mkdir(exist_ok=True)
        for s in dataset.samples:
            which, when, where = s.targets()
            save_tensor(tdir / f"{s.sample_id}.which.tten", which)
            save_tensor(tdir / f"{s.sample_id}.when.tten", when)
            save_tensor(tdir / f"{s.sample_id}.where.tten", where)
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing meta file") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'meta'}: malformed JSON ({exc})") from None
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{root}: schema version {meta.get('schema_version')} != {SCHEMA_VERSION}")
    k, n, m = meta["k"], meta["n"], meta["m"]
    distances = load_distance_matrix(root / meta.get("distance_file", "distances.txt"))
    if distances.shape != (k, k):
        raise DatasetError(f"distance matrix is {distances.shape}, expected ({k}, {k})")
    samples = []
    rec_path = root / "samples.ndrec"
    with open(rec_path) as f:
        text = f.read()
    if text and not text.endswith("\n"):
        raise DatasetError(f"{rec_path}:{text.count(chr(10)) + 1}: truncated record (no trailing newline)")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            samples.append(
                MctfSample(
                    int(rec["id"]), int(rec["day"]), int(rec["camera"]), int(rec["step"]),
                    _decode_grid(rec["inputs"], k, n), _decode_grid(rec["future"], k, m),
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{rec_path}:{lineno}: malformed record ({exc})") from None
    if len(samples) != meta.get("sample_count", len(samples)):
        raise DatasetError(f"{rec_path}: expected {meta['sample_count']} records, found {len(samples)}")
    return Dataset(k, n, m, samples, distances, meta.get("config", {}))


def save_distance_matrix(path: str | Path, matrix: np.ndarray) -> None:
    np.savetxt(path, matrix, fmt="%.6f")


def load_distance_matrix(path: str | Path) -> np.ndarray:
    try:
        mat = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read distance matrix {path}: {exc}") from None
    if mat.shape[0] != mat.shape[1]:
        raise DatasetError(f"distance matrix {path} is not square: {mat.shape}")
    if np.any(mat < 0) or np.any(np.diag(mat) != 0) or not np.allclose(mat, mat.T):
        raise DatasetError(f"distance matrix {path} must be symmetric, non-negative, zero-diagonal")
    return mat
