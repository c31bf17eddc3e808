"""Procedural 2D navigation world.

A square world of axis-aligned rectangular obstacles over a smooth value-noise
landmark field. Observations are egocentric forward-facing feature crops; the
kinematics clamp motion at obstacle contact. Also owns trajectory datasets
(generation, binary file format) and raster shortest paths.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import zlib
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .config import DatasetConfig, WorldConfig
from .embedding import ActionLimits, ActionTriple, wrap_angle
from .errors import InputError, NoPathError, WorldGenError

__all__ = [
    "Pose",
    "Rect",
    "World",
    "Trajectory",
    "TrajectoryDataset",
    "Episode",
    "generate_world",
    "step",
    "render_observation",
    "random_free_pose",
    "generate_dataset",
    "replay_poses",
    "shortest_path_length",
    "grid_distance",
    "save_dataset",
    "load_dataset",
    "DATASET_MAGIC",
]

DATASET_MAGIC = b"LSNAVD1"
DATASET_VERSION = 1
_CONTACT_BACKOFF = 1e-9


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @staticmethod
    def from_array(arr) -> "Pose":
        return Pose(float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        # strict interior: contact points on the boundary count as free
        return self.x0 < x < self.x1 and self.y0 < y < self.y1

    def covers(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


class World:
    def __init__(self, seed: int, cfg: WorldConfig, obstacles: list[Rect], field: np.ndarray):
        self.seed = seed
        self.cfg = cfg
        self.obstacles = obstacles
        self.field = field  # (cells, cells, channels-1), values in [0, 1]
        self._raster: np.ndarray | None = None

    @property
    def size(self) -> float:
        return self.cfg.size

    def is_free(self, x: float, y: float) -> bool:
        if not (0.0 <= x <= self.size and 0.0 <= y <= self.size):
            return False
        return not any(r.contains(x, y) for r in self.obstacles)

    def raster(self) -> np.ndarray:
        """Boolean occupancy grid of cell centers (True = free), cached."""
        if self._raster is None:
            n = int(round(self.size * self.cfg.raster_per_unit))
            centers = (np.arange(n) + 0.5) / self.cfg.raster_per_unit
            xs, ys = np.meshgrid(centers, centers, indexing="ij")
            free = np.ones((n, n), dtype=bool)
            for r in self.obstacles:
                free &= ~((xs > r.x0) & (xs < r.x1) & (ys > r.y0) & (ys < r.y1))
            self._raster = free
        return self._raster


def _value_noise(rng: np.random.Generator, cells: int, octaves: int) -> np.ndarray:
    """Smooth noise in [0, 1]: bilinear octaves with halving amplitude."""
    out = np.zeros((cells, cells))
    amp_total = 0.0
    for o in range(octaves):
        res = min(4 * 2**o, cells)
        coarse = rng.uniform(0.0, 1.0, (res + 1, res + 1))
        pos = np.linspace(0.0, res, cells)
        i0 = np.minimum(pos.astype(int), res - 1)
        frac = pos - i0
        top = coarse[i0][:, i0] * (1 - frac)[None, :] + coarse[i0][:, i0 + 1] * frac[None, :]
        bot = coarse[i0 + 1][:, i0] * (1 - frac)[None, :] + coarse[i0 + 1][:, i0 + 1] * frac[None, :]
        layer = top * (1 - frac)[:, None] + bot * frac[:, None]
        amp = 0.5**o
        out += amp * layer
        amp_total += amp
    out /= amp_total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _flood_fill_fraction(free: np.ndarray) -> float:
    """Fraction of free cells reachable (4-connected) from the first free cell."""
    total = int(free.sum())
    if total == 0:
        return 0.0
    start = np.argwhere(free)[0]
    reached = np.zeros_like(free)
    reached[start[0], start[1]] = True
    frontier = True
    while frontier:
        grown = reached.copy()
        grown[1:, :] |= reached[:-1, :]
        grown[:-1, :] |= reached[1:, :]
        grown[:, 1:] |= reached[:, :-1]
        grown[:, :-1] |= reached[:, 1:]
        grown &= free
        frontier = bool((grown & ~reached).any())
        reached = grown
    return float(reached.sum()) / total


def generate_world(seed: int, cfg: WorldConfig, channels: int = 3) -> World:
    """Deterministic world for a seed: obstacles validated by flood fill."""
    field_channels = max(1, channels - 1)
    for attempt in range(cfg.connect_retries):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        field = np.stack(
            [_value_noise(rng, cfg.field_cells, cfg.field_octaves) for _ in range(field_channels)],
            axis=-1,
        )
        obstacles = []
        for _ in range(cfg.obstacle_count):
            w = rng.uniform(cfg.obstacle_min, cfg.obstacle_max)
            h = rng.uniform(cfg.obstacle_min, cfg.obstacle_max)
            x0 = rng.uniform(0.0, cfg.size - w)
            y0 = rng.uniform(0.0, cfg.size - h)
            obstacles.append(Rect(x0, y0, x0 + w, y0 + h))
        world = World(seed, cfg, obstacles, field)
        if _flood_fill_fraction(world.raster()) >= cfg.min_connectivity:
            return world
    raise WorldGenError(
        f"no connected world found for seed {seed} after {cfg.connect_retries} attempts"
    )


# ---------------------------------------------------------------------------
# kinematics


def _first_hit(world: World, p0: np.ndarray, delta: np.ndarray) -> float:
    """Earliest t in [0, 1] where p0 + t*delta enters an obstacle or leaves the world."""
    t_hit = 1.0
    size = world.size
    for axis in range(2):
        d = delta[axis]
        if d > 0:
            t_hit = min(t_hit, (size - p0[axis]) / d)
        elif d < 0:
            t_hit = min(t_hit, (0.0 - p0[axis]) / d)
    for r in world.obstacles:
        lo = np.array([r.x0, r.y0])
        hi = np.array([r.x1, r.y1])
        t_enter, t_exit = 0.0, t_hit
        ok = True
        for axis in range(2):
            d = delta[axis]
            if d == 0.0:
                if not (lo[axis] < p0[axis] < hi[axis]):
                    ok = False
                    break
                continue
            ta = (lo[axis] - p0[axis]) / d
            tb = (hi[axis] - p0[axis]) / d
            if ta > tb:
                ta, tb = tb, ta
            t_enter = max(t_enter, ta)
            t_exit = min(t_exit, tb)
        if ok and t_enter <= t_exit and t_enter < t_hit:
            t_hit = max(t_enter, 0.0)
    return t_hit


def step(world: World, pose: Pose, a: ActionTriple) -> Pose:
    """Body-frame translation rotated into the world, then heading update.

    Motion into an obstacle (or out of bounds) is clamped just before contact.
    """
    limits = ActionLimits(world.cfg.max_step, world.cfg.max_turn)
    if not limits.contains(a):
        raise InputError(f"action {a} exceeds world limits; clamp before stepping")
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    delta = np.array([c * a.x - s * a.y, s * a.x + c * a.y])
    p0 = pose.position()
    norm = float(np.hypot(delta[0], delta[1]))
    if norm > 0.0:
        t = _first_hit(world, p0, delta)
        if t < 1.0:
            t = max(0.0, t - _CONTACT_BACKOFF / norm)
        p0 = p0 + t * delta
    return Pose(float(p0[0]), float(p0[1]), wrap_angle(pose.heading + a.theta))


# ---------------------------------------------------------------------------
# rendering


def _sample_field(world: World, points: np.ndarray) -> np.ndarray:
    """Bilinear landmark-field sample at world points (N, 2); 0 outside bounds."""
    cells = world.field.shape[0]
    scaled = points / world.size * (cells - 1)
    inside = (
        (points[:, 0] >= 0.0)
        & (points[:, 0] <= world.size)
        & (points[:, 1] >= 0.0)
        & (points[:, 1] <= world.size)
    )
    scaled = np.clip(scaled, 0.0, cells - 1 - 1e-9)
    i0 = scaled.astype(int)
    frac = scaled - i0
    i1 = np.minimum(i0 + 1, cells - 1)
    f = world.field
    fx, fy = frac[:, 0:1], frac[:, 1:2]
    out = (
        f[i0[:, 0], i0[:, 1]] * (1 - fx) * (1 - fy)
        + f[i1[:, 0], i0[:, 1]] * fx * (1 - fy)
        + f[i0[:, 0], i1[:, 1]] * (1 - fx) * fy
        + f[i1[:, 0], i1[:, 1]] * fx * fy
    )
    out[~inside] = 0.0
    return out


def render_observation(world: World, pose: Pose, grid: int = 16, channels: int = 3) -> np.ndarray:
    """Egocentric forward-facing crop: landmark channels plus an obstacle mask."""
    view = world.cfg.view_range
    fwd = (np.arange(grid) + 0.5) / grid * view
    lat = ((np.arange(grid) + 0.5) / grid - 0.5) * view
    u, v = np.meshgrid(fwd, lat, indexing="ij")
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    px = pose.x + c * u - s * v
    py = pose.y + s * u + c * v
    points = np.stack([px.ravel(), py.ravel()], axis=1)

    landmark = _sample_field(world, points).reshape(grid, grid, -1)
    xs, ys = points[:, 0], points[:, 1]
    blocked = (xs < 0.0) | (xs > world.size) | (ys < 0.0) | (ys > world.size)
    for r in world.obstacles:
        blocked |= (xs > r.x0) & (xs < r.x1) & (ys > r.y0) & (ys < r.y1)
    obs = np.concatenate([landmark, blocked.reshape(grid, grid, 1).astype(np.float64)], axis=-1)
    want = channels
    if obs.shape[-1] != want:
        raise InputError(f"world field provides {obs.shape[-1]} channels, config wants {want}")
    return obs


def random_free_pose(world: World, rng: np.random.Generator, clearance: float = 0.3) -> Pose:
    size = world.size
    for _ in range(10_000):
        x = rng.uniform(clearance, size - clearance)
        y = rng.uniform(clearance, size - clearance)
        if all(
            not r.contains(x, y)
            and not (r.x0 - clearance < x < r.x1 + clearance and r.y0 - clearance < y < r.y1 + clearance)
            for r in world.obstacles
        ):
            return Pose(x, y, float(rng.uniform(-math.pi, math.pi)))
    raise WorldGenError("could not sample a free pose; world too crowded")


# ---------------------------------------------------------------------------
# trajectory datasets


@dataclass
class Trajectory:
    start: Pose
    poses: list[Pose]                  # length n
    observations: np.ndarray           # (n, G, G, C) float32
    actions: np.ndarray                # (n-1, 3) float64; action i maps frame i -> i+1


@dataclass
class TrajectoryDataset:
    grid: int
    channels: int
    traj_len: int
    world_seed: int
    trajectories: list[Trajectory] = dataclass_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)


def _goal_directed_action(pose: Pose, goal: Pose, limits: ActionLimits,
                          rng: np.random.Generator) -> ActionTriple:
    dx, dy = goal.x - pose.x, goal.y - pose.y
    dist = math.hypot(dx, dy)
    bearing = wrap_angle(math.atan2(dy, dx) - pose.heading)
    theta = min(max(bearing, -limits.max_turn), limits.max_turn)
    forward = min(limits.max_step, dist) * max(0.0, math.cos(bearing))
    jitter = rng.uniform(-0.05, 0.05)
    return limits.clamp(ActionTriple(forward, jitter, theta))


def generate_dataset(
    world: World,
    num_traj: int,
    traj_len: int,
    seed: int,
    dataset_cfg: DatasetConfig | None = None,
    grid: int = 16,
    channels: int = 3,
    policy=None,
) -> TrajectoryDataset:
    """Roll trajectories with a smooth random walk plus goal-directed episodes.

    ``policy``, when given, is called as policy(pose, prev_action, rng) and
    must return an in-limit ActionTriple; it replaces the built-in mix.
    """
    cfg = dataset_cfg or DatasetConfig()
    if traj_len < 2:
        raise InputError("trajectories need at least 2 frames")
    limits = ActionLimits(world.cfg.max_step, world.cfg.max_turn)
    rng = np.random.default_rng(np.random.SeedSequence([seed, world.seed]))
    n_goal = int(round(cfg.goal_fraction * num_traj)) if policy is None else 0

    dataset = TrajectoryDataset(grid, channels, traj_len, world.seed)
    for i in range(num_traj):
        pose = random_free_pose(world, rng)
        goal = random_free_pose(world, rng) if i < n_goal else None
        poses = [pose]
        observations = [render_observation(world, pose, grid, channels)]
        actions = np.zeros((traj_len - 1, 3))
        prev = ActionTriple(0.0, 0.0, 0.0)
        for t in range(traj_len - 1):
            if policy is not None:
                a = policy(pose, prev, rng)
            elif goal is not None:
                a = _goal_directed_action(pose, goal, limits, rng)
            else:
                noise = np.array([
                    rng.uniform(-limits.max_step, limits.max_step),
                    rng.uniform(-limits.max_step, limits.max_step) * 0.3,
                    rng.uniform(-limits.max_turn, limits.max_turn),
                ])
                blended = cfg.momentum * prev.as_array() + (1.0 - cfg.momentum) * noise
                a = limits.clamp(ActionTriple.from_array(blended))
            actions[t] = a.as_array()
            prev = a
            pose = step(world, pose, a)
            poses.append(pose)
            observations.append(render_observation(world, pose, grid, channels))
        dataset.trajectories.append(
            Trajectory(
                start=poses[0],
                poses=poses,
                observations=np.asarray(observations, dtype=np.float32),
                actions=actions,
            )
        )
    return dataset


def replay_poses(world: World, start: Pose, actions: np.ndarray) -> list[Pose]:
    poses = [start]
    pose = start
    for row in actions:
        pose = step(world, pose, ActionTriple.from_array(row))
        poses.append(pose)
    return poses


def save_dataset(path: str | Path, dataset: TrajectoryDataset) -> None:
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack(
        "<IIIIIQ",
        DATASET_VERSION,
        len(dataset.trajectories),
        dataset.grid,
        dataset.channels,
        dataset.traj_len,
        dataset.world_seed,
    )
    for traj in dataset.trajectories:
        payload = bytearray()
        payload += struct.pack("<3d", traj.start.x, traj.start.y, traj.start.heading)
        payload += np.ascontiguousarray(traj.observations, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(traj.actions, dtype="<f8").tobytes()
        buf += payload
        buf += struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path, world: World | None = None) -> TrajectoryDataset:
    """Read a dataset file; pose traces are rebuilt by replaying actions.

    Pass the generating world to recover pose traces; without it the poses
    list holds only the start pose.
    """
    raw = Path(path).read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise InputError(f"{path}: bad magic, not a trajectory dataset")
    off = len(DATASET_MAGIC)
    version, count, grid, channels, traj_len, world_seed = struct.unpack_from("<IIIIIQ", raw, off)
    off += struct.calcsize("<IIIIIQ")
    if version != DATASET_VERSION:
        raise InputError(f"{path}: unsupported dataset version {version}")
    dataset = TrajectoryDataset(grid, channels, traj_len, world_seed)
    obs_bytes = traj_len * grid * grid * channels * 4
    act_bytes = (traj_len - 1) * 3 * 8
    payload_len = 24 + obs_bytes + act_bytes
    for _ in range(count):
        if off + payload_len + 4 > len(raw):
            raise InputError(f"{path}: truncated dataset file")
        payload = raw[off : off + payload_len]
        off += payload_len
        (crc,) = struct.unpack_from("<I", raw, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise InputError(f"{path}: CRC mismatch in trajectory record")
        sx, sy, sh = struct.unpack_from("<3d", payload, 0)
        obs = np.frombuffer(payload, dtype="<f4", count=obs_bytes // 4, offset=24)
        obs = obs.reshape(traj_len, grid, grid, channels).astype(np.float32)
        actions = np.frombuffer(payload, dtype="<f8", count=(traj_len - 1) * 3,
                                offset=24 + obs_bytes).reshape(traj_len - 1, 3).copy()
        start = Pose(sx, sy, sh)
        poses = replay_poses(world, start, actions) if world is not None else [start]
        dataset.trajectories.append(Trajectory(start, poses, obs, actions))
    return dataset


# ---------------------------------------------------------------------------
# shortest paths


def _cell_of(world: World, x: float, y: float) -> tuple[int, int]:
    n = world.raster().shape[0]
    res = world.cfg.raster_per_unit
    return min(int(x * res), n - 1), min(int(y * res), n - 1)


def _nearest_free_cell(free: np.ndarray, cell: tuple[int, int]) -> tuple[int, int]:
    if free[cell]:
        return cell
    n = free.shape[0]
    for radius in range(1, 6):
        best = None
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                i, j = cell[0] + di, cell[1] + dj
                if 0 <= i < n and 0 <= j < n and free[i, j]:
                    d = di * di + dj * dj
                    if best is None or d < best[0]:
                        best = (d, (i, j))
        if best is not None:
            return best[1]
    raise NoPathError("pose lies deep inside an obstacle on the raster")


_NEIGHBORS = [
    (-1, -1, math.sqrt(2)), (-1, 0, 1.0), (-1, 1, math.sqrt(2)),
    (0, -1, 1.0), (0, 1, 1.0),
    (1, -1, math.sqrt(2)), (1, 0, 1.0), (1, 1, math.sqrt(2)),
]


def _astar_cells(world: World, start_cell, goal_cell) -> list[tuple[int, int]]:
    """8-connected A* on the occupancy raster (octile heuristic, cell units)."""
    free = world.raster()
    n = free.shape[0]
    start_cell = _nearest_free_cell(free, start_cell)
    goal_cell = _nearest_free_cell(free, goal_cell)

    def heuristic(c):
        di, dj = abs(c[0] - goal_cell[0]), abs(c[1] - goal_cell[1])
        return max(di, dj) + (math.sqrt(2) - 1.0) * min(di, dj)

    dist = {start_cell: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    counter = 0
    heap = [(heuristic(start_cell), counter, start_cell)]
    done = set()
    while heap:
        _, _, cell = heapq.heappop(heap)
        if cell in done:
            continue
        if cell == goal_cell:
            path = [cell]
            while cell in parent:
                cell = parent[cell]
                path.append(cell)
            return path[::-1]
        done.add(cell)
        d0 = dist[cell]
        for di, dj, w in _NEIGHBORS:
            i, j = cell[0] + di, cell[1] + dj
            if not (0 <= i < n and 0 <= j < n) or not free[i, j]:
                continue
            nd = d0 + w
            nb = (i, j)
            if nd < dist.get(nb, math.inf) - 1e-12:
                dist[nb] = nd
                parent[nb] = cell
                counter += 1
                heapq.heappush(heap, (nd + heuristic(nb), counter, nb))
    raise NoPathError("goal unreachable from start on the free-space raster")


def _cell_center(world: World, cell: tuple[int, int]) -> np.ndarray:
    res = world.cfg.raster_per_unit
    return np.array([(cell[0] + 0.5) / res, (cell[1] + 0.5) / res])


def grid_distance(world: World, start: Pose, goal: Pose) -> float:
    """Raw raster path length: start -> cell centers -> goal, no smoothing."""
    cells = _astar_cells(world, _cell_of(world, start.x, start.y), _cell_of(world, goal.x, goal.y))
    pts = [start.position()] + [_cell_center(world, c) for c in cells] + [goal.position()]
    return float(sum(np.hypot(*(b - a)) for a, b in zip(pts, pts[1:])))


def _segment_clear(world: World, p0: np.ndarray, p1: np.ndarray) -> bool:
    return _first_hit(world, p0, p1 - p0) >= 1.0


def shortest_path_length(world: World, start: Pose, goal: Pose) -> float:
    """Any-angle shortest path length: raster search plus line-of-sight pruning.

    Always >= the Euclidean start-goal distance; equals it in an empty world.
    """
    if not world.is_free(start.x, start.y) or not world.is_free(goal.x, goal.y):
        raise InputError("start and goal must lie in free space")
    p0, p1 = start.position(), goal.position()
    if _segment_clear(world, p0, p1):
        return float(np.hypot(*(p1 - p0)))
    cells = _astar_cells(world, _cell_of(world, start.x, start.y), _cell_of(world, goal.x, goal.y))
    pts = [p0] + [_cell_center(world, c) for c in cells] + [p1]
    # greedy line-of-sight shortcutting over the waypoint chain
    pruned = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segment_clear(world, pts[i], pts[j]):
            j -= 1
        pruned.append(pts[j])
        i = j
    return float(sum(np.hypot(*(b - a)) for a, b in zip(pruned, pruned[1:])))


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """One navigation run with everything SR/SPL and the plots need."""

    start: Pose
    goal: Pose
    outcome: str                      # "success" | "timeout" | "error"
    actions: list[ActionTriple]
    poses: list[Pose]
    executed_length: float
    shortest_length: float
    goal_observation: np.ndarray | None = None

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_json(self) -> str:
        record = {
            "start": list(self.start.as_array()),
            "goal": list(self.goal.as_array()),
            "outcome": self.outcome,
            "actions": [list(a.as_array()) for a in self.actions],
            "poses": [list(p.as_array()) for p in self.poses],
            "executed_length": self.executed_length,
            "shortest_length": self.shortest_length,
        }
        return json.dumps(record, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "Episode":
        rec = json.loads(line)
        return Episode(
            start=Pose.from_array(rec["start"]),
            goal=Pose.from_array(rec["goal"]),
            outcome=rec["outcome"],
            actions=[ActionTriple.from_array(a) for a in rec["actions"]],
            poses=[Pose.from_array(p) for p in rec["poses"]],
            executed_length=float(rec["executed_length"]),
            shortest_length=float(rec["shortest_length"]),
        )


def path_length(poses: list[Pose]) -> float:
    return float(sum(math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(poses, poses[1:])))
