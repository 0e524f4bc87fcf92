"""Synthetic moving-point scenarios, scenario files, and dense-grid KDE oracles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .kernel import Kernel, kde_eval, make_kernel
from .motion import MovingPoint, Segment, check_in_domain

DEFAULT_RESOLUTION = 512
MARGIN = 1.0  # one kernel width, so every support stays inside the domain
KERNEL_NAMES = {"cone": "cone", "pyramid": "pyramid", "gaussian": "truncated-gaussian",
                "truncated-gaussian": "truncated-gaussian"}


class ScenarioError(ValueError):
    """Malformed scenario input; the message names the offending line when known."""


@dataclass
class Scenario:
    points: list
    kernel: Kernel
    D: float
    T: float
    epsilon: float = 0.5
    seed: int = 0
    sigma: float = 1.0

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.kernel.kind == other.kernel.kind and self.D == other.D and self.T == other.T
                and self.sigma == other.sigma
                and [(p.id, p.segments) for p in self.points] == [(p.id, p.segments) for p in other.points])

    def positions(self, t):
        return np.array([p.position(t) for p in self.points], dtype=float).reshape(-1, 2)

    def validate(self, margin=0.0):
        check_in_domain(self.points, self.D, 0.0, self.T, margin=margin)
        return self

    def max_speed(self):
        return max((math.hypot(s.vx, s.vy) for p in self.points for s in p.segments), default=0.0)


def generate(spec):
    """Clustered linear trajectories from ``{n, clusters, speed, D, T, seed}``.

    Optional keys: ``spread`` (cluster std), ``kernel``, ``epsilon``,
    ``centers`` and ``directions`` (one unit vector per cluster).  Each
    cluster drifts with a common velocity of magnitude ``speed`` plus a
    small per-point jitter.  Specs whose points would leave
    ``[1, D - 1]^2`` during ``[0, T]`` are rejected.
    """
    n = int(spec["n"])
    if n < 1:
        raise ValueError("n must be at least 1")
    k = int(spec.get("clusters", 1))
    if not 1 <= k <= n:
        raise ValueError("clusters must lie in [1, n]")
    D = float(spec.get("D", 8.0))
    T = float(spec.get("T", 1.0))
    speed = float(spec.get("speed", 0.0))
    seed = int(spec.get("seed", 0))
    spread = float(spec.get("spread", 0.3))
    if D <= 2 * MARGIN or T < 0 or speed < 0 or spread < 0:
        raise ValueError("need D > 2, T >= 0, speed >= 0, spread >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = MARGIN + 2 * spread, D - MARGIN - 2 * spread
    if "centers" in spec:
        centers = np.asarray(spec["centers"], dtype=float).reshape(k, 2)
    elif k == 1:
        centers = np.full((1, 2), D / 2)
    else:
        if lo >= hi:
            raise ValueError("spread too large for the domain")
        centers = rng.uniform(lo, hi, size=(k, 2))
    if "directions" in spec:
        dirs = np.asarray(spec["directions"], dtype=float).reshape(k, 2)
    else:
        ang = rng.uniform(0, 2 * np.pi, size=k)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    label = np.arange(n) % k
    offs = rng.normal(0.0, spread, size=(n, 2)) if n > 1 else np.zeros((1, 2))
    jitter = rng.normal(0.0, 0.1 * speed, size=(n, 2))
    pos = centers[label] + offs
    vel = speed * dirs[label] + jitter
    points = [MovingPoint.linear(i, float(pos[i, 0]), float(pos[i, 1]), float(vel[i, 0]), float(vel[i, 1]))
              for i in range(n)]
    kern = make_kernel(KERNEL_NAMES[spec.get("kernel", "pyramid")])
    sc = Scenario(points, kern, D, T, float(spec.get("epsilon", 0.5)), seed)
    try:
        sc.validate(margin=MARGIN)
    except ValueError as e:
        raise ValueError(f"infeasible scenario spec: {e}") from None
    return sc


def reference_scenario(seed=0):
    """Two separated clusters of 25 points each, slow linear drift, pyramid kernel.

    Each cluster's peak has persistence close to 0.26, so both peaks count
    as persistent for any epsilon below about 0.13.
    """
    return generate({"n": 50, "clusters": 2, "speed": 0.5, "D": 8.0, "T": 1.0, "seed": seed,
                     "spread": 0.25, "centers": [[2.75, 4.0], [5.25, 4.0]],
                     "directions": [[0.0, 1.0], [0.0, -1.0]], "kernel": "pyramid", "epsilon": 0.5})


def merge_scenario(seed=0, n=40, T=1.0):
    """Two clusters that approach head-on and coalesce into one around ``t = 0.75 T``."""
    if T <= 0:
        raise ValueError("merge scenario needs T > 0")
    gap = 3.0
    return generate({"n": n, "clusters": 2, "speed": gap / 2 / (0.75 * T), "D": 8.0, "T": T, "seed": seed,
                     "spread": 0.12, "centers": [[4.0 - gap / 2, 4.0], [4.0 + gap / 2, 4.0]],
                     "directions": [[1.0, 0.0], [-1.0, 0.0]], "kernel": "pyramid", "epsilon": 0.5})


# -- rasterization --------------------------------------------------------------

@dataclass
class RasterKde:
    resolution: int
    D: float
    t: float
    heights: np.ndarray  # [ix, iy] at pixel centers
    slack: float  # lipschitz constant times pixel diagonal

    @property
    def pixel(self):
        return self.D / self.resolution

    def centers(self):
        return (np.arange(self.resolution) + 0.5) * self.pixel

    def center_of(self, index):
        i, j = divmod(int(index), self.resolution)
        return (i + 0.5) * self.pixel, (j + 0.5) * self.pixel


def pixel_centers(D, resolution):
    c = (np.arange(resolution) + 0.5) * D / resolution
    return np.meshgrid(c, c, indexing="ij")


def rasterize(scenario, t, resolution=DEFAULT_RESOLUTION):
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    X, Y = pixel_centers(scenario.D, resolution)
    H = kde_eval(scenario.points, scenario.kernel, t, X, Y)
    slack = scenario.kernel.lipschitz * math.sqrt(2) * scenario.D / resolution
    return RasterKde(resolution, scenario.D, float(t), H, slack)


# -- scenario files ----------------------------------------------------------------

def to_dict(scenario):
    return {
        "D": scenario.D * scenario.sigma,
        "T": scenario.T,
        "sigma": scenario.sigma,
        "kernel": "gaussian" if scenario.kernel.kind == "truncated-gaussian" else scenario.kernel.kind,
        "points": [{"id": p.id, "segments": [{"t": s.t, "x": s.x * scenario.sigma, "y": s.y * scenario.sigma,
                                               "vx": s.vx * scenario.sigma, "vy": s.vy * scenario.sigma}
                                              for s in p.segments]} for p in scenario.points],
    }


def dumps(scenario):
    """Serialize with one point per line so schema errors can cite line numbers."""
    d = to_dict(scenario)
    head = {k: v for k, v in d.items() if k != "points"}
    lines = ["{"]
    for k in sorted(head):
        lines.append(f"  {json.dumps(k)}: {json.dumps(head[k])},")
    lines.append('  "points": [')
    pts = [json.dumps(p, sort_keys=True) for p in d["points"]]
    lines += ["    " + p + ("," if i < len(pts) - 1 else "") for i, p in enumerate(pts)]
    lines += ["  ]", "}"]
    return "\n".join(lines) + "\n"


def save(scenario, path):
    with open(path, "w") as fh:
        fh.write(dumps(scenario))


QD, QK, QP = '"D"', '"kernel"', '"points"'


def _line_of(text, needle, start=0):
    pos = text.find(needle, start)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


def loads(text, sigma=None, epsilon=0.5, seed=0):
    """Parse a scenario file; coordinates are divided by ``sigma`` so the kernel has unit width."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"line {e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(d, dict):
        raise ScenarioError("line 1: top level must be an object")
    for key in ("D", "T", "points"):
        if key not in d:
            raise ScenarioError(f"line 1: missing field '{key}'")
    s = float(sigma if sigma is not None else d.get("sigma", 1.0))
    if not s > 0:
        raise ScenarioError("sigma must be positive")
    D, T = d["D"], d["T"]
    if not isinstance(D, (int, float)) or not isinstance(T, (int, float)) or D <= 0 or T < 0:
        raise ScenarioError(f"line {_line_of(text, QD)}: D must be positive and T non-negative")
    kind = d.get("kernel", "pyramid")
    if kind not in KERNEL_NAMES:
        raise ScenarioError(f"line {_line_of(text, QK)}: unknown kernel '{kind}'")
    if not isinstance(d["points"], list) or not d["points"]:
        raise ScenarioError(f"line {_line_of(text, QP)}: points must be a non-empty list")
    points, seen = [], set()
    cursor = 0
    for p in d["points"]:
        pid = p.get("id") if isinstance(p, dict) else None
        where = _line_of(text, f'"id": {json.dumps(pid)}', cursor) if pid is not None else None
        if where is None:
            where = _line_of(text, "{", cursor + 1) or 1
        else:
            cursor = text.find(f'"id": {json.dumps(pid)}', cursor)
        if not isinstance(p, dict) or not isinstance(pid, int) or isinstance(pid, bool):
            raise ScenarioError(f"line {where}: every point needs an integer 'id'")
        if pid in seen:
            raise ScenarioError(f"line {where}: duplicate point id {pid}")
        seen.add(pid)
        segs = p.get("segments")
        if not isinstance(segs, list) or not segs:
            raise ScenarioError(f"line {where}: point {pid} has no segments")
        parsed = []
        for g in segs:
            if not isinstance(g, dict) or any(not isinstance(g.get(f), (int, float)) or isinstance(g.get(f), bool)
                                              for f in ("t", "x", "y", "vx", "vy")):
                raise ScenarioError(f"line {where}: point {pid} segment needs numeric t, x, y, vx, vy")
            parsed.append(Segment(float(g["t"]), g["x"] / s, g["y"] / s, g["vx"] / s, g["vy"] / s))
        if parsed[0].t > 0:
            raise ScenarioError(f"line {where}: point {pid} starts after t=0")
        try:
            points.append(MovingPoint(pid, parsed))
        except ValueError as e:
            raise ScenarioError(f"line {where}: {e}") from None
    sc = Scenario(points, make_kernel(KERNEL_NAMES[kind]), float(D) / s, float(T), epsilon, seed, s)
    try:
        sc.validate()
    except ValueError as e:
        raise ScenarioError(str(e)) from None
    return sc


def load(path, sigma=None, epsilon=0.5, seed=0):
    with open(path) as fh:
        return loads(fh.read(), sigma=sigma, epsilon=epsilon, seed=seed)
