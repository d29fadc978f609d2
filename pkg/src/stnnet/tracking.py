"""Linking per-frame detections into trajectories with min-cost flow.

Every detection becomes an (in, out) node pair joined by an arc carrying
the detection cost, so unit capacities make paths node-disjoint. A path
source -> ... -> sink is one trajectory; the solver pushes unit flows along
successive shortest paths in the residual graph and stops at the first
path whose cost is not negative.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import read_csv_rows

GATE = 25.0
ENTRY_COST = 2.0
EXIT_COST = 2.0
LINK_COST = 0.04  # per pixel: the 25 px gate maps to cost 1.0
CONF_CLAMP = 1e-4


@dataclass
class TrackerConfig:
    gate: float = GATE
    entry: float = ENTRY_COST
    exit: float = EXIT_COST
    link_cost: float = LINK_COST

    def kwargs(self) -> dict:
        return dict(gate=self.gate, entry=self.entry, exit=self.exit, link_cost=self.link_cost)


@dataclass
class Track:
    id: int
    points: list[tuple[int, float, float, float]]  # (frame, x, y, conf)

    @property
    def mean_conf(self) -> float:
        return float(np.mean([p[3] for p in self.points])) if self.points else 0.0

    def frames(self) -> list[int]:
        return [p[0] for p in self.points]


@dataclass
class FlowGraph:
    frame: np.ndarray      # [n] frame of each detection
    xy: np.ndarray         # [n, 2]
    conf: np.ndarray       # [n]
    det_cost: np.ndarray   # [n]
    entry: float
    exit: float
    links: list[tuple[int, int, float]] = field(default_factory=list)  # (from, to, cost), sorted

    @property
    def size(self) -> int:
        return len(self.frame)


def detection_cost(conf) -> np.ndarray:
    c = np.clip(np.asarray(conf, dtype=np.float64), CONF_CLAMP, 1.0 - CONF_CLAMP)
    return np.log((1.0 - c) / c)


def build_flow_graph(detections: Sequence[np.ndarray], projections: Sequence[np.ndarray] | None = None,
                     gate: float = GATE, entry: float = ENTRY_COST, exit: float = EXIT_COST,
                     link_cost: float = LINK_COST) -> FlowGraph:
    """``detections[t]`` rows are (x, y, conf); ``projections[t]`` holds the predicted
    frame-(t+1) position of each frame-t detection (defaults to the detection itself)."""
    if gate <= 0:
        raise ValueError("gate must be positive")
    dets = [np.asarray(d, dtype=np.float64).reshape(-1, 3) for d in detections]
    starts = np.cumsum([0] + [len(d) for d in dets])
    frame = np.concatenate([np.full(len(d), t) for t, d in enumerate(dets)]).astype(np.int64) \
        if dets else np.zeros(0, np.int64)
    allxy = np.concatenate([d[:, :2] for d in dets]) if dets else np.zeros((0, 2))
    conf = np.concatenate([d[:, 2] for d in dets]) if dets else np.zeros(0)
    links = []
    for t in range(len(dets) - 1):
        a, b = dets[t], dets[t + 1]
        if not len(a) or not len(b):
            continue
        proj = a[:, :2] if projections is None else np.asarray(projections[t], dtype=np.float64).reshape(-1, 2)
        if len(proj) != len(a):
            raise ValueError(f"frame {t}: {len(proj)} projections for {len(a)} detections")
        dist = np.sqrt(((proj[:, None, :] - b[None, :, :2]) ** 2).sum(-1))
        for i, j in zip(*np.nonzero(dist <= gate)):
            links.append((int(starts[t] + i), int(starts[t + 1] + j), float(link_cost * dist[i, j])))
    return FlowGraph(frame, allxy, conf, detection_cost(conf), float(entry), float(exit), links)


@dataclass
class FlowSolution:
    tracks: list[Track]
    cost: float
    paths: list[list[int]]


class _Residual:
    def __init__(self, nodes: int):
        self.head: list[list[int]] = [[] for _ in range(nodes)]
        self.to: list[int] = []
        self.cap: list[int] = []
        self.cost: list[float] = []

    def add(self, u: int, v: int, c: float) -> None:
        self.head[u].append(len(self.to))
        self.to.append(v); self.cap.append(1); self.cost.append(c)
        self.head[v].append(len(self.to))
        self.to.append(u); self.cap.append(0); self.cost.append(-c)


def solve_min_cost_flow(graph: FlowGraph) -> FlowSolution:
    """Exact minimum-cost set of node-disjoint source-sink paths.

    Successive shortest paths with Johnson potentials: the initial
    potentials come from a topological relaxation of the DAG (costs may be
    negative), later ones from Dijkstra on reduced costs. Path costs are
    non-decreasing, so stopping at the first non-negative one is optimal
    over every flow value.
    """
    n = graph.size
    src, snk = 0, 1
    inn = lambda k: 2 + 2 * k
    out = lambda k: 3 + 2 * k
    r = _Residual(2 + 2 * n)
    order = np.lexsort((np.arange(n), graph.frame))
    for k in order:
        r.add(src, inn(k), graph.entry)
        r.add(inn(k), out(k), float(graph.det_cost[k]))
        r.add(out(k), snk, graph.exit)
    for i, j, c in graph.links:
        r.add(out(i), inn(j), c)

    # initial potentials: shortest distances over the DAG, relaxed in frame order
    inf = math.inf
    pot = [inf] * (2 + 2 * n)
    pot[src] = 0.0
    topo = [src] + [v for k in order for v in (inn(k), out(k))] + [snk]
    for u in topo:
        if pot[u] == inf:
            continue
        for e in r.head[u]:
            if r.cap[e] and pot[u] + r.cost[e] < pot[r.to[e]]:
                pot[r.to[e]] = pot[u] + r.cost[e]

    while True:
        dist = [inf] * len(pot)
        prev = [-1] * len(pot)
        dist[src] = 0.0
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for e in r.head[u]:
                if not r.cap[e]:
                    continue
                v = r.to[e]
                nd = d + max(r.cost[e] + pot[u] - pot[v], 0.0)
                if nd < dist[v]:
                    dist[v] = nd
                    prev[v] = e
                    heapq.heappush(heap, (nd, v))
        if dist[snk] == inf:
            break
        path_cost = dist[snk] + pot[snk] - pot[src]
        if path_cost >= 0:
            break
        for v in range(len(pot)):
            if dist[v] < inf:
                pot[v] += dist[v]
        v = snk
        while v != src:
            e = prev[v]
            r.cap[e] -= 1
            r.cap[e ^ 1] += 1
            v = r.to[e ^ 1]

    # read paths back from saturated arcs
    succ: dict[int, int] = {}
    starts = []
    for u, edges in enumerate(r.head):
        for e in edges:
            if e % 2 == 0 and r.cap[e] == 0:
                v = r.to[e]
                if u == src:
                    starts.append((v - 2) // 2)
                elif u >= 2 and u % 2 == 1 and v >= 2 and v % 2 == 0:
                    succ[(u - 3) // 2] = (v - 2) // 2
    starts.sort(key=lambda k: (graph.frame[k], k))
    paths, tracks = [], []
    for tid, k in enumerate(starts):
        path = [k]
        while path[-1] in succ:
            path.append(succ[path[-1]])
        paths.append(path)
        tracks.append(Track(tid, [(int(graph.frame[q]), float(graph.xy[q, 0]), float(graph.xy[q, 1]),
                                   float(graph.conf[q])) for q in path]))
    return FlowSolution(tracks, path_cost_sum(graph, paths) if paths else 0.0, paths)


def path_cost_sum(graph: FlowGraph, paths: Sequence[Sequence[int]]) -> float:
    link = {(i, j): c for i, j, c in graph.links}
    total = 0.0
    for p in paths:
        total += graph.entry + graph.exit + float(graph.det_cost[list(p)].sum())
        total += sum(link[(a, b)] for a, b in zip(p, p[1:]))
    return total


def link_from_variant(detections: Sequence[np.ndarray], projections: Sequence[np.ndarray] | None,
                      variant: str = "with_offsets", **costs) -> list[Track]:
    """``without_offsets`` links on raw positions; ``with_offsets`` on the projected ones."""
    if variant not in ("with_offsets", "without_offsets"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "with_offsets" and projections is None:
        raise ValueError("with_offsets needs projected points")
    proj = projections if variant == "with_offsets" else None
    return solve_min_cost_flow(build_flow_graph(detections, proj, **costs)).tracks


# ---------------------------------------------------------------- track CSV

TRACKS_HEADER = "track_id,frame,x,y,conf"


def save_tracks(path, tracks: Sequence[Track]) -> None:
    lines = [TRACKS_HEADER]
    for tr in tracks:
        for f, x, y, c in tr.points:
            lines.append(f"{tr.id},{f},{x:.3f},{y:.3f},{c:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_tracks(path) -> list[Track]:
    rows = read_csv_rows(path, TRACKS_HEADER, (int, int, float, float, float))
    by_id: dict[int, list] = {}
    for tid, f, x, y, c in rows:
        by_id.setdefault(tid, []).append((f, x, y, c))
    tracks = []
    for tid in sorted(by_id):
        pts = sorted(by_id[tid])
        frames = [p[0] for p in pts]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ValueError(f"{path}: track {tid} frames are not contiguous")
        tracks.append(Track(tid, pts))
    return tracks
