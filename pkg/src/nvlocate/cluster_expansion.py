"""Many-spin coherence via disjoint clusters and correlation expansions.

The coupling graph has an edge wherever the secular internuclear
coefficient exceeds a threshold.  Disjoint groups (connected components,
split at their weakest edges down to a size cap) are simulated exactly
and multiplied; the correlation expansion multiplies connected-cluster
correlation factors L~_C = L_C / prod_{C' subset C} L~_C' instead.

residual_coupling_scale quantifies how much of the secular pair coupling
survives RF decoupling when the two spins' detuning shifts delta differ
from the exact magic-spinning resonance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .constants import TWO_PI
from .dynamics import (CoherencePropagator, batched_no_rf_coherence,
                       build_branches, spin_operators, tones_from_fields)
from .errors import DivisionInstability
from .pulse_seq import PulseSequence
from .rf_control import RfField
from .spin_model import SpinSystem, secular_internuclear, unit

DEFAULT_EDGE_THRESHOLD = TWO_PI * 1.0   # rad/s; slower than the protocol
DEFAULT_MAX_GROUP = 6


@dataclass(frozen=True)
class ClusterPartition:
    groups: tuple
    threshold: float
    max_size: int

    def to_csv(self) -> str:
        lines = ["group_id,spin_index"]
        for gid, group in enumerate(self.groups):
            for idx in group:
                lines.append(f"{gid},{idx}")
        return "\n".join(lines) + "\n"


def coupling_edges(system: SpinSystem, threshold: float):
    """Edges (i, j, |secular coefficient|) above the threshold."""
    edges = []
    n = len(system.nuclei)
    for i, j in combinations(range(n), 2):
        c = abs(secular_internuclear(system.nuclei[i], system.nuclei[j]))
        if c >= threshold:
            edges.append((i, j, c))
    return edges


def _components(nodes: Sequence[int], edges) -> list[list[int]]:
    parent = {n: n for n in nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _ in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comp: dict[int, list[int]] = {}
    for n in nodes:
        comp.setdefault(find(n), []).append(n)
    return [sorted(c) for c in sorted(comp.values(), key=lambda c: min(c))]


def partition_disjoint(system: SpinSystem, threshold: float = DEFAULT_EDGE_THRESHOLD,
                       max_size: int = DEFAULT_MAX_GROUP) -> ClusterPartition:
    """Connected components of the coupling graph, split to the size cap.

    Oversized components lose their weakest edge (ties: lowest spin
    indices first) until every piece fits; fully deterministic.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    n = len(system.nuclei)
    edges = coupling_edges(system, threshold)
    groups: list[list[int]] = []
    queue = _components(range(n), edges)
    while queue:
        comp = queue.pop(0)
        if len(comp) <= max_size:
            groups.append(comp)
            continue
        comp_set = set(comp)
        local = [e for e in edges if e[0] in comp_set and e[1] in comp_set]
        local.sort(key=lambda e: (e[2], e[0], e[1]))
        local = local[1:]  # drop the weakest edge
        edges = [e for e in edges
                 if not (e[0] in comp_set and e[1] in comp_set)] + local
        queue = _components(comp, local) + queue
    groups.sort(key=lambda g: g[0])
    return ClusterPartition(tuple(tuple(g) for g in groups), threshold, max_size)


def _group_coherence(system: SpinSystem, indices: Sequence[int],
                     seq: PulseSequence, fields: Sequence[RfField],
                     t: float, n_grid: Optional[int] = None) -> float:
    sub = system.subsystem(indices)
    branches = build_branches(sub)
    tones = tones_from_fields(sub, fields)
    prop = CoherencePropagator(branches, tones, seq, n_grid)
    return prop.coherence(t)


def dce_coherence(system: SpinSystem, partition: ClusterPartition,
                  seq: PulseSequence, fields: Sequence[RfField], t: float,
                  n_grid: Optional[int] = None) -> float:
    """Product of exact per-group coherences (intra-group couplings kept)."""
    total = 1.0
    if not fields:
        by_dim: dict[int, list] = {}
        for g in partition.groups:
            by_dim.setdefault(len(g), []).append(g)
        for size, gs in sorted(by_dim.items()):
            h0s = []
            h1s = []
            for g in gs:
                b = build_branches(system.subsystem(g))
                h0s.append(b.h0)
                h1s.append(b.h1)
            vals = batched_no_rf_coherence(np.array(h0s), np.array(h1s), seq, t)
            total *= float(np.prod(vals))
        return total
    for g in partition.groups:
        total *= _group_coherence(system, g, seq, fields, t, n_grid)
    return total


def connected_clusters(system: SpinSystem, order: int,
                       threshold: float = DEFAULT_EDGE_THRESHOLD) -> list[tuple]:
    """All connected clusters up to the given order, sorted by (size, indices)."""
    n = len(system.nuclei)
    edges = coupling_edges(system, threshold)
    adj: dict[int, set] = {i: set() for i in range(n)}
    for i, j, _ in edges:
        adj[i].add(j)
        adj[j].add(i)
    clusters = {frozenset((i,)) for i in range(n)}
    frontier = set(clusters)
    for _ in range(order - 1):
        nxt = set()
        for c in frontier:
            reach = set().union(*(adj[i] for i in c)) - c
            for r in reach:
                nxt.add(c | {r})
        clusters |= nxt
        frontier = nxt
    return sorted((tuple(sorted(c)) for c in clusters), key=lambda c: (len(c), c))


def cce_coherence(system: SpinSystem, order: int, seq: PulseSequence,
                  fields: Sequence[RfField], t: float,
                  threshold: float = DEFAULT_EDGE_THRESHOLD,
                  max_order: int = 3, n_grid: Optional[int] = None,
                  denominator_floor: float = 1e-6) -> float:
    """Cluster-correlation expansion up to the given order.

    Correlation factors with a near-zero denominator are skipped with a
    warning (reported as DivisionInstability in strict mode).
    """
    if order > max_order:
        raise ValueError(f"order {order} above the cap {max_order}")
    clusters = connected_clusters(system, order, threshold)
    raw: dict[tuple, float] = {}
    if not fields:
        by_dim: dict[int, list] = {}
        for c in clusters:
            by_dim.setdefault(len(c), []).append(c)
        for size, cs in sorted(by_dim.items()):
            h0s = []
            h1s = []
            for c in cs:
                b = build_branches(system.subsystem(c))
                h0s.append(b.h0)
                h1s.append(b.h1)
            vals = batched_no_rf_coherence(np.array(h0s), np.array(h1s), seq, t)
            for c, v in zip(cs, vals):
                raw[c] = float(v)
    else:
        for c in clusters:
            raw[c] = _group_coherence(system, c, seq, fields, t, n_grid)
    tilde: dict[tuple, float] = {}
    total = 1.0
    for c in clusters:  # sorted by size: subsets come first
        denom = 1.0
        for size in range(1, len(c)):
            for sub in combinations(c, size):
                if sub in tilde:
                    denom *= tilde[sub]
        if abs(denom) < denominator_floor:
            warnings.warn(
                f"cluster {c}: correlation denominator {denom:.2e} below "
                f"{denominator_floor:g}; cluster skipped", stacklevel=2)
            tilde[c] = 1.0
            continue
        tilde[c] = raw[c] / denom
        total *= tilde[c]
    return total


def residual_coupling_scale(pair_axis: np.ndarray, delta: float,
                            delta_j: float, delta_k: float,
                            n_phase: int = 64) -> float:
    """Fraction of the secular pair coupling surviving RF decoupling.

    Both spins spin about their own effective axes nu_j = sqrt2 Delta x
    + (Delta + delta_j) z at a common rate; the coupling operator is
    averaged over the common phase and compared (operator norm) against
    the bare secular operator.  Exactly zero shift means magic-angle
    spinning and a vanishing average; the leading residual is linear in
    eta = (delta_j + delta_k) / Delta.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    pair_axis = unit(np.asarray(pair_axis, dtype=float))
    cos_t = pair_axis[2]
    angular = 0.5 * (1.0 - 3.0 * cos_t ** 2)
    ops = spin_operators(2)
    iz_j, iz_k = ops[0][2], ops[1][2]
    dot = sum(ops[0][c] @ ops[1][c] for c in range(3))
    d_op = angular * (3.0 * (iz_j @ iz_k) - dot)

    def averaged(dj: float, dk: float) -> np.ndarray:
        nu_j = np.array([np.sqrt(2.0) * delta, 0.0, delta + dj])
        nu_k = np.array([np.sqrt(2.0) * delta, 0.0, delta + dk])
        axes = (unit(nu_j), unit(nu_k))
        gen = sum(axes[0][c] * ops[0][c] + axes[1][c] * ops[1][c]
                  for c in range(3))
        evals, evecs = np.linalg.eigh(gen)
        acc = np.zeros_like(d_op)
        for phi in np.arange(n_phase) * (2.0 * np.pi / n_phase):
            rot = (evecs * np.exp(-1j * evals * phi)) @ evecs.conj().T
            acc += rot.conj().T @ d_op @ rot
        return acc / n_phase

    full_norm = np.linalg.norm(d_op, ord=2)
    if full_norm == 0.0:
        return 0.0
    resid = averaged(delta_j, delta_k) - averaged(0.0, 0.0)
    return float(np.linalg.norm(resid, ord=2) / full_norm)
