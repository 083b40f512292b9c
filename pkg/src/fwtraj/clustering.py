"""Grouping sampled trajectories into candidate local optima.

Pairwise distances use the cost-weighted quadratic form, agglomeration uses
group-average linkage, and the dendrogram is cut at a fixed fraction of the
maximum merge height. Cluster centers are per-step weighted averages; the
center with the lowest merit score becomes the warm start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .problem import DEFAULT_MERIT_WEIGHT, Trajectory, TrajectoryProblem, merit_phi

DEFAULT_CUT_FRACTION = 0.5


class ClusterWeightError(RuntimeError):
    """Raised when a cluster has zero total weight at some step."""


def cost_weight_matrix(problem: TrajectoryProblem) -> np.ndarray:
    """blkdiag(C^T Q C, R): the quadratic form the objective induces on [x; u]."""
    n_x, n_u = problem.n_x, problem.n_u
    W = np.zeros((n_x + n_u, n_x + n_u))
    W[:n_x, :n_x] = problem.C.T @ problem.Q @ problem.C
    W[n_x:, n_x:] = problem.R
    return W


def trajectory_distance(a: np.ndarray, b: np.ndarray, weight: np.ndarray) -> float:
    """Sum over steps of (a_k - b_k)^T W (a_k - b_k)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"trajectory length/width mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.einsum("ki,ij,kj->", diff, weight, diff))


def distance_matrix(trajectories: Sequence[np.ndarray], weight: np.ndarray) -> np.ndarray:
    """Symmetric pairwise distance matrix with an exactly zero diagonal."""
    samples = np.asarray(trajectories, dtype=float)
    m = samples.shape[0]
    D = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            D[i, j] = D[j, i] = trajectory_distance(samples[i], samples[j], weight)
    return D


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge history from group-average agglomeration.

    Leaves carry ids 0..m-1; the t-th merge creates cluster id m+t. Heights
    are nondecreasing in merge order (group-average linkage is monotone).
    """

    num_leaves: int
    merges: Tuple[Merge, ...]

    def max_height(self) -> float:
        return max((mg.height for mg in self.merges), default=0.0)

    def to_csv(self) -> str:
        lines = ["left,right,height,size"]
        for mg in self.merges:
            lines.append(f"{mg.left},{mg.right},{mg.height!r},{mg.size}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray   # (m,), values 0..num_clusters-1
    num_clusters: int

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def agglomerate_group_average(D: np.ndarray) -> Dendrogram:
    """Repeatedly merge the pair of clusters with minimal average inter-distance.

    Average distances are maintained with the Lance-Williams update
    d(A+B, C) = (|A| d(A,C) + |B| d(B,C)) / (|A| + |B|). Ties break on the
    lowest (id_i, id_j) pair for determinism.
    """
    D = np.asarray(D, dtype=float)
    m = D.shape[0]
    if D.shape != (m, m):
        raise ValueError("distance matrix must be square")
    if m == 0:
        raise ValueError("need at least one trajectory")

    work = D.copy()
    ids = list(range(m))            # active cluster ids, ascending
    sizes = {i: 1 for i in range(m)}
    merges: List[Merge] = []
    next_id = m

    for _ in range(m - 1):
        k = len(ids)
        best = (np.inf, -1, -1)
        for a in range(k):
            for b in range(a + 1, k):
                d = work[a, b]
                if d < best[0]:
                    best = (d, a, b)
        height, a, b = best
        id_a, id_b = ids[a], ids[b]
        merged_size = sizes[id_a] + sizes[id_b]
        merges.append(Merge(left=id_a, right=id_b, height=float(height), size=merged_size))

        # Lance-Williams row for the merged cluster against every survivor.
        new_row = (sizes[id_a] * work[a] + sizes[id_b] * work[b]) / merged_size
        keep = [c for c in range(k) if c not in (a, b)]
        reduced = work[np.ix_(keep, keep)]
        work = np.zeros((k - 1, k - 1))
        work[:-1, :-1] = reduced
        work[-1, :-1] = new_row[keep]
        work[:-1, -1] = new_row[keep]

        ids = [ids[c] for c in keep] + [next_id]
        sizes[next_id] = merged_size
        next_id += 1

    return Dendrogram(num_leaves=m, merges=tuple(merges))


def cut_dendrogram(dend: Dendrogram, fraction: float = DEFAULT_CUT_FRACTION) -> ClusterAssignment:
    """Flatten the dendrogram at fraction * max merge height.

    Merges strictly below the cutting height are applied; merges at or above
    it are not. Labels are assigned in order of each cluster's smallest leaf.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    m = dend.num_leaves
    parent = list(range(m))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    cutting_height = fraction * dend.max_height()
    roots = {}   # merge id -> representative leaf, for resolving merge references
    for t, mg in enumerate(dend.merges):
        left = roots.get(mg.left, mg.left)
        right = roots.get(mg.right, mg.right)
        roots[m + t] = find(left)
        if mg.height < cutting_height:
            parent[find(right)] = find(left)
            roots[m + t] = find(left)

    groups = {}
    for leaf in range(m):
        groups.setdefault(find(leaf), []).append(leaf)
    ordered = sorted(groups.values(), key=min)
    labels = np.empty(m, dtype=int)
    for label, leaves in enumerate(ordered):
        labels[leaves] = label
    return ClusterAssignment(labels=labels, num_clusters=len(ordered))


def cluster_centers(ensemble, assignment: ClusterAssignment) -> List[np.ndarray]:
    """Per-step weighted average of each cluster's samples.

    Weights are renormalized within the cluster at every step, so each center
    step is a convex combination of the member states at that step.
    """
    centers = []
    for label in range(assignment.num_clusters):
        members = assignment.members(label)
        samples = ensemble.trajectories[members]      # (|Y|, N, n)
        w = ensemble.weights[members]                 # (|Y|, N)
        totals = w.sum(axis=0)                        # (N,)
        bad = np.flatnonzero(totals <= 0.0)
        if bad.size:
            raise ClusterWeightError(
                f"cluster {label} has zero total weight at step {int(bad[0]) + 1}"
            )
        centers.append(np.einsum("ik,ikn->kn", w / totals, samples))
    return centers


def select_warm_start(
    problem: TrajectoryProblem,
    centers: Sequence[np.ndarray],
    alpha_merit: float = DEFAULT_MERIT_WEIGHT,
) -> Tuple[Trajectory, np.ndarray]:
    """Pick the center with the lowest merit score; ties go to the lowest label."""
    if len(centers) == 0:
        raise ValueError("need at least one cluster center")
    n_x = problem.n_x
    scores = np.empty(len(centers))
    split = []
    for j, center in enumerate(centers):
        traj = Trajectory(states=center[:, :n_x], inputs=center[:, n_x:])
        split.append(traj)
        scores[j] = merit_phi(problem, traj, alpha_merit)
    return split[int(np.argmin(scores))], scores
