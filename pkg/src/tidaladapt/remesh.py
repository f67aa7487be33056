"""
Metric-conforming local remeshing by edge splitting, edge collapse, edge
flipping and vertex smoothing.

Edge lengths are measured in the metric: ``l = sqrt(e^T M e)`` with ``M``
the mean of the tensors of the elements sharing the edge. The metric is
piecewise constant on a background mesh; the mesh being adapted samples
its Clement interpolant at element centroids.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, InvalidMetricError, RemeshFailureError
from .mesh import PointLocator, TriMesh
from .metric import MetricField, clement_interpolate

__all__ = [
    "RemeshConfig",
    "RemeshStats",
    "adapt_mesh",
    "metric_edge_length",
    "edge_lengths",
    "metric_on_mesh",
    "element_quality",
    "fixed_boundary_vertices",
]

log = logging.getLogger(__name__)

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class RemeshConfig:
    split: float = math.sqrt(2.0)
    collapse: float = 1.0 / math.sqrt(2.0)
    max_passes: int = 20
    smoothing_steps: int = 1
    quality_floor: float = 0.1
    stop_fraction: float = 0.01
    relaxation: float = 0.5
    flip_gain: float = 0.02

    def validate(self):
        if not self.split > 1.0 > self.collapse > 0.0:
            raise InvalidArgumentError("thresholds must satisfy split > 1 > collapse > 0")
        if self.max_passes < 1 or self.smoothing_steps < 0:
            raise InvalidArgumentError("max_passes must be positive and smoothing_steps non-negative")
        if not 0 < self.quality_floor < 1 or not 0 < self.relaxation <= 1:
            raise InvalidArgumentError("quality floor and relaxation must lie in (0, 1]")
        return self


@dataclass
class RemeshStats:
    passes: int = 0
    splits: int = 0
    collapses: int = 0
    flips: int = 0
    moves: int = 0
    converged: bool = False


def metric_on_mesh(metric: MetricField, mesh: TriMesh, locator: PointLocator = None,
                   vertex_tensors: np.ndarray = None) -> np.ndarray:
    """
    Metric tensors for the elements of ``mesh``, (M, 2, 2). On the metric's
    own mesh these are the stored tensors; elsewhere the Clement (P1)
    interpolant of the background metric is evaluated at the centroids.
    Convex combinations of SPD tensors stay SPD.
    """
    if mesh is metric.mesh:
        return metric.tensors
    locator = locator or PointLocator(metric.mesh)
    if vertex_tensors is None:
        vertex_tensors = clement_interpolate(metric.tensors, metric.mesh)
    elems, b = locator.locate(mesh.centroids)
    return np.einsum("ka,kaij->kij", b, vertex_tensors[metric.mesh.triangles[elems]])


def _mean_edge_tensor(tensors, edge_elements):
    e0, e1 = edge_elements[:, 0], edge_elements[:, 1]
    M = tensors[e0].copy()
    two = e1 >= 0
    M[two] = 0.5 * (M[two] + tensors[e1[two]])
    return M


def _quad(e, M):
    """``e^T M e`` for vectors (K, ..., 2) and symmetric tensors (K, 2, 2)."""
    shape = (len(M),) + (1,) * (e.ndim - 2)
    a, b, c = (M[:, i, j].reshape(shape) for i, j in ((0, 0), (0, 1), (1, 1)))
    x, y = e[..., 0], e[..., 1]
    return a * x * x + 2.0 * b * x * y + c * y * y


def _lengths(vertices, pairs, M):
    e = vertices[pairs[:, 1]] - vertices[pairs[:, 0]]
    return np.sqrt(np.maximum(_quad(e, M), 0.0))


def edge_lengths(tensors, mesh: TriMesh) -> np.ndarray:
    """Metric length of every edge of ``mesh`` for per-element ``tensors``."""
    tensors = getattr(tensors, "tensors", tensors)
    return _lengths(mesh.vertices, mesh.edges, _mean_edge_tensor(tensors, mesh.edge_elements))


def metric_edge_length(metric: MetricField, mesh: TriMesh, edge) -> float:
    """
    Metric length of one edge, given by index or as a vertex pair, using the
    mean of the adjacent element tensors.
    """
    if np.ndim(edge) == 0:
        e = int(edge)
    else:
        e = int(mesh.edge_index(np.asarray(edge).reshape(1, 2))[0])
    if not 0 <= e < mesh.n_edges:
        raise InvalidArgumentError(f"invalid edge {edge!r}")
    T = metric_on_mesh(metric, mesh)
    M = _mean_edge_tensor(T, mesh.edge_elements[e:e + 1])
    return float(_lengths(mesh.vertices, mesh.edges[e:e + 1], M)[0])


def _quality(p, M):
    """
    Metric-space quality ``4 sqrt(3) area / sum(l^2)`` of triangles with
    vertex coordinates ``p`` (K, 3, 2); 1 for an equilateral triangle in
    the metric, negative when inverted.
    """
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    l2 = _quad(e, M).sum(axis=1)
    area = 0.5 * (e[:, 0, 0] * (-e[:, 2, 1]) - e[:, 0, 1] * (-e[:, 2, 0]))
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    return 4.0 * _SQRT3 * np.sqrt(np.maximum(det, 0.0)) * area / np.maximum(l2, 1e-300)


def element_quality(tensors, mesh: TriMesh) -> np.ndarray:
    tensors = getattr(tensors, "tensors", tensors)
    return _quality(mesh.vertices[mesh.triangles], tensors)


def fixed_boundary_vertices(mesh: TriMesh, angle_tol: float = 1e-8) -> np.ndarray:
    """
    Boolean mask of boundary vertices that must never move or be removed:
    corners (boundary turns) and marker transitions.
    """
    N = mesh.n_vertices
    fixed = np.zeros(N, dtype=bool)
    be, bm = mesh.boundary_edges, mesh.boundary_markers
    count = np.bincount(be.ravel(), minlength=N)
    fixed |= (count != 2) & (count > 0)
    # the two boundary edges at each vertex
    order = np.argsort(be.ravel(), kind="stable")
    vids = be.ravel()[order]
    eids = order // 2
    starts = np.searchsorted(vids, np.arange(N))
    two = np.flatnonzero(count == 2)
    ea, eb = eids[starts[two]], eids[starts[two] + 1]
    fixed[two[bm[ea] != bm[eb]]] = True
    da = mesh.vertices[be[ea, 1]] - mesh.vertices[be[ea, 0]]
    db = mesh.vertices[be[eb, 1]] - mesh.vertices[be[eb, 0]]
    cross = da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0]
    scale = np.linalg.norm(da, axis=1) * np.linalg.norm(db, axis=1)
    fixed[two[np.abs(cross) > angle_tol * scale]] = True
    return fixed


class _Remesher:
    def __init__(self, mesh: TriMesh, metric: MetricField, config: RemeshConfig):
        self.cfg = config
        self.metric = metric
        self.locator = PointLocator(metric.mesh)
        # sampling the continuous (P1) background metric avoids the jumps of
        # the P0 field as centroids move between passes
        self.vertex_tensors = clement_interpolate(metric.tensors, metric.mesh)
        self.V = np.array(mesh.vertices, dtype=float)
        self.T = np.array(mesh.triangles, dtype=np.int64)
        self.B = np.array(mesh.boundary_edges, dtype=np.int64)
        self.BM = np.array(mesh.boundary_markers, dtype=np.int64)
        self.fixed = fixed_boundary_vertices(mesh)
        self.stats = RemeshStats()
        # per-element tensors, resampled once per pass; children inherit
        self.Mt = self.tensors(mesh)

    # helpers ---------------------------------------------------------------
    def mesh(self) -> TriMesh:
        return TriMesh(self.V, self.T, self.B, self.BM)

    def tensors(self, mesh):
        return metric_on_mesh(self.metric, mesh, self.locator, self.vertex_tensors)

    def check(self, stage):
        try:
            return self.mesh().validate()
        except InvalidArgumentError as exc:
            raise RemeshFailureError(
                f"mesh invalid after {stage}: {exc}",
                diagnostics={"stage": stage, "pass": self.stats.passes, "n_vertices": len(self.V),
                             "n_elements": len(self.T)},
            ) from None

    # split -----------------------------------------------------------------
    def split(self) -> int:
        mesh = self.mesh()
        Mt = self.Mt
        L = edge_lengths(Mt, mesh)
        marked = L > self.cfg.split * (1.0 + 1e-9)
        n_new = int(marked.sum())
        if n_new == 0:
            return 0
        N = len(self.V)
        vid = -np.ones(mesh.n_edges, dtype=np.int64)
        vid[marked] = N + np.arange(n_new)
        E = mesh.edges
        self.V = np.concatenate([self.V, 0.5 * (self.V[E[marked, 0]] + self.V[E[marked, 1]])])
        self.fixed = np.concatenate([self.fixed, np.zeros(n_new, dtype=bool)])

        t = mesh.triangles
        ee = mesh.element_edges
        em = marked[ee]
        mid = vid[ee]
        cnt = em.sum(axis=1)
        out = [t[cnt == 0]]
        mts = [Mt[cnt == 0]]

        k = np.flatnonzero(cnt == 3)
        if len(k):
            a, b, c = t[k, 0], t[k, 1], t[k, 2]
            m0, m1, m2 = mid[k, 0], mid[k, 1], mid[k, 2]
            out += [np.column_stack(x) for x in ((a, m0, m2), (m0, b, m1), (m2, m1, c), (m0, m1, m2))]
            mts += [Mt[k]] * 4

        k = np.flatnonzero(cnt == 1)
        if len(k):
            i = np.argmax(em[k], axis=1)
            r = lambda j: t[k, (i + j) % 3]
            m = mid[k, i]
            out += [np.column_stack((r(0), m, r(2))), np.column_stack((m, r(1), r(2)))]
            mts += [Mt[k]] * 2

        k = np.flatnonzero(cnt == 2)
        if len(k):
            u = np.argmin(em[k], axis=1)
            s = (u + 1) % 3
            t0, t1, t2 = t[k, s], t[k, (s + 1) % 3], t[k, (s + 2) % 3]
            m0, m1 = mid[k, s], mid[k, (s + 1) % 3]
            out.append(np.column_stack((m0, t1, m1)))
            # split the remaining quadrilateral along its shorter metric diagonal
            Mk = Mt[k]
            d1 = self.V[m1] - self.V[t0]
            d2 = self.V[t2] - self.V[m0]
            first = _quad(d1, Mk) <= _quad(d2, Mk)
            q1 = np.where(first[:, None], np.column_stack((t0, m0, m1)), np.column_stack((t0, m0, t2)))
            q2 = np.where(first[:, None], np.column_stack((t0, m1, t2)), np.column_stack((m0, m1, t2)))
            out += [q1, q2]
            mts += [Mk] * 3
        self.T = np.concatenate(out)
        self.Mt = np.concatenate(mts)

        bid = mesh.edge_index(self.B)
        bm = marked[bid]
        if bm.any():
            a, b = self.B[bm, 0], self.B[bm, 1]
            m = vid[bid[bm]]
            self.B = np.concatenate([self.B[~bm], np.column_stack((a, m)), np.column_stack((m, b))])
            self.BM = np.concatenate([self.BM[~bm], self.BM[bm], self.BM[bm]])
        return n_new

    # collapse --------------------------------------------------------------
    def collapse(self, rounds: int = 4) -> int:
        """Collapse short edges in rounds of independent operations."""
        total = first = self._collapse_round()
        for _ in range(rounds - 1):
            if first == 0:
                break
            done = self._collapse_round()
            total += done
            if done < 0.1 * first:
                break
        return total

    def _collapse_round(self) -> int:
        mesh = self.mesh()
        Mt = self.Mt
        L = edge_lengths(Mt, mesh)
        cand = np.flatnonzero(L < self.cfg.collapse)
        if len(cand) == 0:
            return 0
        cfg = self.cfg
        V, T = self.V, self.T
        N = len(V)
        E = mesh.edges
        q_old = _quality(V[T], Mt)
        order = np.argsort(T.ravel(), kind="stable")
        deg = np.bincount(T.ravel(), minlength=N)
        ptr = np.concatenate([[0], np.cumsum(deg)])
        on_bnd = np.zeros(N, dtype=bool)
        on_bnd[self.B.ravel()] = True
        is_bnd_edge = np.zeros(mesh.n_edges, dtype=bool)
        is_bnd_edge[mesh.edge_index(self.B)] = True

        # every candidate in both directions: remove x, keep y
        x = np.concatenate([E[cand, 0], E[cand, 1]])
        y = np.concatenate([E[cand, 1], E[cand, 0]])
        owner = np.concatenate([cand, cand])
        ok = ~self.fixed[x] & (~on_bnd[x] | is_bnd_edge[owner])
        n_shared_needed = np.where(is_bnd_edge[owner], 1, 2)

        # link condition: the common neighbours of x and y are exactly the
        # apexes of the triangles sharing the edge
        A = sp.csr_matrix((np.ones(2 * len(E)), (E.ravel(), E[:, ::-1].ravel())), shape=(N, N))
        common = np.asarray((A @ A)[x, y]).ravel()
        ok &= common == n_shared_needed

        # geometric checks on the star of x, vectorised over all directions
        cnt = deg[x]
        rep = np.repeat(np.arange(len(x)), cnt)
        starts = np.cumsum(cnt) - cnt
        offs = np.arange(cnt.sum()) - np.repeat(starts, cnt)
        tri = order[ptr[x][rep] + offs] // 3
        Ts = T[tri]
        shared = (Ts == y[rep][:, None]).any(axis=1)
        ok &= np.bincount(rep, weights=shared, minlength=len(x)) == n_shared_needed
        newT = np.where(Ts == x[rep][:, None], y[rep][:, None], Ts)
        Mk = Mt[tri]
        q_new = np.where(shared, np.inf, _quality(V[newT], Mk))
        q_new_min = np.minimum.reduceat(q_new, starts)
        q_old_min = np.minimum.reduceat(q_old[tri], starts)
        ok &= (q_new_min > 0) & (q_new_min >= np.minimum(cfg.quality_floor, q_old_min))
        d = V[newT] - V[y[rep]][:, None, :]
        l2 = np.where(shared, 0.0, _quad(d, Mk).max(axis=1))
        ok &= np.maximum.reduceat(l2, starts) <= cfg.split ** 2

        nc = len(cand)
        # prefer removing an interior vertex; otherwise the first endpoint
        first_is_bnd = on_bnd[x[:nc]] & ~on_bnd[y[:nc]]
        choice = np.where(first_is_bnd, np.where(ok[nc:], 1, np.where(ok[:nc], 0, -1)),
                          np.where(ok[:nc], 0, np.where(ok[nc:], 1, -1)))
        sel = np.flatnonzero(choice >= 0)
        if len(sel) == 0:
            return 0
        j = sel + nc * choice[sel]
        # greedy independent set in edge order: a collapse locks every vertex
        # of the star of the removed vertex, which leaves all checks above
        # valid for the collapses accepted after it
        locked = np.zeros(N, dtype=bool)
        accept = []
        for jj in j.tolist():
            if locked[x[jj]] or locked[y[jj]]:
                continue
            locked[Ts[starts[jj]:starts[jj] + cnt[jj]]] = True
            accept.append(jj)
        accept = np.array(accept, dtype=np.int64)

        vmap = np.arange(N)
        vmap[x[accept]] = y[accept]
        T = vmap[self.T]
        alive_t = (T[:, 0] != T[:, 1]) & (T[:, 1] != T[:, 2]) & (T[:, 2] != T[:, 0])
        B = vmap[self.B]
        alive_b = B[:, 0] != B[:, 1]
        dead_v = np.zeros(N, dtype=bool)
        dead_v[x[accept]] = True
        alive = np.flatnonzero(~dead_v)
        remap = -np.ones(N, dtype=np.int64)
        remap[alive] = np.arange(len(alive))
        self.V = V[alive]
        self.fixed = self.fixed[alive]
        self.T = remap[T[alive_t]]
        self.Mt = Mt[alive_t]
        self.B = remap[B[alive_b]]
        self.BM = self.BM[alive_b]
        log.debug("collapse: %d candidates, %d admissible, %d done", nc, len(sel), len(accept))
        return len(accept)

    # flip ------------------------------------------------------------------
    def flip(self) -> int:
        mesh = self.mesh()
        Mt = self.Mt
        EE = mesh.edge_elements
        inner = np.flatnonzero(EE[:, 1] >= 0)
        if len(inner) == 0:
            return 0
        E = mesh.edges[inner]
        t1, t2 = EE[inner, 0], EE[inner, 1]
        T = self.T
        a, b = E[:, 0], E[:, 1]
        c = T[t1].sum(axis=1) - a - b
        d = T[t2].sum(axis=1) - a - b
        V = self.V
        ab, ac = V[b] - V[a], V[c] - V[a]
        ccw = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0] > 0
        c, d = np.where(ccw, c, d), np.where(ccw, d, c)
        Mbar = 0.5 * (Mt[t1] + Mt[t2])
        q_old = np.minimum(_quality(V[T[t1]], Mbar), _quality(V[T[t2]], Mbar))
        n1 = np.column_stack((a, d, c))
        n2 = np.column_stack((d, b, c))
        q_new = np.minimum(_quality(V[n1], Mbar), _quality(V[n2], Mbar))
        good = (q_new > q_old * (1.0 + self.cfg.flip_gain) + 1e-12) & (q_new > 0)
        good &= mesh.edge_index(np.column_stack((c, d))) < 0
        # the new diagonal must not itself call for a split or collapse
        lcd = _lengths(V, np.column_stack((c, d)), Mbar)
        good &= (lcd <= self.cfg.split) & (lcd >= self.cfg.collapse)
        idx = np.flatnonzero(good)
        if len(idx) == 0:
            return 0
        used = np.zeros(len(T), dtype=bool)
        newT = T.copy()
        newM = Mt.copy()
        done = 0
        for i in idx:
            i1, i2 = t1[i], t2[i]
            if used[i1] or used[i2]:
                continue
            used[i1] = used[i2] = True
            newT[i1] = n1[i]
            newT[i2] = n2[i]
            newM[i1] = newM[i2] = Mbar[i]
            done += 1
        self.T = newT
        self.Mt = newM
        return done

    # smooth ----------------------------------------------------------------
    def smooth(self) -> int:
        """
        Move each vertex towards the position that would give its edges unit
        metric length. A move is kept only if the worst quality around the
        vertex does not drop and no edge crosses a split/collapse threshold.
        """
        cfg = self.cfg
        mesh = self.mesh()
        Mt = self.Mt
        E = mesh.edges
        Me = _mean_edge_tensor(Mt, mesh.edge_elements)
        V = self.V
        L = np.maximum(_lengths(V, E, Me), 1e-12)
        N = len(V)
        target = np.zeros((N, 2))
        count = np.bincount(E.ravel(), minlength=N).astype(float)
        for s, o in ((0, 1), (1, 0)):
            i, j = E[:, s], E[:, o]
            np.add.at(target, i, V[j] + (V[i] - V[j]) / L[:, None])
        disp = cfg.relaxation * (target / np.maximum(count, 1)[:, None] - V)
        # boundary vertices slide along their (straight) boundary segment
        on_bnd = np.zeros(N, dtype=bool)
        on_bnd[self.B.ravel()] = True
        tang = np.zeros((N, 2))
        vec = V[self.B[:, 1]] - V[self.B[:, 0]]
        vec /= np.linalg.norm(vec, axis=1)[:, None]
        np.add.at(tang, self.B[:, 0], vec)
        np.add.at(tang, self.B[:, 1], vec)
        nrm = np.linalg.norm(tang, axis=1)
        bmove = on_bnd & ~self.fixed & (nrm > 0)
        tang[bmove] /= nrm[bmove, None]
        disp[bmove] = np.einsum("ki,ki->k", disp[bmove], tang[bmove])[:, None] * tang[bmove]
        disp[self.fixed | (on_bnd & ~bmove)] = 0.0
        moving = np.linalg.norm(disp, axis=1) > 0
        T = self.T
        tv = T.ravel()
        q_old = _quality(V[T], Mt)
        star_old = np.full(N, np.inf)
        np.minimum.at(star_old, tv, np.repeat(q_old, 3))
        lo, hi = cfg.collapse, cfg.split
        newV = V + disp
        for _ in range(100):
            q_new = _quality(newV[T], Mt)
            star_new = np.full(N, np.inf)
            np.minimum.at(star_new, tv, np.repeat(q_new, 3))
            L_new = _lengths(newV, E, Me)
            cross = ((L_new > hi) & (L <= hi)) | ((L_new < lo) & (L >= lo))
            revert = (star_new < star_old) | (star_new <= 0)
            revert[E[cross].ravel()] = True
            bad_tri = q_new <= 0
            revert[T[bad_tri].ravel()] = True
            revert &= moving
            if not revert.any():
                break
            newV[revert] = V[revert]
            moving &= ~revert
        else:
            newV = V
            moving[:] = False
        self.V = newV
        return int(moving.sum())

    def run(self) -> TriMesh:
        cfg = self.cfg
        st = self.stats
        for p in range(cfg.max_passes):
            st.passes = p + 1
            mesh = self.check(f"pass {p + 1}") if p else self.mesh()
            n_edges = mesh.n_edges
            if p:
                self.Mt = self.tensors(mesh)
            s = self.split()
            c = self.collapse()
            f = self.flip()
            m = 0
            for _ in range(cfg.smoothing_steps):
                m += self.smooth()
            st.splits += s
            st.collapses += c
            st.flips += f
            st.moves += m
            log.debug("remesh pass %d: %d splits, %d collapses, %d flips, %d moves, %d elements",
                      p + 1, s, c, f, m, len(self.T))
            if s + c + f < cfg.stop_fraction * n_edges:
                st.converged = True
                break
        return self.check("final")


def adapt_mesh(mesh: TriMesh, metric: MetricField, config: RemeshConfig = None, return_stats: bool = False):
    """
    Adapt ``mesh`` so that its edges have near-unit length in ``metric``.

    :arg metric: SPD metric defined on any mesh covering the same domain
    :returns: the adapted :class:`TriMesh` (and :class:`RemeshStats` when
        ``return_stats`` is set)
    :raises InvalidMetricError: if any tensor is not SPD
    :raises RemeshFailureError: if validity cannot be maintained
    """
    config = (config or RemeshConfig()).validate()
    metric.check()
    r = _Remesher(mesh, metric, config)
    out = r.run()
    return (out, r.stats) if return_stats else out
