"""Vicsek-type particle simulators and latent-factor designs built from them.

Every observation is one velocity component of one particle at frame
``tau``; it is a loading-weighted sum of an unknown interaction function
evaluated at inputs taken from frame ``tau - 1`` plus Gaussian noise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .matern import SortedInputs
from .structured import Interaction, SparseLoadings, StructuredCov

log = logging.getLogger(__name__)

MODELS = ("unnormalized_vicsek", "modified_vicsek")
CSV_HEADER = ("tau", "particle", "sx", "sy", "vx", "vy")


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class ParticleTrajectory:
    """Long-format trajectory sorted by (frame, particle id).

    ``frame`` is 0-based here; the CSV stores it 1-based as ``tau``.
    ``noise`` holds the simulated velocity noise (zeros for frame 0) when
    the trajectory came from a simulator.
    """

    frame: np.ndarray
    pid: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    h: float = 0.1
    noise: np.ndarray | None = None
    _offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        frame = np.asarray(self.frame, dtype=np.int64)
        pid = np.asarray(self.pid, dtype=np.int64)
        order = np.lexsort((pid, frame))
        for name, arr in (("frame", frame), ("pid", pid)):
            object.__setattr__(self, name, arr[order])
        for name in ("pos", "vel", "noise"):
            arr = getattr(self, name)
            if arr is not None:
                object.__setattr__(self, name, np.asarray(arr, dtype=float)[order])
        if not self.h > 0:
            raise ValueError("frame spacing h must be positive")
        if not (np.all(np.isfinite(self.pos)) and np.all(np.isfinite(self.vel))):
            raise ValueError("positions and velocities must be finite")
        f, p = self.frame, self.pid
        if np.any((f[1:] == f[:-1]) & (p[1:] == p[:-1])):
            raise ValueError("particle ids must be unique within a frame")
        frames = np.arange(f.max() + 2) if f.size else np.zeros(1, dtype=np.int64)
        object.__setattr__(self, "_offsets", np.searchsorted(f, frames))

    @property
    def n_frames(self) -> int:
        return self._offsets.size - 1

    def frame_slice(self, t: int) -> slice:
        return slice(self._offsets[t], self._offsets[t + 1])

    def n_particles(self, t: int) -> int:
        s = self.frame_slice(t)
        return s.stop - s.start

    def frames_between(self, start: int, stop: int) -> "ParticleTrajectory":
        """Sub-trajectory holding frames ``start <= t < stop``, renumbered from 0."""
        sel = slice(self._offsets[start], self._offsets[stop])
        noise = None if self.noise is None else self.noise[sel]
        return ParticleTrajectory(self.frame[sel] - start, self.pid[sel], self.pos[sel],
                                  self.vel[sel], self.h, noise)


def write_trajectory_csv(traj: ParticleTrajectory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i in range(traj.frame.size):
            fh.write("%d,%d,%r,%r,%r,%r\n" % (
                traj.frame[i] + 1, traj.pid[i],
                float(traj.pos[i, 0]), float(traj.pos[i, 1]),
                float(traj.vel[i, 0]), float(traj.vel[i, 1]),
            ))


def read_trajectory_csv(path, h: float = 0.1) -> ParticleTrajectory:
    """Read the trajectory CSV; unknown extra columns are ignored."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"trajectory CSV is missing columns {sorted(missing)}")
        rows = [(int(r["tau"]), int(r["particle"]), float(r["sx"]), float(r["sy"]),
                 float(r["vx"]), float(r["vy"])) for r in reader]
    if not rows:
        raise ValueError("trajectory CSV has no rows")
    arr = np.array(rows, dtype=float)
    return ParticleTrajectory(arr[:, 0].astype(np.int64) - 1, arr[:, 1].astype(np.int64),
                              arr[:, 2:4], arr[:, 4:6], h=h)


# --------------------------------------------------------------------------
# neighbor search


def _pairs_to_lists(i, k, n):
    order = np.lexsort((k, i))
    i, k = i[order], k[order]
    indptr = np.searchsorted(i, np.arange(n + 1))
    return indptr, k


def neighbor_search(positions, radius: float, predicate: Callable | None = None,
                    include_self: bool = True):
    """Fixed-radius neighbors with a uniform cell list.

    Returns CSR-style ``(indptr, indices)``: the neighbors of particle ``i``
    are ``indices[indptr[i]:indptr[i+1]]`` in increasing order.  Pairs need
    ``||s_i - s_k|| < radius`` and, if given, ``predicate(i, k)`` (vectorized
    over index arrays) to hold.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    if n == 0:
        return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cell = np.floor((pos - pos.min(axis=0)) / radius).astype(np.int64)
    ny = cell[:, 1].max() + 3
    key = (cell[:, 0] + 1) * ny + (cell[:, 1] + 1)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    ii, kk = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            target = key + dx * ny + dy
            lo = np.searchsorted(skey, target, side="left")
            hi = np.searchsorted(skey, target, side="right")
            cnt = hi - lo
            src = np.repeat(np.arange(n), cnt)
            start = np.repeat(lo - np.cumsum(cnt) + cnt, cnt)
            ii.append(src)
            kk.append(order[start + np.arange(src.size)])
    i = np.concatenate(ii)
    k = np.concatenate(kk)
    keep = _pair_filter(pos, i, k, radius, predicate, include_self)
    return _pairs_to_lists(i[keep], k[keep], n)


def _pair_filter(pos, i, k, radius, predicate, include_self):
    diff = pos[i] - pos[k]
    keep = np.einsum("ij,ij->i", diff, diff) < radius * radius
    keep &= (i != k) | include_self
    if predicate is not None:
        keep &= np.asarray(predicate(i, k), dtype=bool)
    return keep


def neighbor_search_brute(positions, radius: float, predicate: Callable | None = None,
                          include_self: bool = True):
    """O(n^2) reference for :func:`neighbor_search`."""
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    i, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, k = i.ravel(), k.ravel()
    keep = _pair_filter(pos, i, k, radius, predicate, include_self)
    return _pairs_to_lists(i[keep], k[keep], n)


def aligned_velocity_predicate(vel):
    """Pair filter keeping neighbors that move in the same half-plane."""
    vel = np.asarray(vel, dtype=float)
    return lambda i, k: np.einsum("ij,ij->i", vel[i], vel[k]) > 0


# --------------------------------------------------------------------------
# simulation


def identity_interaction(d):
    return np.asarray(d, dtype=float)


def default_repulsion(radius2: float) -> Callable:
    """Smooth short-range repulsion ``(r' - d) exp(-d / r')`` for ``d < r'``."""
    def f(d):
        d = np.asarray(d, dtype=float)
        return np.where(d < radius2, (radius2 - d) * np.exp(-d / radius2), 0.0)
    return f


@dataclass(frozen=True)
class SimConfig:
    model: str = "unnormalized_vicsek"
    n_p: int = 100
    n_tau: int = 10
    h: float = 0.1
    sigma0: float = 0.1
    radius: float = 0.5
    radius2: float | None = None
    seed: int = 0
    init_speed: float = np.sqrt(2.0) / 2.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.n_p < 1 or self.n_tau < 1:
            raise ValueError("n_p and n_tau must be positive")
        if not (self.h > 0 and self.sigma0 >= 0 and self.radius > 0 and self.init_speed > 0):
            raise ValueError("h, radius and init_speed must be positive; sigma0 nonnegative")
        if self.model == "modified_vicsek" and not (self.radius2 and self.radius2 > 0):
            raise ValueError("modified_vicsek needs a positive radius2")


def _streams(seed: int):
    # independent counter-based streams for positions, headings and noise
    children = np.random.SeedSequence(seed).spawn(3)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _neighbor_mean(indptr, idx, values):
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(counts.size), counts)
    sums = np.stack([np.bincount(rows, weights=values[idx, c], minlength=counts.size)
                     for c in range(values.shape[1])], axis=1)
    return sums / counts[:, None]


def _separation(pos, i, k):
    diff = pos[i] - pos[k]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    unit = np.zeros_like(diff)
    nz = dist > 0
    unit[nz] = diff[nz] / dist[nz, None]
    return dist, unit


def _simulate(cfg: SimConfig, f: Callable | None) -> ParticleTrajectory:
    n, T = cfg.n_p, cfg.n_tau
    rng_pos, rng_head, rng_noise = _streams(cfg.seed)
    pos = np.empty((T + 1, n, 2))
    vel = np.empty((T + 1, n, 2))
    noise = np.zeros((T + 1, n, 2))
    pos[0] = rng_pos.uniform(0.0, np.sqrt(n), size=(n, 2))
    phi = rng_head.uniform(-np.pi, np.pi, size=n)
    vel[0] = cfg.init_speed * np.column_stack([np.cos(phi), np.sin(phi)])
    for t in range(1, T + 1):
        indptr, idx = neighbor_search(pos[t - 1], cfg.radius)
        drift = _neighbor_mean(indptr, idx, vel[t - 1])
        if f is not None:
            ip2, idx2 = neighbor_search(pos[t - 1], cfg.radius2, include_self=False)
            rows = np.repeat(np.arange(n), np.diff(ip2))
            dist, unit = _separation(pos[t - 1], rows, idx2)
            push = unit * np.asarray(f(dist), dtype=float)[:, None]
            cnt = np.diff(ip2)
            second = np.stack([np.bincount(rows, weights=push[:, c], minlength=n)
                               for c in range(2)], axis=1)
            second[cnt > 0] /= cnt[cnt > 0, None]
            drift = drift + second
        noise[t] = cfg.sigma0 * rng_noise.standard_normal((n, 2))
        vel[t] = drift + noise[t]
        pos[t] = pos[t - 1] + vel[t] * cfg.h
    frame = np.repeat(np.arange(T + 1), n)
    pid = np.tile(np.arange(1, n + 1), T + 1)
    return ParticleTrajectory(frame, pid, pos.reshape(-1, 2), vel.reshape(-1, 2), cfg.h,
                              noise.reshape(-1, 2))


def simulate_unnormalized_vicsek(cfg: SimConfig) -> ParticleTrajectory:
    """Each velocity is the mean neighbor velocity (self included) plus noise."""
    if cfg.model != "unnormalized_vicsek":
        raise ValueError("config is not for the unnormalized Vicsek model")
    return _simulate(cfg, None)


def simulate_modified_vicsek(cfg: SimConfig, f: Callable | None = None) -> ParticleTrajectory:
    """Alignment term plus a distance-dependent push averaged over ``ne'``.

    ``ne'`` holds the other particles within ``radius2``; the push from
    ``k`` on ``i`` is ``f(d_ik)`` along the unit vector from ``k`` to ``i``.
    ``f`` defaults to :func:`default_repulsion`.
    """
    if cfg.model != "modified_vicsek":
        raise ValueError("config is not for the modified Vicsek model")
    if f is None:
        f = default_repulsion(cfg.radius2)
    return _simulate(cfg, f)


def simulate(cfg: SimConfig, f: Callable | None = None) -> ParticleTrajectory:
    if cfg.model == "unnormalized_vicsek":
        return simulate_unnormalized_vicsek(cfg)
    return simulate_modified_vicsek(cfg, f)


# --------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class DesignSchema:
    """How observations load on latent functions.

    kind
        ``unnormalized_vicsek``: one function of neighbor velocity components.
        ``modified_vicsek``: alignment (``radius``) plus distance (``radius2``).
        ``cell``: one direction ``direction`` of the directional model, with
        neighbors restricted to positive velocity inner products.
    """

    kind: str = "unnormalized_vicsek"
    radius: float = 0.5
    radius2: float | None = None
    direction: int | None = None

    def __post_init__(self):
        if self.kind not in MODELS + ("cell",):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.kind == "modified_vicsek" and not (self.radius2 and self.radius2 > 0):
            raise ValueError("modified_vicsek designs need radius2")
        if self.kind == "cell" and self.direction not in (0, 1):
            raise ValueError("cell designs need direction 0 or 1")

    @property
    def n_interactions(self) -> int:
        return 2 if self.kind == "modified_vicsek" else 1


@dataclass(frozen=True)
class FactorInputs:
    """Unordered inputs of one latent function and their loadings."""

    inputs: np.ndarray  # (N_j,)
    rows: np.ndarray  # (nnz,) observation row of each loading entry
    cols: np.ndarray  # (nnz,) input index of each loading entry
    values: np.ndarray  # (nnz,)

    @property
    def n_inputs(self) -> int:
        return self.inputs.size


@dataclass(frozen=True)
class FactorDesign:
    """Latent-factor design: outputs ``y`` and one :class:`FactorInputs` per function.

    ``row_frame``/``row_particle``/``row_dir`` identify each observation row;
    ``row_noise_scale`` multiplies the nugget per row (ones unless the noise
    is heteroscedastic, as in the cell model).
    """

    schema: DesignSchema
    y: np.ndarray
    factors: tuple
    row_frame: np.ndarray
    row_particle: np.ndarray
    row_dir: np.ndarray
    row_noise_scale: np.ndarray
    dropped_frames: int = 0

    @property
    def n_rows(self) -> int:
        return self.y.size

    def loadings(self, j: int) -> SparseLoadings:
        """Loadings of function ``j`` in original (unordered) input order."""
        fac = self.factors[j]
        return SparseLoadings.from_triplets(fac.rows, fac.cols, fac.values, self.n_rows, fac.n_inputs)

    def sorted_inputs(self, j: int) -> SortedInputs:
        return SortedInputs.from_unordered(self.factors[j].inputs)

    def row_mask(self, frames) -> np.ndarray:
        return np.isin(self.row_frame, np.asarray(frames))

    def structured_cov(self, params, nugget: float, jitter: float | None = None,
                       row_mask=None) -> StructuredCov:
        """Operator ``sum_j A_j Sigma_j A_j' + nugget * diag(row_noise_scale)``.

        ``row_mask`` zeroes the loadings of excluded rows; the inputs of every
        row remain in the latent operators, so predictions at held-out rows
        can be formed from the same operators.
        """
        if len(params) != len(self.factors):
            raise ValueError("need one MaternParams per interaction")
        its = []
        for j, p in enumerate(params):
            inputs = self.sorted_inputs(j)
            A = self.loadings(j)
            if row_mask is not None:
                A = A.rows(row_mask)
            its.append(Interaction.build(p, inputs, A.permuted(inputs), jitter=jitter))
        nug = nugget * self.row_noise_scale
        if np.all(self.row_noise_scale == 1.0):
            nug = float(nugget)
        elif row_mask is not None:
            nug = np.where(row_mask, nug, nugget)
        return StructuredCov(its, nug, self.n_rows)

    def signal(self, functions) -> np.ndarray:
        """``sum_j A_j z_j(d_j)`` for callables ``functions[j]``."""
        out = np.zeros(self.n_rows)
        for fac, fn in zip(self.factors, functions):
            z = np.asarray(fn(fac.inputs), dtype=float)
            np.add.at(out, fac.rows, fac.values * z[fac.cols])
        return out


def _sample_velocity_variance(vel):
    if vel.shape[0] < 2:
        return np.ones(2)
    return np.var(vel, axis=0, ddof=1)


def build_design(traj: ParticleTrajectory, schema: DesignSchema) -> FactorDesign:
    """Assemble inputs, loadings and outputs for every frame ``tau >= 1``.

    Observation rows are ordered by frame, then particle, then direction;
    only particles present in both frames ``tau - 1`` and ``tau`` contribute.
    """
    if traj.n_frames < 2:
        raise ValueError("need at least two frames")
    J = schema.n_interactions
    dirs = (schema.direction,) if schema.kind == "cell" else (0, 1)
    acc = [dict(inputs=[], rows=[], cols=[], values=[]) for _ in range(J)]
    n_in = [0] * J
    y, rf, rp, rd, rs = [], [], [], [], []
    row0 = 0
    dropped = 0

    def push(j, rows, inputs, values):
        # one loading entry per (row, input) pair; inputs numbered in push order
        m = inputs.size
        acc[j]["inputs"].append(inputs)
        acc[j]["rows"].append(rows)
        acc[j]["cols"].append(np.arange(n_in[j], n_in[j] + m))
        acc[j]["values"].append(values)
        n_in[j] += m

    for t in range(1, traj.n_frames):
        prev, cur = traj.frame_slice(t - 1), traj.frame_slice(t)
        pid_prev, pid_cur = traj.pid[prev], traj.pid[cur]
        common, ip, ic = np.intersect1d(pid_prev, pid_cur, assume_unique=True, return_indices=True)
        if common.size == 0:
            dropped += 1
            continue
        pos, vel = traj.pos[prev], traj.vel[prev]
        out_vel = traj.vel[cur][ic]
        n_obs = common.size
        n_dir = len(dirs)
        obs_row = row0 + np.arange(n_obs) * n_dir  # first row of each particle block

        if schema.kind == "cell":
            pred = aligned_velocity_predicate(vel)
            indptr, idx = neighbor_search(pos, schema.radius, predicate=pred)
        else:
            indptr, idx = neighbor_search(pos, schema.radius)
        counts = np.diff(indptr)[ip]
        starts = indptr[:-1][ip]
        nb = np.concatenate([idx[s:s + c] for s, c in zip(starts, counts)]) if n_obs else idx[:0]
        owner = np.repeat(np.arange(n_obs), counts)
        weight = np.zeros(n_obs)
        weight[counts > 0] = 1.0 / counts[counts > 0]
        # alignment-type factor: entry (row of direction l, input v_{k,l})
        for li, l in enumerate(dirs):
            push(0, obs_row[owner] + li, vel[nb, l], weight[owner])

        if schema.kind == "modified_vicsek":
            ip2, idx2 = neighbor_search(pos, schema.radius2, include_self=False)
            c2 = np.diff(ip2)[ip]
            s2 = ip2[:-1][ip]
            nb2 = np.concatenate([idx2[s:s + c] for s, c in zip(s2, c2)]) if n_obs else idx2[:0]
            own2 = np.repeat(np.arange(n_obs), c2)
            dist, unit = _separation(pos, ip[own2], nb2)
            w2 = np.zeros(n_obs)
            w2[c2 > 0] = 1.0 / c2[c2 > 0]
            m = dist.size
            rows = np.stack([obs_row[own2], obs_row[own2] + 1], axis=1).ravel()
            vals = (unit * w2[own2, None]).ravel()
            acc[1]["inputs"].append(dist)
            acc[1]["rows"].append(rows)
            acc[1]["cols"].append(np.repeat(np.arange(n_in[1], n_in[1] + m), 2))
            acc[1]["values"].append(vals)
            n_in[1] += m

        var_prev = _sample_velocity_variance(vel) if schema.kind == "cell" else np.ones(2)
        y.append(out_vel[:, list(dirs)].ravel())
        rf.append(np.full(n_obs * n_dir, t))
        rp.append(np.repeat(common, n_dir))
        rd.append(np.tile(np.array(dirs), n_obs))
        rs.append(np.tile(var_prev[list(dirs)], n_obs))
        row0 += n_obs * n_dir

    if dropped:
        log.warning("dropped %d frames without observations", dropped)
    factors = tuple(
        FactorInputs(*(np.concatenate(a[key]) if a[key] else np.zeros(0)
                       for key in ("inputs", "rows", "cols", "values")))
        for a in acc
    )
    factors = tuple(FactorInputs(f.inputs, f.rows.astype(np.int64), f.cols.astype(np.int64), f.values)
                    for f in factors)
    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)  # noqa: E731
    return FactorDesign(schema, cat(y, float), factors, cat(rf, np.int64), cat(rp, np.int64),
                        cat(rd, np.int64), cat(rs, float), dropped)


def true_functions(schema: DesignSchema, f: Callable | None = None):
    """Ground-truth interaction functions of the simulators."""
    if schema.kind == "modified_vicsek":
        return (identity_interaction, f if f is not None else default_repulsion(schema.radius2))
    return (identity_interaction,)
