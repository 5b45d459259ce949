"""Monte-Carlo path statistics and Jacobian-norm probes.

The simulators track, per memory cell, the length of the chain of hops
accumulated by read-then-write events (a write after reading cell j extends
j's chain by one). Dependency questions are answered on the unrolled step
graph whose edges are the per-step recurrence links plus a shortcut from each
cell's write time to its read time.

The probes build the long-range Jacobian of an explicit linear-algebra
recurrence (h_t = f(W h_{t-1} + V A h_read + U x_t)) and split it into the
plain recurrent product and the memory residual, reporting spectral norms.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

MODEL_KINDS = ("tardis-uniform", "uMANN", "urMANN")


@dataclass
class SimTrace:
    """Reads/writes of one simulated episode (steps are 1-based)."""

    T: int
    k: int
    reads: np.ndarray                  # (T,) cell read at each step
    writes: np.ndarray                 # (T,) cell written at each step
    wormholes: list = field(default_factory=list)   # (write_step, read_step)


@dataclass
class PathStats:
    model_kind: str
    T: int
    k: int
    n_sims: int
    chain_lens: np.ndarray             # (n_sims, k) final per-cell chain lengths
    sim_mean_lens: np.ndarray          # (n_sims,)
    per_cell_mean: np.ndarray          # (k,)
    mean_chain_len: float
    t0: int = None
    t1: int = None
    shortest_paths: np.ndarray = None  # (n_sims,)
    outside_lengths: np.ndarray = None


def _simulate_trace(model_kind: str, T: int, k: int, rng) -> tuple:
    lens = np.zeros(k, dtype=np.int64)
    write_time = np.full(k, -1, dtype=np.int64)
    reads = np.zeros(T, dtype=np.int64)
    writes = np.zeros(T, dtype=np.int64)
    wormholes = []
    for t in range(1, T + 1):
        j = int(rng.integers(k))
        reads[t - 1] = j
        if write_time[j] > 0:
            wormholes.append((int(write_time[j]), t))
        if model_kind == "tardis-uniform":
            i = t - 1 if t <= k else j
        elif model_kind == "uMANN":
            i = int(rng.integers(k))
        elif model_kind == "urMANN":
            i = (t - 1) % k
        else:
            raise ValueError(f"simulate_paths: unknown model kind {model_kind!r}")
        writes[t - 1] = i
        if t <= k:
            lens[i] = 0  # chains count from a filled memory
        else:
            lens[i] = lens[j] + 1
        write_time[i] = t
    return lens, SimTrace(T, k, reads, writes, wormholes)


def _adjacency(trace: SimTrace) -> list:
    adj = [[] for _ in range(trace.T + 1)]
    for t in range(trace.T):
        adj[t].append((t + 1, 1))
    for src, dst in trace.wormholes:
        adj[src].append((dst, 1))
    return adj


def shortest_dependency_path(trace: SimTrace, t0: int, t1: int) -> int:
    """Fewest edges from state t0 to state t1 over recurrence plus shortcuts."""
    if t0 >= t1:
        raise ValueError(f"shortest_dependency_path: need t0 < t1, got {t0} >= {t1}")
    if t1 > trace.T:
        raise ValueError(f"shortest_dependency_path: t1={t1} beyond horizon {trace.T}")
    adj = _adjacency(trace)
    dist = [-1] * (trace.T + 1)
    dist[t0] = 0
    queue = deque([t0])
    while queue:
        node = queue.popleft()
        if node == t1:
            return dist[node]
        for nxt, _ in adj[node]:
            if dist[nxt] < 0:
                dist[nxt] = dist[node] + 1
                queue.append(nxt)
    return dist[t1]


def outside_wormhole_travel(trace: SimTrace, t0: int, t1: int) -> int:
    """Fewest recurrence steps from t0 to t1 when shortcut hops are free."""
    if t0 >= t1:
        raise ValueError(f"outside_wormhole_travel: need t0 < t1, got {t0} >= {t1}")
    adj = [[] for _ in range(trace.T + 1)]
    for t in range(trace.T):
        adj[t].append((t + 1, 1))
    for src, dst in trace.wormholes:
        adj[src].append((dst, 0))
    dist = [None] * (trace.T + 1)
    dist[t0] = 0
    queue = deque([t0])
    while queue:
        node = queue.popleft()
        d = dist[node]
        for nxt, w in adj[node]:
            nd = d + w
            if dist[nxt] is None or nd < dist[nxt]:
                dist[nxt] = nd
                if w == 0:
                    queue.appendleft(nxt)
                else:
                    queue.append(nxt)
    return dist[t1]


def simulate_paths(model_kind: str, T: int, k: int, n_sims: int, seed: int = 0,
                   t0: int = None, t1: int = None) -> PathStats:
    """Chain-length statistics over n_sims episodes of uniform random reads."""
    if k <= 0 or T <= 0:
        raise ValueError(f"simulate_paths: need positive T and k, got T={T} k={k}")
    if n_sims <= 0:
        raise ValueError(f"simulate_paths: need n_sims >= 1, got {n_sims}")
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"simulate_paths: unknown model kind {model_kind!r}")
    want_paths = t0 is not None and t1 is not None
    chain = np.zeros((n_sims, k), dtype=np.int64)
    shortest = np.zeros(n_sims, dtype=np.int64) if want_paths else None
    outside = np.zeros(n_sims, dtype=np.int64) if want_paths else None
    for s in range(n_sims):
        rng = substream(seed, f"path-sim/{model_kind}/T{T}/k{k}/{s}")
        lens, trace = _simulate_trace(model_kind, T, k, rng)
        chain[s] = lens
        if want_paths:
            shortest[s] = shortest_dependency_path(trace, t0, t1)
            outside[s] = outside_wormhole_travel(trace, t0, t1)
    return PathStats(model_kind, T, k, n_sims, chain,
                     sim_mean_lens=chain.mean(axis=1),
                     per_cell_mean=chain.mean(axis=0),
                     mean_chain_len=float(chain.mean()),
                     t0=t0, t1=t1, shortest_paths=shortest,
                     outside_lengths=outside)


PATH_CSV_FIELDS = ("model_kind", "T", "k", "seed", "mean_chain_len",
                   "shortest_path", "outside_travel", "chain_lens")


def path_stats_rows(stats: PathStats) -> list:
    """One CSV row per simulation seed."""
    rows = []
    for s in range(stats.n_sims):
        rows.append({
            "model_kind": stats.model_kind,
            "T": stats.T,
            "k": stats.k,
            "seed": s,
            "mean_chain_len": float(stats.sim_mean_lens[s]),
            "shortest_path": "" if stats.shortest_paths is None else int(stats.shortest_paths[s]),
            "outside_travel": "" if stats.outside_lengths is None else int(stats.outside_lengths[s]),
            "chain_lens": ";".join(str(int(v)) for v in stats.chain_lens[s]),
        })
    return rows


# ---------------------------------------------------------------------------
# Jacobian probes


@dataclass
class LinearRecurrenceModel:
    """Explicit recurrence h_t = f(W h_{t-1} + V A h_read + U x_t)."""

    W: np.ndarray
    U: np.ndarray
    V: np.ndarray          # (d, d_r); None disables the memory path
    A: np.ndarray          # (d_r, d) projection stored per cell
    activation: str = "tanh"

    def act(self, z):
        if self.activation == "linear":
            return z, np.ones_like(z)
        h = np.tanh(z)
        return h, 1.0 - h * h


@dataclass
class JacobianProbe:
    t0: int
    t1: int
    norm_full: float
    norm_recurrent: float   # plain product path
    norm_memory: float      # residual through reads


def spectral_norm(M: np.ndarray, tol: float = 1e-8, max_iter: int = 200,
                  seed: int = 0) -> float:
    """Largest singular value by power iteration on M^T M."""
    if not np.isfinite(M).all():
        raise FloatingPointError("spectral_norm: non-finite matrix")
    rng = substream(seed, "power-iteration")
    v = rng.normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = M @ v
        new_sigma = np.linalg.norm(u)
        if new_sigma == 0.0:
            return 0.0
        v = M.T @ u
        v /= np.linalg.norm(v)
        if abs(new_sigma - sigma) < tol * max(new_sigma, 1.0):
            return float(new_sigma)
        sigma = new_sigma
    return float(sigma)


def resolve_read_policy(policy, T: int, t0: int, t1: int, seed: int = 0) -> list:
    """Per-step source timestep for the read, or None for no read.

    "none" disables reads, "oracle" reads the cell holding h_{t0} exactly at
    t1 (other steps fetch the initial state), "uniform" reads a uniformly
    random earlier state. An explicit list passes through.
    """
    if isinstance(policy, (list, tuple, np.ndarray)):
        if len(policy) != T:
            raise ValueError(f"read policy length {len(policy)} != T={T}")
        return list(policy)
    if policy == "none":
        return [None] * T
    if policy == "oracle":
        return [t0 if t == t1 else 0 for t in range(1, T + 1)]
    if policy == "uniform":
        rng = substream(seed, "probe-read-policy")
        return [int(rng.integers(0, t)) for t in range(1, T + 1)]
    raise ValueError(f"unknown read policy {policy!r}")


def jacobian_probe(model: LinearRecurrenceModel, t0: int, t1: int,
                   inputs: np.ndarray, read_policy="none", seed: int = 0,
                   h0: np.ndarray = None) -> JacobianProbe:
    """Forward-accumulated d h_{t1} / d h_{t0} split into product + residual."""
    if t0 >= t1:
        raise ValueError(f"jacobian_probe: need t0 < t1, got {t0} >= {t1}")
    T = inputs.shape[0]
    if t1 > T:
        raise ValueError(f"jacobian_probe: t1={t1} beyond input horizon {T}")
    d = model.W.shape[0]
    policy = resolve_read_policy(read_policy, T, t0, t1, seed=seed)
    has_memory = model.V is not None

    h = np.zeros(d) if h0 is None else np.asarray(h0, dtype=np.float64)
    history = [h]                  # h_0 .. h_T
    jacs = [np.eye(d) if t0 == 0 else np.zeros((d, d))]   # d h_t / d h_{t0}
    q = np.eye(d) if t0 == 0 else None
    full = None
    for t in range(1, t1 + 1):
        z = model.W @ h + model.U @ inputs[t - 1]
        if has_memory and policy[t - 1] is not None:
            z = z + model.V @ (model.A @ history[policy[t - 1]])
        h, deriv = model.act(z)
        if not np.isfinite(h).all():
            raise FloatingPointError(f"jacobian_probe: non-finite state at step {t}")
        history.append(h)
        if t < t0:
            jacs.append(np.zeros((d, d)))
            continue
        if t == t0:
            jacs.append(np.eye(d))
            q = np.eye(d)
            continue
        path = model.W @ jacs[t - 1]
        if has_memory and policy[t - 1] is not None:
            path = path + model.V @ model.A @ jacs[policy[t - 1]]
        jac = deriv[:, None] * path
        if not np.isfinite(jac).all():
            raise FloatingPointError(f"jacobian_probe: non-finite Jacobian at step {t}")
        jacs.append(jac)
        q = deriv[:, None] * (model.W @ q)
        full = jac
    resid = full - q
    return JacobianProbe(t0, t1,
                         norm_full=spectral_norm(full, seed=seed),
                         norm_recurrent=spectral_norm(q, seed=seed),
                         norm_memory=spectral_norm(resid, seed=seed))


def make_probe_model(d: int, d_r: int, seed: int, *, spectral_norm_w: float = 0.9,
                     memory_gain: float = 1.0, activation: str = "linear",
                     with_memory: bool = True) -> LinearRecurrenceModel:
    """Random recurrence with W scaled to a chosen norm and sigma1(VA) = gain."""
    rng = substream(seed, "probe-model")
    W = rng.normal(size=(d, d))
    W *= spectral_norm_w / np.linalg.svd(W, compute_uv=False)[0]
    U = rng.normal(size=(d, d)) / np.sqrt(d)
    V = A = None
    if with_memory:
        V = rng.normal(size=(d, d_r))
        A = rng.normal(size=(d_r, d))
        VA = V @ A
        scale = memory_gain / np.linalg.svd(VA, compute_uv=False)[0]
        V *= scale
    return LinearRecurrenceModel(W, U, V, A, activation)


# ---------------------------------------------------------------------------
# rank statistics for the trend claims


def spearman_correlation(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    def ranks(vals):
        vals = np.asarray(vals, dtype=np.float64)
        order = np.argsort(vals, kind="stable")
        r = np.empty(len(vals))
        r[order] = np.arange(1, len(vals) + 1)
        for v in np.unique(vals):
            sel = vals == v
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)
