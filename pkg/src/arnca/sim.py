"""Forest fire, host-pathogen and stock market automata, plus dataset generation.

All rules update synchronously from the time-``t`` snapshot and draw their
randomness from :class:`~arnca.rng.RngStream`. Each step consumes a fixed
number of draws regardless of grid contents, so streams stay aligned.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import Env, Forest, Grid, Host, SequenceChunk, Stock, window_offsets, write_chunk
from .rng import RngStream, splitmix64

NEIGHBOR_OFFSETS = [o for o in window_offsets(1) if o != (0, 0)]


def _neighbor_views(field: np.ndarray) -> list[np.ndarray]:
    """The 8 Moore-neighbour values of every cell, zero outside the grid."""
    n = field.shape[0]
    padded = np.pad(field, 1)
    return [padded[1 + di:1 + di + n, 1 + dj:1 + dj + n] for di, dj in NEIGHBOR_OFFSETS]


# ------------------------------------------------------------------ forest

@dataclass(frozen=True)
class ForestParams:
    q_seed: float = 6.0
    q_transfer: float = 0.3
    q_threshold: float = 3.0
    q_die: float = 1.0
    p_heat: float = 0.9
    # "ignore": each neighbour is dropped with p_heat; "transfer": kept with p_heat
    heat_mode: str = "ignore"
    # heat of a freshly ignited tree: "seed" restarts it at q_seed, "accumulated"
    # keeps the heat it gathered (fires then die out below ~90% tree density)
    ignition_heat: str = "seed"
    n_seeds: int = 3
    forest_config: str = "dense"
    dense_density: float = 0.70
    sparse_density: float = 0.40
    gaussian_peak: float = 0.85
    gaussian_sigma_frac: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_heat <= 1.0:
            raise ValueError("p_heat must lie in [0, 1]")
        if self.q_transfer <= 0 or self.q_threshold <= 0:
            raise ValueError("q_transfer and q_threshold must be positive")
        if self.heat_mode not in ("ignore", "transfer"):
            raise ValueError(f"unknown heat_mode {self.heat_mode!r}")
        if self.ignition_heat not in ("seed", "accumulated"):
            raise ValueError(f"unknown ignition_heat {self.ignition_heat!r}")
        if self.forest_config not in ("dense", "sparse", "gaussian"):
            raise ValueError(f"unknown forest_config {self.forest_config!r}")


def tree_probability(n: int, params: ForestParams, rng: RngStream) -> np.ndarray:
    if params.forest_config == "dense":
        return np.full((n, n), params.dense_density)
    if params.forest_config == "sparse":
        return np.full((n, n), params.sparse_density)
    mu = rng.random((2,)) * n
    sigma = params.gaussian_sigma_frac * n
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d2 = (ii - mu[0]) ** 2 + (jj - mu[1]) ** 2
    return params.gaussian_peak * np.exp(-d2 / (2 * sigma ** 2))


def init_forest(n: int, params: ForestParams, rng: RngStream) -> Grid:
    if n < 3:
        raise ValueError("n must be >= 3")
    if params.n_seeds > n * n:
        raise ValueError(f"n_seeds={params.n_seeds} exceeds {n * n} cells")
    prob = tree_probability(n, params, rng)
    states = np.where(rng.random((n, n)) < prob, Forest.TREE, Forest.EMPTY).astype(np.uint8)
    heat = np.zeros((n, n), dtype=np.float32)
    seeds = rng.choice_distinct(n * n, params.n_seeds)
    states.flat[seeds] = Forest.FIRE
    heat.flat[seeds] = params.q_seed
    return Grid(Env.FOREST, states, heat=heat)


def step_forest(grid: Grid, params: ForestParams, stochastic: bool, rng: RngStream | None = None) -> Grid:
    if grid.env != Env.FOREST:
        raise ValueError("step_forest needs a forest grid")
    s = grid.states
    q = grid.heat.astype(np.float64)
    burning = (s == Forest.FIRE) | (s == Forest.EMBER)
    radiating = np.where(burning, q, 0.0)
    contributions = _neighbor_views(radiating)
    if stochastic:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        u = rng.random((8,) + s.shape)
        keep = u >= params.p_heat if params.heat_mode == "ignore" else u < params.p_heat
        contributions = [c * k for c, k in zip(contributions, keep)]
    incoming = sum(contributions)

    tree = s == Forest.TREE
    q_new = np.where(tree, q + params.q_transfer * incoming, q)
    states = s.copy()
    ignite = tree & (q_new > params.q_threshold)
    states[ignite] = Forest.FIRE
    if params.ignition_heat == "seed":
        q_new = np.where(ignite, params.q_seed, q_new)
    hot = (states == Forest.FIRE) | (states == Forest.EMBER)
    q_new = np.where(hot, np.maximum(q_new - params.q_die, 0.0), q_new)
    states[s == Forest.FIRE] = Forest.EMBER
    return Grid(Env.FOREST, states, heat=q_new.astype(np.float32))


# ---------------------------------------------------------- host-pathogen

@dataclass(frozen=True)
class HostPathogenParams:
    p_cure: float = 0.15
    p_infect: float = 0.85
    init_infected: float = 0.01
    init_healthy: float = 0.75

    def __post_init__(self) -> None:
        for name in ("p_cure", "p_infect", "init_infected", "init_healthy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.init_infected + self.init_healthy > 1.0:
            raise ValueError("initial fractions exceed 1")


def init_host_pathogen(n: int, params: HostPathogenParams, rng: RngStream) -> Grid:
    u = rng.random((n, n))
    states = np.full((n, n), Host.EMPTY, dtype=np.uint8)
    states[u < params.init_infected + params.init_healthy] = Host.HEALTHY
    states[u < params.init_infected] = Host.INFECTED
    return Grid(Env.HOST_PATHOGEN, states)


def _any_trial(source: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """True where at least one neighbour in ``source`` succeeds a Bernoulli(p) trial."""
    u = rng.random((8,) + source.shape)
    hit = np.zeros(source.shape, dtype=bool)
    for view, draw in zip(_neighbor_views(source), u):
        hit |= view & (draw < p)
    return hit


def step_host_pathogen(grid: Grid, params: HostPathogenParams, rng: RngStream) -> Grid:
    if grid.env != Env.HOST_PATHOGEN:
        raise ValueError("step_host_pathogen needs a host_pathogen grid")
    s = grid.states
    cured = _any_trial(s == Host.HEALTHY, params.p_cure, rng)
    infected = _any_trial(s == Host.INFECTED, params.p_infect, rng)
    out = s.copy()
    out[(s == Host.DEAD) & cured] = Host.HEALTHY
    out[(s == Host.HEALTHY) & infected] = Host.INFECTED
    out[s == Host.INFECTED] = Host.DEAD
    return Grid(Env.HOST_PATHOGEN, out)


# ------------------------------------------------------------ stock market

@dataclass(frozen=True)
class StockParams:
    market_bias: float = 0.05
    p_invest: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 <= self.market_bias < 1.0:
            raise ValueError("market_bias must lie in [0, 1)")
        if not 0.0 <= self.p_invest <= 1.0:
            raise ValueError("p_invest must lie in [0, 1]")


def init_stock(n: int, params: StockParams, rng: RngStream) -> Grid:
    states = rng.integers(3, (n, n)).astype(np.uint8)  # hold, sell, buy
    streak = (states == Stock.BUY).astype(np.uint8)
    return Grid(Env.STOCK, states, buy_streak=streak)


def dominant_state(states: np.ndarray) -> np.ndarray:
    """Most frequent active neighbour state; ties go buy > sell > hold."""
    counts = {}
    for code in (Stock.HOLD, Stock.SELL, Stock.BUY):
        counts[code] = sum(v.astype(np.int16) for v in _neighbor_views(states == code))
    dom = np.full(states.shape, Stock.BUY, dtype=np.uint8)
    best = counts[Stock.BUY].copy()
    for code in (Stock.SELL, Stock.HOLD):
        better = counts[code] > best
        dom[better] = code
        best = np.maximum(best, counts[code])
    return dom


def step_stock(grid: Grid, params: StockParams, rng: RngStream) -> Grid:
    if grid.env != Env.STOCK:
        raise ValueError("step_stock needs a stock grid")
    s = grid.states
    streak = grid.buy_streak
    u_adopt, u_alt, u_bias = rng.random((3,) + s.shape)

    dom = dominant_state(s)
    # the other two active states in ascending code order
    alt_lo = np.where(dom == Stock.HOLD, Stock.SELL, Stock.HOLD)
    alt_hi = np.where(dom == Stock.BUY, Stock.SELL, Stock.BUY)
    alt = np.where(u_alt < 0.5, alt_lo, alt_hi)
    chosen = np.where(u_adopt < params.p_invest, dom, alt)
    chosen = np.where(u_bias < params.market_bias, Stock.BUY, chosen).astype(np.uint8)

    was_inactive = s == Stock.INACTIVE
    exhausted = ~was_inactive & (streak >= 2)
    out = np.where(was_inactive, Stock.BUY, np.where(exhausted, Stock.INACTIVE, chosen)).astype(np.uint8)
    is_buy = out == Stock.BUY
    new_streak = np.where(is_buy, np.where(was_inactive, 1, streak.astype(np.int16) + 1), 0)
    return Grid(Env.STOCK, out, buy_streak=new_streak.astype(np.uint8))


# ------------------------------------------------------------- generation

DEFAULT_PARAMS = {
    Env.FOREST: ForestParams,
    Env.HOST_PATHOGEN: HostPathogenParams,
    Env.STOCK: StockParams,
}


def make_params(env: Env | str, **overrides):
    return DEFAULT_PARAMS[Env.parse(env)](**overrides)


def parse_variant(env: Env, variant: str) -> bool:
    """Return ``stochastic`` for ``variant``; only the forest has a deterministic rule."""
    if variant in ("stoch", "stochastic"):
        return True
    if variant in ("det", "deterministic"):
        if env != Env.FOREST:
            raise ValueError(f"{env.label} has no deterministic variant")
        return False
    raise ValueError(f"unknown variant {variant!r}")


def stepper(env: Env, params, stochastic: bool) -> Callable[[Grid, RngStream], Grid]:
    if env == Env.FOREST:
        return lambda g, rng: step_forest(g, params, stochastic, rng)
    if env == Env.HOST_PATHOGEN:
        return lambda g, rng: step_host_pathogen(g, params, rng)
    return lambda g, rng: step_stock(g, params, rng)


def initializer(env: Env, params) -> Callable[[int, RngStream], Grid]:
    fn = {Env.FOREST: init_forest, Env.HOST_PATHOGEN: init_host_pathogen, Env.STOCK: init_stock}[env]
    return lambda n, rng: fn(n, params, rng)


def chunk_seed(master_seed: int, index: int) -> int:
    return splitmix64((int(master_seed) ^ int(index)) & ((1 << 64) - 1))


def simulate_chunk(env: Env | str, variant: str, n: int, T: int, seed: int, params=None,
                   master_seed: int | None = None) -> SequenceChunk:
    """Roll one episode of ``T`` frames from an ``RngStream(seed)``."""
    env = Env.parse(env)
    stochastic = parse_variant(env, variant)
    if n < 3 or T < 2:
        raise ValueError("need n >= 3 and T >= 2")
    params = params if params is not None else make_params(env)
    rng = RngStream(seed)
    frames = [initializer(env, params)(n, rng)]
    step = stepper(env, params, stochastic)
    for _ in range(T - 1):
        frames.append(step(frames[-1], rng))
    meta = {"env": env.label, "variant": "stoch" if stochastic else "det", "n": n, "T": T,
            "master_seed": master_seed, "rule": asdict(params)}
    return SequenceChunk(env, stochastic, seed, frames, meta)


def _generate_one(job: tuple) -> str:
    env, variant, n, T, master_seed, k, params, out_dir = job
    chunk = simulate_chunk(env, variant, n, T, chunk_seed(master_seed, k), params, master_seed)
    path = Path(out_dir) / f"chunk_{k:05d}.arnc"
    write_chunk(chunk, path)
    return str(path)


def worker_count() -> int:
    cap = os.environ.get("ARNCA_THREADS")
    workers = os.cpu_count() or 1
    return max(1, min(workers, int(cap))) if cap else workers


def generate_dataset(env: Env | str, variant: str, n: int, T: int, n_chunks: int, master_seed: int,
                     out_dir: str | Path, params=None, workers: int | None = None) -> list[Path]:
    """Write ``n_chunks`` chunk files; chunk ``k`` uses seed ``splitmix64(master_seed ^ k)``."""
    env = Env.parse(env)
    parse_variant(env, variant)
    if n < 3 or T < 2:
        raise ValueError("need n >= 3 and T >= 2")
    params = params if params is not None else make_params(env)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(env, variant, n, T, master_seed, k, params, str(out_dir)) for k in range(n_chunks)]
    workers = workers or worker_count()
    if workers > 1 and n_chunks > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_generate_one, jobs))
    else:
        paths = [_generate_one(j) for j in jobs]
    return [Path(p) for p in paths]
