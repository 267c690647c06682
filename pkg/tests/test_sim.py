import hashlib

import numpy as np
import pytest

from arnca.grid import Env, Forest, Grid, Host, Stock, read_chunk
from arnca.rng import RngStream, splitmix64
from arnca.sim import (
    ForestParams, HostPathogenParams, StockParams, chunk_seed, dominant_state, generate_dataset,
    init_forest, init_host_pathogen, init_stock, simulate_chunk, step_forest, step_host_pathogen,
    step_stock,
)

from oracles import forest_step


# ------------------------------------------------------------------ rng

def test_splitmix64_reference_vector():
    # published SplitMix64 outputs for state 1234567
    rng = RngStream(1234567)
    assert [int(v) for v in rng.next_u64(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_rng_vectorised_equals_sequential():
    a, b = RngStream(42), RngStream(42)
    bulk = a.random((10,))
    single = [b.random() for _ in range(10)]
    np.testing.assert_array_equal(bulk, single)
    assert a.state == b.state


def test_splitmix64_function_matches_stream():
    assert splitmix64(99) == int(RngStream(99).next_u64(1)[0])


def test_choice_distinct():
    picks = RngStream(5).choice_distinct(10, 10)
    assert sorted(picks.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        RngStream(5).choice_distinct(3, 4)


# --------------------------------------------------------------- forest

def _forest(states, heat):
    return Grid(Env.FOREST, np.array(states, np.uint8), heat=np.array(heat, np.float32))


def test_init_forest_dense():
    g = init_forest(64, ForestParams(), RngStream(3))
    fire = g.states == Forest.FIRE
    assert fire.sum() == 3
    assert np.all(g.heat[fire] == 6)
    assert np.all(g.heat[~fire] == 0)
    frac = (g.states == Forest.TREE).mean()
    assert 0.65 < frac < 0.75


def test_init_forest_saturated_and_errors():
    g = init_forest(3, ForestParams(n_seeds=9), RngStream(1))
    assert np.all(g.states == Forest.FIRE)
    with pytest.raises(ValueError):
        init_forest(3, ForestParams(n_seeds=10), RngStream(1))


def test_init_forest_deterministic():
    p = ForestParams(forest_config="gaussian")
    assert init_forest(16, p, RngStream(8)) == init_forest(16, p, RngStream(8))


def test_step_forest_ignition_accumulated_mode():
    # tree between a fire (q=6) and an ember (q=6): 0.3 * 12 = 3.6 > 3 -> fire, then 3.6 - 1
    g = _forest([[Forest.FIRE, Forest.TREE, Forest.EMBER]] + [[0, 0, 0]] * 2,
                [[6, 0, 6], [0, 0, 0], [0, 0, 0]])
    out = step_forest(g, ForestParams(ignition_heat="accumulated"), stochastic=False)
    assert out.states[0, 1] == Forest.FIRE
    assert out.heat[0, 1] == np.float32(2.6)


def test_step_forest_ignition_seed_mode():
    g = _forest([[Forest.FIRE, Forest.TREE, Forest.EMBER]] + [[0, 0, 0]] * 2,
                [[6, 0, 6], [0, 0, 0], [0, 0, 0]])
    out = step_forest(g, ForestParams(), stochastic=False)
    assert out.states[0, 1] == Forest.FIRE
    assert out.heat[0, 1] == 5.0
    # the old fire turned to ember, both old burners lost q_die
    assert out.states[0, 0] == Forest.EMBER and out.heat[0, 0] == 5.0
    assert out.heat[0, 2] == 5.0


def test_step_forest_subthreshold_heat_is_kept():
    g = _forest([[Forest.EMBER, Forest.TREE, 0]] + [[0, 0, 0]] * 2, [[2, 0, 0], [0, 0, 0], [0, 0, 0]])
    out = step_forest(g, ForestParams(), stochastic=False)
    assert out.states[0, 1] == Forest.TREE
    assert out.heat[0, 1] == np.float32(0.6)


def test_step_forest_empty_never_changes():
    states = np.full((3, 3), Forest.FIRE, np.uint8)
    states[1, 1] = Forest.EMPTY
    g = _forest(states, np.full((3, 3), 6.0))
    for _ in range(5):
        g = step_forest(g, ForestParams(), stochastic=False)
        assert g.states[1, 1] == Forest.EMPTY


def test_heat_clamped_at_zero():
    g = _forest([[Forest.EMBER]] * 1 + [], [[0.5]]) if False else None
    g = Grid(Env.FOREST, np.full((3, 3), Forest.EMBER, np.uint8), heat=np.full((3, 3), 0.5, np.float32))
    out = step_forest(g, ForestParams(), stochastic=False)
    assert np.all(out.heat == 0)


@pytest.mark.parametrize("ignition", ["seed", "accumulated"])
def test_forest_matches_loop_oracle(ignition):
    params = ForestParams(ignition_heat=ignition, dense_density=0.9)
    g = init_forest(9, params, RngStream(21))
    s, q = g.states.tolist(), g.heat.astype(float).tolist()
    for _ in range(12):
        g = step_forest(g, params, stochastic=False)
        s, q = forest_step(s, q, ignition=ignition)
        np.testing.assert_array_equal(g.states, np.array(s))
        np.testing.assert_array_equal(g.heat, np.array(q, np.float32))


@pytest.mark.parametrize("config", ["dense", "sparse", "gaussian"])
@pytest.mark.parametrize("variant", ["det", "stoch"])
def test_forest_trajectory_invariants(config, variant):
    p = ForestParams(forest_config=config, heat_mode="transfer")
    chunk = simulate_chunk("forest", variant, 24, 40, seed=chunk_seed(3, 1), params=p)
    s = chunk.states()
    trees = (s == Forest.TREE).reshape(len(s), -1).sum(1)
    empties = (s == Forest.EMPTY).reshape(len(s), -1).sum(1)
    burned = chunk.masks().reshape(len(s), -1).sum(1)
    assert np.all(np.diff(trees) <= 0)
    assert np.all(empties == empties[0])
    assert np.all(np.diff(burned) >= 0)
    allowed = {(0, 0), (1, 1), (1, 2), (2, 3), (3, 3)}
    pairs = set(zip(s[:-1].ravel().tolist(), s[1:].ravel().tolist()))
    assert pairs <= allowed
    assert all(np.all(f.heat >= 0) for f in chunk.frames)


def test_forest_deterministic_step_is_pure():
    g = init_forest(12, ForestParams(), RngStream(4))
    before = g.copy()
    a = step_forest(g, ForestParams(), False)
    b = step_forest(g, ForestParams(), False)
    assert a == b and g == before


def test_stochastic_forest_heat_modes():
    # one fire neighbour of heat 6; transfer probability is 0.1 in "ignore" mode
    n = 3
    params = ForestParams(q_threshold=100)
    hits = {"ignore": 0, "transfer": 0}
    trials = 4000
    for mode in hits:
        p = ForestParams(q_threshold=100, heat_mode=mode)
        rng = RngStream(17)
        for _ in range(trials):
            g = _forest([[Forest.FIRE, Forest.TREE, 0], [0, 0, 0], [0, 0, 0]],
                        [[6, 0, 0], [0, 0, 0], [0, 0, 0]])
            out = step_forest(g, p, True, rng)
            hits[mode] += out.heat[0, 1] > 0
    assert params.p_heat == 0.9
    for mode, rate in (("ignore", 0.1), ("transfer", 0.9)):
        sigma = np.sqrt(rate * (1 - rate) / trials)
        assert abs(hits[mode] / trials - rate) < 4 * sigma
    assert n == 3


# -------------------------------------------------------- host-pathogen

def test_init_host_fractions():
    g = init_host_pathogen(128, HostPathogenParams(), RngStream(2))
    frac = np.bincount(g.states.ravel(), minlength=4) / g.states.size
    assert abs(frac[Host.INFECTED] - 0.01) < 0.005
    assert abs(frac[Host.HEALTHY] - 0.75) < 0.02
    assert frac[Host.DEAD] == 0


def test_infected_always_dies():
    chunk = simulate_chunk("host", "stoch", 32, 10, seed=5)
    s = chunk.states()
    assert np.all(s[1:][s[:-1] == Host.INFECTED] == Host.DEAD)
    empties = (s == Host.EMPTY).reshape(len(s), -1).sum(1)
    assert np.all(empties == empties[0])


def test_dead_without_healthy_neighbours_stays_dead():
    g = Grid(Env.HOST_PATHOGEN, np.full((3, 3), Host.DEAD))
    out = step_host_pathogen(g, HostPathogenParams(p_cure=1.0), RngStream(1))
    assert np.all(out.states == Host.DEAD)


def _tiled(m, centre, neighbours, n_marked):
    """``m x m`` independent 4x4 blocks: ``centre`` at (1,1), ``n_marked`` neighbours set."""
    block = np.full((4, 4), Host.EMPTY, np.uint8)
    block[1, 1] = centre
    spots = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]
    for a, b in spots[:n_marked]:
        block[a, b] = neighbours
    return np.tile(block, (m, m))


def test_monte_carlo_infection_two_neighbours():
    m = 317
    g = Grid(Env.HOST_PATHOGEN, _tiled(m, Host.HEALTHY, Host.INFECTED, 2))
    out = step_host_pathogen(g, HostPathogenParams(), RngStream(2024))
    rate = (out.states[1::4, 1::4] == Host.INFECTED).mean()
    p = 1 - (1 - 0.85) ** 2
    assert p == pytest.approx(0.9775)
    assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / m ** 2)


@pytest.mark.parametrize("k", [1, 3])
def test_monte_carlo_cure(k):
    m = 200
    g = Grid(Env.HOST_PATHOGEN, _tiled(m, Host.DEAD, Host.HEALTHY, k))
    out = step_host_pathogen(g, HostPathogenParams(), RngStream(7 + k))
    rate = (out.states[1::4, 1::4] == Host.HEALTHY).mean()
    p = 1 - (1 - 0.15) ** k
    assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / m ** 2)


# --------------------------------------------------------- stock market

def _stock(states, streak=None):
    states = np.array(states, np.uint8)
    if streak is None:
        streak = (states == Stock.BUY).astype(np.uint8)
    return Grid(Env.STOCK, states, buy_streak=np.array(streak, np.uint8))


def test_init_stock():
    g = init_stock(64, StockParams(), RngStream(1))
    assert not np.any(g.states == Stock.INACTIVE)
    np.testing.assert_array_equal(g.buy_streak, g.states == Stock.BUY)


def test_two_buys_become_inactive_then_buy():
    g = _stock([[Stock.BUY] * 3] * 3, np.full((3, 3), 2))
    out = step_stock(g, StockParams(), RngStream(1))
    assert np.all(out.states == Stock.INACTIVE)
    again = step_stock(out, StockParams(), RngStream(2))
    assert np.all(again.states == Stock.BUY)
    assert np.all(again.buy_streak == 1)


def test_dominant_sell_wins():
    S, B = Stock.SELL, Stock.BUY
    g = _stock([[S, S, S], [S, Stock.HOLD, B], [S, B, B]])
    out = step_stock(g, StockParams(market_bias=0.0, p_invest=1.0), RngStream(3))
    assert out.states[1, 1] == Stock.SELL


def test_dominant_tie_break_prefers_buy():
    S, B, H = Stock.SELL, Stock.BUY, Stock.HOLD
    states = np.array([[S, S, B], [H, H, B], [H, S, B]], np.uint8)  # 3 sell, 3 buy, 2 hold
    assert dominant_state(states)[1, 1] == Stock.BUY


def test_stock_alternation_rules_hold_with_probability_one():
    chunk = simulate_chunk("stock", "stoch", 32, 12, seed=9)
    s = chunk.states()
    assert s[:-1].size >= 10 ** 4
    assert np.all(s[1:][s[:-1] == Stock.INACTIVE] == Stock.BUY)
    streak = np.stack([f.buy_streak for f in chunk.frames])
    assert np.all(s[1:][(streak[:-1] == 2)] == Stock.INACTIVE)
    for t in range(1, len(s)):
        inactive = s[t] == Stock.INACTIVE
        assert np.all(s[t - 1][inactive] == Stock.BUY)
        if t >= 2:
            assert np.all(s[t - 2][inactive] == Stock.BUY) or t - 2 == 0
    assert not np.any((s[1:] == Stock.INACTIVE) & (s[:-1] == Stock.INACTIVE))
    assert set(np.unique(streak).tolist()) <= {0, 1, 2}


def test_stock_market_bias_and_invest_law():
    # hold cell surrounded by hold: stays hold with p_invest*(1-M)
    m = 200
    block = np.full((3, 3), Stock.HOLD, np.uint8)
    g = _stock(np.tile(block, (m, m)))
    out = step_stock(g, StockParams(), RngStream(11))
    inner = out.states[1:-1, 1:-1]
    p_hold = 0.95 * 0.95
    p_buy = 0.05 + 0.95 * 0.05 / 2
    n = inner.size
    assert abs((inner == Stock.HOLD).mean() - p_hold) < 4 * np.sqrt(p_hold * (1 - p_hold) / n)
    assert abs((inner == Stock.BUY).mean() - p_buy) < 4 * np.sqrt(p_buy * (1 - p_buy) / n)


# ----------------------------------------------------------- generation

def _digest(paths):
    return [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]


def test_generate_dataset_counts_and_determinism(tmp_path):
    a = generate_dataset("forest", "det", 16, 12, 5, master_seed=7, out_dir=tmp_path / "a", workers=1)
    b = generate_dataset("forest", "det", 16, 12, 5, master_seed=7, out_dir=tmp_path / "b", workers=1)
    assert len(a) == 5
    assert _digest(a) == _digest(b)
    chunk = read_chunk(a[3])
    assert chunk.T == 12 and chunk.n == 16
    assert chunk.seed == chunk_seed(7, 3)
    assert chunk.params["master_seed"] == 7 and chunk.params["rule"]["q_transfer"] == 0.3


def test_generate_dataset_parallel_matches_serial(tmp_path):
    a = generate_dataset("stock", "stoch", 8, 6, 4, 3, tmp_path / "a", workers=1)
    b = generate_dataset("stock", "stoch", 8, 6, 4, 3, tmp_path / "b", workers=2)
    assert _digest(a) == _digest(b)


def test_generate_host_frame_one_has_no_old_infections(tmp_path):
    paths = generate_dataset("host", "stoch", 16, 30, 3, 1, tmp_path, workers=1)
    for p in paths:
        s = read_chunk(p).states()
        assert s.shape[0] == 30
        assert not np.any((s[0] == Host.INFECTED) & (s[1] == Host.INFECTED))


def test_variant_validation(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset("host", "det", 8, 4, 1, 0, tmp_path)
    with pytest.raises(ValueError):
        simulate_chunk("stock", "det", 8, 4, seed=0)
    with pytest.raises(ValueError):
        simulate_chunk("forest", "det", 2, 4, seed=0)
