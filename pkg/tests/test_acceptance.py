"""Acceptance suite: one PASS/FAIL line per criterion, at the agreed tolerances.

The lines are collected into an "acceptance criteria" section at the end of
the pytest run. The learning-signal, scale-transfer, data-efficiency and
reproducibility checks train real models and take over an hour in total on a
single CPU core.

    pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest

from arnca import autodiff as ad
from arnca.autodiff import ParamStore, Tensor
from arnca.grid import Env, Forest, Grid, Host, Stock
from arnca.metrics import auc_roc, f1_score
from arnca.models import ArncaConfig, attend_tokens, init_params, lstm_cell
from arnca.rng import RngStream
from arnca.sim import ForestParams, HostPathogenParams, chunk_seed, simulate_chunk, step_forest, step_host_pathogen
from arnca.training import PersistencePredictor, TrainConfig, evaluate, scale_transfer_eval, train
from arnca.verify import step_gradcheck

from oracles import confusion_f1, forest_step, pairwise_auc
from test_autodiff import PRIMITIVES


# ------------------------------------------------------------ simulator oracle

# Written out by hand before the simulator existed: 5x5 grid, all empty except
# row 2 = [fire q=6, tree, tree, tree, tree]. Each tick a tree gains 0.3 x the
# heat of its burning neighbours, ignites above 3 (restarting at q=6), and
# every fire or ember then loses 1. Listed: row 2 as (state, heat) for t=1..10.
E, T, F = "E", "T", "F"
HAND_ROWS = {
    1: [(E, 5.0), (T, 1.8), (T, 0.0), (T, 0.0), (T, 0.0)],
    2: [(E, 4.0), (F, 5.0), (T, 0.0), (T, 0.0), (T, 0.0)],
    3: [(E, 3.0), (E, 4.0), (T, 1.5), (T, 0.0), (T, 0.0)],
    4: [(E, 2.0), (E, 3.0), (T, 2.7), (T, 0.0), (T, 0.0)],
    5: [(E, 1.0), (E, 2.0), (F, 5.0), (T, 0.0), (T, 0.0)],
    6: [(E, 0.0), (E, 1.0), (E, 4.0), (T, 1.5), (T, 0.0)],
    7: [(E, 0.0), (E, 0.0), (E, 3.0), (T, 2.7), (T, 0.0)],
    8: [(E, 0.0), (E, 0.0), (E, 2.0), (F, 5.0), (T, 0.0)],
    9: [(E, 0.0), (E, 0.0), (E, 1.0), (E, 4.0), (T, 1.5)],
    10: [(E, 0.0), (E, 0.0), (E, 0.0), (E, 3.0), (T, 2.7)],
}
CODE = {"E": Forest.EMBER, "T": Forest.TREE, "F": Forest.FIRE}
PINNED_SEED = 20240601


def test_simulator_oracle(criterion):
    clock = time.perf_counter()
    states = np.zeros((5, 5), np.uint8)
    heat = np.zeros((5, 5), np.float32)
    states[2] = [Forest.FIRE] + [Forest.TREE] * 4
    heat[2, 0] = 6.0
    g = Grid(Env.FOREST, states, heat=heat)
    mismatches = []
    for t in range(1, 11):
        g = step_forest(g, ForestParams(), stochastic=False)
        want_s = np.zeros((5, 5), np.uint8)
        want_q = np.zeros((5, 5), np.float32)
        want_s[2] = [CODE[s] for s, _ in HAND_ROWS[t]]
        want_q[2] = [q for _, q in HAND_ROWS[t]]
        if not (np.array_equal(g.states, want_s) and np.array_equal(g.heat, want_q)):
            mismatches.append(t)

    # a seeded random 5x5 start against the independent loop implementation
    chunk = simulate_chunk("forest", "det", 5, 11, seed=PINNED_SEED)
    s, q = chunk.frames[0].states.tolist(), chunk.frames[0].heat.astype(float).tolist()
    for t in range(1, 11):
        s, q = forest_step(s, q)
        if not (np.array_equal(chunk.frames[t].states, s)
                and np.array_equal(chunk.frames[t].heat, np.array(q, np.float32))):
            mismatches.append(f"seeded t={t}")
    elapsed = time.perf_counter() - clock
    ok = not mismatches and elapsed < 1.0
    detail = (f"hand trace and seeded 5x5 run exact to f32 for 10 steps ({elapsed:.3f} s)" if not mismatches
              else f"mismatch at {mismatches}")
    assert criterion("simulator oracle", ok, detail)


# ---------------------------------------------------------- stochastic laws

def test_stochastic_laws(criterion):
    clock = time.perf_counter()
    m = 317  # 317^2 = 100489 independent trials
    block = np.full((4, 4), Host.EMPTY, np.uint8)
    block[1, 1] = Host.HEALTHY
    block[0, 0] = block[2, 2] = Host.INFECTED
    out = step_host_pathogen(Grid(Env.HOST_PATHOGEN, np.tile(block, (m, m))), HostPathogenParams(),
                             RngStream(123456))
    trials = m * m
    rate = float((out.states[1::4, 1::4] == Host.INFECTED).mean())
    p = 1 - (1 - 0.85) ** 2
    sigma = np.sqrt(p * (1 - p) / trials)
    infect_ok = abs(rate - p) <= 3 * sigma

    chunk = simulate_chunk("stock", "stoch", 32, 12, seed=chunk_seed(5, 0))
    s = chunk.states()
    transitions = s[:-1].size
    bad = 0
    bad += int(np.count_nonzero(s[1:][s[:-1] == Stock.INACTIVE] != Stock.BUY))
    for t in range(len(s)):
        inactive = s[t] == Stock.INACTIVE
        if t < 2:
            bad += int(inactive.sum())
        else:
            bad += int(np.count_nonzero(inactive & ~((s[t - 1] == Stock.BUY) & (s[t - 2] == Stock.BUY))))
    elapsed = time.perf_counter() - clock
    ok = infect_ok and bad == 0 and transitions >= 10 ** 4 and elapsed < 60
    assert criterion("stochastic laws", ok,
                     f"infection {rate:.5f} vs {p:.4f} +- {3 * sigma:.5f} over {trials} trials; "
                     f"{bad} alternation violations in {transitions} stock transitions ({elapsed:.1f} s)")


# ------------------------------------------------------ permutation invariance

def _permutation_deviation(dtype, cases=1000, u=16):
    worst = 0.0
    per_store = 100
    for k in range(cases // per_store):
        with ad.precision(dtype):
            store = init_params(ArncaConfig(u=u), seed=k)
            rng = np.random.default_rng(1000 + k)
            tokens = rng.standard_normal((per_store, 9, u))
            order = np.tile(np.arange(9), (per_store, 1))
            for row in order:
                row[[0, 1, 2, 3, 5, 6, 7, 8]] = rng.permutation([0, 1, 2, 3, 5, 6, 7, 8])
            shuffled = np.take_along_axis(tokens, order[..., None], axis=1)
            a = attend_tokens(store, Tensor(tokens), center=4).data
            b = attend_tokens(store, Tensor(shuffled), center=4).data
        worst = max(worst, float(np.abs(a.astype(np.float64) - b).max()))
    return worst


def test_permutation_invariance(criterion):
    clock = time.perf_counter()
    d32 = _permutation_deviation(np.float32)
    d64 = _permutation_deviation(np.float64)
    elapsed = time.perf_counter() - clock
    ok = d32 <= 1e-5 and d64 <= 1e-10 and elapsed < 60
    assert criterion("permutation invariance", ok,
                     f"1000 cases: max dev {d32:.1e} (32-bit), {d64:.1e} (64-bit) ({elapsed:.1f} s)")


# ----------------------------------------------------------- gradient checks

def _lstm_loss(store):
    h, c, _ = lstm_cell(store, store["x"], store["h"], store["c"])
    return ad.sum(ad.mul(h, h)) + ad.sum(c)


def test_gradient_checks(criterion):
    clock = time.perf_counter()
    errors = {}
    for name, (shapes, f) in PRIMITIVES.items():
        for seed in range(3):
            with ad.precision(np.float64):
                rng = np.random.default_rng(seed)
                store = ParamStore()
                for pname, shape in shapes.items():
                    store.add(pname, rng.standard_normal(shape))
                err = ad.grad_check(lambda: f(store), store)
            errors[name] = max(errors.get(name, 0.0), err)
    with ad.precision(np.float64):
        rng = np.random.default_rng(0)
        store = ParamStore()
        for pname, shape in {"lstm.weight": (16, 32), "lstm.bias": (32,), "x": (3, 8), "h": (3, 8),
                             "c": (3, 8)}.items():
            store.add(pname, rng.standard_normal(shape))
        errors["lstm_cell"] = ad.grad_check(lambda: _lstm_loss(store), store)
    for kind in ("arnca", "attention_ca", "convlstm_ca"):
        errors[f"{kind} step"] = step_gradcheck(kind, seed=0, u=8, n=4)
    elapsed = time.perf_counter() - clock
    worst_name = max(errors, key=errors.get)
    ok = errors[worst_name] < 1e-4 and elapsed < 300
    assert criterion("gradient checks", ok,
                     f"{len(errors)} checks, worst {worst_name} rel err {errors[worst_name]:.1e} ({elapsed:.1f} s)")


# ------------------------------------------------------------ metric oracles

def test_metric_oracles(criterion):
    clock = time.perf_counter()
    rng = np.random.default_rng(2024)
    f1_bad = auc_worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        levels = int(rng.integers(2, 12))
        p = rng.integers(0, levels, (n, n)) / (levels - 1)  # ties on purpose
        y = rng.random((n, n)) < rng.random()
        f1 = f1_score([p], [y])
        f1_bad = max(f1_bad, abs(f1 - confusion_f1(p.ravel().tolist(), y.ravel().tolist())))
        expected = pairwise_auc(p.ravel().tolist(), y.ravel().tolist())
        got = auc_roc([p], [y])
        if expected is None:
            assert np.isnan(got)
        else:
            auc_worst = max(auc_worst, abs(got - expected))
    elapsed = time.perf_counter() - clock
    ok = f1_bad == 0.0 and auc_worst <= 1e-9 and elapsed < 60
    assert criterion("metric oracles", ok,
                     f"1000 frames: F1 max diff {f1_bad:.1e}, AUC max diff {auc_worst:.1e} ({elapsed:.1f} s)")


# --------------------------------------------------------- trained forest

FOREST_N, FOREST_T, T_OBS = 32, 60, 10


def _forest_config():
    return TrainConfig(model="arnca", env="forest", variant="det", t_obs=T_OBS, t_pred=FOREST_T, epochs=300,
                       lr=3e-4, batch=4, seed=0, u=16)


def _forest_chunks(master, count, n=FOREST_N):
    return [simulate_chunk("forest", "det", n, FOREST_T, seed=chunk_seed(master, k)) for k in range(count)]


@pytest.fixture(scope="module")
def forest_run(tmp_path_factory):
    train_chunks = _forest_chunks(100, 20)
    test_chunks = _forest_chunks(200, 10)
    clock = time.perf_counter()
    result = train(_forest_config(), train_chunks)
    elapsed = time.perf_counter() - clock
    ckpt = tmp_path_factory.mktemp("forest") / "arnca.arnp"
    result.model.save(ckpt)
    report = evaluate(result.model, test_chunks, T_OBS, FOREST_T)
    return {"model": result.model, "ckpt": ckpt, "report": report, "train_seconds": elapsed,
            "train_chunks": train_chunks, "test_chunks": test_chunks}


@pytest.mark.slow
def test_learning_signal(criterion, forest_run):
    report = forest_run["report"]
    persist = evaluate(PersistencePredictor(), forest_run["test_chunks"], T_OBS, FOREST_T)
    minutes = forest_run["train_seconds"] / 60
    ok = report.f1_mean >= 0.75 and report.f1_mean >= persist.f1_mean + 0.05 and minutes < 45
    assert criterion("learning signal", ok,
                     f"AR-NCA F1 {report.f1_mean:.4f} +- {report.f1_std:.4f} (AUC {report.auc_mean:.4f}) vs "
                     f"persistence {persist.f1_mean:.4f}; trained in {minutes:.1f} min")


@pytest.mark.slow
def test_scale_transfer(criterion, forest_run):
    clock = time.perf_counter()
    big = _forest_chunks(200, 10, n=128)
    transfer = scale_transfer_eval(forest_run["model"], big, T_OBS, FOREST_T, n_train=FOREST_N)
    elapsed = time.perf_counter() - clock
    base = forest_run["report"].f1_mean
    delta = transfer.f1_mean - base
    ok = abs(delta) <= 0.05 and elapsed < 600
    assert criterion("scale transfer", ok,
                     f"F1 32->32 {base:.4f}, 32->128 {transfer.f1_mean:.4f}, delta {delta:+.4f} "
                     f"({elapsed:.0f} s)")


@pytest.mark.slow
def test_reproducibility(criterion, forest_run, tmp_path):
    result = train(_forest_config(), forest_run["train_chunks"])
    ckpt = tmp_path / "rerun.arnp"
    result.model.save(ckpt)
    same_ckpt = ckpt.read_bytes() == forest_run["ckpt"].read_bytes()
    rerun = evaluate(result.model, forest_run["test_chunks"], T_OBS, FOREST_T)
    same_report = (rerun.to_json(include_runtime=False)
                   == forest_run["report"].to_json(include_runtime=False))
    assert criterion("reproducibility", same_ckpt and same_report,
                     f"checkpoint bytes identical: {same_ckpt}; report JSON identical (runtime excluded): "
                     f"{same_report}")


# ---------------------------------------------------------- data efficiency

@pytest.mark.slow
def test_data_efficiency(criterion):
    clock = time.perf_counter()
    pool = [simulate_chunk("stock", "stoch", 32, 30, seed=chunk_seed(300, k)) for k in range(700)]
    test_chunks = [simulate_chunk("stock", "stoch", 32, 30, seed=chunk_seed(400, k)) for k in range(30)]
    scores = {kind: [] for kind in ("arnca", "attention_ca", "convlstm_ca")}
    for seed in range(3):
        for kind in scores:
            config = TrainConfig(model=kind, env="stock", variant="stoch", t_obs=10, t_pred=30, epochs=300,
                                 lr=3e-4, batch=4, data_fraction=0.01, seed=seed, u=16)
            result = train(config, pool)
            assert len(result.subset) == 7
            scores[kind].append(evaluate(result.model, test_chunks, 10, 30).f1_mean)
    means = {k: float(np.mean(v)) for k, v in scores.items()}
    elapsed = (time.perf_counter() - clock) / 60
    rival = max(means["attention_ca"], means["convlstm_ca"])
    ok = means["arnca"] >= rival - 0.02 and elapsed < 120
    per_seed = "; ".join(f"{k} {['%.4f' % s for s in v]}" for k, v in scores.items())
    assert criterion("data efficiency", ok,
                     f"mean F1 on 1% (7 chunks): AR-NCA {means['arnca']:.4f}, Attention-CA "
                     f"{means['attention_ca']:.4f}, ConvLSTM-CA {means['convlstm_ca']:.4f} "
                     f"[{per_seed}] ({elapsed:.0f} min)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
