"""Self-check suites: gradients, permutation invariance, simulator and metric oracles.

Each check is a named callable returning ``(ok, detail)``. ``run`` executes a
selection of suites and ``inject`` swaps in a known-bad implementation so the
harness itself can be shown to catch faults.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .grid import Env, Forest, Grid, Host
from .metrics import frame_auc, frame_f1
from .models import ArncaConfig, Model, attend_tokens, cellular_attention, init_params, lstm_cell
from .rng import RngStream
from .sim import ForestParams, HostPathogenParams, init_forest, step_forest, step_host_pathogen

GRAD_TOL = 1e-4
SUITES = ("grad", "perm", "sim", "metrics")


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.suite}.{self.name}: {self.detail}"


# ------------------------------------------------------------------ grad

def _random_store(seed: int, **shapes) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.standard_normal(shape))
    return store


def _gradcheck(f: Callable[[ParamStore], Tensor], **shapes) -> tuple[bool, str]:
    with ad.precision(np.float64):
        store = _random_store(0, **shapes)
        err = ad.grad_check(lambda: f(store), store)
    return err < GRAD_TOL, f"max rel err {err:.2e}"


def step_gradcheck(kind: str, seed: int = 0, u: int = 8, n: int = 4) -> float:
    """Max relative error of one encode-step-decode-BCE pass from a random hidden state.

    A random state keeps every parameter's gradient well away from zero;
    rolling out from the all-zero initial state leaves the attention
    projections with gradients near 1e-8, which central differences cannot
    resolve against the loss's own round-off.
    """
    with ad.precision(np.float64):
        model = Model(ArncaConfig(kind=kind, u=u), seed=seed)
        rng = np.random.default_rng(100 + seed)
        shape = (1, n, n, u)
        h0, c0 = 0.5 * rng.standard_normal(shape), 0.5 * rng.standard_normal(shape)
        rgb = rng.random((1, n, n, 3))
        target = (rng.random((1, n, n)) < 0.4).astype(np.float64)

        def loss() -> Tensor:
            state = model.initial_state(1, n)
            state.h = Tensor(h0)
            if state.c is not None:
                state.c = Tensor(c0)
            _, h = model.step(model.encode(Tensor(rgb)), state)
            return ad.bce_loss(model.decode(h), target)

        return ad.grad_check(loss, model.params)


def _grad_model(kind: str) -> tuple[bool, str]:
    err = step_gradcheck(kind)
    return err < GRAD_TOL, f"max rel err {err:.2e}"


def _grad_lstm() -> tuple[bool, str]:
    u = 8

    def loss(s):
        h, c, _ = lstm_cell(s, s["x"], s["h"], s["c"])
        return ad.sum(ad.mul(h, h)) + ad.sum(c)

    return _gradcheck(loss, **{"lstm.weight": (2 * u, 4 * u), "lstm.bias": (4 * u,),
                               "x": (2, u), "h": (2, u), "c": (2, u)})


GRAD_CHECKS = {
    "tanh": lambda: _gradcheck(lambda s: ad.sum(ad.mul(ad.tanh(s["a"]), s["a"])), a=(6,)),
    "sigmoid": lambda: _gradcheck(lambda s: ad.sum(ad.mul(ad.sigmoid(s["a"]), s["a"])), a=(6,)),
    "softmax": lambda: _gradcheck(lambda s: ad.sum(ad.mul(ad.softmax(s["a"]), s["w"])), a=(2, 5), w=(2, 5)),
    "matmul": lambda: _gradcheck(lambda s: ad.sum(ad.tanh(ad.matmul(s["a"], s["b"]))), a=(2, 3, 4), b=(2, 4, 2)),
    "linear": lambda: _gradcheck(lambda s: ad.sum(ad.tanh(ad.linear(s["x"], s["W"], s["b"]))),
                                 x=(3, 4), W=(4, 2), b=(2,)),
    "neighborhoods": lambda: _gradcheck(lambda s: ad.sum(ad.mul(ad.neighborhoods(s["x"], 1), s["w"])),
                                        x=(1, 3, 3, 2), w=(1, 3, 3, 9, 2)),
    "conv3x3": lambda: _gradcheck(lambda s: ad.sum(ad.tanh(ad.conv2d_3x3(s["x"], s["K"], s["b"]))),
                                  x=(1, 4, 4, 2), K=(3, 3, 2, 2), b=(2,)),
    "bce": lambda: _gradcheck(lambda s: ad.bce_loss(ad.sigmoid(s["z"]), np.eye(3)), z=(3, 3)),
    "lstm_cell": _grad_lstm,
    "arnca": lambda: _grad_model("arnca"),
    "attention_ca": lambda: _grad_model("attention_ca"),
    "convlstm_ca": lambda: _grad_model("convlstm_ca"),
}


# ------------------------------------------------------------------ perm

def _perm_tokens(dtype, tol: float) -> tuple[bool, str]:
    with ad.precision(dtype):
        store = init_params(ArncaConfig(u=8), seed=1)
        tokens = Tensor(np.random.default_rng(2).standard_normal((4, 9, 8)))
        base = attend_tokens(store, tokens, center=4).data
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            perm = rng.permutation(9)
            out = attend_tokens(store, Tensor(tokens.data[:, perm]), int(np.flatnonzero(perm == 4)[0])).data
            worst = max(worst, float(np.abs(out - base).max()))
    return worst <= tol, f"max deviation {worst:.1e} (tol {tol:.0e})"


def _perm_field() -> tuple[bool, str]:
    with ad.precision(np.float64):
        config = ArncaConfig(u=8)
        store = init_params(config, seed=4)
        h = Tensor(np.random.default_rng(5).standard_normal((1, 6, 6, 8)))
        base = cellular_attention(store, h, config).data
        flipped = cellular_attention(store, Tensor(h.data[:, ::-1, ::-1].copy()), config).data
        worst = float(np.abs(flipped - base[:, ::-1, ::-1]).max())
    return worst <= 1e-10, f"max deviation {worst:.1e}"


PERM_CHECKS = {
    "tokens_f32": lambda: _perm_tokens(np.float32, 1e-5),
    "tokens_f64": lambda: _perm_tokens(np.float64, 1e-10),
    "field_flip": _perm_field,
}


# ------------------------------------------------------------------- sim

# 5x5 grid, empty except row 2: a seed fire at column 0 and trees at columns 1..4.
# Row-2 (state, heat) for t = 1..10 under the default rule, worked out by hand.
_T, _F, _E = Forest.TREE, Forest.FIRE, Forest.EMBER
HAND_TRACE = [
    [(_E, 5), (_T, 1.8), (_T, 0), (_T, 0), (_T, 0)],
    [(_E, 4), (_F, 5), (_T, 0), (_T, 0), (_T, 0)],
    [(_E, 3), (_E, 4), (_T, 1.5), (_T, 0), (_T, 0)],
    [(_E, 2), (_E, 3), (_T, 2.7), (_T, 0), (_T, 0)],
    [(_E, 1), (_E, 2), (_F, 5), (_T, 0), (_T, 0)],
    [(_E, 0), (_E, 1), (_E, 4), (_T, 1.5), (_T, 0)],
    [(_E, 0), (_E, 0), (_E, 3), (_T, 2.7), (_T, 0)],
    [(_E, 0), (_E, 0), (_E, 2), (_F, 5), (_T, 0)],
    [(_E, 0), (_E, 0), (_E, 1), (_E, 4), (_T, 1.5)],
    [(_E, 0), (_E, 0), (_E, 0), (_E, 3), (_T, 2.7)],
]


def hand_trace_start() -> Grid:
    states = np.zeros((5, 5), np.uint8)
    heat = np.zeros((5, 5), np.float32)
    states[2] = [_F, _T, _T, _T, _T]
    heat[2, 0] = 6
    return Grid(Env.FOREST, states, heat=heat)


def _sim_hand_trace() -> tuple[bool, str]:
    g = hand_trace_start()
    for t, row in enumerate(HAND_TRACE, start=1):
        g = step_forest(g, ForestParams(), stochastic=False)
        want_s = np.zeros((5, 5), np.uint8)
        want_q = np.zeros((5, 5), np.float32)
        want_s[2] = [s for s, _ in row]
        want_q[2] = [q for _, q in row]
        if not (np.array_equal(g.states, want_s) and np.array_equal(g.heat, want_q)):
            return False, f"diverges at t={t}"
    return True, "10 steps exact"


def _loop_forest_step(s: list, q: list, p: ForestParams) -> tuple[list, list]:
    n = len(s)
    ns, nq = [r[:] for r in s], [r[:] for r in q]
    for i in range(n):
        for j in range(n):
            if s[i][j] != _T:
                continue
            total = sum(q[a][b] for a in range(max(i - 1, 0), min(i + 2, n))
                        for b in range(max(j - 1, 0), min(j + 2, n))
                        if (a, b) != (i, j) and s[a][b] in (_F, _E))
            heat = q[i][j] + p.q_transfer * total
            if heat > p.q_threshold:
                ns[i][j], heat = _F, p.q_seed
            nq[i][j] = heat
    for i in range(n):
        for j in range(n):
            if ns[i][j] in (_F, _E):
                nq[i][j] = max(nq[i][j] - p.q_die, 0.0)
            if s[i][j] == _F:
                ns[i][j] = _E
            nq[i][j] = float(np.float32(nq[i][j]))
    return ns, nq


def _sim_loop_oracle() -> tuple[bool, str]:
    p = ForestParams()
    g = init_forest(12, p, RngStream(2024))
    s, q = g.states.tolist(), g.heat.astype(float).tolist()
    for t in range(1, 31):
        g = step_forest(g, p, stochastic=False)
        s, q = _loop_forest_step(s, q, p)
        if not (np.array_equal(g.states, s) and np.array_equal(g.heat, np.array(q, np.float32))):
            return False, f"diverges at t={t}"
    return True, "30 steps on 12x12 exact"


def _sim_host_monte_carlo() -> tuple[bool, str]:
    m = 200
    block = np.full((4, 4), Host.EMPTY, np.uint8)
    block[1, 1] = Host.HEALTHY
    block[0, 0] = block[0, 1] = Host.INFECTED
    out = step_host_pathogen(Grid(Env.HOST_PATHOGEN, np.tile(block, (m, m))),
                             HostPathogenParams(), RngStream(77))
    rate = float((out.states[1::4, 1::4] == Host.INFECTED).mean())
    p = 1 - 0.15 ** 2
    sigma = np.sqrt(p * (1 - p) / m ** 2)
    return abs(rate - p) < 4 * sigma, f"infection rate {rate:.4f} vs {p:.4f}"


SIM_CHECKS = {
    "forest_hand_trace": _sim_hand_trace,
    "forest_loop_oracle": _sim_loop_oracle,
    "host_two_neighbours": _sim_host_monte_carlo,
}


# --------------------------------------------------------------- metrics

def _brute_f1(p, y) -> float:
    tp = sum(1 for a, b in zip(p, y) if a >= 0.5 and b)
    fp = sum(1 for a, b in zip(p, y) if a >= 0.5 and not b)
    fn = sum(1 for a, b in zip(p, y) if a < 0.5 and b)
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def _brute_auc(p, y) -> float:
    pos = [a for a, b in zip(p, y) if b]
    neg = [a for a, b in zip(p, y) if not b]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _metrics_brute_force() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(300):
        size = int(rng.integers(2, 25))
        p = rng.integers(0, 5, size) / 4.0
        y = rng.random(size) < 0.5
        worst = max(worst, abs(frame_f1(p, y) - _brute_f1(p.tolist(), y.tolist())))
        if 0 < y.sum() < size:
            worst = max(worst, abs(frame_auc(p, y) - _brute_auc(p.tolist(), y.tolist())))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def _metrics_examples() -> tuple[bool, str]:
    ok = (abs(frame_f1(np.array([0.5, 0.1, 0.1, 0.0]), np.array([1, 1, 0, 0])) - 2 / 3) < 1e-12
          and frame_auc(np.array([0.8, 0.6, 0.4, 0.2]), np.array([1, 0, 1, 0])) == 0.75
          and frame_f1(np.zeros(3), np.zeros(3)) == 1.0)
    return ok, "worked examples"


METRIC_CHECKS = {
    "brute_force": _metrics_brute_force,
    "examples": _metrics_examples,
}

CHECKS = {"grad": GRAD_CHECKS, "perm": PERM_CHECKS, "sim": SIM_CHECKS, "metrics": METRIC_CHECKS}


# ------------------------------------------------------------ mutations

def _wrong_tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return ad._make(y, (x,), lambda g: (g * (1.0 - y),))  # drops the square


MUTATIONS = {"tanh-backward": ("tanh", _wrong_tanh)}


@contextlib.contextmanager
def inject(name: str | None) -> Iterator[None]:
    """Temporarily replace an autodiff op with a known-wrong version."""
    if name is None:
        yield
        return
    if name not in MUTATIONS:
        raise ValueError(f"unknown mutation {name!r}; choose from {sorted(MUTATIONS)}")
    attr, fn = MUTATIONS[name]
    original = getattr(ad, attr)
    setattr(ad, attr, fn)
    try:
        yield
    finally:
        setattr(ad, attr, original)


def run(suites: Iterable[str] = SUITES, mutation: str | None = None) -> list[CheckResult]:
    suites = list(suites)
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suite(s) {sorted(unknown)}; choose from {list(SUITES)}")
    results = []
    with inject(mutation):
        for suite in suites:
            for name, check in CHECKS[suite].items():
                try:
                    ok, detail = check()
                except Exception as exc:  # a crashing check is a failing check
                    ok, detail = False, f"{type(exc).__name__}: {exc}"
                results.append(CheckResult(suite, name, bool(ok), detail))
    return results
