"""AR-NCA and the two NCA baselines, built on :mod:`arnca.autodiff`.

Fields are laid out ``(B, n, n, C)``. Every weight is shared by all cells, so
no parameter depends on the grid side ``n`` and a model trained on small grids
runs unchanged on large ones.

Per timestep ``t`` the AR-NCA update is::

    h_tilde = cellular_attention(h(t-1))
    h_hat, c(t) = lstm(x(t), h(t-1), c(t-1))
    h(t) = h_tilde + h_hat

and the decoder turns ``h(t)`` into a per-cell probability of the target state.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot
from .grid import SequenceChunk

MODEL_KINDS = ("arnca", "attention_ca", "convlstm_ca")
_KIND_ALIASES = {"attn_ca": "attention_ca", "attention-ca": "attention_ca",
                 "convlstm-ca": "convlstm_ca", "ar-nca": "arnca"}


def canonical_kind(kind: str) -> str:
    kind = _KIND_ALIASES.get(kind.lower(), kind.lower())
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return kind


@dataclass
class ArncaConfig:
    """Architecture switches; ``kind`` selects AR-NCA or one of the baselines."""

    kind: str = "arnca"
    u: int = 32
    radius: int = 1
    recurrent_cell: str = "lstm"
    attention_scale: bool = False
    prediction_input: str = "zeros"

    def __post_init__(self) -> None:
        self.kind = canonical_kind(self.kind)
        if self.u < 2:
            raise ValueError("u must be >= 2")
        if self.radius not in (1, 2):
            raise ValueError("radius must be 1 or 2")
        if self.recurrent_cell not in ("lstm", "plain_rnn"):
            raise ValueError(f"unknown recurrent_cell {self.recurrent_cell!r}")
        if self.prediction_input not in ("zeros", "prob_feedback"):
            raise ValueError(f"unknown prediction_input {self.prediction_input!r}")

    @property
    def tokens(self) -> int:
        return (2 * self.radius + 1) ** 2

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class HiddenField:
    h: Tensor
    c: Tensor | None = None


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape))


# ----------------------------------------------------------------- params

def init_params(config: ArncaConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    u = config.u
    store = ParamStore()

    def dense(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        store.add(f"{name}.weight", glorot(rng, (fan_in, fan_out), fan_in, fan_out))
        if bias:
            store.add(f"{name}.bias", np.zeros(fan_out))

    if config.kind == "convlstm_ca":
        store.add("encoder.conv.weight", glorot(rng, (3, 3, 3, u), 27, 9 * u))
        store.add("encoder.conv.bias", np.zeros(u))
        store.add("convlstm.input.weight", glorot(rng, (3, 3, u, 4 * u), 9 * u, 36 * u))
        store.add("convlstm.hidden.weight", glorot(rng, (3, 3, u, 4 * u), 9 * u, 36 * u))
        store.add("convlstm.bias", _lstm_bias(u))
        dense("decoder.conv", u, 1)
    else:
        dense("encoder.fc1", 3, u)
        dense("encoder.fc2", u, u)
        if config.kind == "arnca":
            if config.recurrent_cell == "lstm":
                dense("lstm", 2 * u, 4 * u, bias=False)
                store.add("lstm.bias", _lstm_bias(u))
            else:
                dense("rnn", 2 * u, u)
        for proj in ("query", "key", "value"):
            dense(f"attention.{proj}", u, u, bias=False)
        dense("attention.fc", u, u)
        dense("decoder.fc1", u, u)
        dense("decoder.fc2", u, 1)
    if config.prediction_input == "prob_feedback":
        dense("feedback", 1, u)
    return store


def _lstm_bias(u: int) -> np.ndarray:
    b = np.zeros(4 * u)
    b[u:2 * u] = 1.0  # gate order i, f, o, g
    return b


# ------------------------------------------------------------- components

def encode_cells(store: ParamStore, rgb) -> Tensor:
    """Shared per-cell map ``R^3 -> R^u``: two dense layers, tanh in between."""
    rgb = ad.as_tensor(rgb)
    if rgb.shape[-1] != 3:
        raise ad.ShapeError(f"encode_cells expects 3 channels, got shape {rgb.shape}")
    hidden = ad.tanh(ad.linear(rgb, store["encoder.fc1.weight"], store["encoder.fc1.bias"]))
    return ad.linear(hidden, store["encoder.fc2.weight"], store["encoder.fc2.bias"])


def decode_cells(store: ParamStore, h: Tensor) -> Tensor:
    """Shared per-cell map ``R^u -> [0, 1]``; returns ``(B, n, n)`` probabilities."""
    hidden = ad.tanh(ad.linear(h, store["decoder.fc1.weight"], store["decoder.fc1.bias"]))
    logit = ad.linear(hidden, store["decoder.fc2.weight"], store["decoder.fc2.bias"])
    return ad.reshape(ad.sigmoid(logit), logit.shape[:-1])


def attend_tokens(store: ParamStore, tokens: Tensor, center: int, scale: bool = False) -> Tensor:
    """Self-attention over a token axis, read out at ``center``.

    ``tokens`` is ``(..., K, u)``. Only the centre row of the attention matrix
    is needed because the output FC acts on each token independently.
    """
    u = tokens.shape[-1]
    q = ad.linear(tokens[..., center, :], store["attention.query.weight"])
    k = ad.linear(tokens, store["attention.key.weight"])
    v = ad.linear(tokens, store["attention.value.weight"])
    return _attend(store, q, k, v, scale, u)


def _attend(store: ParamStore, q: Tensor, k: Tensor, v: Tensor, scale: bool, u: int) -> Tensor:
    # q: (..., u); k, v: (..., K, u)
    scores = ad.matmul(k, ad.reshape(q, q.shape + (1,)))  # (..., K, 1)
    if scale:
        scores = ad.mul(scores, 1.0 / np.sqrt(u))
    weights = ad.softmax(ad.reshape(scores, scores.shape[:-2] + (1, scores.shape[-2])), axis=-1)
    context = ad.matmul(weights, v)  # (..., 1, u)
    context = ad.reshape(context, context.shape[:-2] + (u,))
    return ad.linear(context, store["attention.fc.weight"], store["attention.fc.bias"])


def cellular_attention(store: ParamStore, h: Tensor, config: ArncaConfig) -> Tensor:
    """Attention of every cell over its zero-padded ``(2r+1)^2`` neighbourhood.

    Keys and values are projected before the neighbourhood gather; the
    projections carry no bias, so padded tokens still project to zero.
    """
    q = ad.linear(h, store["attention.query.weight"])
    k = ad.neighborhoods(ad.linear(h, store["attention.key.weight"]), config.radius)
    v = ad.neighborhoods(ad.linear(h, store["attention.value.weight"]), config.radius)
    return _attend(store, q, k, v, config.attention_scale, h.shape[-1])


def lstm_cell(store: ParamStore, x: Tensor, h_prev: Tensor, c_prev: Tensor,
              prefix: str = "lstm") -> tuple[Tensor, Tensor, Tensor]:
    """Shared LSTM cell; returns ``(h_hat, c, o)``."""
    u = h_prev.shape[-1]
    if x.shape[-1] != u or c_prev.shape[-1] != u:
        raise ad.ShapeError(f"lstm_cell: widths differ: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}")
    xh = ad.concat([x, h_prev], axis=-1)
    W, b = store[f"{prefix}.weight"], store[f"{prefix}.bias"]
    # one dense map per gate on weight slices; slicing the small weight matrix
    # is much cheaper than slicing a full-grid gate tensor
    i, f, o, g = (ad.linear(xh, W[:, k * u:(k + 1) * u], b[k * u:(k + 1) * u]) for k in range(4))
    i, f, o, g = ad.sigmoid(i), ad.sigmoid(f), ad.sigmoid(o), ad.tanh(g)
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c)), c, o


def rnn_cell(store: ParamStore, x: Tensor, h_prev: Tensor) -> Tensor:
    return ad.tanh(ad.linear(ad.concat([x, h_prev], axis=-1), store["rnn.weight"], store["rnn.bias"]))


def arnca_step(store: ParamStore, config: ArncaConfig, x_t: Tensor,
               state: HiddenField) -> tuple[HiddenField, Tensor]:
    """One recurrent cellular attention update; returns the new state and ``h(t)``."""
    h_tilde = cellular_attention(store, state.h, config)
    if config.recurrent_cell == "lstm":
        h_hat, c, _ = lstm_cell(store, x_t, state.h, state.c)
    else:
        h_hat, c = rnn_cell(store, x_t, state.h), None
    h = ad.add(h_tilde, h_hat)
    return HiddenField(h, c), h


def attention_ca_step(store: ParamStore, config: ArncaConfig, x_t: Tensor,
                      state: HiddenField) -> tuple[HiddenField, Tensor]:
    h = ad.add(cellular_attention(store, state.h, config), x_t)
    return HiddenField(h), h


def convlstm_step(store: ParamStore, x_t: Tensor, state: HiddenField) -> tuple[HiddenField, Tensor]:
    u = state.h.shape[-1]
    gates = ad.add(ad.conv2d_3x3(x_t, store["convlstm.input.weight"], store["convlstm.bias"]),
                   ad.conv2d_3x3(state.h, store["convlstm.hidden.weight"]))
    i = ad.sigmoid(gates[..., :u])
    f = ad.sigmoid(gates[..., u:2 * u])
    o = ad.sigmoid(gates[..., 2 * u:3 * u])
    g = ad.tanh(gates[..., 3 * u:])
    c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return HiddenField(h, c), h


# ------------------------------------------------------------------ model

@dataclass
class Model:
    """A parameter store plus the architecture that interprets it."""

    config: ArncaConfig
    params: ParamStore = field(default=None)  # type: ignore[assignment]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.params is None:
            self.params = init_params(self.config, self.seed)

    @property
    def kind(self) -> str:
        return self.config.kind

    def encode(self, rgb: Tensor) -> Tensor:
        if self.kind == "convlstm_ca":
            p = self.params
            return ad.tanh(ad.conv2d_3x3(rgb, p["encoder.conv.weight"], p["encoder.conv.bias"]))
        return encode_cells(self.params, rgb)

    def decode(self, h: Tensor) -> Tensor:
        if self.kind == "convlstm_ca":
            p = self.params
            logit = ad.conv2d_1x1(h, p["decoder.conv.weight"], p["decoder.conv.bias"])
            return ad.reshape(ad.sigmoid(logit), logit.shape[:-1])
        return decode_cells(self.params, h)

    def initial_state(self, batch: int, n: int) -> HiddenField:
        shape = (batch, n, n, self.config.u)
        with_c = self.kind == "convlstm_ca" or (self.kind == "arnca" and self.config.recurrent_cell == "lstm")
        return HiddenField(_zeros(shape), _zeros(shape) if with_c else None)

    def step(self, x_t: Tensor, state: HiddenField) -> tuple[HiddenField, Tensor]:
        if self.kind == "arnca":
            return arnca_step(self.params, self.config, x_t, state)
        if self.kind == "attention_ca":
            return attention_ca_step(self.params, self.config, x_t, state)
        return convlstm_step(self.params, x_t, state)

    def _feedback(self, prob: Tensor) -> Tensor:
        p = self.params
        return ad.linear(ad.reshape(prob, prob.shape + (1,)), p["feedback.weight"], p["feedback.bias"])

    def rollout_batch(self, rgb: np.ndarray, t_obs: int, t_pred: int,
                      decode_all: bool = False) -> Tensor:
        """Probability maps ``(B, t_pred - t_obs, n, n)`` for a batch of RGB sequences.

        ``rgb`` is ``(B, T, n, n, 3)`` with ``T >= t_obs``; frames past ``t_obs``
        are never read. With ``decode_all`` the maps start at ``t = 0``.
        """
        rgb = np.asarray(rgb)
        if rgb.ndim != 5 or rgb.shape[-1] != 3:
            raise ad.ShapeError(f"expected (B, T, n, n, 3) frames, got {rgb.shape}")
        B, T, n = rgb.shape[0], rgb.shape[1], rgb.shape[2]
        if not 0 <= t_obs <= t_pred:
            raise ValueError("need 0 <= t_obs <= t_pred")
        if T < t_obs:
            raise ValueError(f"sequence has {T} frames, needs at least t_obs={t_obs}")
        dtype = self.params[self.params.names()[0]].data.dtype
        state = self.initial_state(B, n)
        zero_x = _zeros((B, n, n, self.config.u))
        feedback = self.config.prediction_input == "prob_feedback"
        maps: list[Tensor] = []
        prev = None
        for t in range(t_pred):
            if t < t_obs:
                x_t = self.encode(Tensor(rgb[:, t].astype(dtype)))
            elif feedback:
                if prev is None:
                    prev = self.decode(state.h)
                x_t = self._feedback(prev)
            else:
                x_t = zero_x
            state, h = self.step(x_t, state)
            if t >= t_obs or decode_all:
                p = self.decode(h)
                maps.append(p)
                prev = p
        if not maps:
            return Tensor(np.zeros((B, 0, n, n), dtype=dtype))
        return ad.stack(maps, axis=1)

    def predict(self, chunks: Sequence[SequenceChunk], t_obs: int, t_pred: int) -> np.ndarray:
        """Numpy probability maps ``(len(chunks), t_pred - t_obs, n, n)`` without a graph."""
        rgb = np.stack([c.rgb()[:t_obs] for c in chunks])
        with ad.no_grad():
            return self.rollout_batch(rgb, t_obs, t_pred).data

    # checkpoints: ARNP weights + JSON sidecar
    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ad.save_params(self.params, path)
        meta = {"config": self.config.to_json(), "param_count": self.params.count()}
        meta.update(extra or {})
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return sidecar

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        path = Path(path)
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise FileNotFoundError(f"missing architecture sidecar {sidecar}")
        meta = json.loads(sidecar.read_text())
        model = cls(ArncaConfig(**meta["config"]))
        model.params.load_state_dict(ad.load_params(path))
        return model


def load_meta(path: str | Path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def _check_kind(model: Model, kind: str) -> None:
    if model.kind != kind:
        raise ValueError(f"expected a {kind} model, got {model.kind}")


def _rollout_chunk(model: Model, chunk: SequenceChunk, t_obs: int, t_pred: int) -> list[np.ndarray]:
    if chunk.T < t_obs:
        raise ValueError(f"chunk has {chunk.T} frames, needs at least t_obs={t_obs}")
    maps = model.predict([chunk], t_obs, t_pred)[0]
    return [m for m in maps]


def rollout(model: Model, chunk: SequenceChunk, t_obs: int, t_pred: int) -> list[np.ndarray]:
    """Probability maps for frames ``t_obs .. t_pred-1`` of one chunk."""
    return _rollout_chunk(model, chunk, t_obs, t_pred)


def attention_ca_rollout(model: Model, chunk: SequenceChunk, t_obs: int, t_pred: int) -> list[np.ndarray]:
    _check_kind(model, "attention_ca")
    return _rollout_chunk(model, chunk, t_obs, t_pred)


def convlstm_ca_rollout(model: Model, chunk: SequenceChunk, t_obs: int, t_pred: int) -> list[np.ndarray]:
    _check_kind(model, "convlstm_ca")
    return _rollout_chunk(model, chunk, t_obs, t_pred)
