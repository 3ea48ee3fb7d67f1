"""Recurrent cells with exact forward passes and hand-derived backward passes.

Three cells share one parameter container:

- ``lstm``: gates f, s (input or refine), u (update), o (output).
- ``gru``: gates f (retention), q (reset), u (candidate), plus s for refine.
- ``janet``: gates f and u, plus s for refine.

Master variants add master projections ``mf``/``mi`` of size hidden/C. GRU and
JANET have no separate input gate, so their fine input gate is always tied to
``1 - f``. All gate activations are functions of ``x_t`` and ``h_{t-1}``.

Inputs are ``(batch, features)`` arrays; a single 1-D vector works as well.
"""

import json
import logging
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UrgateError
from .gatelib import (
    AuxKind,
    BiasInit,
    GateConfig,
    GatePack,
    effective_gates,
    effective_gates_backward,
    init_gate_biases,
)
from .ndmath import DEFAULT_DTYPE, Rng, affine, sigmoid, tanh_act

logger = logging.getLogger("urgate.cells")

CELL_KINDS = ("lstm", "gru", "janet")

# Uniform fan-in initialization U(-a, a) with a = WEIGHT_GAIN * sqrt(3 / fan_in),
# i.e. variance WEIGHT_GAIN**2 / fan_in. Identical for every gate variant.
WEIGHT_GAIN = 1.0

CHECKPOINT_FORMAT = "urgate-ckpt"
CHECKPOINT_VERSION = 1


def gate_names(kind: str, cfg: GateConfig) -> list[str]:
    """Gates with their own projections, in parameter order."""
    if kind == "lstm":
        names = ["f", "s", "u", "o"]
    elif kind == "gru":
        names = ["f", "q", "u"]
        if cfg.aux_kind is AuxKind.REFINE:
            names.insert(1, "s")
    elif kind == "janet":
        names = ["f", "u"]
        if cfg.aux_kind is AuxKind.REFINE:
            names.insert(1, "s")
    else:
        raise ConfigError(f"unknown cell {kind!r}; valid cells: {', '.join(CELL_KINDS)}")
    if cfg.aux_kind is AuxKind.MASTER:
        names += ["mf", "mi"]
    return names


@dataclass
class CellParams:
    """Weights ``wx_<gate>`` (rows x input), ``wh_<gate>`` (rows x hidden) and
    biases ``b_<gate>`` for every gate of one cell."""

    kind: str
    cfg: GateConfig
    input_dim: int
    hidden: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def gates(self) -> list[str]:
        return gate_names(self.kind, self.cfg)

    @property
    def tied(self) -> bool:
        return self.kind != "lstm"

    def count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "CellParams":
        return CellParams(
            self.kind,
            self.cfg,
            self.input_dim,
            self.hidden,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def biases(self) -> tuple[BiasInit, BiasInit | None]:
        t = self.tensors
        main = BiasInit(t["b_f"], t["b_s"] if "b_s" in t else np.zeros_like(t["b_f"]))
        master = BiasInit(t["b_mf"], t["b_mi"]) if "b_mf" in t else None
        return main, master


def vanilla_lstm_param_count(input_dim: int, hidden: int) -> int:
    return 4 * hidden * (input_dim + hidden + 1)


def init_cell_params(
    kind: str,
    cfg: GateConfig,
    input_dim: int,
    hidden: int,
    rng: Rng,
    dtype=DEFAULT_DTYPE,
    bias_override: BiasInit | None = None,
) -> CellParams:
    """Fresh parameters: gate biases from ``cfg``'s initializer, weights uniform fan-in."""
    if input_dim < 1:
        raise ConfigError(f"input size must be positive, got {input_dim}")
    main, master = init_gate_biases(cfg, hidden, rng)
    if bias_override is not None:
        main = bias_override
    params = CellParams(kind, cfg, input_dim, hidden)
    rows_master = cfg.master_size(hidden)
    lim_x = WEIGHT_GAIN * np.sqrt(3.0 / input_dim)
    lim_h = WEIGHT_GAIN * np.sqrt(3.0 / hidden)
    for gate in params.gates:
        rows = rows_master if gate in ("mf", "mi") else hidden
        params.tensors[f"wx_{gate}"] = rng.uniform(-lim_x, lim_x, (rows, input_dim))
        params.tensors[f"wh_{gate}"] = rng.uniform(-lim_h, lim_h, (rows, hidden))
        params.tensors[f"b_{gate}"] = np.zeros(rows)
    params.tensors["b_f"] = np.array(main.forget_bias, dtype=np.float64)
    if "s" in params.gates:
        params.tensors["b_s"] = np.array(main.input_bias, dtype=np.float64)
    if master is not None:
        params.tensors["b_mf"] = np.array(master.forget_bias, dtype=np.float64)
        params.tensors["b_mi"] = np.array(master.input_bias, dtype=np.float64)
    params.tensors = {k: v.astype(dtype) for k, v in params.tensors.items()}
    return params


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StateGrad:
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class StepCache:
    """Everything one step's backward pass needs."""

    params: CellParams
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    pack: GatePack
    u: np.ndarray
    o: np.ndarray | None = None
    tanh_c: np.ndarray | None = None
    q: np.ndarray | None = None
    qh: np.ndarray | None = None


def initial_state(kind: str, hidden: int, batch: int | None = None, dtype=DEFAULT_DTYPE) -> CellState:
    shape = (hidden,) if batch is None else (batch, hidden)
    c = np.zeros(shape, dtype=dtype) if kind == "lstm" else None
    return CellState(np.zeros(shape, dtype=dtype), c)


# --- Forward ---


def _check_inputs(params: CellParams, x: np.ndarray, state: CellState) -> None:
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"expected input of size {params.input_dim}, got {x.shape[-1]}")
    if state.h.shape[-1] != params.hidden:
        raise ShapeError(f"expected hidden state of size {params.hidden}, got {state.h.shape[-1]}")
    if params.kind == "lstm" and (state.c is None or state.c.shape != state.h.shape):
        raise ShapeError("lstm state needs a cell vector shaped like h")


def _pre(params: CellParams, gate: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    t = params.tensors
    return affine(t[f"wx_{gate}"], x) + affine(t[f"wh_{gate}"], h)


def _gates(params: CellParams, x: np.ndarray, h: np.ndarray) -> GatePack:
    gates = params.gates
    pre_s = _pre(params, "s", x, h) if "s" in gates else None
    pre_mf = _pre(params, "mf", x, h) if "mf" in gates else None
    pre_mi = _pre(params, "mi", x, h) if "mi" in gates else None
    bias, master_bias = params.biases()
    pack = effective_gates(
        params.cfg,
        _pre(params, "f", x, h),
        pre_s,
        pre_mf,
        pre_mi,
        bias,
        master_bias,
        tied=params.tied,
    )
    if params.cfg.aux_kind is AuxKind.REFINE and logger.isEnabledFor(logging.DEBUG):
        f, g = pack.f, pack.forget
        if np.any(g < f * f - 1e-12) or np.any(g > 1.0 - (1.0 - f) ** 2 + 1e-12):
            raise UrgateError("effective gate left the band [f^2, 1-(1-f)^2]")
    return pack


def lstm_forward(params: CellParams, x: np.ndarray, state: CellState) -> tuple[CellState, StepCache]:
    """One LSTM step; the state update is c' = F*c + I*u with the variant's
    effective forget F and input I gates, and h' = o*tanh(c')."""
    _check_inputs(params, x, state)
    t = params.tensors
    pack = _gates(params, x, state.h)
    u = tanh_act(_pre(params, "u", x, state.h) + t["b_u"])
    o = sigmoid(_pre(params, "o", x, state.h) + t["b_o"])
    c = pack.forget * state.c + pack.input * u
    tanh_c = tanh_act(c)
    h = o * tanh_c
    cache = StepCache(params, x, state.h, state.c, pack, u, o=o, tanh_c=tanh_c)
    return CellState(h, c), cache


def gru_forward(params: CellParams, x: np.ndarray, state: CellState) -> tuple[CellState, StepCache]:
    """One GRU step, written with a retention gate F multiplying h:
    h' = F*h + I*tanh(Wx x + Wh (q*h) + b) with I = 1 - F unless master gates
    are present."""
    _check_inputs(params, x, state)
    t = params.tensors
    pack = _gates(params, x, state.h)
    q = sigmoid(_pre(params, "q", x, state.h) + t["b_q"])
    qh = q * state.h
    u = tanh_act(affine(t["wx_u"], x) + affine(t["wh_u"], qh, t["b_u"]))
    h = pack.forget * state.h + pack.input * u
    cache = StepCache(params, x, state.h, None, pack, u, q=q, qh=qh)
    return CellState(h), cache


def janet_forward(params: CellParams, x: np.ndarray, state: CellState) -> tuple[CellState, StepCache]:
    """h' = F*h + I*u with u = tanh(Wx x + Wh h + b)."""
    _check_inputs(params, x, state)
    pack = _gates(params, x, state.h)
    u = tanh_act(_pre(params, "u", x, state.h) + params.tensors["b_u"])
    h = pack.forget * state.h + pack.input * u
    return CellState(h), StepCache(params, x, state.h, None, pack, u)


FORWARD = {"lstm": lstm_forward, "gru": gru_forward, "janet": janet_forward}


def cell_forward(params: CellParams, x: np.ndarray, state: CellState) -> tuple[CellState, StepCache]:
    return FORWARD[params.kind](params, x, state)


# --- Backward ---


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _accumulate(
    grads: dict[str, np.ndarray],
    params: CellParams,
    gate: str,
    dz: np.ndarray,
    x: np.ndarray,
    h: np.ndarray,
    dx: np.ndarray,
    dh: np.ndarray,
) -> None:
    t = params.tensors
    grads[f"wx_{gate}"] += _rows(dz).T @ _rows(x)
    grads[f"wh_{gate}"] += _rows(dz).T @ _rows(h)
    grads[f"b_{gate}"] += _rows(dz).sum(axis=0)
    dx += dz @ t[f"wx_{gate}"]
    dh += dz @ t[f"wh_{gate}"]


def zero_grads(params: CellParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def cell_backward(
    cache: StepCache,
    grad_state: StateGrad,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], StateGrad, np.ndarray]:
    """Reverse one step.

    ``grad_state`` holds dL/dh' (and dL/dc' for the LSTM). Parameter gradients
    are added into ``grads`` (fresh zeros when omitted). Returns the parameter
    gradients, dL/d(previous state) and dL/dx.
    """
    params = cache.params
    kind = params.kind
    if (kind == "lstm") != (cache.c_prev is not None):
        raise UrgateError(f"cache does not belong to a {kind} cell")
    if grads is None:
        grads = zero_grads(params)
    t = params.tensors
    pack = cache.pack
    x, h_prev = cache.x, cache.h_prev
    dx = np.zeros_like(x)
    dh_prev = np.zeros_like(h_prev)
    dh = grad_state.h

    dc_prev = None
    if kind == "lstm":
        dc = grad_state.c if grad_state.c is not None else np.zeros_like(dh)
        dc = dc + dh * cache.o * (1.0 - cache.tanh_c**2)
        dz_o = dh * cache.tanh_c * cache.o * (1.0 - cache.o)
        d_forget = dc * cache.c_prev
        d_input = dc * cache.u
        dz_u = dc * pack.input * (1.0 - cache.u**2)
        dc_prev = dc * pack.forget
        _accumulate(grads, params, "o", dz_o, x, h_prev, dx, dh_prev)
        _accumulate(grads, params, "u", dz_u, x, h_prev, dx, dh_prev)
    else:
        d_forget = dh * h_prev
        d_input = dh * cache.u
        dz_u = dh * pack.input * (1.0 - cache.u**2)
        dh_prev += dh * pack.forget
        if kind == "gru":
            grads["wx_u"] += _rows(dz_u).T @ _rows(x)
            grads["wh_u"] += _rows(dz_u).T @ _rows(cache.qh)
            grads["b_u"] += _rows(dz_u).sum(axis=0)
            dx += dz_u @ t["wx_u"]
            d_qh = dz_u @ t["wh_u"]
            dh_prev += d_qh * cache.q
            dz_q = d_qh * h_prev * cache.q * (1.0 - cache.q)
            _accumulate(grads, params, "q", dz_q, x, h_prev, dx, dh_prev)
        else:
            _accumulate(grads, params, "u", dz_u, x, h_prev, dx, dh_prev)

    gg = effective_gates_backward(params.cfg, pack, d_forget, d_input)
    _accumulate(grads, params, "f", gg.d_f, x, h_prev, dx, dh_prev)
    if gg.d_s is not None:
        _accumulate(grads, params, "s", gg.d_s, x, h_prev, dx, dh_prev)
    if gg.d_mf is not None:
        _accumulate(grads, params, "mf", gg.d_mf, x, h_prev, dx, dh_prev)
        _accumulate(grads, params, "mi", gg.d_mi, x, h_prev, dx, dh_prev)
    return grads, StateGrad(dh_prev, dc_prev), dx


# --- Unrolling ---


def unroll(
    params: CellParams, xs: np.ndarray, state: CellState | None = None
) -> tuple[list[CellState], list[StepCache], np.ndarray]:
    """Run the cell over ``xs`` of shape (time, [batch,] input).

    Returns the states after every step, the step caches and the stacked
    hidden outputs of shape (time, [batch,] hidden).
    """
    xs = np.asarray(xs)
    if xs.ndim == 0 or len(xs) == 0:
        raise ShapeError("empty sequence")
    if state is None:
        batch = xs.shape[1] if np.ndim(xs) == 3 else None
        state = initial_state(params.kind, params.hidden, batch, xs.dtype)
    forward = FORWARD[params.kind]
    states, caches = [], []
    for x in xs:
        state, cache = forward(params, x, state)
        states.append(state)
        caches.append(cache)
    return states, caches, np.stack([s.h for s in states])


def unroll_backward(
    caches: list[StepCache],
    d_outputs: np.ndarray,
    d_final: StateGrad | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, StateGrad]:
    """Backpropagation through time over an ``unroll``.

    ``d_outputs[t]`` is dL/dh_t from the readout. Returns the parameter
    gradients, dL/dx for every step and dL/d(initial state).
    """
    if not caches:
        raise ShapeError("empty sequence")
    grads = zero_grads(caches[0].params)
    carry = d_final or StateGrad(np.zeros_like(d_outputs[-1]))
    dxs = [None] * len(caches)
    for step in range(len(caches) - 1, -1, -1):
        upstream = StateGrad(carry.h + d_outputs[step], carry.c)
        _, carry, dxs[step] = cell_backward(caches[step], upstream, grads)
    return grads, np.stack(dxs), carry


def record_forget(caches: list[StepCache]) -> np.ndarray:
    """Effective forget activations stacked as (batch, time, hidden)."""
    stacked = np.stack([c.pack.forget for c in caches])
    return np.moveaxis(stacked, 0, -2) if stacked.ndim == 3 else stacked


# --- Checkpoints ---


def save_checkpoint(
    path: str | Path,
    params: CellParams,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> Path:
    """Write cell tensors, extra tensors and metadata as one ``.npz`` file.

    Layout: ``cell/<name>`` and ``extra/<name>`` arrays plus ``__meta__``, a
    JSON string holding format, version, cell kind, gate configuration, dims,
    precision and caller metadata. The file appears atomically.
    """
    path = Path(path)
    cfg = params.cfg
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "cell": params.kind,
        "variant": cfg.variant,
        "gate": {
            "forget_bias": cfg.forget_bias,
            "t_max": cfg.t_max,
            "eps": cfg.eps,
            "downsize": cfg.downsize,
        },
        "input_dim": params.input_dim,
        "hidden": params.hidden,
        "precision": str(next(iter(params.tensors.values())).dtype),
        "meta": meta or {},
    }
    arrays = {f"cell/{k}": v for k, v in params.tensors.items()}
    arrays.update({f"extra/{k}": v for k, v in (extra or {}).items()})
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str | Path) -> tuple[CellParams, dict[str, np.ndarray], dict]:
    """Inverse of ``save_checkpoint``; returns (params, extra tensors, metadata)."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except FileNotFoundError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as e:
        raise FormatError(f"corrupt checkpoint {path}: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not an urgate checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    cfg = GateConfig.from_variant(header["variant"], **header["gate"])
    params = CellParams(
        header["cell"],
        cfg,
        header["input_dim"],
        header["hidden"],
        {k[len("cell/"):]: v for k, v in arrays.items() if k.startswith("cell/")},
    )
    missing = {f"{p}_{g}" for g in params.gates for p in ("wx", "wh", "b")} - set(params.tensors)
    if missing:
        raise FormatError(f"checkpoint {path} lacks tensors {sorted(missing)}")
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return params, extra, header
