"""Gate initializers, activations and auxiliary-gate compositions.

Every row of the ablation matrix is a pair (initialization/activation,
auxiliary gate):

    ====  ===========  ========
    name  init         aux
    ====  ===========  ========
    --    standard     none
    C-    chrono       none
    O-    ordered      none
    U-    uniform      none
    -R    standard     refine
    OM    ordered      master
    UM    uniform      master
    OR    ordered      refine
    UR    uniform      refine
    ====  ===========  ========

``effective_gates`` turns linear pre-activations into the effective forget and
input gates of a variant, and ``effective_gates_backward`` is its exact
vector-Jacobian product. Pre-activations passed in here never include the gate
bias; biases travel separately as a ``BiasInit`` so the trainable bias vectors
of a cell can be handed over directly.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .ndmath import Rng, cumax, cumax_backward, inverse_sigmoid, rng_uniform, sigmoid

logger = logging.getLogger("urgate.gatelib")


class InitKind(str, Enum):
    STANDARD = "standard"
    UNIFORM = "uniform"
    CHRONO = "chrono"
    ORDERED = "ordered"


class AuxKind(str, Enum):
    NONE = "none"
    REFINE = "refine"
    MASTER = "master"


VARIANTS: dict[str, tuple[InitKind, AuxKind]] = {
    "--": (InitKind.STANDARD, AuxKind.NONE),
    "C-": (InitKind.CHRONO, AuxKind.NONE),
    "O-": (InitKind.ORDERED, AuxKind.NONE),
    "U-": (InitKind.UNIFORM, AuxKind.NONE),
    "-R": (InitKind.STANDARD, AuxKind.REFINE),
    "OM": (InitKind.ORDERED, AuxKind.MASTER),
    "UM": (InitKind.UNIFORM, AuxKind.MASTER),
    "OR": (InitKind.ORDERED, AuxKind.REFINE),
    "UR": (InitKind.UNIFORM, AuxKind.REFINE),
}
VARIANT_NAMES: tuple[str, ...] = tuple(VARIANTS)


@dataclass(frozen=True)
class GateConfig:
    """One row of the ablation matrix plus its scalar knobs.

    ``t_max`` and ``eps`` default to values derived from the hidden size
    (``t_max = hidden``, ``eps = 1/hidden``); use the ``resolved_*`` helpers.
    """

    init_kind: InitKind
    aux_kind: AuxKind
    forget_bias: float = 1.0
    t_max: int | None = None
    eps: float | None = None
    downsize: int = 1

    @classmethod
    def from_variant(cls, name: str, **knobs) -> "GateConfig":
        if name not in VARIANTS:
            raise ConfigError(
                f"unknown gate variant {name!r}; valid variants: "
                + ", ".join(repr(v) for v in VARIANT_NAMES)
            )
        init_kind, aux_kind = VARIANTS[name]
        return cls(init_kind=init_kind, aux_kind=aux_kind, **knobs)

    @property
    def variant(self) -> str:
        for name, pair in VARIANTS.items():
            if pair == (self.init_kind, self.aux_kind):
                return name
        raise ConfigError(
            f"({self.init_kind.value}, {self.aux_kind.value}) is not one of the "
            "nine gate variants"
        )

    @property
    def main_cumax(self) -> bool:
        """True when the main forget/input gates use the cumax activation."""
        return self.init_kind is InitKind.ORDERED and self.aux_kind is not AuxKind.MASTER

    def resolved_t_max(self, hidden: int) -> int:
        return self.t_max if self.t_max is not None else hidden

    def resolved_eps(self, hidden: int) -> float:
        return self.eps if self.eps is not None else 1.0 / hidden

    def master_size(self, hidden: int) -> int:
        return hidden // self.downsize

    def validate(self, hidden: int) -> None:
        """Raise ``ConfigError`` unless the knobs suit a cell of ``hidden`` units."""
        _ = self.variant
        if hidden < 1:
            raise ConfigError(f"hidden size must be positive, got {hidden}")
        if self.downsize < 1 or hidden % self.downsize:
            raise ConfigError(
                f"downsize factor {self.downsize} must divide hidden size {hidden}"
            )
        if self.init_kind is InitKind.CHRONO and self.resolved_t_max(hidden) < 2:
            raise ConfigError(f"t_max must be >= 2, got {self.resolved_t_max(hidden)}")
        eps = self.resolved_eps(hidden)
        if not 0.0 < eps <= 0.5:
            raise ConfigError(f"eps must lie in (0, 0.5], got {eps}")
        if self.init_kind is InitKind.UNIFORM:
            size = self.master_size(hidden) if self.aux_kind is AuxKind.MASTER else hidden
            if size < 2:
                raise ConfigError(
                    f"uniform gate initialization needs at least 2 gate units, got {size}"
                )


@dataclass
class BiasInit:
    """Per-unit forget and input (or refine) gate biases."""

    forget_bias: np.ndarray
    input_bias: np.ndarray


# --- Initializers ---


def init_standard(hidden: int, forget_bias: float = 1.0) -> BiasInit:
    if hidden < 1:
        raise ValueError(f"hidden must be >= 1, got {hidden}")
    return BiasInit(np.full(hidden, float(forget_bias)), np.zeros(hidden))


def init_uniform(hidden: int, rng: Rng, eps: float | None = None) -> BiasInit:
    """Uniform gate initialization.

    Activations are drawn from U[1/d, 1-1/d] and mapped back through the
    inverse sigmoid; the input bias mirrors the forget bias.
    """
    if hidden < 2:
        raise ValueError(f"uniform gate initialization needs hidden >= 2, got {hidden}")
    eps = 1.0 / hidden if eps is None else eps
    if hidden == 2:
        # The range collapses to the single point 1/2.
        u = np.full(hidden, 0.5)
    else:
        u = rng_uniform(rng, 1.0 / hidden, 1.0 - 1.0 / hidden, hidden)
    forget = inverse_sigmoid(u, eps)
    return BiasInit(forget, -forget)


def init_chrono(hidden: int, t_max: int, rng: Rng) -> BiasInit:
    """Chrono initialization: b_f = log U[1, t_max-1], b_i = -b_f."""
    if t_max < 2:
        raise ValueError(f"t_max must be >= 2, got {t_max}")
    u = np.ones(hidden) if t_max == 2 else rng_uniform(rng, 1.0, t_max - 1.0, hidden)
    forget = np.log(u)
    return BiasInit(forget, -forget)


def init_ordered(hidden: int) -> BiasInit:
    return BiasInit(np.zeros(hidden), np.zeros(hidden))


def init_gate_biases(cfg: GateConfig, hidden: int, rng: Rng) -> tuple[BiasInit, BiasInit | None]:
    """Initial (main, master) biases for a variant.

    Main biases are the forget and input-or-refine biases. A refine gate takes
    ``-b_f`` as its bias so the effective gate starts distributed like ``f``.
    Master biases are ``None`` unless the variant has master gates.
    """
    cfg.validate(hidden)
    if cfg.aux_kind is AuxKind.MASTER:
        main = init_standard(hidden, 0.0)
        size = cfg.master_size(hidden)
        if cfg.init_kind is InitKind.UNIFORM:
            master = init_uniform(size, rng, cfg.resolved_eps(size))
        else:
            master = init_ordered(size)
        return main, master

    if cfg.init_kind is InitKind.STANDARD:
        main = init_standard(hidden, cfg.forget_bias)
    elif cfg.init_kind is InitKind.UNIFORM:
        main = init_uniform(hidden, rng, cfg.resolved_eps(hidden))
    elif cfg.init_kind is InitKind.CHRONO:
        main = init_chrono(hidden, cfg.resolved_t_max(hidden), rng)
    else:
        main = init_ordered(hidden)
    if cfg.aux_kind is AuxKind.REFINE:
        main = BiasInit(main.forget_bias, -main.forget_bias)
    logger.debug(
        f"{cfg.variant} biases: forget mean {main.forget_bias.mean():.4f}, "
        f"min {main.forget_bias.min():.4f}, max {main.forget_bias.max():.4f}"
    )
    return main, None


# --- Compositions ---


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ShapeError(f"gate inputs differ in length: {sorted(shapes)}")


def adjustment(f):
    """Band half-width f(1-f) of the refine gate; symmetric, maximal at 0.5."""
    return f - f * f


def refine_compose(f, r):
    """Effective gate g = f + f(1-f)(2r-1), between f**2 and 1-(1-f)**2."""
    _same_shape(f, r)
    return f + adjustment(f) * (2.0 * r - 1.0)


def refine_compose_alt(f, r):
    """The same gate written as 2rf + (1-2r)f**2."""
    _same_shape(f, r)
    return 2.0 * r * f + (1.0 - 2.0 * r) * f * f


def master_compose(f, i, mf, mi):
    """Combine fine gates with master gates through their overlap.

    Returns ``(f_hat, i_hat, omega)`` with omega = mf * mi.
    """
    _same_shape(f, i, mf, mi)
    omega = mf * mi
    return f * omega + (mf - omega), i * omega + (mi - omega), omega


def tied_master_rescaled(f, mf):
    """Master gates tied (mi = 1 - mf, i = 1 - f) and rescaled by two.

    Returns ``(f_hat, i_hat)``. f_hat equals ``refine_compose(mf, f)`` and
    i_hat equals ``refine_compose(1 - mf, 1 - f)``: the master gate acts as the
    main gate and the fine gate as its refinement.
    """
    _same_shape(f, mf)
    mi = 1.0 - mf
    i = 1.0 - f
    omega = mf * mi
    return 2.0 * f * omega + (mf - omega), 2.0 * i * omega + (mi - omega)


def master_downsize_expand(master: np.ndarray, C: int, hidden: int | None = None) -> np.ndarray:
    """Repeat each master value ``C`` times along the last axis."""
    if C < 1:
        raise ValueError(f"downsize factor must be >= 1, got {C}")
    if hidden is not None and hidden != master.shape[-1] * C:
        raise ShapeError(
            f"downsize factor {C} does not divide hidden size {hidden} "
            f"into {master.shape[-1]} chunks"
        )
    if C == 1:
        return master
    return np.repeat(master, C, axis=-1)


def master_downsize_collapse(grad: np.ndarray, C: int) -> np.ndarray:
    """Adjoint of ``master_downsize_expand``: sum each chunk of ``C`` values."""
    if C == 1:
        return grad
    return grad.reshape(*grad.shape[:-1], grad.shape[-1] // C, C).sum(axis=-1)


# --- Variant dispatch ---


@dataclass
class GatePack:
    """Effective gates of one step plus what the backward pass needs.

    ``forget`` and ``input`` are the gates entering the state update. ``mf`` and
    ``mi`` are expanded to the hidden size; ``mf_small`` and ``mi_small`` keep
    the master-sized values. ``s_*`` hold cumax softmaxes.
    """

    forget: np.ndarray
    input: np.ndarray
    f: np.ndarray
    i: np.ndarray | None = None
    r: np.ndarray | None = None
    mf: np.ndarray | None = None
    mi: np.ndarray | None = None
    mf_small: np.ndarray | None = None
    mi_small: np.ndarray | None = None
    omega: np.ndarray | None = None
    s_f: np.ndarray | None = None
    s_i: np.ndarray | None = None
    s_mf: np.ndarray | None = None
    s_mi: np.ndarray | None = None
    tied: bool = False


@dataclass
class GateGrads:
    """Gradients with respect to the biased pre-activations of each gate."""

    d_f: np.ndarray
    d_s: np.ndarray | None = None
    d_mf: np.ndarray | None = None
    d_mi: np.ndarray | None = None


def _require(cfg: GateConfig, name: str, value):
    if value is None:
        raise ConfigError(f"gate variant {cfg.variant!r} needs the {name} pre-activation")
    return value


def effective_gates(
    cfg: GateConfig,
    pre_f: np.ndarray,
    pre_s: np.ndarray | None,
    pre_mf: np.ndarray | None = None,
    pre_mi: np.ndarray | None = None,
    bias: BiasInit | None = None,
    master_bias: BiasInit | None = None,
    tied: bool = False,
) -> GatePack:
    """Effective forget and input gates of ``cfg``'s variant.

    ``pre_s`` is the input-gate pre-activation for untied variants and the
    refine-gate pre-activation for refine variants. ``tied`` ties the input
    gate to ``1 - f`` for cells without a separate input gate (GRU, JANET);
    refine variants are always tied through the effective gate.
    """
    hidden = pre_f.shape[-1]
    if bias is None:
        bias = init_standard(hidden, 0.0)
    a_f = pre_f + bias.forget_bias
    if cfg.main_cumax:
        f, s_f = cumax(a_f, return_softmax=True)
    else:
        f, s_f = sigmoid(a_f), None

    if cfg.aux_kind is AuxKind.REFINE:
        r = sigmoid(_require(cfg, "refine", pre_s) + bias.input_bias)
        g = refine_compose(f, r)
        return GatePack(forget=g, input=1.0 - g, f=f, r=r, s_f=s_f, tied=True)

    if cfg.aux_kind is AuxKind.NONE:
        if tied:
            return GatePack(forget=f, input=1.0 - f, f=f, s_f=s_f, tied=True)
        a_i = _require(cfg, "input", pre_s) + bias.input_bias
        if cfg.main_cumax:
            c_i, s_i = cumax(a_i, return_softmax=True)
            i = 1.0 - c_i
        else:
            i, s_i = sigmoid(a_i), None
        return GatePack(forget=f, input=i, f=f, i=i, s_f=s_f, s_i=s_i)

    # Master gates.
    i = 1.0 - f if tied else sigmoid(_require(cfg, "input", pre_s) + bias.input_bias)
    if master_bias is None:
        master_bias = init_ordered(pre_mf.shape[-1] if pre_mf is not None else hidden)
    a_mf = _require(cfg, "master forget", pre_mf) + master_bias.forget_bias
    a_mi = _require(cfg, "master input", pre_mi) + master_bias.input_bias
    s_mf = s_mi = None
    if cfg.init_kind is InitKind.ORDERED:
        mf_small, s_mf = cumax(a_mf, return_softmax=True)
        c_mi, s_mi = cumax(a_mi, return_softmax=True)
        mi_small = 1.0 - c_mi
    else:
        mf_small, mi_small = sigmoid(a_mf), sigmoid(a_mi)
    mf = master_downsize_expand(mf_small, cfg.downsize, hidden)
    mi = master_downsize_expand(mi_small, cfg.downsize, hidden)
    f_hat, i_hat, omega = master_compose(f, i, mf, mi)
    return GatePack(
        forget=f_hat,
        input=i_hat,
        f=f,
        i=i,
        mf=mf,
        mi=mi,
        mf_small=mf_small,
        mi_small=mi_small,
        omega=omega,
        s_f=s_f,
        s_mf=s_mf,
        s_mi=s_mi,
        tied=tied,
    )


def effective_gates_backward(
    cfg: GateConfig, pack: GatePack, d_forget: np.ndarray, d_input: np.ndarray
) -> GateGrads:
    """Back-propagate gradients of the effective gates to the pre-activations."""
    d_s = d_mf = d_mi = None
    if cfg.aux_kind is AuxKind.REFINE:
        f, r = pack.f, pack.r
        d_g = d_forget - d_input
        d_f = d_g * (2.0 * r + 2.0 * (1.0 - 2.0 * r) * f)
        d_s = d_g * 2.0 * f * (1.0 - f) * r * (1.0 - r)
    elif cfg.aux_kind is AuxKind.NONE:
        d_f = d_forget
        if pack.tied:
            d_f = d_f - d_input
        elif cfg.main_cumax:
            d_s = cumax_backward(pack.s_i, -d_input)
        else:
            d_s = d_input * pack.i * (1.0 - pack.i)
    else:
        f, i, mf, mi = pack.f, pack.i, pack.mf, pack.mi
        d_f = d_forget * pack.omega
        d_i = d_input * pack.omega
        d_omega = d_forget * (f - 1.0) + d_input * (i - 1.0)
        d_mf_full = d_forget + d_omega * mi
        d_mi_full = d_input + d_omega * mf
        d_mf_small = master_downsize_collapse(d_mf_full, cfg.downsize)
        d_mi_small = master_downsize_collapse(d_mi_full, cfg.downsize)
        if cfg.init_kind is InitKind.ORDERED:
            d_mf = cumax_backward(pack.s_mf, d_mf_small)
            d_mi = cumax_backward(pack.s_mi, -d_mi_small)
        else:
            d_mf = d_mf_small * pack.mf_small * (1.0 - pack.mf_small)
            d_mi = d_mi_small * pack.mi_small * (1.0 - pack.mi_small)
        if pack.tied:
            d_f = d_f - d_i
        else:
            d_s = d_i * i * (1.0 - i)

    if cfg.main_cumax:
        d_f = cumax_backward(pack.s_f, d_f)
    else:
        d_f = d_f * pack.f * (1.0 - pack.f)
    return GateGrads(d_f=d_f, d_s=d_s, d_mf=d_mf, d_mi=d_mi)


# --- Refine gate gradients ---


def refine_grad_components(f, r):
    """Partial derivatives of g with respect to the sigmoid pre-activations of f and r."""
    d_x = 2.0 * f * (1.0 - f) * (r + (1.0 - 2.0 * r) * f)
    d_y = 2.0 * f * r * (1.0 - r) * (1.0 - f)
    return d_x, d_y


def refine_grad_norm(f, g, tol: float = 1e-12):
    """Norm of the gradient of the effective gate, written in terms of (f, g).

    ``f`` must lie in (0, 1) and ``g`` in the admissible band
    [f**2, 1-(1-f)**2].
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if np.any((f <= 0.0) | (f >= 1.0)):
        raise ValueError("refine_grad_norm needs f strictly inside (0, 1)")
    lower, upper = f * f, 1.0 - (1.0 - f) ** 2
    if np.any((g < lower - tol) | (g > upper + tol)):
        raise ValueError("g lies outside the admissible band [f^2, 1-(1-f)^2]")
    gap = g - f * f
    first = (gap * (1.0 - 2.0 * f) + 2.0 * f * f * (1.0 - f)) ** 2
    second = gap**2 * (1.0 - gap / (2.0 * f * (1.0 - f))) ** 2
    out = np.sqrt(first + second)
    return float(out) if out.ndim == 0 else out


def decay_period_of_bias(b: float) -> float:
    """Decay period 1/(1 - sigmoid(b)) = 1 + e^b of a constant-bias gate."""
    return 1.0 + math.exp(b)
