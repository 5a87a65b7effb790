"""Expectation-guided iterative (EGI) local refinement of dilation rates.

Each searched layer gets a small window of S dilations around its current
rate.  A single convolution kernel is applied at every dilation of the window
and the branch outputs are mixed by a PMF derived from learnable branch
weights.  After a few epochs of training, every layer collapses to the floored
expected dilation under its PMF, the windows are rebuilt around the new rates,
and the loop repeats.

The convolution here is written directly against numpy and carries its own
reverse pass; the TCN in :mod:`g2lsearch.tcn` is built on top of it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DegenerateWeightsError, DivergenceError, ShapeError
from .search_space import DilationStructure

log = logging.getLogger(__name__)

PMF_FUNCTIONS = ("abs", "sigmoid", "softmax")


# ---------------------------------------------------------------------------
# window


@dataclass(frozen=True)
class LocalWindow:
    """``S`` evenly spaced dilations over ``[center - half_width, center + half_width]``."""

    center: int
    half_width: float
    samples: int

    def __post_init__(self):
        if self.center < 1:
            raise ConfigError(f"window center must be >= 1, got {self.center}")
        if self.samples < 2:
            raise ConfigError(f"a window needs at least 2 samples, got {self.samples}")
        if not self.half_width > 0:
            raise ConfigError(f"window half-width must be positive, got {self.half_width}")

    @property
    def raw(self) -> np.ndarray:
        i = np.arange(self.samples, dtype=np.float64)
        return self.center - self.half_width + i * (2.0 * self.half_width / (self.samples - 1))

    @property
    def dilations(self) -> tuple[int, ...]:
        """Integer dilations actually used by the convolution branches.

        Rounded half-to-even, then clamped to >= 1.  Duplicates are kept.
        """
        return tuple(int(d) for d in np.maximum(np.rint(self.raw), 1))


def build_local_window(center: int, fraction: float = 0.1, samples: int = 3) -> LocalWindow:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"window fraction must lie in (0, 1), got {fraction}")
    if samples < 2:
        raise ConfigError(f"a window needs at least 2 samples, got {samples}")
    if center < 1:
        raise ConfigError(f"window center must be >= 1, got {center}")
    return LocalWindow(int(center), fraction * center, int(samples))


# ---------------------------------------------------------------------------
# branch PMF


def pmf_from_weights(weights, kind: str = "abs") -> np.ndarray:
    """Map unbounded branch weights to a probability vector.

    ``abs`` is ``|w_i| / sum_j |w_j|``; ``sigmoid`` and ``softmax`` are the
    ablation alternatives.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError("branch weights must be a non-empty vector")
    if kind == "abs":
        a = np.abs(w)
        total = a.sum()
        if total == 0.0:
            raise DegenerateWeightsError("all branch weights are zero")
        return a / total
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * w))
        return s / s.sum()
    if kind == "softmax":
        e = np.exp(w - w.max())
        return e / e.sum()
    raise ConfigError(f"unknown PMF function {kind!r}; expected one of {PMF_FUNCTIONS}")


def pmf_backward(grad_alpha, weights, kind: str = "abs") -> np.ndarray:
    """Vector-Jacobian product of :func:`pmf_from_weights`."""
    g = np.asarray(grad_alpha, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    alpha = pmf_from_weights(w, kind)
    centred = g - np.dot(g, alpha)
    if kind == "abs":
        # subgradient 0 at w_i == 0 via sign(0) == 0
        return np.sign(w) * centred / np.abs(w).sum()
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * w))
        return centred / s.sum() * s * (1.0 - s)
    if kind == "softmax":
        return alpha * centred
    raise ConfigError(f"unknown PMF function {kind!r}")


# ---------------------------------------------------------------------------
# shared-kernel dilated convolution


def _shift_add(out, a, s):
    """out[:, t] += a[:, t + s] wherever t + s is inside the sequence."""
    T = a.shape[1]
    if s >= T or -s >= T:
        return
    if s >= 0:
        out[:, :T - s] += a[:, s:]
    else:
        out[:, -s:] += a[:, :T + s]


def _shift_dot(g, a, s) -> float:
    """sum_t g[:, t] * a[:, t + s] over valid t."""
    T = a.shape[1]
    if s >= T or -s >= T:
        return 0.0
    if s >= 0:
        return float(np.vdot(g[:, :T - s], a[:, s:]))
    return float(np.vdot(g[:, -s:], a[:, :T + s]))


def _tap_offsets(kw: int) -> range:
    return range(-(kw // 2), kw // 2 + 1)


def _tap_products(x, theta):
    """theta[:, :, j] @ x for every tap j, as one matmul; shape (kw, C_out, T)."""
    c_out, c_in, kw = theta.shape
    stacked = np.ascontiguousarray(theta.transpose(2, 0, 1)).reshape(kw * c_out, c_in)
    return (stacked @ x).reshape(kw, c_out, x.shape[1])


def mixed_conv_forward(x, theta, dilations: Sequence[int], alpha, bias=None):
    """``sum_i alpha_i * conv(x, dilation_i, theta) (+ bias)`` with zero padding.

    ``x`` is (C_in, T) and ``theta`` is (C_out, C_in, kw) with odd kw.  The
    kernel is applied once per tap; branches only differ in how the tap
    products are shifted, so extra branches are nearly free.
    Returns ``(y, taps)`` where ``taps`` is reused by the backward pass.
    """
    if x.ndim != 2 or x.shape[0] != theta.shape[1]:
        raise ShapeError(f"input has shape {x.shape}, kernel expects {theta.shape[1]} channels")
    if theta.shape[2] % 2 != 1:
        raise ShapeError("kernel width must be odd")
    taps = _tap_products(x, theta)
    y = np.zeros(taps.shape[1:])
    for j, off in enumerate(_tap_offsets(theta.shape[2])):
        if off == 0:
            y += float(np.sum(alpha)) * taps[j]
            continue
        for a, d in zip(alpha, dilations):
            if a != 0.0:
                _shift_add(y, a * taps[j], off * d)
    if bias is not None:
        y += bias[:, None]
    return y, taps


def mixed_conv_backward(gy, x, theta, dilations: Sequence[int], alpha, taps):
    """Gradients of :func:`mixed_conv_forward` w.r.t. x, theta, alpha and bias."""
    c_out, c_in, kw = theta.shape
    g_taps = np.zeros_like(taps)
    g_alpha = np.zeros(len(alpha))
    for j, off in enumerate(_tap_offsets(kw)):
        if off == 0:
            g_taps[j] = float(np.sum(alpha)) * gy
            g_alpha += float(np.vdot(gy, taps[j]))
            continue
        for i, (a, d) in enumerate(zip(alpha, dilations)):
            s = off * d
            _shift_add(g_taps[j], a * gy, -s)
            g_alpha[i] += _shift_dot(gy, taps[j], s)
    g_flat = g_taps.reshape(kw * c_out, -1)
    g_theta = (g_flat @ x.T).reshape(kw, c_out, c_in).transpose(1, 2, 0)
    stacked = np.ascontiguousarray(theta.transpose(2, 0, 1)).reshape(kw * c_out, c_in)
    g_x = stacked.T @ g_flat
    return g_x, g_theta, g_alpha, gy.sum(axis=1)


def dilated_conv(x, theta, dilation: int, bias=None) -> np.ndarray:
    """Plain single-dilation convolution with symmetric zero padding."""
    return mixed_conv_forward(x, theta, (dilation,), np.ones(1), bias)[0]


@dataclass
class MultiDilatedLayerState:
    """One shared kernel applied at several dilations, mixed by learned weights."""

    theta: np.ndarray
    weights: np.ndarray
    dilations: tuple[int, ...]
    bias: np.ndarray | None = None
    pmf: str = "abs"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.weights.shape != (len(self.dilations),):
            raise ShapeError(f"{self.weights.size} branch weights for {len(self.dilations)} dilations")
        if not np.all(np.isfinite(self.weights)):
            raise ShapeError("branch weights must be finite")

    @classmethod
    def from_window(cls, theta, window: LocalWindow, bias=None, pmf: str = "abs"):
        S = window.samples
        return cls(theta, np.full(S, 1.0 / S), window.dilations, bias, pmf)

    @property
    def alpha(self) -> np.ndarray:
        return pmf_from_weights(self.weights, self.pmf)


def multi_dilated_forward(x, state: MultiDilatedLayerState) -> np.ndarray:
    return mixed_conv_forward(x, state.theta, state.dilations, state.alpha, state.bias)[0]


@dataclass
class LayerGradients:
    x: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    bias: np.ndarray | None


def multi_dilated_backward(grad_out, x, state: MultiDilatedLayerState) -> LayerGradients:
    if grad_out.shape != (state.theta.shape[0], x.shape[1]):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match layer output")
    alpha = state.alpha
    _, taps = mixed_conv_forward(x, state.theta, state.dilations, alpha)
    gx, gtheta, galpha, gb = mixed_conv_backward(grad_out, x, state.theta, state.dilations, alpha, taps)
    gw = pmf_backward(galpha, state.weights, state.pmf)
    return LayerGradients(gx, gtheta, gw, gb if state.bias is not None else None)


# ---------------------------------------------------------------------------
# expectation collapse


def expected_dilation(window: LocalWindow, alpha) -> int:
    """Floored expectation of the raw window dilations under ``alpha``, clamped to >= 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (window.samples,):
        raise ShapeError(f"PMF of length {alpha.size} for a window of {window.samples} samples")
    e = math.fsum(a * d for a, d in zip(alpha.tolist(), window.raw.tolist()))
    # absorb rounding noise such as 99.99999999999999 for an exact 100
    return max(1, math.floor(e + 1e-9 * max(1.0, abs(e))))


# ---------------------------------------------------------------------------
# EGI loop


@dataclass
class LocalSearchConfig:
    iterations: int = 10
    fraction: float = 0.1
    samples: int = 3
    epochs_per_update: int = 3
    pmf: str = "abs"
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("local search iterations must be >= 0")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("window fraction must lie in (0, 1)")
        if self.samples < 2:
            raise ConfigError("window samples must be >= 2")
        if self.epochs_per_update < 1:
            raise ConfigError("epochs per structure update must be >= 1")
        if self.pmf not in PMF_FUNCTIONS:
            raise ConfigError(f"unknown PMF function {self.pmf!r}")

    @property
    def total_epochs(self) -> int:
        return self.iterations * self.epochs_per_update


class SearchableModel(Protocol):
    def set_windows(self, windows: dict[int, LocalWindow], pmf: str) -> None: ...
    def branch_pmf(self, layer: int) -> np.ndarray: ...
    def clear_windows(self, structure: DilationStructure) -> None: ...


class LocalTrainer(Protocol):
    """What the EGI loop needs from a training setup."""

    def build_model(self, structure: DilationStructure, seed: int) -> SearchableModel: ...
    def train(self, model: SearchableModel, epochs: int, rng: np.random.Generator) -> list[float]: ...


@dataclass
class LocalSearchState:
    """Resumable snapshot taken after every structure update."""

    iteration: int
    trajectory: list[DilationStructure]
    model: object
    rng_state: dict
    pmfs: list[list[list[float]]] = field(default_factory=list)


@dataclass
class LocalSearchResult:
    structure: DilationStructure
    trajectory: list[DilationStructure]
    pmfs: list[list[list[float]]]
    model: object

    def trajectory_rows(self):
        """``(iteration, layer_index, dilation)`` rows, iteration 0 being the start."""
        for it, s in enumerate(self.trajectory):
            for layer, d in enumerate(s.flat):
                yield it, layer, d


def run_local_search(initial: DilationStructure, cfg: LocalSearchConfig, trainer: LocalTrainer,
                     checkpoint: Callable[[LocalSearchState], None] | None = None,
                     resume: LocalSearchState | None = None) -> LocalSearchResult:
    """Refine every layer's dilation with ``cfg.iterations`` EGI updates.

    The model is built once; its kernels carry over between iterations while
    the branch weights are reset to uniform each time the windows move.
    """
    if resume is not None:
        model = resume.model
        trajectory = list(resume.trajectory)
        pmfs = [list(p) for p in resume.pmfs]
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    else:
        model = trainer.build_model(initial, cfg.seed)
        trajectory = [initial]
        pmfs = []
        rng = np.random.default_rng(cfg.seed)
        start = 0

    current = trajectory[-1]
    for it in range(start + 1, cfg.iterations + 1):
        windows = {i: build_local_window(d, cfg.fraction, cfg.samples) for i, d in enumerate(current.flat)}
        model.set_windows(windows, cfg.pmf)
        try:
            trainer.train(model, cfg.epochs_per_update, rng)
        except DivergenceError as exc:
            raise DivergenceError(f"local search iteration {it}: {exc}") from exc
        layer_pmfs = [model.branch_pmf(i) for i in range(current.num_layers)]
        new = [expected_dilation(windows[i], a) for i, a in enumerate(layer_pmfs)]
        current = DilationStructure.from_flat(new, current.shape)
        trajectory.append(current)
        pmfs.append([a.tolist() for a in layer_pmfs])
        log.info("local iteration %d: %s", it, current)
        model.clear_windows(current)
        if checkpoint is not None:
            checkpoint(LocalSearchState(it, list(trajectory), model, rng.bit_generator.state, pmfs))

    return LocalSearchResult(current, trajectory, pmfs, model)
