"""A small multi-stage dilated TCN with hand-written backpropagation.

This is a simplified MS-TCN: every stage is

    1x1 conv -> L x [dilated conv (k=3) -> ReLU -> 1x1 conv -> residual] -> 1x1 classifier

and stage s+1 consumes the class probabilities of stage s.  The only searched
quantity is the per-layer dilation.  Any layer can temporarily be switched to
a shared-kernel multi-dilated layer for the local search.

Everything runs in float64 on one (features x time) sequence at a time.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FrameSequence
from .errors import (CheckpointError, ConfigError, DegenerateWeightsError, DivergenceError,
                     ShapeError)
from .local_search import (LocalWindow, mixed_conv_backward, mixed_conv_forward,
                           pmf_backward, pmf_from_weights)
from .metrics import DEFAULT_THRESHOLDS, MetricsReport, metric_value, parse_metric, report
from .search_space import DilationStructure, decode_structure, encode_structure

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"G2LTCN1\n"


@dataclass(frozen=True)
class TcnConfig:
    feature_dim: int
    num_classes: int
    structure: DilationStructure
    hidden: int = 16
    kernel_width: int = 3

    def __post_init__(self):
        if min(self.feature_dim, self.num_classes, self.hidden) < 1:
            raise ConfigError("feature_dim, num_classes and hidden must all be >= 1")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel width must be odd, got {self.kernel_width}")

    @property
    def num_stages(self) -> int:
        return len(self.structure.shape)

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "num_classes": self.num_classes,
                "structure": encode_structure(self.structure), "hidden": self.hidden,
                "kernel_width": self.kernel_width}

    @classmethod
    def from_dict(cls, d: dict) -> TcnConfig:
        return cls(int(d["feature_dim"]), int(d["num_classes"]), decode_structure(d["structure"]),
                   int(d["hidden"]), int(d["kernel_width"]))


def _param_shapes(cfg: TcnConfig):
    H, K, kw = cfg.hidden, cfg.num_classes, cfg.kernel_width
    for s, n_layers in enumerate(cfg.structure.shape):
        f_in = cfg.feature_dim if s == 0 else K
        yield f"s{s}.in.w", (H, f_in), f_in
        yield f"s{s}.in.b", (H,), f_in
        for l in range(n_layers):
            yield f"s{s}.l{l}.conv.w", (H, H, kw), H * kw
            yield f"s{s}.l{l}.conv.b", (H,), H * kw
            yield f"s{s}.l{l}.proj.w", (H, H), H
            yield f"s{s}.l{l}.proj.b", (H,), H
        yield f"s{s}.out.w", (K, H), H
        yield f"s{s}.out.b", (K,), H


def parameter_count(cfg: TcnConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(cfg))


class TcnModel:
    """Parameters plus the (possibly windowed) dilation of every layer."""

    def __init__(self, config: TcnConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.windows: dict[int, LocalWindow] = {}
        self.pmf = "abs"
        self._layer_names = [(s, l) for s, n in enumerate(config.structure.shape) for l in range(n)]

    @property
    def structure(self) -> DilationStructure:
        return self.config.structure

    def _flat_index(self, s: int, l: int) -> int:
        return sum(self.config.structure.shape[:s]) + l

    def layer_dilations(self, s: int, l: int) -> tuple[int, ...]:
        window = self.windows.get(self._flat_index(s, l))
        if window is not None:
            return window.dilations
        return (self.config.structure.stages[s][l],)

    def layer_alpha(self, s: int, l: int) -> np.ndarray:
        key = f"s{s}.l{l}.branch"
        if key not in self.params:
            return np.ones(1)
        try:
            return pmf_from_weights(self.params[key], self.pmf)
        except DegenerateWeightsError:
            log.warning("layer s%d.l%d: all branch weights are zero, using a uniform PMF", s, l)
            return np.full(self.params[key].size, 1.0 / self.params[key].size)

    # local-search hooks

    def set_windows(self, windows: dict[int, LocalWindow], pmf: str = "abs") -> None:
        """Turn the given layers into multi-dilated layers with uniform branch weights."""
        self.clear_windows(self.config.structure)
        self.pmf = pmf
        for i, window in windows.items():
            s, l = self._layer_names[i]
            self.windows[i] = window
            self.params[f"s{s}.l{l}.branch"] = np.full(window.samples, 1.0 / window.samples)

    def branch_pmf(self, layer: int) -> np.ndarray:
        s, l = self._layer_names[layer]
        return self.layer_alpha(s, l)

    def clear_windows(self, structure: DilationStructure) -> None:
        if structure.shape != self.config.structure.shape:
            raise ShapeError("a model's structure shape is fixed")
        for key in [k for k in self.params if k.endswith(".branch")]:
            del self.params[key]
        self.windows = {}
        self.config = TcnConfig(self.config.feature_dim, self.config.num_classes, structure,
                                self.config.hidden, self.config.kernel_width)

    def copy(self) -> TcnModel:
        m = TcnModel(self.config, {k: v.copy() for k, v in self.params.items()})
        m.windows = dict(self.windows)
        m.pmf = self.pmf
        return m

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(forward(self, features)[-1], axis=0)


def build_model(cfg: TcnConfig, rng: np.random.Generator | int) -> TcnModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, in a fixed order."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape, fan_in in _param_shapes(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return TcnModel(cfg, params)


# ---------------------------------------------------------------------------
# forward / backward


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def _stage_forward(model: TcnModel, s: int, x: np.ndarray, caches: list | None):
    p = model.params
    h = p[f"s{s}.in.w"] @ x + p[f"s{s}.in.b"][:, None]
    layers = []
    for l in range(model.config.structure.shape[s]):
        pre = f"s{s}.l{l}."
        dil, alpha = model.layer_dilations(s, l), model.layer_alpha(s, l)
        u, taps = mixed_conv_forward(h, p[pre + "conv.w"], dil, alpha, p[pre + "conv.b"])
        r = np.maximum(u, 0.0)
        out = h + p[pre + "proj.w"] @ r + p[pre + "proj.b"][:, None]
        if caches is not None:
            layers.append((h, taps, u, r, dil, alpha))
        h = out
    logits = p[f"s{s}.out.w"] @ h + p[f"s{s}.out.b"][:, None]
    if caches is not None:
        caches.append((x, layers, h))
    return logits


def forward(model: TcnModel, features: np.ndarray, caches: list | None = None) -> list[np.ndarray]:
    """Per-stage class scores, each (num_classes, T)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.config.feature_dim:
        raise ShapeError(f"features of shape {x.shape}, model expects ({model.config.feature_dim}, T)")
    if x.shape[1] < 1:
        raise ShapeError("a sequence needs at least one frame")
    outputs = []
    for s in range(model.config.num_stages):
        logits = _stage_forward(model, s, x, caches)
        outputs.append(logits)
        x = _softmax(logits)
    return outputs


def _stage_backward(model: TcnModel, s: int, g_logits, cache, grads) -> np.ndarray:
    p = model.params
    x, layers, h_last = cache
    grads[f"s{s}.out.w"] = g_logits @ h_last.T
    grads[f"s{s}.out.b"] = g_logits.sum(axis=1)
    gh = p[f"s{s}.out.w"].T @ g_logits
    for l in reversed(range(len(layers))):
        pre = f"s{s}.l{l}."
        h, taps, u, r, dil, alpha = layers[l]
        grads[pre + "proj.w"] = gh @ r.T
        grads[pre + "proj.b"] = gh.sum(axis=1)
        gu = (p[pre + "proj.w"].T @ gh) * (u > 0)
        g_in, g_theta, g_alpha, g_b = mixed_conv_backward(gu, h, p[pre + "conv.w"], dil, alpha, taps)
        grads[pre + "conv.w"] = g_theta
        grads[pre + "conv.b"] = g_b
        if pre + "branch" in p:
            w = p[pre + "branch"]
            if model.pmf == "abs" and not np.any(w):
                grads[pre + "branch"] = np.zeros_like(w)  # uniform stand-in, subgradient 0
            else:
                grads[pre + "branch"] = pmf_backward(g_alpha, w, model.pmf)
        gh = gh + g_in
    grads[f"s{s}.in.w"] = gh @ x.T
    grads[f"s{s}.in.b"] = gh.sum(axis=1)
    return p[f"s{s}.in.w"].T @ gh


def segmentation_loss(outputs: Sequence[np.ndarray], labels: np.ndarray, smooth_weight: float = 0.15,
                      smooth_clip: float = 16.0):
    """Cross-entropy plus truncated-MSE smoothing, summed over stages.

    Returns the loss and its gradient w.r.t. every stage's scores.  The
    smoothing term is ``mean(min((logp[:, t] - logp[:, t-1])**2, smooth_clip))``
    and is differentiated through both frames.
    """
    labels = np.asarray(labels)
    total, grads = 0.0, []
    for z in outputs:
        K, T = z.shape
        lp = _log_softmax(z)
        prob = np.exp(lp)
        ce = -float(np.mean(lp[labels, np.arange(T)]))
        g = prob.copy()
        g[labels, np.arange(T)] -= 1.0
        g /= T
        total += ce
        if smooth_weight > 0 and T > 1:
            delta = lp[:, 1:] - lp[:, :-1]
            sq = delta**2
            total += smooth_weight * float(np.mean(np.minimum(sq, smooth_clip)))
            g_delta = smooth_weight * 2.0 * delta * (sq < smooth_clip) / delta.size
            g_lp = np.zeros_like(lp)
            g_lp[:, 1:] += g_delta
            g_lp[:, :-1] -= g_delta
            g += g_lp - prob * g_lp.sum(axis=0, keepdims=True)
        grads.append(g)
    return total, grads


def loss_and_grads(model: TcnModel, features, labels, smooth_weight=0.15, smooth_clip=16.0,
                   input_grad=False):
    """Loss and parameter gradients; with ``input_grad`` also d(loss)/d(features)."""
    caches: list = []
    outputs = forward(model, features, caches)
    loss, g_out = segmentation_loss(outputs, labels, smooth_weight, smooth_clip)
    grads: dict[str, np.ndarray] = {}
    g_next = None
    for s in reversed(range(model.config.num_stages)):
        g = g_out[s]
        if g_next is not None:
            prob = _softmax(outputs[s])
            g = g + prob * (g_next - (prob * g_next).sum(axis=0, keepdims=True))
        g_next = _stage_backward(model, s, g, caches[s], grads)
    if input_grad:
        return loss, grads, g_next
    return loss, grads


# ---------------------------------------------------------------------------
# training


OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainingConfig:
    """Training recipe.  ``optimizer`` is momentum SGD or Adam (betas 0.9, 0.999).

    ``grad_clip`` bounds the global gradient norm of each step; plain SGD on
    these unnormalised residual stacks oscillates without it.
    """

    epochs: int = 5
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 1
    smooth_weight: float = 0.15
    smooth_clip: float = 16.0
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("training epochs must be >= 1")
        if self.smooth_weight < 0:
            raise ConfigError("smoothing weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and 0 <= momentum < 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")


def _check_data(model: TcnModel, data: Sequence[FrameSequence]):
    if not data:
        raise ConfigError("training needs at least one sequence")
    K = model.config.num_classes
    for seq in data:
        if seq.labels.min() < 0 or seq.labels.max() >= K:
            raise ConfigError(f"sequence {seq.id!r} has labels outside [0, {K})")


def train_epochs(model: TcnModel, data: Sequence[FrameSequence], tcfg: TrainingConfig, epochs: int,
                 rng: np.random.Generator) -> list[float]:
    """``epochs`` shuffled passes of SGD or Adam.  Returns mean loss per epoch.

    Optimizer state starts from zero on every call.
    """
    _check_data(model, data)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    second = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            for i in batch:
                seq = data[i]
                loss, grads = loss_and_grads(model, seq.features, seq.labels,
                                             tcfg.smooth_weight, tcfg.smooth_clip)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss on {seq.id!r} in epoch {epoch + 1}")
                epoch_loss += loss
                for k, g in grads.items():
                    acc[k] = acc[k] + g if k in acc else g
            scale = 1.0 / len(batch)
            if tcfg.grad_clip is not None:
                norm = np.sqrt(sum(float(np.vdot(g, g)) for g in acc.values())) * scale
                if norm > tcfg.grad_clip:
                    scale *= tcfg.grad_clip / norm
            step += 1
            for k, g in acc.items():
                v = velocity[k]
                if tcfg.optimizer == "sgd":
                    v *= tcfg.momentum
                    v += scale * g
                    model.params[k] -= tcfg.lr * v
                else:
                    g = scale * g
                    v *= 0.9
                    v += 0.1 * g
                    m2 = second[k]
                    m2 *= 0.999
                    m2 += 0.001 * g * g
                    v_hat = v / (1.0 - 0.9**step)
                    m2_hat = m2 / (1.0 - 0.999**step)
                    model.params[k] -= tcfg.lr * v_hat / (np.sqrt(m2_hat) + 1e-8)
        curve.append(epoch_loss / len(data))
    return curve


def train(model: TcnModel, data: Sequence[FrameSequence], tcfg: TrainingConfig):
    """Train for ``tcfg.epochs`` epochs; returns ``(model, loss_curve)``."""
    rng = np.random.default_rng(tcfg.seed)
    return model, train_epochs(model, data, tcfg, tcfg.epochs, rng)


def loss_curve_csv(curve: Sequence[float]) -> str:
    """``epoch,loss`` rows, epochs counted from 1; floats via ``repr``."""
    return "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve, start=1))


@dataclass
class TrainingContext:
    """Data plus training recipe, in the shape the local search expects."""

    data: Sequence[FrameSequence]
    tcfg: TrainingConfig
    num_classes: int
    hidden: int = 16
    kernel_width: int = 3

    def build_model(self, structure: DilationStructure, seed: int) -> TcnModel:
        cfg = TcnConfig(self.data[0].features.shape[0], self.num_classes, structure, self.hidden,
                        self.kernel_width)
        return build_model(cfg, seed)

    def train(self, model: TcnModel, epochs: int, rng: np.random.Generator) -> list[float]:
        return train_epochs(model, self.data, self.tcfg, epochs, rng)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: TcnModel, data: Sequence[FrameSequence],
                   thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    preds = [model.predict(seq.features) for seq in data]
    return report(preds, [seq.labels for seq in data], thresholds)


def derive_seed(root_seed: int, structure: DilationStructure) -> int:
    """Per-structure seed: root seed plus a stable hash of the structure text."""
    return (int(root_seed) + zlib.crc32(encode_structure(structure).encode())) % 2**32


def evaluate_structure(structure: DilationStructure, train_set: Sequence[FrameSequence],
                       val_set: Sequence[FrameSequence], epochs: int, metric: str = "f1@0.1", *,
                       num_classes: int | None = None, hidden: int = 16,
                       tcfg: TrainingConfig | None = None, seed: int = 0) -> float:
    """Fitness of a structure: validation ``metric`` after ``epochs`` epochs of training.

    Training divergence is logged and scores 0.
    """
    if {s.id for s in train_set} & {s.id for s in val_set}:
        raise ConfigError("train and validation sets overlap")
    parse_metric(metric)
    if num_classes is None:
        num_classes = 1 + max(int(s.labels.max()) for s in (*train_set, *val_set))
    tcfg = tcfg or TrainingConfig()
    cfg = TcnConfig(train_set[0].features.shape[0], num_classes, structure, hidden)
    model = build_model(cfg, seed)
    try:
        train_epochs(model, train_set, tcfg, epochs, np.random.default_rng(seed))
    except DivergenceError as exc:
        log.warning("structure %s diverged: %s", encode_structure(structure), exc)
        return 0.0
    return metric_value(evaluate_model(model, val_set), metric)


@dataclass
class StructureEvaluator:
    """Picklable fitness function ``(structure, epochs) -> score`` for the global search."""

    train_set: Sequence[FrameSequence]
    val_set: Sequence[FrameSequence]
    num_classes: int
    metric: str = "f1@0.1"
    hidden: int = 16
    tcfg: TrainingConfig = field(default_factory=TrainingConfig)
    root_seed: int = 0

    def __call__(self, structure: DilationStructure, epochs: int) -> float:
        return evaluate_structure(structure, self.train_set, self.val_set, epochs, self.metric,
                                  num_classes=self.num_classes, hidden=self.hidden, tcfg=self.tcfg,
                                  seed=derive_seed(self.root_seed, structure))


# ---------------------------------------------------------------------------
# checkpoint


def save_model(model: TcnModel, path) -> None:
    """``G2LTCN1`` magic, u32 header length, JSON header, then float64 LE blobs."""
    names = list(model.params)
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "pmf": model.pmf,
        "windows": {str(i): [w.center, w.half_width, w.samples] for i, w in model.windows.items()},
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_model(path) -> TcnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a G2LTCN1 model checkpoint")
    buf = io.BytesIO(blob[len(CHECKPOINT_MAGIC):])
    try:
        (n,) = struct.unpack("<I", buf.read(4))
        header = json.loads(buf.read(n))
        model = TcnModel(TcnConfig.from_dict(header["config"]), {})
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            data = buf.read(8 * count)
            if len(data) != 8 * count:
                raise CheckpointError(f"{path}: truncated parameter {name}")
            model.params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    except (struct.error, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt model checkpoint ({exc})") from exc
    model.pmf = header["pmf"]
    model.windows = {int(i): LocalWindow(c, hw, S) for i, (c, hw, S) in header["windows"].items()}
    return model
