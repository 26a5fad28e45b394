"""Recurrent encoder/decoder, MLP heads, losses and Adam on top of :mod:`tacda.autodiff`.

Parameters live in plain ``dict[str, np.ndarray]`` groups.  Forward functions
accept either raw arrays (a fast, tape-free evaluation) or tracked tensors
from :func:`track` when gradients are needed.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor

GROUPS = ("encoder_source", "encoder_target", "decoder", "discriminator", "predictor")
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class Architecture:
    n_sensors: int
    window: int
    hidden: int = 16
    layers: int = 1
    bidirectional: bool = False
    head_hidden: tuple = (32, 32)

    def __post_init__(self):
        if min(self.n_sensors, self.window, self.hidden, self.layers) < 1:
            raise ValueError(f"invalid architecture {self}")
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def feature_dim(self) -> int:
        return self.hidden * self.directions

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(**{**d, "head_hidden": tuple(d.get("head_hidden", (32, 32)))})


# ----------------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _lstm_params(rng, n_in, hidden, prefix):
    fan_in = n_in + hidden
    return {
        f"{prefix}.Wx": _uniform(rng, (n_in, 4 * hidden), fan_in),
        f"{prefix}.Wh": _uniform(rng, (hidden, 4 * hidden), fan_in),
        f"{prefix}.b": _uniform(rng, (4 * hidden,), fan_in),
    }


def init_encoder(arch: Architecture, rng) -> dict:
    params = {}
    n_in = arch.n_sensors
    for layer in range(arch.layers):
        for d in ("fw", "bw")[: arch.directions]:
            params.update(_lstm_params(rng, n_in, arch.hidden, f"l{layer}.{d}"))
        n_in = arch.feature_dim
    return params


def init_decoder(arch: Architecture, rng) -> dict:
    params = _lstm_params(rng, arch.feature_dim, arch.hidden, "rnn")
    params["out.W"] = _uniform(rng, (arch.hidden, arch.n_sensors), arch.hidden)
    params["out.b"] = _uniform(rng, (arch.n_sensors,), arch.hidden)
    return params


def init_head(arch: Architecture, rng) -> dict:
    params = {}
    n_in = arch.feature_dim
    for i, width in enumerate(arch.head_hidden + (1,)):
        params[f"fc{i}.W"] = _uniform(rng, (n_in, width), n_in)
        params[f"fc{i}.b"] = _uniform(rng, (width,), n_in)
        n_in = width
    return params


@dataclass
class ModelBundle:
    """Named parameter groups plus the architecture that shapes them."""

    arch: Architecture
    groups: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, arch: Architecture, rng) -> "ModelBundle":
        enc = init_encoder(arch, rng)
        return cls(arch, {
            "encoder_source": enc,
            "encoder_target": copy_params(enc),
            "decoder": init_decoder(arch, rng),
            "discriminator": init_head(arch, rng),
            "predictor": init_head(arch, rng),
        })

    def __getitem__(self, name) -> dict:
        return self.groups[name]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.arch, copy.deepcopy(self.groups))


def copy_params(params: Mapping) -> dict:
    return {k: np.array(v, copy=True) for k, v in params.items()}


def track(params: Mapping) -> dict:
    """Wrap a parameter group as tracked tensors for a gradient pass."""
    return {k: ad.parameter(v) for k, v in params.items()}


# ----------------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------------

def _lstm_sweep(step_input, n, length, wh, hidden, reverse):
    """Run one LSTM direction; ``step_input(t)`` gives the (n, 4H) input projection at step t."""
    h = Tensor(np.zeros((n, hidden)))
    c = Tensor(np.zeros((n, hidden)))
    outs = [None] * length
    steps = range(length - 1, -1, -1) if reverse else range(length)
    first = True
    for t in steps:
        z = step_input(t) if first else step_input(t) + h @ wh
        first = False
        gates = ad.sigmoid(z[:, : 3 * hidden])
        cand = ad.tanh(z[:, 3 * hidden:])
        i, f, o = gates[:, :hidden], gates[:, hidden: 2 * hidden], gates[:, 2 * hidden:]
        c = f * c + i * cand
        h = o * ad.tanh(c)
        outs[t] = h
    return outs, h


def _check_windows(x, arch):
    shape = x.shape
    if len(shape) != 3 or shape[1] != arch.n_sensors or shape[2] != arch.window:
        raise ValueError(
            f"expected windows of shape (n, {arch.n_sensors}, {arch.window}), got {shape}"
        )


def encoder_forward(params: Mapping, x, arch: Architecture) -> Tensor:
    """Features of shape ``(n, feature_dim)`` for windows ``x`` of shape ``(n, M, L)``.

    The feature is the final hidden state of the top layer; with a
    bidirectional encoder the forward and backward finals are concatenated.
    """
    _check_windows(x, arch)
    seq = ad.transpose(ad.as_tensor(x), (0, 2, 1))
    finals = []
    for layer in range(arch.layers):
        outs_per_dir, finals = [], []
        for d in ("fw", "bw")[: arch.directions]:
            p = f"l{layer}.{d}"
            xw = seq @ params[f"{p}.Wx"] + params[f"{p}.b"]
            outs, last = _lstm_sweep(lambda t, xw=xw: xw[:, t, :], xw.shape[0], arch.window,
                                     params[f"{p}.Wh"], arch.hidden, reverse=(d == "bw"))
            outs_per_dir.append(outs)
            finals.append(last)
        if layer + 1 < arch.layers:
            steps = [ad.concat([o[t] for o in outs_per_dir], axis=-1) if arch.bidirectional
                     else outs_per_dir[0][t] for t in range(arch.window)]
            seq = ad.stack(steps, axis=1)
    return ad.concat(finals, axis=-1) if arch.bidirectional else finals[0]


def decoder_forward(params: Mapping, f, arch: Architecture) -> Tensor:
    """Reconstruct ``(n, M, L)`` windows from features; the feature is fed at every step."""
    f = ad.as_tensor(f)
    if f.ndim != 2 or f.shape[1] != arch.feature_dim:
        raise ValueError(f"expected features of shape (n, {arch.feature_dim}), got {f.shape}")
    proj = f @ params["rnn.Wx"] + params["rnn.b"]
    outs, _ = _lstm_sweep(lambda t: proj, f.shape[0], arch.window,
                          params["rnn.Wh"], arch.hidden, reverse=False)
    hs = ad.stack(outs, axis=1)
    y = hs @ params["out.W"] + params["out.b"]
    return ad.transpose(y, (0, 2, 1))


def _mlp_logits(params: Mapping, f, n_layers: int) -> Tensor:
    h = ad.as_tensor(f)
    for i in range(n_layers):
        h = h @ params[f"fc{i}.W"] + params[f"fc{i}.b"]
        if i + 1 < n_layers:
            h = ad.relu(h)
    return ad.reshape(h, (h.shape[0],))


def _check_features(f, arch):
    if f.ndim != 2 or f.shape[1] != arch.feature_dim:
        raise ValueError(f"expected features of shape (n, {arch.feature_dim}), got {f.shape}")


def discriminator_logits(params: Mapping, f, arch: Architecture) -> Tensor:
    f = ad.as_tensor(f)
    _check_features(f, arch)
    return _mlp_logits(params, f, len(arch.head_hidden) + 1)


def discriminator_forward(params: Mapping, f, arch: Architecture) -> np.ndarray:
    """Probability that each feature came from the source domain, clamped to [1e-7, 1 - 1e-7]."""
    z = discriminator_logits(params, f, arch).data
    return np.clip(expit(z), PROB_CLAMP, 1.0 - PROB_CLAMP)


def predictor_forward(params: Mapping, f, arch: Architecture) -> Tensor:
    """Normalized RUL estimate in [0, 1]."""
    f = ad.as_tensor(f)
    _check_features(f, arch)
    return ad.sigmoid(_mlp_logits(params, f, len(arch.head_hidden) + 1))


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    return ad.mean(ad.square(ad.sub(pred, np.asarray(target, dtype=np.float64))))


def log_prob_source(logits) -> Tensor:
    """``log D`` computed from logits: ``-softplus(-z)``."""
    return ad.neg(ad.softplus(ad.neg(logits)))


def log_prob_target(logits) -> Tensor:
    """``log(1 - D)`` computed from logits: ``-softplus(z)``."""
    return ad.neg(ad.softplus(logits))


def adversarial_objective(logits_source, logits_target) -> Tensor:
    """``E[log D(f_S)] + E[log(1 - D(f_T))]``; the discriminator maximizes it."""
    return ad.add(ad.mean(log_prob_source(logits_source)), ad.mean(log_prob_target(logits_target)))


def encoder_adversarial_loss(logits_target, variant: str = "label-flip") -> Tensor:
    """Loss the target encoder minimizes.

    ``literal-minimax`` minimizes ``E[log(1 - D(f_T))]`` (the only term that
    depends on the encoder); ``label-flip`` minimizes ``-E[log D(f_T)]``.
    """
    if variant == "literal-minimax":
        return ad.mean(log_prob_target(logits_target))
    if variant == "label-flip":
        return ad.neg(ad.mean(log_prob_source(logits_target)))
    raise ValueError(f"unknown adversarial variant {variant!r}")


def soft_dtw_loss(reconstruction, target, gamma: float) -> Tensor:
    """Batch-mean soft-DTW between reconstructions and their originals."""
    return ad.mean(ad.soft_dtw_values(reconstruction, target, gamma))


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over one parameter group."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: dict, grads: Mapping) -> dict:
        """Update ``params`` (rebinding entries, never writing into shared arrays)."""
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            m = s.beta1 * s.m.get(name, 0.0) + (1.0 - s.beta1) * g
            v = s.beta2 * s.v.get(name, 0.0) + (1.0 - s.beta2) * g * g
            s.m[name], s.v[name] = m, v
            params[name] = params[name] - s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
        return params


def adam_step(state: OptimizerState, params: dict, grads: Mapping) -> dict:
    opt = Adam.__new__(Adam)
    opt.state = state
    return opt.step(params, grads)


def grads_for(tape: ad.GradTape, loss: Tensor, tracked: Mapping) -> dict:
    names = list(tracked)
    return dict(zip(names, tape.gradient(loss, [tracked[k] for k in names])))
