"""Oracle and finite-difference checks for soft-DTW and the autodiff core.

Each check returns a :class:`CheckResult`; :func:`run_all` runs the whole
suite and is what ``tacda gradcheck`` prints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .softdtw import brute_force_soft_dtw, hard_dtw, soft_dtw, soft_dtw_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    instances: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: worst {self.worst:.3e} vs tolerance {self.tolerance:.0e} "
                f"over {self.instances} instances ({self.seconds:.1f}s)")


def relative_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|, 1e-12)`` in the Euclidean norm."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6,
                       coords=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (optionally only at ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(x.shape)


def _timed(name, tol, fn) -> CheckResult:
    t0 = time.perf_counter()
    worst, count = fn()
    return CheckResult(name, worst <= tol, worst, tol, count, time.perf_counter() - t0)


# ----------------------------------------------------------------------------
# soft-DTW
# ----------------------------------------------------------------------------

def check_oracle(n_instances=500, seed=0, tol=1e-9) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(n_instances):
            length, m = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            gamma = (0.01, 0.1, 1.0)[i % 3]
            x, y = rng.normal(size=(m, length)), rng.normal(size=(m, length))
            worst = max(worst, abs(soft_dtw(x, y, gamma).value - brute_force_soft_dtw(x, y, gamma)))
        return worst, n_instances
    return _timed("soft-DTW equals brute-force path enumeration", tol, run)


def check_sdtw_gradient(n_instances=100, seed=1, tol=1e-5, h=1e-6) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(n_instances):
            length, m = int(rng.integers(2, 9)), int(rng.integers(1, 4))
            gamma = (0.1, 0.5, 1.0)[i % 3]
            x, y = rng.normal(size=(m, length)), rng.normal(size=(m, length))
            g = soft_dtw_grad(x, y, gamma).grad_x
            fd = central_difference(lambda z: soft_dtw(z, y, gamma).value, x, h)
            worst = max(worst, relative_error(g, fd))
        return worst, n_instances
    return _timed("soft-DTW gradient vs central differences", tol, run)


def check_hard_limit(n_instances=100, seed=2, gamma=1e-3) -> CheckResult:
    """Worst ``|sdtw - dtw| / (1 + |dtw|)``; a violated lower bound counts as infinite."""
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            length, m = int(rng.integers(1, 12)), int(rng.integers(1, 4))
            x, y = rng.normal(size=(m, length)), rng.normal(size=(m, length))
            s, d = soft_dtw(x, y, gamma).value, hard_dtw(x, y)
            if s > d + 1e-12:
                return float("inf"), n_instances
            worst = max(worst, abs(s - d) / (1.0 + abs(d)))
        return worst, n_instances
    return _timed("soft-DTW approaches hard DTW as gamma -> 0", 1e-2, run)


# ----------------------------------------------------------------------------
# autodiff on the full graphs
# ----------------------------------------------------------------------------

def tiny_problem(seed=3, hidden=8, window=10, n_sensors=2, batch=3):
    arch = nn.Architecture(n_sensors, window, hidden=hidden, head_hidden=(6,))
    rng = np.random.default_rng(seed)
    bundle = nn.ModelBundle.initialize(arch, rng)
    xs = rng.uniform(size=(batch, n_sensors, window))
    xt = rng.uniform(size=(batch, n_sensors, window))
    y = rng.uniform(size=batch)
    return arch, bundle, xs, xt, y


def graph_losses(arch, gamma=0.1):
    """Scalar losses of the three composed graphs, each a function of
    ``(params_by_group, xs, xt, y)`` returning a :class:`Tensor`."""

    def predictor_mse(p, xs, xt, y):
        f = nn.encoder_forward(p["encoder_source"], xs, arch)
        return nn.mse_loss(nn.predictor_forward(p["predictor"], f, arch), y)

    def decoder_sdtw(p, xs, xt, y):
        f = nn.encoder_forward(p["encoder_target"], xt, arch)
        return nn.soft_dtw_loss(nn.decoder_forward(p["decoder"], f, arch), xt, gamma)

    def adversarial(p, xs, xt, y):
        fs = nn.encoder_forward(p["encoder_source"], xs, arch)
        ft = nn.encoder_forward(p["encoder_target"], xt, arch)
        return nn.adversarial_objective(nn.discriminator_logits(p["discriminator"], fs, arch),
                                        nn.discriminator_logits(p["discriminator"], ft, arch))

    return {
        "encoder -> predictor MSE": (predictor_mse, ("encoder_source", "predictor")),
        "encoder -> decoder soft-DTW": (decoder_sdtw, ("encoder_target", "decoder")),
        "encoders -> discriminator adversarial objective": (adversarial,
                                                            ("encoder_source", "encoder_target",
                                                             "discriminator")),
    }


def graph_gradient_error(loss_fn, groups, arch, bundle, xs, xt, y, h=1e-6, per_group=25,
                         seed=0) -> float:
    """Worst per-group relative error between tape gradients and central
    differences, on ``per_group`` randomly chosen coordinates per tensor."""
    rng = np.random.default_rng(seed)
    tracked = {g: nn.track(bundle[g]) for g in groups}
    params = {**bundle.groups, **tracked}
    with ad.GradTape() as tape:
        loss = loss_fn(params, xs, xt, y)
    worst = 0.0
    for g in groups:
        grads = nn.grads_for(tape, loss, tracked[g])
        for name, analytic in grads.items():
            base = bundle[g][name]
            coords = rng.choice(base.size, size=min(per_group, base.size), replace=False)

            def f(value, g=g, name=name):
                trial = {**bundle.groups, g: {**bundle[g], name: value}}
                return float(loss_fn(trial, xs, xt, y).data)

            fd = central_difference(f, base, h, coords).reshape(-1)[coords]
            worst = max(worst, relative_error(analytic.reshape(-1)[coords], fd))
    return worst


def check_graph_gradients(seed=3, tol=1e-4) -> list:
    arch, bundle, xs, xt, y = tiny_problem(seed)
    # give the target encoder its own values so both encoders are exercised distinctly
    rng = np.random.default_rng(seed + 1)
    bundle.groups["encoder_target"] = {k: v + 0.05 * rng.normal(size=v.shape)
                                       for k, v in bundle["encoder_target"].items()}
    out = []
    for label, (fn, groups) in graph_losses(arch).items():
        out.append(_timed(f"autodiff {label} vs central differences", tol,
                          lambda fn=fn, groups=groups: (
                              graph_gradient_error(fn, groups, arch, bundle, xs, xt, y), len(groups))))
    return out


def run_all(quick: bool = False) -> list:
    scale = 5 if quick else 1
    results = [
        check_oracle(500 // scale),
        check_sdtw_gradient(100 // scale),
        check_hard_limit(100 // scale),
    ]
    results.extend(check_graph_gradients())
    return results
