"""Source pretraining, target-specific adaptation rounds, and the two-round
stage-aligned adaptation, plus an sklearn-compatible estimator wrapping them."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import nn
from .nn import Adam, Architecture, ModelBundle
from .seeding import sub_rng
from .stages import (DEFAULT_BOUNDS, Stage, StageAssignment, assign_target_stages,
                     cluster_variance, label_source_stages, pair_stages)
from .validation import check_targets, check_windows

log = logging.getLogger(__name__)

ADVERSARIAL_VARIANTS = ("label-flip", "literal-minimax")


@dataclass
class AdaptConfig:
    gamma: float = 0.1
    lam: float = 0.1
    lr_encoder: float = 5e-5
    lr_discriminator: float = 5e-5
    lr_decoder: float = 5e-3
    lr_pretrain: float = 1e-3
    batch_size: int = 256
    pretrain_epochs: int = 100
    round1_epochs: int = 120
    round2_epochs: int = 60
    seed: int = 0
    adversarial_variant: str = "label-flip"
    stage_bounds: tuple = DEFAULT_BOUNDS
    n_stages: int = 3
    hidden: int = 16
    layers: int = 1
    bidirectional: bool = False
    head_hidden: tuple = (32, 32)
    kmeans_max_iter: int = 50
    skip_round2: bool = False
    use_decoder: bool = True
    restart_stages_from_source: bool = False
    reinit_heads_per_stage: bool = False
    stage_presence_check: bool = True
    monitor_fraction: float = 0.1

    def __post_init__(self):
        self.stage_bounds = tuple(float(b) for b in self.stage_bounds)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        self.validate()

    def validate(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        for name in ("lr_encoder", "lr_discriminator", "lr_decoder", "lr_pretrain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.pretrain_epochs, self.round1_epochs, self.round2_epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.adversarial_variant not in ADVERSARIAL_VARIANTS:
            raise ValueError(f"adversarial_variant must be one of {ADVERSARIAL_VARIANTS}")
        lo, hi = self.stage_bounds
        if not 0 < lo < hi < 1:
            raise ValueError(f"stage_bounds must satisfy 0 < lo < hi < 1, got {self.stage_bounds}")
        if self.n_stages != len(Stage):
            raise ValueError(f"n_stages is fixed at {len(Stage)}")
        if not 0 <= self.monitor_fraction < 1:
            raise ValueError("monitor_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_bounds"] = list(self.stage_bounds)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown AdaptConfig keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return _hash(self.to_dict())

    def pretrain_hash(self) -> str:
        """Hash of the fields that determine the pretrained source model."""
        keys = ("hidden", "layers", "bidirectional", "head_hidden", "lr_pretrain",
                "pretrain_epochs", "batch_size", "seed")
        d = self.to_dict()
        return _hash({k: d[k] for k in keys})

    def architecture(self, n_sensors: int, window: int) -> Architecture:
        return Architecture(n_sensors, window, self.hidden, self.layers, self.bidirectional,
                            self.head_hidden)


def _hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    pretrain: dict = field(default_factory=dict)
    round1: dict = field(default_factory=dict)
    round2: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _minibatches(n: int, batch: int, rng) -> list:
    perm = rng.permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


class _Cycler:
    """Endless reshuffled stream of index batches."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, batch, rng
        self._queue = []

    def next(self):
        if not self._queue:
            self._queue = _minibatches(self.n, self.batch, self.rng)
        return self._queue.pop(0)


def _features(params, X, arch, batch=1024) -> np.ndarray:
    return np.concatenate([nn.encoder_forward(params, X[i:i + batch], arch).data
                           for i in range(0, len(X), batch)])


# ----------------------------------------------------------------------------
# pretraining
# ----------------------------------------------------------------------------

def pretrain(X, y, cfg: AdaptConfig, bundle: Optional[ModelBundle] = None):
    """Train source encoder and predictor on labeled windows with batch MSE.

    Returns ``(bundle, trace, optimizers)``; the target encoder in the bundle is
    a copy of the trained source encoder.
    """
    X = check_windows(X)
    y = check_targets(y, len(X))
    arch = cfg.architecture(X.shape[1], X.shape[2])
    if bundle is None:
        bundle = ModelBundle.initialize(arch, sub_rng(cfg.seed, "init"))
    opt_enc, opt_pred = Adam(cfg.lr_pretrain), Adam(cfg.lr_pretrain)
    shuffle = sub_rng(cfg.seed, "pretrain/shuffle")
    batch = min(cfg.batch_size, len(X))
    trace = []
    for _ in range(cfg.pretrain_epochs):
        total = 0.0
        for idx in _minibatches(len(X), batch, shuffle):
            pe, pr = nn.track(bundle["encoder_source"]), nn.track(bundle["predictor"])
            with ad.GradTape() as tape:
                pred = nn.predictor_forward(pr, nn.encoder_forward(pe, X[idx], arch), arch)
                loss = nn.mse_loss(pred, y[idx])
            g_enc, g_pred = nn.grads_for(tape, loss, pe), nn.grads_for(tape, loss, pr)
            opt_enc.step(bundle["encoder_source"], g_enc)
            opt_pred.step(bundle["predictor"], g_pred)
            total += float(loss.data) * len(idx)
        trace.append(total / len(X))
    bundle.groups["encoder_target"] = nn.copy_params(bundle["encoder_source"])
    return bundle, {"mse": trace}, {"encoder_source": opt_enc.state, "predictor": opt_pred.state}


# ----------------------------------------------------------------------------
# target-specific adaptation
# ----------------------------------------------------------------------------

def _holdout(n, fraction, rng):
    k = int(math.floor(n * fraction)) if n >= 20 else 0
    perm = rng.permutation(n)
    return np.sort(perm[k:]), np.sort(perm[:k])


def _disc_accuracy(bundle, fs, ft):
    arch = bundle.arch
    ps = nn.discriminator_forward(bundle["discriminator"], fs, arch)
    pt = nn.discriminator_forward(bundle["discriminator"], ft, arch)
    return 0.5 * (float(np.mean(ps > 0.5)) + float(np.mean(pt < 0.5)))


def ta_round(bundle: ModelBundle, X_source, X_target, cfg: AdaptConfig, epochs: int,
             tag: str = "round1", on_update: Optional[Callable[[str], None]] = None):
    """One target-specific adaptation round, updating the bundle in place.

    Every iteration draws a target batch and an independent source batch and
    performs, in this order: a discriminator ascent step on the adversarial
    objective, a decoder descent step on soft-DTW reconstruction, and a target
    encoder descent step on adversarial loss + ``lam`` * soft-DTW using the
    freshly updated discriminator and decoder.  The source encoder and the
    predictor are never touched.

    Returns ``(trace, optimizers)``.
    """
    Xs = check_windows(X_source, "X_source")
    Xt = check_windows(X_target, "X_target")
    arch = bundle.arch
    rng = sub_rng(cfg.seed, f"{tag}/shuffle")
    s_train, s_mon = _holdout(len(Xs), cfg.monitor_fraction, sub_rng(cfg.seed, f"{tag}/monitor/source"))
    t_train, t_mon = _holdout(len(Xt), cfg.monitor_fraction, sub_rng(cfg.seed, f"{tag}/monitor/target"))
    if len(s_mon) == 0 or len(t_mon) == 0:
        s_mon, t_mon = s_train, t_train
    batch = min(cfg.batch_size, len(s_train), len(t_train))
    if batch < cfg.batch_size:
        log.warning("%s: batch size %d shrunk to %d to fit the data", tag, cfg.batch_size, batch)
    use_decoder = cfg.use_decoder
    lam = cfg.lam if use_decoder else 0.0

    opt_d = Adam(cfg.lr_discriminator)
    opt_dec = Adam(cfg.lr_decoder)
    opt_enc = Adam(cfg.lr_encoder)
    src_batches = _Cycler(len(s_train), batch, rng)

    fs_mon = _features(bundle["encoder_source"], Xs[s_mon], arch)
    xt_mon = Xt[t_mon]

    def monitor_sdtw():
        ft = _features(bundle["encoder_target"], xt_mon, arch)
        rec = nn.decoder_forward(bundle["decoder"], ft, arch).data
        return float(np.mean(ad.soft_dtw_values(rec, xt_mon, cfg.gamma).data))

    trace = {"adversarial": [], "discriminator_loss": [], "encoder_adversarial": [], "sdtw": [],
             "disc_accuracy": [], "sdtw_monitor_initial": monitor_sdtw() if use_decoder else None}
    n_iter = math.ceil(len(t_train) / batch)
    for _ in range(epochs):
        sums = {"adversarial": 0.0, "discriminator_loss": 0.0, "encoder_adversarial": 0.0, "sdtw": 0.0}
        for idx_t in _minibatches(len(t_train), batch, rng):
            xt = Xt[t_train[idx_t]]
            xs = Xs[s_train[src_batches.next()]]
            fs = nn.encoder_forward(bundle["encoder_source"], xs, arch).data
            pe = nn.track(bundle["encoder_target"])
            enc_tape = ad.GradTape()
            with enc_tape:
                ft = nn.encoder_forward(pe, xt, arch)

            # discriminator: maximize E[log D(f_S)] + E[log(1 - D(f_T))]
            pdisc = nn.track(bundle["discriminator"])
            with ad.GradTape() as tape:
                obj = nn.adversarial_objective(nn.discriminator_logits(pdisc, fs, arch),
                                               nn.discriminator_logits(pdisc, ft.data, arch))
                loss_d = ad.neg(obj)
            opt_d.step(bundle["discriminator"], nn.grads_for(tape, loss_d, pdisc))
            if on_update:
                on_update("discriminator")

            # decoder: minimize soft-DTW reconstruction of the target batch
            if use_decoder:
                pdec = nn.track(bundle["decoder"])
                with ad.GradTape() as tape:
                    loss_rec = nn.soft_dtw_loss(nn.decoder_forward(pdec, ft.data, arch), xt, cfg.gamma)
                opt_dec.step(bundle["decoder"], nn.grads_for(tape, loss_rec, pdec))
                sums["sdtw"] += float(loss_rec.data)
                if on_update:
                    on_update("decoder")

            # target encoder: adversarial + lam * soft-DTW through the updated heads
            with enc_tape:
                loss_adv = nn.encoder_adversarial_loss(
                    nn.discriminator_logits(bundle["discriminator"], ft, arch), cfg.adversarial_variant)
                loss_enc = loss_adv
                if lam > 0:
                    rec = nn.decoder_forward(bundle["decoder"], ft, arch)
                    loss_enc = ad.add(loss_adv, ad.mul(nn.soft_dtw_loss(rec, xt, cfg.gamma), lam))
            opt_enc.step(bundle["encoder_target"], nn.grads_for(enc_tape, loss_enc, pe))
            if on_update:
                on_update("encoder_target")

            sums["adversarial"] += float(obj.data)
            sums["discriminator_loss"] += float(loss_d.data)
            sums["encoder_adversarial"] += float(loss_adv.data)
        for k, v in sums.items():
            trace[k].append(v / n_iter)
        if not use_decoder:
            trace["sdtw"][-1] = None
        ft_mon = _features(bundle["encoder_target"], xt_mon, arch)
        trace["disc_accuracy"].append(_disc_accuracy(bundle, fs_mon, ft_mon))
    trace["sdtw_monitor_final"] = monitor_sdtw() if use_decoder else None
    return trace, {"discriminator": opt_d.state, "decoder": opt_dec.state, "encoder_target": opt_enc.state}


# ----------------------------------------------------------------------------
# stage matching for the second round
# ----------------------------------------------------------------------------

def _stage_variance_ratios(X_source, source_stages: StageAssignment) -> dict:
    """Total variance of each non-empty source stage relative to the Sluggish stage."""
    ref = {}
    for s in Stage:
        idx = source_stages.indices(s)
        if len(idx):
            ref[s] = cluster_variance(X_source[idx]).total_variance
    base = ref.get(Stage.SLUGGISH, 0.0)
    return {s: v / base for s, v in ref.items()} if base > 0 else {}


def target_stages(X_target, X_source, source_stages: StageAssignment, cfg: AdaptConfig):
    """Cluster the target, rank clusters by variance, and (optionally) drop
    stages the target does not appear to contain.

    Three clusters always exist, so a target lacking, say, terminal data would
    still get a "Terminal" cluster.  The presence check compares each cluster's
    variance relative to the quietest target cluster with the same ratio for
    the source stages: a cluster ranked at stage s whose ratio falls below the
    geometric midpoint of the source ratios of stages s-1 and s is moved down
    to stage s-1 (repeatedly).  Ratios, not raw variances, are compared
    because per-domain normalization changes the absolute variance scale.
    """
    staging = assign_target_stages(X_target, cfg.gamma, cfg.kmeans_max_iter,
                                   int(sub_rng(cfg.seed, "clustering").integers(2**31)))
    info = {
        "cluster_assignments": staging.clusters.assignments.tolist(),
        "cluster_variance": [s.total_variance for s in staging.stats],
        "cluster_to_stage": {str(c): Stage(s).name for c, s in staging.mapping.items()},
        "iterations": staging.clusters.iterations_run,
        "distance_evals": staging.clusters.distance_evals,
        "low_confidence": staging.low_confidence,
        "demoted": [],
    }
    stages = staging.assignment.stages.copy()
    if cfg.stage_presence_check:
        ref = _stage_variance_ratios(X_source, source_stages)
        var = {c: staging.stats[c].total_variance for c in staging.mapping}
        quietest = min(var.values())
        for c, stage in staging.mapping.items():
            s = int(stage)
            ratio = var[c] / quietest if quietest > 0 else 1.0
            while s > 0 and Stage(s) in ref and Stage(s - 1) in ref:
                if ratio >= math.sqrt(ref[Stage(s)] * ref[Stage(s - 1)]):
                    break
                s -= 1
            if s != int(stage):
                info["demoted"].append({"cluster": int(c), "from": Stage(stage).name, "to": Stage(s).name})
                stages[staging.clusters.assignments == c] = s
        info["source_variance_ratio"] = {k.name: v for k, v in ref.items()}
    info["stage_counts"] = {s.name: int((stages == s).sum()) for s in Stage}
    return StageAssignment(stages, "cluster-variance"), info


# ----------------------------------------------------------------------------
# full pipeline
# ----------------------------------------------------------------------------

@dataclass
class TACDAResult:
    bundle: ModelBundle
    report: RunReport
    optimizers: dict


def adapt(bundle: ModelBundle, X_source, life_fraction, X_target, cfg: AdaptConfig,
          report: Optional[RunReport] = None, on_update=None) -> TACDAResult:
    """Both adaptation rounds starting from a pretrained bundle (copied, not mutated)."""
    Xs = check_windows(X_source, "X_source")
    Xt = check_windows(X_target, "X_target")
    bundle = bundle.copy()
    report = report or RunReport(cfg.to_dict(), cfg.config_hash(), cfg.seed)
    trace, opts = ta_round(bundle, Xs, Xt, cfg, cfg.round1_epochs, "round1", on_update)
    report.round1 = trace
    result = TACDAResult(bundle, report, opts)
    if cfg.skip_round2 or cfg.round2_epochs == 0:
        return result
    return stage_round(result, Xs, life_fraction, Xt, cfg, on_update)


def stage_round(first: TACDAResult, X_source, life_fraction, X_target, cfg: AdaptConfig,
                on_update=None) -> TACDAResult:
    """Second adaptation round: stage both domains, then adapt each stage pair
    in order, each warm-started from the previous one.

    ``first`` is left untouched; the returned result carries a fresh bundle
    and a report extended with the staging details and per-stage traces.
    """
    if life_fraction is None:
        raise ValueError("second-round adaptation needs source life fractions")
    Xs = check_windows(X_source, "X_source")
    Xt = check_windows(X_target, "X_target")
    bundle = first.bundle.copy()
    report = copy.deepcopy(first.report)
    report.round2 = []
    opts = first.optimizers

    src_stages = label_source_stages(check_targets(life_fraction, len(Xs), "life_fraction"),
                                     cfg.stage_bounds)
    tgt_stages, info = target_stages(Xt, Xs, src_stages, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pairs = pair_stages(src_stages, tgt_stages)
    for w in caught:
        log.warning("%s", w.message)
        warnings.warn(w.message, stacklevel=2)
    info["source_counts"] = src_stages.counts()
    info["pairs"] = [p.stage.name for p in pairs]
    info["skipped"] = [str(w.message) for w in caught]
    report.stages = info

    source_encoder = bundle["encoder_source"]
    for pair in pairs:
        if cfg.restart_stages_from_source:
            bundle.groups["encoder_target"] = nn.copy_params(source_encoder)
        if cfg.reinit_heads_per_stage:
            rng = sub_rng(cfg.seed, f"reinit/{pair.stage.name}")
            bundle.groups["decoder"] = nn.init_decoder(bundle.arch, rng)
            bundle.groups["discriminator"] = nn.init_head(bundle.arch, rng)
        trace, opts = ta_round(bundle, Xs[pair.source_idx], Xt[pair.target_idx], cfg,
                               cfg.round2_epochs, f"round2/{pair.stage.name}", on_update)
        report.round2.append({"stage": pair.stage.name, "n_source": len(pair.source_idx),
                              "n_target": len(pair.target_idx), **trace})
    return TACDAResult(bundle, report, opts)


def tacda(X_source, y_source, life_fraction, X_target, cfg: AdaptConfig) -> TACDAResult:
    """Pretrain, adapt globally, stage both domains, then adapt stage by stage."""
    t0 = time.perf_counter()
    report = RunReport(cfg.to_dict(), cfg.config_hash(), cfg.seed)
    bundle, trace, _ = pretrain(X_source, y_source, cfg)
    report.pretrain = trace
    result = adapt(bundle, X_source, life_fraction, X_target, cfg, report)
    result.report.wall_time = time.perf_counter() - t0
    return result


def predict(bundle: ModelBundle, X, encoder: str = "target", rul_cap: Optional[float] = None,
            batch: int = 1024) -> np.ndarray:
    """``R(E(x))`` per window; scaled to cycles when ``rul_cap`` is given."""
    X = check_windows(X, n_sensors=bundle.arch.n_sensors, window=bundle.arch.window)
    enc = bundle[f"encoder_{encoder}"]
    out = np.concatenate([
        nn.predictor_forward(bundle["predictor"], nn.encoder_forward(enc, X[i:i + batch], bundle.arch),
                             bundle.arch).data
        for i in range(0, len(X), batch)
    ])
    return out * rul_cap if rul_cap is not None else out


# ----------------------------------------------------------------------------
# estimator
# ----------------------------------------------------------------------------

class TACDARegressor(RegressorMixin, BaseEstimator):
    """Cross-domain RUL regressor.

    ``fit(X, y, X_target, life_fraction=...)`` pretrains on the labeled source
    windows, then adapts a target encoder to the unlabeled target windows.
    Constructor parameters mirror :class:`AdaptConfig`.

    Attributes
    ----------
    bundle_ : ModelBundle
    report_ : RunReport
    source_bundle_ : ModelBundle
        The pretrained model before any adaptation.
    """

    def __init__(self, gamma=0.1, lam=0.1, lr_encoder=5e-5, lr_discriminator=5e-5, lr_decoder=5e-3,
                 lr_pretrain=1e-3, batch_size=256, pretrain_epochs=100, round1_epochs=120,
                 round2_epochs=60, seed=0, adversarial_variant="label-flip",
                 stage_bounds=DEFAULT_BOUNDS, n_stages=3, hidden=16, layers=1, bidirectional=False,
                 head_hidden=(32, 32), kmeans_max_iter=50, skip_round2=False, use_decoder=True,
                 restart_stages_from_source=False, reinit_heads_per_stage=False,
                 stage_presence_check=True, monitor_fraction=0.1):
        self.gamma = gamma
        self.lam = lam
        self.lr_encoder = lr_encoder
        self.lr_discriminator = lr_discriminator
        self.lr_decoder = lr_decoder
        self.lr_pretrain = lr_pretrain
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.round1_epochs = round1_epochs
        self.round2_epochs = round2_epochs
        self.seed = seed
        self.adversarial_variant = adversarial_variant
        self.stage_bounds = stage_bounds
        self.n_stages = n_stages
        self.hidden = hidden
        self.layers = layers
        self.bidirectional = bidirectional
        self.head_hidden = head_hidden
        self.kmeans_max_iter = kmeans_max_iter
        self.skip_round2 = skip_round2
        self.use_decoder = use_decoder
        self.restart_stages_from_source = restart_stages_from_source
        self.reinit_heads_per_stage = reinit_heads_per_stage
        self.stage_presence_check = stage_presence_check
        self.monitor_fraction = monitor_fraction

    def config(self) -> AdaptConfig:
        return AdaptConfig(**self.get_params())

    def fit(self, X, y, X_target, life_fraction=None, pretrained: Optional[ModelBundle] = None):
        cfg = self.config()
        X = check_windows(X)
        y = check_targets(y, len(X))
        X_target = check_windows(X_target, "X_target", X.shape[1], X.shape[2])
        t0 = time.perf_counter()
        report = RunReport(cfg.to_dict(), cfg.config_hash(), cfg.seed)
        if pretrained is None:
            pretrained, report.pretrain, _ = pretrain(X, y, cfg)
        self.source_bundle_ = pretrained
        result = adapt(pretrained, X, life_fraction, X_target, cfg, report)
        result.report.wall_time = time.perf_counter() - t0
        self.bundle_, self.report_ = result.bundle, result.report
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, encoder: str = "target"):
        check_is_fitted(self, "bundle_")
        return predict(self.bundle_, X, encoder)
