"""Training regimes over the benchmark: plain classification, the paired
variational-encoder runs, and the pseudo-labeling baseline.

Regime ids follow the experiment matrix: `Cl*` rows train one encoder plus
classifier with cross entropy, `Ve*` rows train the encoder pair end to end
on the combined pair loss. `r` means the scarce real examples, `s` adds the
abundant synthetic pool, `Aug` adds speed-resampled copies of the real
examples offline and random temporal padding online, and `Mod` drops the
bridging loss (gamma = 0).

Domain routing for the paired runs defaults to: scarce real examples feed
the source encoder, real plus synthetic feed the target encoder. The
`paper_sec2` routing preset swaps the roles (abundant synthetic as the
source side, scarce real as the sampled side); it is runnable but known to
train poorly, so selecting it emits a warning.

Every run is a pure function of (regime, config, seed): RNG streams for
init, pairing, sampling noise, and augmentation are derived separately from
the seed.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import backward, constant, zero_grads
from .benchmark import (
    SOURCE,
    TARGET,
    TEST,
    TRAIN,
    Dataset,
    Example,
    speed_augment,
    temporal_pad_augment,
)
from .model import (
    ClassifierModel,
    VEHyper,
    VEModel,
    gaussian_head,
    infer,
    init_classifier_model,
    init_ve_model,
    reparameterize,
    ve_loss,
)
from .nn import (
    AdamState,
    ConfigError,
    TrainHyper,
    adam_step,
    cosine_lr,
    cross_entropy_rows,
    mlp_forward,
    softmax,
)
from .autodiff import constant

SPEED_FACTORS = (1.2, 0.8)

# RNG stream tags, combined with the run seed
_STREAM_INIT = 10
_STREAM_BATCH = 11
_STREAM_EPS = 12
_STREAM_AUG = 13


class Regime(str, Enum):
    CL_R = "ClR"
    CL_RS = "ClRS"
    CL_RS_AUG = "ClRSAug"
    VE_R = "VeR"
    VE_RS = "VeRS"
    VE_RS_MOD = "VeRSMod"
    VE_RS_AUG = "VeRSAug"
    PSEUDO_LABEL = "PseudoLabel"


CLASSIFICATION_REGIMES = (Regime.CL_R, Regime.CL_RS, Regime.CL_RS_AUG)
VE_REGIMES = (Regime.VE_R, Regime.VE_RS, Regime.VE_RS_MOD, Regime.VE_RS_AUG)


class PoolChoice(str, Enum):
    REAL = "real"
    SYNTH = "synth"
    REAL_SYNTH = "real+synth"


@dataclass(frozen=True)
class RoutingPolicy:
    """Which pool feeds which encoder of the pair."""

    source_pool: PoolChoice
    target_pool: PoolChoice


def default_routing(regime: Regime) -> RoutingPolicy:
    if regime == Regime.VE_R:
        return RoutingPolicy(PoolChoice.REAL, PoolChoice.REAL)
    return RoutingPolicy(PoolChoice.REAL, PoolChoice.REAL_SYNTH)


def paper_sec2_routing() -> RoutingPolicy:
    """Swapped roles: abundant pool as source, scarce real as sampled side."""
    return RoutingPolicy(PoolChoice.SYNTH, PoolChoice.REAL)


class RoutingError(ConfigError):
    """Routing policy incompatible with the requested regime."""


class MissingClassError(ValueError):
    """A pair-sampling pool does not cover some class."""


@dataclass
class ModelConfig:
    """Encoder architecture; classifier is always linear embed_dim -> C."""

    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: dict[str, float]
    test: dict[str, float]


@dataclass
class TrainReport:
    """Loss history plus the trained model for one run."""

    regime: str
    seed: int
    records: list[EpochRecord]
    model: VEModel | ClassifierModel
    wall_time: float = 0.0
    grad_stop_max: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def write_train_report(report: TrainReport, path: str | Path) -> None:
    """One record per epoch: epoch, lr, train terms, test losses."""
    lines = [f"# regime={report.regime} seed={report.seed} epochs={len(report.records)}"]
    for rec in report.records:
        parts = [f"epoch={rec.epoch}", f"lr={rec.lr:.12g}"]
        parts += [f"train.{k}={v:.12g}" for k, v in sorted(rec.train.items())]
        parts += [f"test.{k}={v:.12g}" for k, v in sorted(rec.test.items())]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# -- pair sampling ---------------------------------------------------------

def _by_class(pool: list[Example], n_classes: int, pool_name: str
              ) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(n_classes)]
    for i, ex in enumerate(pool):
        buckets[ex.label].append(i)
    for c, bucket in enumerate(buckets):
        if not bucket:
            raise MissingClassError(f"class {c} missing from {pool_name} pool")
    return buckets


def pair_sampler(source_pool: list[Example], target_pool: list[Example],
                 rng: np.random.Generator, batch_size: int,
                 n_classes: int | None = None
                 ) -> list[tuple[Example, Example, int]]:
    """Draw same-class pairs: classes uniform, members uniform w/ replacement."""
    if n_classes is None:
        n_classes = 1 + max(ex.label for ex in source_pool + target_pool)
    src_by_class = _by_class(source_pool, n_classes, "source")
    tgt_by_class = _by_class(target_pool, n_classes, "target")
    batch = []
    classes = rng.integers(0, n_classes, size=batch_size)
    for c in classes:
        si = src_by_class[c][rng.integers(0, len(src_by_class[c]))]
        ti = tgt_by_class[c][rng.integers(0, len(tgt_by_class[c]))]
        batch.append((source_pool[si], target_pool[ti], int(c)))
    return batch


# -- pools and collation ----------------------------------------------------

@dataclass
class _Pools:
    """Materialized example pools for one run, plus online-pad bookkeeping."""

    real: list[Example]
    synth: list[Example]
    pad_online: set[int] = field(default_factory=set)
    max_len: int = 0
    pad_max: int = 0

    def pick(self, choice: PoolChoice) -> list[Example]:
        if choice == PoolChoice.REAL:
            return self.real
        if choice == PoolChoice.SYNTH:
            return self.synth
        return self.real + self.synth

    def features(self, examples: list[Example],
                 aug_rng: np.random.Generator | None) -> np.ndarray:
        rows = []
        for ex in examples:
            if aug_rng is not None and id(ex) in self.pad_online:
                ex = temporal_pad_augment(ex, aug_rng, self.max_len, self.pad_max)
            rows.append(ex.flat())
        return np.stack(rows)


def _build_pools(data: Dataset, augmented: bool) -> _Pools:
    real = list(data.select(domain=TARGET, split=TRAIN))
    synth = list(data.select(domain=SOURCE, split=TRAIN))
    pools = _Pools(real=real, synth=synth, max_len=data.max_len,
                   pad_max=data.config.pad_max if data.config else 4)
    if augmented:
        copies = [speed_augment(ex, f) for ex in real for f in SPEED_FACTORS]
        pools.real = real + copies
        pools.pad_online = {id(ex) for ex in pools.real}
    return pools


def _test_matrix(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    test = data.select(domain=TARGET, split=TEST)
    return data.features_of(test), data.labels_of(test)


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy_rows(constant(logits), labels).item()


# -- classification training -------------------------------------------------

def train_classification(regime: Regime, data: Dataset, hyper: TrainHyper,
                         model_cfg: ModelConfig | None = None) -> TrainReport:
    """Cross-entropy training of one encoder + classifier on the regime's pool."""
    if regime not in CLASSIFICATION_REGIMES:
        raise ConfigError(f"{regime.value} is not a classification regime")
    model_cfg = model_cfg or ModelConfig()
    pools = _build_pools(data, augmented=(regime == Regime.CL_RS_AUG))
    if regime == Regime.CL_R:
        pool = pools.real
    else:
        pool = pools.real + pools.synth
    model = init_classifier_model(_rng(hyper.seed, _STREAM_INIT), data.input_dim,
                                  model_cfg.hidden_dims, model_cfg.embed_dim,
                                  data.n_classes)
    report = _train_classifier_pool(regime.value, pool, pools, data, hyper, model)
    return report


def _train_classifier_pool(regime_name: str, pool: list[Example], pools: _Pools,
                           data: Dataset, hyper: TrainHyper,
                           model: ClassifierModel) -> TrainReport:
    t0 = time.perf_counter()
    batch_rng = _rng(hyper.seed, _STREAM_BATCH)
    aug_rng = _rng(hyper.seed, _STREAM_AUG) if pools.pad_online else None
    params = model.parameters()
    state = AdamState(params, lr_base=hyper.lr_base,
                      weight_decay=hyper.weight_decay,
                      decay_ids=model.decay_ids())
    x_test, y_test = _test_matrix(data)

    steps_per_epoch = math.ceil(len(pool) / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    records = []
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        order = batch_rng.permutation(len(pool))
        epoch_losses = []
        lr_epoch = cosine_lr(step, total_steps, hyper.lr_base, hyper.lr_min)
        for b in range(steps_per_epoch):
            idx = order[b * hyper.batch_size:(b + 1) * hyper.batch_size]
            chosen = [pool[i] for i in idx]
            x = pools.features(chosen, aug_rng)
            y = np.array([ex.label for ex in chosen], dtype=np.int64)
            lr_now = cosine_lr(step, total_steps, hyper.lr_base, hyper.lr_min)
            zero_grads(params)
            loss = cross_entropy_rows(
                _logits_graph(model, x), y)
            backward(loss)
            adam_step(state, params, [p.grad for p in params], lr_now)
            epoch_losses.append(loss.item())
            step += 1
        test_loss = _mean_ce(infer(model, x_test), y_test)
        records.append(EpochRecord(epoch, lr_epoch,
                                   {"loss": float(np.mean(epoch_losses))},
                                   {"loss": test_loss}))
    return TrainReport(regime_name, hyper.seed, records, model,
                       wall_time=time.perf_counter() - t0)


def _logits_graph(model: ClassifierModel, x: np.ndarray):
    from .nn import linear

    e = mlp_forward(model.encoder, constant(x))
    return linear(e, model.cls_w, model.cls_b)


# -- paired variational training ----------------------------------------------

def _check_routing(regime: Regime, routing: RoutingPolicy) -> None:
    uses_synth = (routing.source_pool != PoolChoice.REAL
                  or routing.target_pool != PoolChoice.REAL)
    if regime == Regime.VE_R and uses_synth:
        raise RoutingError(
            f"{regime.value} trains on scarce real examples only, got {routing}"
        )
    if regime != Regime.VE_R and not uses_synth:
        raise RoutingError(
            f"{regime.value} needs the synthetic pool on one side, got {routing}"
        )
    if routing == paper_sec2_routing():
        warnings.warn(
            "swapped routing (synthetic as the source side) is known to train "
            "poorly and may not converge",
            RuntimeWarning,
            stacklevel=3,
        )


def train_ve(regime: Regime, data: Dataset, hyper: TrainHyper,
             ve_hyper: VEHyper | None = None,
             routing: RoutingPolicy | None = None,
             model_cfg: ModelConfig | None = None,
             grad_stop_check_every: int = 0) -> TrainReport:
    """Train the encoder pair end to end on the combined pair loss.

    `grad_stop_check_every=N` re-verifies at every Nth step that the L1 term
    leaves the target side untouched; the observed maxima are recorded on
    the report.
    """
    if regime not in VE_REGIMES:
        raise ConfigError(f"{regime.value} is not a paired regime")
    ve_hyper = ve_hyper or VEHyper()
    if regime == Regime.VE_RS_MOD:
        ve_hyper = replace(ve_hyper, gamma=0.0)
    routing = routing or default_routing(regime)
    _check_routing(regime, routing)
    model_cfg = model_cfg or ModelConfig()

    t0 = time.perf_counter()
    pools = _build_pools(data, augmented=(regime == Regime.VE_RS_AUG))
    src_pool = pools.pick(routing.source_pool)
    tgt_pool = pools.pick(routing.target_pool)

    model = init_ve_model(_rng(hyper.seed, _STREAM_INIT), data.input_dim,
                          model_cfg.hidden_dims, model_cfg.embed_dim,
                          data.n_classes, ve_hyper)
    params = model.parameters()
    state = AdamState(params, lr_base=hyper.lr_base,
                      weight_decay=hyper.weight_decay,
                      decay_ids=model.decay_ids())
    batch_rng = _rng(hyper.seed, _STREAM_BATCH)
    eps_rng = _rng(hyper.seed, _STREAM_EPS)
    aug_rng = _rng(hyper.seed, _STREAM_AUG) if pools.pad_online else None
    x_test, y_test = _test_matrix(data)

    steps_per_epoch = math.ceil(max(len(src_pool), len(tgt_pool)) / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    records = []
    grad_stop_max: list[float] = []
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        term_sums: dict[str, float] = {}
        lr_epoch = cosine_lr(step, total_steps, hyper.lr_base, hyper.lr_min)
        for _ in range(steps_per_epoch):
            batch = pair_sampler(src_pool, tgt_pool, batch_rng,
                                 hyper.batch_size, data.n_classes)
            x_src = pools.features([b[0] for b in batch], aug_rng)
            x_tgt = pools.features([b[1] for b in batch], aug_rng)
            y = np.array([b[2] for b in batch], dtype=np.int64)
            lr_now = cosine_lr(step, total_steps, hyper.lr_base, hyper.lr_min)

            if grad_stop_check_every and step % grad_stop_check_every == 0:
                chk = verify_gradient_stop(model, x_src, x_tgt, y)
                grad_stop_max.append(chk.max_abs)

            zero_grads(params)
            loss, bd = ve_loss(model, x_src, x_tgt, y, eps_rng)
            backward(loss)
            adam_step(state, params, [p.grad for p in params], lr_now)
            for key, val in vars(bd).items():
                term_sums[key] = term_sums.get(key, 0.0) + val
            step += 1
        train_terms = {k: v / steps_per_epoch for k, v in term_sums.items()}
        test_losses = {
            "source": _mean_ce(infer(model, x_test, encoder="source"), y_test),
            "target": _mean_ce(infer(model, x_test, encoder="target"), y_test),
        }
        records.append(EpochRecord(epoch, lr_epoch, train_terms, test_losses))

    return TrainReport(regime.value, hyper.seed, records, model,
                       wall_time=time.perf_counter() - t0,
                       grad_stop_max=grad_stop_max)


# -- gradient-stop verification ------------------------------------------------

@dataclass
class GradStopReport:
    """Target-side gradients of the isolated L1 term."""

    per_param: dict[str, float]
    max_abs: float
    ok: bool
    failing: list[str]


def _target_param_names(model: VEModel) -> list[str]:
    names = []
    for i in range(len(model.encoder_target.layers)):
        names += [f"encoder_target.layer{i}.weight", f"encoder_target.layer{i}.bias"]
    names += ["head_target.w_mu", "head_target.b_mu",
              "head_target.w_ls", "head_target.b_ls"]
    return names


def verify_gradient_stop(model: VEModel, x_src: np.ndarray, x_tgt: np.ndarray,
                         y: np.ndarray, detach_enabled: bool = True,
                         eps: np.ndarray | None = None) -> GradStopReport:
    """Backprop the isolated L1 distance and report target-side gradients.

    With the detach in place every entry must be exactly zero. The
    `detach_enabled=False` variant exists so tests can show the check has
    power (it then reports nonzero gradients).
    """
    x_src = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    x_tgt = np.atleast_2d(np.asarray(x_tgt, dtype=np.float64))
    if eps is None:
        eps = np.zeros((x_tgt.shape[0], model.embed_dim))

    params = model.parameters()
    zero_grads(params)
    e_src = mlp_forward(model.encoder_source, constant(x_src))
    e_tgt = mlp_forward(model.encoder_target, constant(x_tgt))
    p_tgt = gaussian_head(e_tgt, model.head_target)
    z = reparameterize(p_tgt, eps)
    anchor = z.detach() if detach_enabled else z
    l1 = (e_src - anchor).abs().mean()
    backward(l1)

    per_param = {}
    failing = []
    for name, p in zip(_target_param_names(model), model.target_parameters()):
        g = 0.0 if p.grad is None else float(np.max(np.abs(p.grad)))
        per_param[name] = g
        if g != 0.0:
            failing.append(name)
    zero_grads(params)
    max_abs = max(per_param.values()) if per_param else 0.0
    return GradStopReport(per_param, max_abs, not failing, failing)


# -- pseudo-labeling -------------------------------------------------------------

@dataclass
class PseudoLabelResult:
    """Final label assignment for the unlabeled pool plus loop diagnostics."""

    labels: np.ndarray            # -1 where never adopted
    converged: bool
    rounds_run: int
    threshold_final: float
    history: list[np.ndarray]
    warnings: list[str]
    report: TrainReport


def pseudo_label_loop(labeled: list[Example], unlabeled: list[Example],
                      data: Dataset, hyper: TrainHyper, rounds: int = 5,
                      confidence_threshold: float = 0.8,
                      model_cfg: ModelConfig | None = None) -> PseudoLabelResult:
    """Self-training: fit on labeled data, adopt confident predictions, refit.

    Stops early once the adopted labels repeat between rounds. A round that
    adopts nothing lowers the threshold by 0.1 (annealing) and records a
    warning; the loop always terminates within `rounds`.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if not unlabeled:
        raise ConfigError("unlabeled pool is empty")
    model_cfg = model_cfg or ModelConfig()
    pools = _Pools(real=[], synth=[], max_len=data.max_len)
    x_unlabeled = np.stack([ex.flat() for ex in unlabeled])

    labels = np.full(len(unlabeled), -1, dtype=np.int64)
    threshold = confidence_threshold
    notes: list[str] = []
    history: list[np.ndarray] = []
    report = None
    converged = False
    rounds_run = 0

    for rnd in range(1, rounds + 1):
        rounds_run = rnd
        pool = list(labeled)
        for ex, lab in zip(unlabeled, labels):
            if lab >= 0:
                pool.append(replace(ex, label=int(lab)))
        model = init_classifier_model(_rng(hyper.seed, _STREAM_INIT),
                                      data.input_dim, model_cfg.hidden_dims,
                                      model_cfg.embed_dim, data.n_classes)
        report = _train_classifier_pool(Regime.PSEUDO_LABEL.value, pool, pools,
                                        data, hyper, model)
        probs = softmax(infer(model, x_unlabeled))
        conf = probs.max(axis=1)
        pred = probs.argmax(axis=1)
        new_labels = np.where(conf > threshold, pred, -1).astype(np.int64)
        history.append(new_labels.copy())

        if np.all(new_labels < 0):
            notes.append(
                f"round {rnd}: nothing above threshold {threshold:.2f}, annealing"
            )
            threshold -= 0.1
        if np.array_equal(new_labels, labels) and rnd > 1:
            labels = new_labels
            converged = True
            break
        labels = new_labels

    if not converged:
        notes.append(f"labels did not converge within {rounds} rounds")
    result_report = report
    result_report.notes = list(notes)
    return PseudoLabelResult(labels, converged, rounds_run, threshold,
                             history, notes, result_report)
