"""Loss-threshold membership-inference audit with a planted canary.

Two populations of models are trained: one on a base dataset ``D`` and one
on ``D`` plus a canary ``z`` (a blank image labeled 0). The attacker guesses
"member" when a model's loss on ``z`` falls below a threshold. Exact binomial
bounds on the attack's TPR and FPR then give an empirical lower bound on the
epsilon the training actually satisfies.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from . import rng as rngmod
from .accountant import calibrate_sigma
from .engines import TrainConfig, run_training
from .errors import ConfigInvalidError
from .graphs import build_mixing_matrix, complete_graph
from .idx import find_mnist, load_idx_dataset
from .objectives import LabeledDataset, MLPObjective
from .partition import build_split_matrix, partition

log = logging.getLogger(__name__)

BASELINE = "baseline"
POISONED = "poisoned"


@dataclass
class AttackConfig:
    """Desk-scale audit settings.

    With ``mnist_dir`` unset a synthetic image-like dataset stands in for
    MNIST, which keeps unit tests independent of the download.
    """

    classes: tuple = (0, 1, 2)
    dataset_size: int = 300
    mnist_dir: str | None = None
    synthetic_features: int = 784
    canary_label: int = 0
    models_per_arm: int = 200
    fit_fraction: float = 0.2
    epsilon: float | None = 1.0
    delta: float = 1e-2
    confidence: float = 0.95
    algorithm: str = "dp-dsgd"
    hidden: int = 16
    iterations: int = 100
    lot_size: int = 25
    clip_norm: float = 10.0
    lr: float = 0.5
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.models_per_arm < 20:
            raise ConfigInvalidError("models_per_arm must be at least 20")
        if not 0 < self.fit_fraction < 1:
            raise ConfigInvalidError("fit_fraction must lie in (0, 1)")
        if not 0 < self.confidence < 1:
            raise ConfigInvalidError("confidence must lie in (0, 1)")
        if self.canary_label not in self.classes:
            raise ConfigInvalidError("canary label must be one of the selected classes")

    @property
    def private(self) -> bool:
        return self.algorithm.startswith("dp-")

    @classmethod
    def from_dict(cls, raw: dict) -> AttackConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        if set(raw) - known:
            raise ConfigInvalidError(f"unknown attack config keys: {sorted(set(raw) - known)}")
        return cls(**raw)


@dataclass(frozen=True)
class AuditResult:
    threshold: float
    tpr: float
    fpr: float
    tpr_lower: float
    fpr_upper: float
    eps_lower_bound: float
    nominal_epsilon: float
    delta: float
    noise_multiplier: float

    @property
    def degenerate(self) -> bool:
        return not math.isfinite(self.eps_lower_bound)

    @property
    def violation(self) -> bool:
        return self.eps_lower_bound > self.nominal_epsilon

    def summary(self) -> str:
        return (
            f"eps_lower_bound={self.eps_lower_bound:.4f} nominal_eps={self.nominal_epsilon:g} "
            f"delta={self.delta:g} threshold={self.threshold:.6g} tpr_lower={self.tpr_lower:.4f} "
            f"fpr_upper={self.fpr_upper:.4f} violation={str(self.violation).lower()}"
        )


# ------------------------------------------------------------- statistics


def _bisect(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Root of an increasing ``f`` on ``[lo, hi]``."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson(successes: int, trials: int, confidence: float, side: str = "two-sided"):
    """Exact binomial confidence bound(s) for a proportion.

    ``side`` is ``"lower"``, ``"upper"`` or ``"two-sided"``; the last returns
    a ``(lower, upper)`` pair with ``(1 - confidence) / 2`` in each tail.
    Quantiles of the Beta distribution are found by bisection on the
    regularized incomplete Beta function.
    """
    if not 0 <= successes <= trials or trials < 1:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    k, n = successes, trials

    def lower(alpha):
        if k == 0:
            return 0.0
        # alpha-quantile of Beta(k, n - k + 1)
        return _bisect(lambda p: betainc(k, n - k + 1, p) - alpha, 0.0, 1.0)

    def upper(alpha):
        if k == n:
            return 1.0
        # (1 - alpha)-quantile of Beta(k + 1, n - k)
        return _bisect(lambda p: betainc(k + 1, n - k, p) - (1 - alpha), 0.0, 1.0)

    alpha = 1.0 - confidence
    if side == "lower":
        return lower(alpha)
    if side == "upper":
        return upper(alpha)
    if side == "two-sided":
        return lower(alpha / 2), upper(alpha / 2)
    raise ValueError(f"unknown side {side!r}")


def eps_lower_bound(tpr_lower: float, fpr_upper: float, delta: float) -> float:
    """``ln((tpr_lower - delta) / fpr_upper)``, or ``-inf`` when there is no evidence."""
    if tpr_lower <= delta:
        return -math.inf
    if fpr_upper <= 0:
        return math.inf
    return math.log((tpr_lower - delta) / fpr_upper)


def _rates(baseline: np.ndarray, poisoned: np.ndarray, threshold: float) -> tuple[float, float]:
    return float(np.mean(poisoned < threshold)), float(np.mean(baseline < threshold))


def fit_threshold(fit_baseline: Sequence[float], fit_poisoned: Sequence[float], delta: float) -> float:
    """Threshold maximizing ``(TPR - delta) / FPR`` over midpoints of the pooled losses.

    A zero FPR with ``TPR > delta`` counts as an infinite ratio; among those
    the higher TPR wins. Remaining ties go to the smaller threshold.
    """
    base = np.asarray(fit_baseline, dtype=np.float64)
    pois = np.asarray(fit_poisoned, dtype=np.float64)
    if base.size == 0 or pois.size == 0:
        raise ValueError("fit sets must be nonempty")
    pooled = np.unique(np.concatenate([base, pois]))
    candidates = np.concatenate([[pooled[0] - 1.0], 0.5 * (pooled[1:] + pooled[:-1]), [pooled[-1] + 1.0]])
    best, best_key = candidates[0], None
    for thr in candidates:
        tpr, fpr = _rates(base, pois, thr)
        if fpr == 0:
            ratio = math.inf if tpr > delta else -math.inf
        else:
            ratio = (tpr - delta) / fpr
        key = (ratio, tpr)
        if best_key is None or key > best_key:
            best, best_key = thr, key
    return float(best)


# -------------------------------------------------------------- training


def load_base_dataset(cfg: AttackConfig) -> LabeledDataset:
    """The first ``dataset_size`` training samples from the selected classes, relabeled 0..k-1."""
    if cfg.mnist_dir:
        files = find_mnist(cfg.mnist_dir)
        if "train" not in files:
            raise ConfigInvalidError(f"MNIST training files not found under {cfg.mnist_dir}")
        full = load_idx_dataset(*files["train"])
        x, y = full.features, full.labels
    else:
        gen = rngmod.substream(cfg.seed, rngmod.DATA, 7)
        k = max(cfg.classes) + 1
        protos = gen.random((k, cfg.synthetic_features)) * (gen.random((k, cfg.synthetic_features)) < 0.2)
        y = np.arange(4 * cfg.dataset_size) % k
        x = np.clip(protos[y] + 0.1 * gen.standard_normal((len(y), cfg.synthetic_features)), 0.0, 1.0)
    remap = {c: i for i, c in enumerate(cfg.classes)}
    keep = np.flatnonzero(np.isin(y, cfg.classes))[: cfg.dataset_size]
    if len(keep) < cfg.dataset_size:
        raise ConfigInvalidError("not enough samples in the selected classes")
    labels = np.array([remap[int(v)] for v in y[keep]])
    return LabeledDataset(x[keep], labels, len(cfg.classes))


def canary(cfg: AttackConfig, n_features: int) -> LabeledDataset:
    return LabeledDataset(np.zeros((1, n_features)), np.array([cfg.classes.index(cfg.canary_label)]), len(cfg.classes))


@dataclass
class _Setup:
    parts: dict
    objective: MLPObjective
    theta0: np.ndarray
    z: LabeledDataset
    sigma: float
    graph: object = None
    weights: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _setup(cfg: AttackConfig) -> _Setup:
    base = load_base_dataset(cfg)
    k = len(cfg.classes)
    n_agents = k
    parts = partition(base, build_split_matrix(1.0, n_agents, k), rngmod.derive_seed(cfg.seed, rngmod.PARTITION))
    z = canary(cfg, base.features.shape[1])
    # the canary joins the agent owning its class
    owner = int(z.labels[0]) % n_agents
    host = parts[owner]
    poisoned = list(parts)
    poisoned[owner] = LabeledDataset(
        np.vstack([host.features, z.features]), np.concatenate([host.labels, z.labels]), k
    )
    objective = MLPObjective((base.features.shape[1], cfg.hidden, k))
    theta0 = objective.init_params(rngmod.substream(cfg.seed, rngmod.INIT))
    sigma = 0.0
    if cfg.private:
        # calibrate against the largest sampling rate over both arms
        q = max(min(cfg.lot_size, len(p)) / len(p) for p in parts + poisoned)
        sigma = calibrate_sigma(q, cfg.iterations, cfg.epsilon, cfg.delta)
    g = complete_graph(n_agents)
    return _Setup(
        {BASELINE: parts, POISONED: poisoned}, objective, theta0, z, sigma,
        graph=g, weights=build_mixing_matrix(g).weights, extra={"owner": owner},
    )


def _train_config(cfg: AttackConfig, sigma: float) -> TrainConfig:
    return TrainConfig(
        algorithm=cfg.algorithm, iterations=cfg.iterations, lr=cfg.lr,
        lot_size=cfg.lot_size, clip_norm=cfg.clip_norm if cfg.private else math.inf,
        noise_multiplier=sigma, delta=cfg.delta,
    )


def train_population(cfg: AttackConfig, arm: str, n_models: int, seeds: Sequence[int] | None = None,
                     setup: _Setup | None = None) -> list[float]:
    """Loss on the canary of the canary-holding agent's final model, one per noise seed.

    Every model starts from the same parameters and sees the same data; only
    the lot-sampling and noise seeds differ.
    """
    if arm not in (BASELINE, POISONED):
        raise ValueError(f"arm must be {BASELINE!r} or {POISONED!r}")
    setup = setup or _setup(cfg)
    if seeds is None:
        arm_id = 0 if arm == BASELINE else 1
        seeds = [rngmod.derive_seed(cfg.seed, "attack-noise", arm_id, m) for m in range(n_models)]
    if len(seeds) != n_models:
        raise ValueError("need one seed per model")
    tcfg = _train_config(cfg, setup.sigma)
    owner = setup.extra["owner"]
    losses = []
    for s in seeds:
        trace = run_training(
            tcfg, setup.graph, setup.weights, setup.objective, setup.parts[arm], seed=cfg.seed,
            theta0=setup.theta0, noise_seed=int(s), loss_data=[setup.z] * len(setup.parts[arm]),
            metrics_every=cfg.iterations,
        )
        losses.append(float(setup.objective.loss(trace.final_thetas[owner], setup.z)))
    return losses


def audit_losses(baseline: Sequence[float], poisoned: Sequence[float], cfg: AttackConfig,
                 sigma: float = math.nan) -> AuditResult:
    """Threshold fit and confidence bounds on already-collected populations.

    The TPR and FPR bounds are each taken one-sided at ``1 - (1 - confidence)/2``
    so that both hold jointly at the configured confidence.
    """
    base = np.asarray(baseline, dtype=np.float64)
    pois = np.asarray(poisoned, dtype=np.float64)
    nb = max(1, min(len(base) - 1, int(round(cfg.fit_fraction * len(base)))))
    npz = max(1, min(len(pois) - 1, int(round(cfg.fit_fraction * len(pois)))))
    thr = fit_threshold(base[:nb], pois[:npz], cfg.delta)
    eval_b, eval_p = base[nb:], pois[npz:]
    tp = int(np.sum(eval_p < thr))
    fp = int(np.sum(eval_b < thr))
    each = 1.0 - (1.0 - cfg.confidence) / 2
    tpr_lo = clopper_pearson(tp, len(eval_p), each, "lower")
    fpr_hi = clopper_pearson(fp, len(eval_b), each, "upper")
    nominal = cfg.epsilon if cfg.private and cfg.epsilon is not None else math.inf
    return AuditResult(
        threshold=thr, tpr=tp / len(eval_p), fpr=fp / len(eval_b),
        tpr_lower=tpr_lo, fpr_upper=fpr_hi,
        eps_lower_bound=eps_lower_bound(tpr_lo, fpr_hi, cfg.delta),
        nominal_epsilon=nominal, delta=cfg.delta, noise_multiplier=sigma,
    )


def audit(cfg: AttackConfig) -> AuditResult:
    setup = _setup(cfg)
    baseline = train_population(cfg, BASELINE, cfg.models_per_arm, setup=setup)
    poisoned = train_population(cfg, POISONED, cfg.models_per_arm, setup=setup)
    result = audit_losses(baseline, poisoned, cfg, setup.sigma)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_losses_csv(baseline, poisoned, out / "attack_losses.csv")
        (out / "audit.json").write_text(json.dumps(dataclasses.asdict(result), indent=2) + "\n")
    return result


def write_losses_csv(baseline: Sequence[float], poisoned: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "model", "loss"])
        for arm, losses in ((BASELINE, baseline), (POISONED, poisoned)):
            for m, loss in enumerate(losses):
                w.writerow([arm, m, repr(float(loss))])
