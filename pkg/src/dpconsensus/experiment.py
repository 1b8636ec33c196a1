"""Experiment configuration, orchestration, persistence and sweep drivers."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import rng as rngmod
from .accountant import calibrate_sigma, epsilon_for
from .engines import Algorithm, RoundRecord, TrainConfig, TrainingTrace, run_training
from .errors import ConfigInvalidError
from .graphs import (
    CommGraph,
    build_mixing_matrix,
    complete_graph,
    fiedler_value,
    generate_graph,
    read_edge_list,
    ring_graph,
)
from .idx import find_mnist, load_idx_dataset
from .objectives import (
    LabeledDataset,
    LogisticObjective,
    MLPObjective,
    QuadraticDataset,
    QuadraticObjective,
    random_quadratic_dataset,
)
from .partition import build_split_matrix, partition, partition_counts

log = logging.getLogger(__name__)

SEED_ENV = "DP_CONSENSUS_SEED"
METRICS_HEADER = ["round", "loss", "consensus", "accuracy", "epsilon"]


@dataclass
class ExperimentConfig:
    """One training run, as read from a JSON document.

    ``graph`` is a dict with ``kind`` in ``complete | ring | generated |
    edge_list``; ``objective`` has ``kind`` in ``quadratic | logistic | mlp``;
    ``data`` has ``kind`` in ``mnist | synthetic_quadratic |
    synthetic_classification``. For private algorithms give either
    ``target_epsilon`` (sigma is calibrated) or ``noise_multiplier``.
    """

    algorithm: str = "dsgt"
    agents: int = 10
    graph: dict = field(default_factory=lambda: {"kind": "complete"})
    mixing: str = "metropolis"
    objective: dict = field(default_factory=lambda: {"kind": "quadratic", "dim": 10, "mu": 1.0})
    data: dict = field(default_factory=lambda: {"kind": "synthetic_quadratic", "samples_per_agent": 50})
    split_t: float = 1.0
    target_epsilon: float | None = None
    noise_multiplier: float | None = None
    delta: float = 1e-5
    clip_norm: float = 10.0
    lot_size: int | None = None
    epsilon_cap: float | None = None
    iterations: int = 100
    lr: float = 0.05
    lr_half: float | None = None
    rho: float = 1.0
    primal_steps: int = 1
    primal_optimizer: str = "adam"
    seed: int = 0
    noise_seed: int | None = None
    metrics_every: int | None = None
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigInvalidError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def private(self) -> bool:
        return Algorithm(self.algorithm).private

    def validate(self) -> None:
        try:
            Algorithm(self.algorithm)
        except ValueError as e:
            raise ConfigInvalidError(str(e)) from None
        if self.agents < 1:
            raise ConfigInvalidError("agents must be positive")
        if not 0 <= self.split_t <= 1:
            raise ConfigInvalidError("split_t must lie in [0, 1]")
        if not 0 < self.delta < 1:
            raise ConfigInvalidError("delta must lie in (0, 1)")
        if self.private:
            if (self.target_epsilon is None) == (self.noise_multiplier is None):
                raise ConfigInvalidError(
                    "private runs need exactly one of target_epsilon or noise_multiplier"
                )
        if self.iterations < 1:
            raise ConfigInvalidError("iterations must be >= 1")
        for key in ("graph", "objective", "data"):
            if "kind" not in getattr(self, key):
                raise ConfigInvalidError(f"{key} needs a 'kind'")


def load_config(path: str | Path, env: dict | None = None) -> ExperimentConfig:
    """Reads a JSON config; ``DP_CONSENSUS_SEED`` in the environment overrides ``seed``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigInvalidError(f"{path}: {e}") from None
    cfg = ExperimentConfig.from_dict(raw)
    return apply_env_overrides(cfg, env)


def apply_env_overrides(cfg: ExperimentConfig, env: dict | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg = dataclasses.replace(cfg, seed=int(env[SEED_ENV]))
    return cfg


# ---------------------------------------------------------------- wiring


def build_graph(cfg: ExperimentConfig) -> CommGraph:
    spec = cfg.graph
    kind = spec["kind"]
    if kind == "complete":
        return complete_graph(cfg.agents)
    if kind == "ring":
        return ring_graph(cfg.agents)
    if kind == "generated":
        return generate_graph(
            cfg.agents,
            float(spec["target_fiedler"]),
            float(spec.get("tolerance", 0.05)),
            seed=int(spec.get("seed", rngmod.derive_seed(cfg.seed, rngmod.GRAPH))),
        )
    if kind == "edge_list":
        g = read_edge_list(spec["path"])
        if g.n_agents != cfg.agents:
            raise ConfigInvalidError(f"edge list has {g.n_agents} agents, config says {cfg.agents}")
        return g
    raise ConfigInvalidError(f"unknown graph kind {kind!r}")


def build_objective(cfg: ExperimentConfig):
    spec = cfg.objective
    kind = spec["kind"]
    if kind == "quadratic":
        return QuadraticObjective(int(spec.get("dim", 10)), float(spec.get("mu", 1.0)))
    if kind == "logistic":
        return LogisticObjective(int(spec["features"]), int(spec.get("classes", 10)), float(spec.get("l2", 0.0)))
    if kind == "mlp":
        return MLPObjective(tuple(spec.get("layers", (784, 64, 10))))
    raise ConfigInvalidError(f"unknown objective kind {kind!r}")


@dataclass
class PreparedData:
    train_parts: list
    eval_data: Any = None
    optimum: np.ndarray | None = None
    counts: list | None = None


def _synthetic_classification(spec: dict, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    gen = rngmod.substream(seed, rngmod.DATA, 0)
    k, f = int(spec.get("classes", 3)), int(spec.get("features", 5))
    n, n_eval = int(spec.get("samples", 600)), int(spec.get("eval_samples", 300))
    means = gen.normal(0.0, float(spec.get("separation", 3.0)), size=(k, f))

    def draw(m):
        y = np.arange(m) % k
        return LabeledDataset(means[y] + gen.standard_normal((m, f)), y, k)

    return draw(n), draw(n_eval)


def prepare_data(cfg: ExperimentConfig, objective) -> PreparedData:
    spec = cfg.data
    kind = spec["kind"]
    part_seed = rngmod.derive_seed(cfg.seed, rngmod.PARTITION)
    if kind == "synthetic_quadratic":
        if objective.kind != "quadratic":
            raise ConfigInvalidError("synthetic_quadratic data needs a quadratic objective")
        d, mu = objective.dim, objective.mu
        centers = rngmod.substream(cfg.seed, rngmod.DATA, 0).normal(
            0.0, float(spec.get("center_scale", 1.0)), size=(cfg.agents, d))
        parts = [
            random_quadratic_dataset(
                int(spec.get("samples_per_agent", 50)), d, mu,
                rngmod.substream(cfg.seed, rngmod.DATA, 1, i),
                center=centers[i], spread=float(spec.get("spread", 1.0)),
                curvature=float(spec.get("curvature", 1.0)),
            )
            for i in range(cfg.agents)
        ]
        pooled = QuadraticDataset(np.concatenate([p.A for p in parts]), np.concatenate([p.b for p in parts]))
        return PreparedData(parts, optimum=objective.closed_form_optimum(pooled))
    if kind == "mnist":
        files = find_mnist(spec["path"])
        if set(files) != {"train", "test"}:
            raise ConfigInvalidError(f"MNIST IDX files not found under {spec['path']}")
        train = load_idx_dataset(*files["train"])
        test = load_idx_dataset(*files["test"])
        if spec.get("eval_limit"):
            test = test.subset(np.arange(int(spec["eval_limit"])))
    elif kind == "synthetic_classification":
        train, test = _synthetic_classification(spec, cfg.seed)
    else:
        raise ConfigInvalidError(f"unknown data kind {kind!r}")
    split = build_split_matrix(cfg.split_t, cfg.agents, train.num_classes)
    parts = partition(train, split, part_seed)
    return PreparedData(parts, eval_data=test, counts=partition_counts(parts, train.num_classes))


def _sha(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _arrays(part) -> tuple:
    if isinstance(part, LabeledDataset):
        return part.features, part.labels
    return part.A, part.b


def resolve_sigma(cfg: ExperimentConfig, parts) -> float:
    """Noise multiplier for the run, calibrating against the largest sampling rate."""
    if not cfg.private:
        return 0.0
    if cfg.noise_multiplier is not None:
        return float(cfg.noise_multiplier)
    rates = [min(cfg.lot_size or len(p), len(p)) / len(p) for p in parts]
    steps = cfg.iterations * (cfg.primal_steps if Algorithm(cfg.algorithm).base == "dinno" else 1)
    return calibrate_sigma(max(rates), steps, cfg.target_epsilon, cfg.delta)


def train_config(cfg: ExperimentConfig, sigma: float) -> TrainConfig:
    return TrainConfig(
        algorithm=cfg.algorithm,
        iterations=cfg.iterations,
        lr=cfg.lr,
        lr_half=cfg.lr_half,
        rho=cfg.rho,
        primal_steps=cfg.primal_steps,
        primal_optimizer=cfg.primal_optimizer,
        lot_size=cfg.lot_size,
        clip_norm=cfg.clip_norm if cfg.private else math.inf,
        noise_multiplier=sigma,
        delta=cfg.delta,
        epsilon_cap=cfg.epsilon_cap,
    )


def run_experiment(cfg: ExperimentConfig, observer=None, graph: CommGraph | None = None) -> TrainingTrace:
    """Builds graph, weights, data and engine, trains, and persists results.

    Writes ``metrics.csv``, ``manifest.json`` and ``final_thetas.npy`` to
    ``cfg.output_dir`` when it is set.
    """
    cfg.validate()
    graph = graph or build_graph(cfg)
    if graph.n_agents != cfg.agents:
        raise ConfigInvalidError("graph size differs from agents")
    fv = fiedler_value(graph)
    W = build_mixing_matrix(graph, cfg.mixing)
    objective = build_objective(cfg)
    prepared = prepare_data(cfg, objective)
    sigma = resolve_sigma(cfg, prepared.train_parts)
    tcfg = train_config(cfg, sigma)
    theta0 = objective.init_params(rngmod.substream(cfg.seed, rngmod.INIT))
    noise_seed = cfg.noise_seed if cfg.noise_seed is not None else rngmod.derive_seed(cfg.seed, rngmod.NOISE)

    trace = run_training(
        tcfg, graph, W, objective, prepared.train_parts, seed=cfg.seed, theta0=theta0,
        noise_seed=noise_seed, eval_data=prepared.eval_data,
        metrics_every=cfg.metrics_every, observer=observer,
    )
    theta_bar = trace.final_thetas.mean(axis=0)
    manifest = {
        "config": cfg.to_dict(),
        "graph": {
            "edges": sorted([list(e) for e in graph.edges]),
            "fiedler": fv.fiedler,
            "normalized_fiedler": fv.normalized,
        },
        "partition_counts": prepared.counts,
        "partition_sizes": [len(p) for p in prepared.train_parts],
        "noise_multiplier": sigma,
        "truncated": trace.truncated,
        "hashes": {
            "graph": _sha(np.array(sorted(graph.edges))),
            "partition": _sha(*[a for p in prepared.train_parts for a in _arrays(p)]),
            "init": _sha(theta0),
        },
        **trace.manifest,
    }
    if objective.is_classifier and prepared.eval_data is not None:
        accs = [objective.accuracy(th, prepared.eval_data) for th in trace.final_thetas]
        manifest["final_accuracy"] = float(np.mean(accs))
        manifest["final_accuracy_per_agent"] = accs
    if prepared.optimum is not None:
        manifest["optimum"] = prepared.optimum.tolist()
        manifest["final_error"] = float(np.linalg.norm(theta_bar - prepared.optimum))
    if trace.records:
        manifest["final_epsilon"] = trace.records[-1].epsilon
    trace.manifest = manifest
    if cfg.output_dir:
        save_trace(trace, cfg.output_dir)
    return trace


# ----------------------------------------------------------- persistence


def write_metrics_csv(records: Sequence[RoundRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.round, repr(r.loss), repr(r.consensus), repr(r.accuracy), repr(r.epsilon)])


def read_metrics_csv(path: str | Path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [RoundRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def save_trace(trace: TrainingTrace, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(trace.records, d / "metrics.csv")
    (d / "manifest.json").write_text(json.dumps(trace.manifest, indent=2, default=_json_default) + "\n")
    np.save(d / "final_thetas.npy", trace.final_thetas)


def load_trace(directory: str | Path) -> TrainingTrace:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return TrainingTrace(
        records=read_metrics_csv(d / "metrics.csv"),
        final_thetas=np.load(d / "final_thetas.npy"),
        manifest=manifest,
        truncated=bool(manifest.get("truncated", False)),
    )


# ---------------------------------------------------------------- sweeps


@dataclass
class SlopeReport:
    sigmas: list[float]
    errors: list[float]
    per_repetition: list[list[float]]
    slope: float
    intercept: float
    r_squared: float


def steady_state_error(cfg: ExperimentConfig, tail_fraction: float = 0.1) -> float:
    """Mean of ``||mean_i theta_i - theta*||`` over the last rounds of one run."""
    objective = build_objective(cfg)
    if objective.kind != "quadratic":
        raise ConfigInvalidError("steady-state error needs a quadratic objective")
    optimum = prepare_data(cfg, objective).optimum
    start = cfg.iterations - max(1, int(round(tail_fraction * cfg.iterations)))
    errs = []

    def observe(k, states):
        if k > start:
            errs.append(float(np.linalg.norm(np.mean([s.theta for s in states], axis=0) - optimum)))

    run_experiment(dataclasses.replace(cfg, output_dir=None, metrics_every=cfg.iterations), observer=observe)
    return float(np.mean(errs))


def fit_loglog(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``: slope, intercept, R^2."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def run_sigma_sweep(base_cfg: ExperimentConfig, sigmas: Sequence[float], repetitions: int = 5) -> SlopeReport:
    """Steady-state error versus noise multiplier, with a log-log fit.

    Each repetition uses a different noise seed; graph, data and
    initialization stay fixed. Zero noise levels are measured but left out
    of the fit.
    """
    if not Algorithm(base_cfg.algorithm).private:
        raise ConfigInvalidError("sigma sweeps need a private algorithm")
    positive = sorted({float(s) for s in sigmas if s > 0})
    if len(positive) < 2:
        raise ConfigInvalidError("need at least two distinct positive sigma values")
    per_rep, means = [], []
    for s in sigmas:
        errs = []
        for rep in range(repetitions):
            cfg = dataclasses.replace(
                base_cfg, noise_multiplier=float(s), target_epsilon=None,
                noise_seed=rngmod.derive_seed(base_cfg.seed, "sweep-noise", rep),
            )
            errs.append(steady_state_error(cfg))
        per_rep.append(errs)
        means.append(float(np.mean(errs)))
        log.info("sigma=%g steady-state error=%.4g", s, means[-1])
    fit_x = [s for s in sigmas if s > 0]
    fit_y = [e for s, e in zip(sigmas, means) if s > 0]
    slope, intercept, r2 = fit_loglog(fit_x, fit_y)
    return SlopeReport([float(s) for s in sigmas], means, per_rep, slope, intercept, r2)


@dataclass
class SweepRow:
    algorithm: str
    value: float
    epsilon: float | None
    accuracies: list[float]
    measured: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def spread(self) -> float:
        """Max minus min over trials."""
        return float(np.max(self.accuracies) - np.min(self.accuracies))


SWEEP_HEADER = ["algorithm", "value", "epsilon", "mean_accuracy", "std_accuracy", "trials", "accuracies", "measured"]


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([
                r.algorithm, repr(r.value), "" if r.epsilon is None else repr(r.epsilon),
                repr(r.mean), repr(r.std), len(r.accuracies),
                ";".join(repr(a) for a in r.accuracies), ";".join(repr(m) for m in r.measured),
            ])


def _final_accuracy(cfg: ExperimentConfig, graph: CommGraph | None = None) -> float:
    trace = run_experiment(cfg, graph=graph)
    if "final_accuracy" not in trace.manifest:
        raise ConfigInvalidError("accuracy sweeps need a classifier objective with evaluation data")
    return trace.manifest["final_accuracy"]


def _trial_cfg(base: ExperimentConfig, algorithm: str, trial: int, **changes) -> ExperimentConfig:
    return dataclasses.replace(
        base, algorithm=algorithm, output_dir=None,
        noise_seed=rngmod.derive_seed(base.seed, "trial-noise", trial), **changes,
    )


def run_connectivity_sweep(
    base_cfg: ExperimentConfig,
    fiedler_targets: Sequence[float],
    algorithms: Sequence[str] | None = None,
    trials: int = 1,
    tolerance: float | None = None,
) -> list[SweepRow]:
    """Final accuracy per (algorithm, normalized-Fiedler target).

    Every trial draws a fresh graph at the target and fresh noise; the
    measured normalized Fiedler values are kept alongside accuracies.
    """
    if not fiedler_targets:
        raise ConfigInvalidError("need at least one Fiedler target")
    algorithms = list(algorithms or [base_cfg.algorithm])
    tol = tolerance if tolerance is not None else float(base_cfg.graph.get("tolerance", 0.05))
    rows = []
    for alg in algorithms:
        for target in fiedler_targets:
            accs, measured = [], []
            for trial in range(trials):
                graph_spec = {
                    "kind": "generated", "target_fiedler": float(target), "tolerance": tol,
                    "seed": rngmod.derive_seed(base_cfg.seed, "trial-graph", trial),
                }
                cfg = _trial_cfg(base_cfg, alg, trial, graph=graph_spec)
                g = build_graph(cfg)
                measured.append(fiedler_value(g).normalized)
                accs.append(_final_accuracy(cfg, g))
                log.info("%s fiedler=%g trial=%d acc=%.4f", alg, target, trial, accs[-1])
            rows.append(SweepRow(alg, float(target), base_cfg.target_epsilon, accs, measured))
    return rows


def run_split_sweep(
    base_cfg: ExperimentConfig,
    t_values: Sequence[float],
    algorithms: Sequence[str] | None = None,
    trials: int = 1,
) -> list[SweepRow]:
    """Final accuracy per (algorithm, split t) on the base config's graph."""
    if not t_values:
        raise ConfigInvalidError("need at least one t value")
    algorithms = list(algorithms or [base_cfg.algorithm])
    rows = []
    for alg in algorithms:
        for t in t_values:
            accs = []
            for trial in range(trials):
                cfg = _trial_cfg(base_cfg, alg, trial, split_t=float(t))
                accs.append(_final_accuracy(cfg))
                log.info("%s t=%g trial=%d acc=%.4f", alg, t, trial, accs[-1])
            rows.append(SweepRow(alg, float(t), base_cfg.target_epsilon, accs))
    return rows


def verify_spend(cfg: ExperimentConfig, sigma: float, sample_rate: float) -> float:
    steps = cfg.iterations * (cfg.primal_steps if Algorithm(cfg.algorithm).base == "dinno" else 1)
    return epsilon_for(sample_rate, sigma, steps, cfg.delta).epsilon
