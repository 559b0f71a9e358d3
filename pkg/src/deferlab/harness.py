"""Reproducible experiment orchestration.

Every artifact written here is a pure function of (config, package version):
no timestamps, repr-formatted floats, fixed iteration order. Seeds fan out
into independent substreams for task generation, population sampling,
context draws, prediction sampling, and training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import ConfigError, ExperimentConfig, validate_config
from .deferral import TrainResult, train, train_pop_avg
from .errors import TrainingDivergenceError
from .evaluation import (
    MetricReport,
    area_under,
    build_curves,
    build_report,
    score_cases,
    write_curve_csv,
    write_metrics_csv,
)
from .experts import (
    BehaviouralRepresentation,
    PriorElicitation,
    build_representation,
    load_prior_file,
    sample_complexity_bound,
    write_prior_file,
)
from .nets import DenseNet, dense_net, forward
from .simulate import (
    ContextSet,
    Dataset,
    SimulatedExpertSpec,
    SyntheticTaskSpec,
    TaskData,
    draw_context_set,
    expert_accuracy_by_class,
    expert_predict_batch,
    generate_gaussian_task,
    make_population,
)
from .theory import (
    THEORY_CSV_HEADER,
    TheoryCheckRow,
    TrialConfig,
    bayes_optimal_reference,
    misidentification_rate,
)

VERSION_STRING = "deferlab-0.1.0"

REJECTOR_DIMS = (4, 32, 32, 1)


def _subseed(*parts: int) -> int:
    """Deterministic 63-bit seed derived from a tuple of integers."""
    return int(np.random.default_rng(list(parts)).integers(0, 2**63 - 1))


def _ptag(p: float) -> str:
    return format(p, "g").replace(".", "_")


@dataclass
class RunRecord:
    method: str
    p: float
    expertise: int
    seed: int
    cohort: str
    classifier_accuracy: float
    report: MetricReport

    @property
    def aursac(self):
        return self.report.aursac

    @property
    def aurdac(self):
        return self.report.aurdac


@dataclass
class OracleRecord:
    p: float
    expertise: int
    seed: int
    cohort: str
    report: MetricReport

    @property
    def aursac(self):
        return self.report.aursac


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    oracles: list[OracleRecord]
    failures: dict[int, str]
    out_dir: Path


def _prediction_matrix(
    experts: Sequence[SimulatedExpertSpec],
    labels: np.ndarray,
    num_classes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    return np.stack(
        [expert_predict_batch(e, labels, num_classes, rng) for e in experts]
    )


def _cohort_representations(
    experts: Sequence[SimulatedExpertSpec],
    contexts: Sequence[ContextSet],
    num_classes: int,
    priors_map: dict[int, PriorElicitation] | None,
) -> list[BehaviouralRepresentation]:
    reps = []
    for expert, ctx in zip(experts, contexts):
        prior = priors_map.get(expert.expert_id) if priors_map else None
        reps.append(build_representation(ctx.pairs(), num_classes, prior))
    return reps


def _classifier_accuracy(classifier: DenseNet, data: Dataset) -> float:
    return float(np.mean(np.argmax(forward(classifier, data.features), axis=1) == data.labels))


def _train_method(
    method: str,
    cfg: ExperimentConfig,
    task: TaskData,
    id_experts: Sequence[SimulatedExpertSpec],
    id_contexts: Sequence[ContextSet],
    priors_map: dict[int, PriorElicitation] | None,
    seed: int,
    stream: int,
) -> TrainResult:
    num_classes = cfg.num_classes
    clf = dense_net(
        [cfg.dim, *cfg.classifier_hidden, num_classes], np.random.default_rng(_subseed(seed, stream, 1))
    )
    train_cfg = cfg.train_config(seed)
    if method == "ea_l2d":
        rej = dense_net(list(REJECTOR_DIMS), np.random.default_rng(_subseed(seed, stream, 2)))
        priors = [
            priors_map.get(e.expert_id) if priors_map else None for e in id_experts
        ]
        return train(
            clf,
            rej,
            task.train,
            id_contexts,
            priors,
            train_cfg,
            lam=cfg.context_subsample,
            val=task.val,
            patience=cfg.patience,
        )
    if method == "pop_avg":
        rej = dense_net(
            [cfg.dim, *cfg.classifier_hidden, 1], np.random.default_rng(_subseed(seed, stream, 2))
        )
        pred_rng = np.random.default_rng(_subseed(seed, stream, 3))
        query_preds = _prediction_matrix(id_experts, task.train.labels, num_classes, pred_rng)
        val_preds = _prediction_matrix(id_experts, task.val.labels, num_classes, pred_rng)
        return train_pop_avg(
            clf,
            rej,
            task.train,
            query_preds,
            train_cfg,
            val=task.val,
            val_predictions=val_preds,
            patience=cfg.patience,
        )
    raise ConfigError(f"unknown method {method!r}")


def run_experiment(cfg: ExperimentConfig, out_dir) -> ExperimentResult:
    """Full protocol: per seed and per population setting, train every
    configured method and evaluate it on the in-distribution and held-out
    cohorts, writing curve and metric CSVs plus a manifest.

    A training divergence is recorded and the remaining seeds still run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = cfg.num_classes
    priors_map = load_prior_file(cfg.prior_file, num_classes) if cfg.prior_file else None

    records: list[RunRecord] = []
    oracles: list[OracleRecord] = []
    failures: dict[int, str] = {}
    metric_rows: dict[tuple[str, str], list[tuple]] = {}

    grid = [
        (pi, p, ei, epe)
        for pi, p in enumerate(cfg.overlap_probabilities)
        for ei, epe in enumerate(cfg.expertise_grid())
    ]

    for seed in cfg.seeds:
        try:
            task = generate_gaussian_task(cfg.task_spec(seed))
            for pi, p, ei, epe in grid:
                population = make_population(
                    num_classes,
                    cfg.experts_id,
                    cfg.experts_ood,
                    p,
                    cfg.context_size,
                    expertise_per_expert=epe,
                    seed=_subseed(seed, pi, ei, 10),
                )
                ctx_rng = np.random.default_rng(_subseed(seed, pi, ei, 11))
                contexts = [
                    draw_context_set(e, task.context_pool, num_classes, ctx_rng)
                    for e in population
                ]
                test_rng = np.random.default_rng(_subseed(seed, pi, ei, 12))
                test_preds = _prediction_matrix(population, task.test.labels, num_classes, test_rng)

                cohorts = [("id", [i for i, e in enumerate(population) if e.in_distribution])]
                ood_idx = [i for i, e in enumerate(population) if not e.in_distribution]
                if ood_idx:
                    cohorts.append(("ood", ood_idx))

                id_idx = cohorts[0][1]
                id_experts = [population[i] for i in id_idx]
                id_contexts = [contexts[i] for i in id_idx]
                tag = f"p{_ptag(p)}_e{epe}"

                for method in cfg.methods:
                    result = _train_method(
                        method, cfg, task, id_experts, id_contexts, priors_map,
                        seed, stream=100 + pi * 10 + ei,
                    )
                    clf_acc = _classifier_accuracy(result.classifier, task.test)
                    for cohort_name, idx in cohorts:
                        cohort_experts = [population[i] for i in idx]
                        cohort_contexts = [contexts[i] for i in idx]
                        if method == "ea_l2d":
                            reps = _cohort_representations(
                                cohort_experts, cohort_contexts, num_classes, priors_map
                            )
                        else:
                            reps = None
                        pick_rng = np.random.default_rng(
                            _subseed(seed, pi, ei, 13, 0 if cohort_name == "id" else 1)
                        )
                        cases = score_cases(
                            result.classifier,
                            result.rejector,
                            task.test,
                            reps,
                            test_preds[idx],
                            pick_rng,
                        )
                        system_curve, expert_curve = build_curves(cases)
                        report = build_report(
                            system_curve, expert_curve, cfg.eval_ranges,
                            cohort=cohort_name, seed=seed, method=method, p=p, expertise=epe,
                        )
                        records.append(RunRecord(method, p, epe, seed, cohort_name, clf_acc, report))
                        write_curve_csv(
                            out / f"curve_{method}_{tag}_seed{seed}_{cohort_name}.csv",
                            system_curve,
                            expert_curve,
                        )
                        rows = metric_rows.setdefault((method, tag), [])
                        for r in cfg.eval_ranges:
                            rows.append(("aursac", r[0], r[1], report.aursac[r], cohort_name, seed))
                            rows.append(("aurdac", r[0], r[1], report.aurdac[r], cohort_name, seed))
                        rows.append(("classifier_accuracy", 0.0, 1.0, clf_acc, cohort_name, seed))

                for cohort_name, idx in cohorts:
                    acc_matrix = np.stack(
                        [expert_accuracy_by_class(population[i], num_classes) for i in idx]
                    )
                    system_curve, expert_curve = bayes_optimal_reference(task.spec, acc_matrix)
                    report = build_report(
                        system_curve, expert_curve, cfg.eval_ranges,
                        cohort=cohort_name, seed=seed, method="oracle", p=p, expertise=epe,
                    )
                    oracles.append(OracleRecord(p, epe, seed, cohort_name, report))
                    write_curve_csv(
                        out / f"curve_oracle_{tag}_seed{seed}_{cohort_name}.csv",
                        system_curve,
                        expert_curve,
                    )
                    rows = metric_rows.setdefault(("oracle", tag), [])
                    for r in cfg.eval_ranges:
                        rows.append(("aursac", r[0], r[1], report.aursac[r], cohort_name, seed))
                        rows.append(("aurdac", r[0], r[1], report.aurdac[r], cohort_name, seed))
        except TrainingDivergenceError as exc:
            failures[seed] = str(exc)

    for (method, tag), rows in sorted(metric_rows.items()):
        write_metrics_csv(out / f"metrics_{method}_{tag}.csv", rows)

    _write_manifest(out, cfg, failures)
    return ExperimentResult(records, oracles, failures, out)


def _write_manifest(out: Path, cfg: ExperimentConfig, failures: dict[int, str]) -> None:
    manifest = {
        "version": VERSION_STRING,
        "config": cfg.echo(),
        "seeds": cfg.seeds,
        "failures": {str(k): v for k, v in sorted(failures.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- priors study ----------------------------------------------------------

PRIOR_STUDY_P = 0.8
PRIOR_STUDY_C = 0.8
PRIOR_STUDY_S = 15.0
PRIOR_STUDY_ARMS = ("accurate", "uninformative", "misdirected")


@dataclass
class PriorsStudyRecord:
    arm: str
    seed: int
    report: MetricReport
    expert_accuracy_at_full_deferral: float

    @property
    def aurdac(self) -> float:
        return self.report.aurdac[(0.0, 1.0)]

    @property
    def system_curve(self):
        return self.report.system_curve


@dataclass
class PriorsStudyResult:
    records: list[PriorsStudyRecord]
    target_expert: int
    out_dir: Path


def _study_arm_priors(
    arm: str, num_classes: int, true_class: int, wrong_class: int
) -> PriorElicitation:
    p = np.full(num_classes, 0.5)
    c = np.zeros(num_classes)
    if arm == "accurate":
        p[true_class] = PRIOR_STUDY_P
        c[true_class] = PRIOR_STUDY_C
    elif arm == "misdirected":
        p[wrong_class] = PRIOR_STUDY_P
        c[wrong_class] = PRIOR_STUDY_C
    elif arm != "uninformative":
        raise ValueError(f"unknown study arm {arm!r}")
    return PriorElicitation(p, c, PRIOR_STUDY_S)


def run_priors_study(cfg: ExperimentConfig, out_dir) -> PriorsStudyResult:
    """Zero-context expert under three prior configurations.

    One held-out expert has its context removed; the system is trained once
    per seed on the in-distribution cohort and then evaluated while the
    expert's representation comes purely from an accurate, an uninformative,
    or a misdirected prior file. All three arms share the trained networks
    and the expert's sampled test predictions, so their curves coincide at
    full deferral.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = cfg.num_classes
    p = cfg.overlap_probabilities[0]
    epe = cfg.expertise_grid()[0]

    records: list[PriorsStudyRecord] = []
    metric_rows: list[tuple] = []
    target_id = -1
    for seed in cfg.seeds:
        task = generate_gaussian_task(cfg.task_spec(seed))
        population = make_population(
            num_classes,
            cfg.experts_id,
            cfg.experts_ood,
            p,
            cfg.context_size,
            expertise_per_expert=epe,
            seed=_subseed(seed, 0, 0, 10),
        )
        # The studied expert never appears in training and has no context:
        # its representation is whatever the prior file says. Expertise sits
        # on class 0, the class a flat posterior's tie-break also lands on,
        # so the uninformative arm is neutral rather than misdirected; the
        # misdirected arm asserts expertise on the last class instead.
        true_class = 0
        wrong_class = num_classes - 1
        target = SimulatedExpertSpec(
            expert_id=len(population),
            expertise_classes=frozenset({true_class}),
            overlap_probability=p,
            context_size=0,
            in_distribution=False,
        )
        target_id = target.expert_id

        ctx_rng = np.random.default_rng(_subseed(seed, 0, 0, 11))
        contexts = [
            draw_context_set(e, task.context_pool, num_classes, ctx_rng)
            for e in population
            if e.in_distribution
        ]
        id_experts = [e for e in population if e.in_distribution]
        result = _train_method(
            "ea_l2d", cfg, task, id_experts, contexts, None, seed, stream=500
        )

        test_rng = np.random.default_rng(_subseed(seed, 0, 0, 12))
        target_preds = _prediction_matrix([target], task.test.labels, num_classes, test_rng)
        pick_rng = np.random.default_rng(_subseed(seed, 0, 0, 13))

        for arm in PRIOR_STUDY_ARMS:
            prior = _study_arm_priors(arm, num_classes, true_class, wrong_class)
            prior_path = out / f"priors_{arm}_seed{seed}.csv"
            write_prior_file(prior_path, {target.expert_id: prior})
            loaded = load_prior_file(prior_path, num_classes)[target.expert_id]
            rep = build_representation([], num_classes, loaded)

            cases = score_cases(
                result.classifier, result.rejector, task.test, [rep], target_preds, pick_rng
            )
            system_curve, expert_curve = build_curves(cases)
            report = build_report(
                system_curve, expert_curve, [(0.0, 1.0)],
                cohort=arm, seed=seed, target_expert=target.expert_id,
            )
            records.append(
                PriorsStudyRecord(arm, seed, report, float(expert_curve.accuracies[-1]))
            )
            write_curve_csv(
                out / f"curve_priors_{arm}_seed{seed}.csv", system_curve, expert_curve
            )
            metric_rows.append(("aurdac", 0.0, 1.0, report.aurdac[(0.0, 1.0)], arm, seed))
            metric_rows.append(("aursac", 0.0, 1.0, report.aursac[(0.0, 1.0)], arm, seed))

    write_metrics_csv(out / "metrics_priors_study.csv", metric_rows)
    _write_manifest(out, cfg, {})
    return PriorsStudyResult(records, target_id, out)


# --- theory checks ---------------------------------------------------------

CONVERGENCE_THETAS = (0.3, 0.7, 0.95)
CONVERGENCE_SCHEDULE = (10, 100, 1000, 10_000, 100_000)
CONVERGENCE_TRIALS = 1000
IDENTIFICATION_GRID = [
    (k, gap, delta) for k in (2, 10) for gap in (0.1, 0.3) for delta in (0.05, 0.1)
]
IDENTIFICATION_TRIALS = 2000

CEILING_TASK = dict(
    num_classes=5,
    dim=8,
    separation=3.0,
    noise_scale=1.0,
    train_size=400,
    val_size=100,
    test_size=400,
    context_pool_size=200,
)


def _median_errors(theta: float, seed: int) -> list[float]:
    rng = np.random.default_rng(seed)
    medians = []
    for n in CONVERGENCE_SCHEDULE:
        t = rng.binomial(n, theta, size=CONVERGENCE_TRIALS)
        mu = (1.0 + t) / (2.0 + n)
        medians.append(float(np.median(np.abs(mu - theta))))
    return medians


def _ceiling_row(seed: int) -> TheoryCheckRow:
    cfg = validate_config(
        dict(
            CEILING_TASK,
            experts_id=2,
            experts_ood=2,
            overlap_probabilities=[0.3],
            context_size=50,
            seeds=[seed],
            epochs=30,
            learning_rate=0.15,
            batch_size=64,
            patience=None,
        )
    )
    task = generate_gaussian_task(cfg.task_spec(seed))
    population = make_population(
        cfg.num_classes, 2, 2, 0.3, 50, seed=_subseed(seed, 0, 0, 10)
    )
    ctx_rng = np.random.default_rng(_subseed(seed, 0, 0, 11))
    contexts = [
        draw_context_set(e, task.context_pool, cfg.num_classes, ctx_rng)
        for e in population
    ]
    id_experts = [e for e in population if e.in_distribution]
    id_contexts = contexts[: len(id_experts)]
    result = _train_method("ea_l2d", cfg, task, id_experts, id_contexts, None, seed, stream=100)
    reps = _cohort_representations(id_experts, id_contexts, cfg.num_classes, None)
    test_rng = np.random.default_rng(_subseed(seed, 0, 0, 12))
    preds = _prediction_matrix(id_experts, task.test.labels, cfg.num_classes, test_rng)
    cases = score_cases(
        result.classifier, result.rejector, task.test, reps, preds,
        np.random.default_rng(_subseed(seed, 0, 0, 13)),
    )
    system_curve, _ = build_curves(cases)
    trained = area_under(system_curve, 0.0, 1.0)
    acc_matrix = np.stack(
        [expert_accuracy_by_class(e, cfg.num_classes) for e in id_experts]
    )
    oracle_system, _ = bayes_optimal_reference(task.spec, acc_matrix)
    oracle = area_under(oracle_system, 0.0, 1.0)
    return TheoryCheckRow(
        "reference_ceiling",
        {"seed": seed, "task": "gaussian-easy"},
        trained - oracle,
        0.02,
        trained <= oracle + 0.02,
    )


def run_theory_checks(
    seeds: Sequence[int],
    out_dir=None,
    bound_scale: float = 1.0,
    include_ceiling: bool = True,
) -> tuple[list[TheoryCheckRow], bool]:
    """Run the full verification grid, optionally writing the report CSV.

    Returns the rows and whether a default seed had to be substituted for an
    empty seed list.
    """
    seeds = list(seeds)
    default_used = not seeds
    if default_used:
        seeds = [0]

    rows: list[TheoryCheckRow] = []
    for seed in seeds:
        for theta in CONVERGENCE_THETAS:
            medians = _median_errors(theta, _subseed(seed, 21, int(theta * 100)))
            rows.append(
                TheoryCheckRow(
                    "posterior_convergence",
                    {"theta": theta, "n": CONVERGENCE_SCHEDULE[-1], "seed": seed},
                    medians[-1],
                    0.005,
                    medians[-1] < 0.005,
                )
            )
            worst_increase = max(b - a for a, b in zip(medians, medians[1:]))
            rows.append(
                TheoryCheckRow(
                    "posterior_convergence_monotone",
                    {"theta": theta, "schedule": list(CONVERGENCE_SCHEDULE), "seed": seed},
                    worst_increase,
                    0.0,
                    worst_increase <= 0.0,
                )
            )
        for k, gap, delta in IDENTIFICATION_GRID:
            n_bound = sample_complexity_bound(k, delta, gap)
            n = max(1, math.ceil(n_bound * bound_scale))
            accuracies = np.full(k, 0.75 - gap)
            best = min(1, k - 1)
            accuracies[best] = 0.75
            rate = misidentification_rate(
                TrialConfig(
                    num_classes=k,
                    accuracies=accuracies,
                    best_class=best,
                    samples_per_class=n,
                    trials=IDENTIFICATION_TRIALS,
                    delta=delta,
                    seed=_subseed(seed, 22, k, int(gap * 100), int(delta * 100)),
                )
            )
            rows.append(
                TheoryCheckRow(
                    "identification_bound",
                    {"K": k, "gap": gap, "delta": delta, "n": n, "seed": seed},
                    rate,
                    delta,
                    rate <= delta,
                )
            )

        spec = SyntheticTaskSpec(
            num_classes=5, dim=8, separation=0.0, noise_scale=1.0,
            train_size=0, val_size=0, test_size=2000, context_pool_size=0,
            seed=_subseed(seed, 23),
        )
        oracle_system, _ = bayes_optimal_reference(spec, np.ones(5))
        clf_acc = float(oracle_system.accuracies[0])
        sigma3 = 3.0 * math.sqrt(0.2 * 0.8 / 2000)
        rows.append(
            TheoryCheckRow(
                "reference_uniform_task",
                {"K": 5, "test_size": 2000, "seed": seed},
                abs(clf_acc - 0.2),
                sigma3,
                abs(clf_acc - 0.2) <= sigma3,
            )
        )
        if include_ceiling:
            rows.append(_ceiling_row(seed))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        import csv

        with open(out / "theory_report.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(THEORY_CSV_HEADER)
            for row in rows:
                writer.writerow(row.as_csv_row())
    return rows, default_used


# --- checkpoint-producing training entry (CLI `train`) ----------------------


def run_training(cfg: ExperimentConfig, out_dir) -> dict[int, str]:
    """Train every configured method per seed on the first population
    setting and save checkpoints plus loss histories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_classes = cfg.num_classes
    priors_map = load_prior_file(cfg.prior_file, num_classes) if cfg.prior_file else None
    p = cfg.overlap_probabilities[0]
    epe = cfg.expertise_grid()[0]
    failures: dict[int, str] = {}
    for seed in cfg.seeds:
        try:
            task = generate_gaussian_task(cfg.task_spec(seed))
            population = make_population(
                num_classes, cfg.experts_id, cfg.experts_ood, p, cfg.context_size,
                expertise_per_expert=epe, seed=_subseed(seed, 0, 0, 10),
            )
            ctx_rng = np.random.default_rng(_subseed(seed, 0, 0, 11))
            contexts = [
                draw_context_set(e, task.context_pool, num_classes, ctx_rng)
                for e in population
            ]
            id_experts = [e for e in population if e.in_distribution]
            id_contexts = contexts[: len(id_experts)]
            tag = f"p{_ptag(p)}_e{epe}"
            for method in cfg.methods:
                result = _train_method(
                    method, cfg, task, id_experts, id_contexts, priors_map, seed, stream=100
                )
                save_checkpoint(
                    out / f"checkpoint_{method}_{tag}_seed{seed}.npz",
                    result.classifier,
                    result.rejector,
                    cfg.train_config(seed),
                )
                _write_history(out / f"history_{method}_{tag}_seed{seed}.csv", result)
        except TrainingDivergenceError as exc:
            failures[seed] = str(exc)
    _write_manifest(out, cfg, failures)
    return failures


def _write_history(path, result: TrainResult) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "classifier_term", "deferral_term", "val_loss"])
        for row in result.history:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.train_loss),
                    repr(row.train_classifier_term),
                    repr(row.train_deferral_term),
                    "" if row.val_loss is None else repr(row.val_loss),
                ]
            )
