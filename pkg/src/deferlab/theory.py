"""Monte Carlo verification of the behavioural model's guarantees and an
analytically optimal reference system for Gaussian tasks.

The two guarantees checked here: the posterior mean accuracy converges to
the true accuracy as context grows, and with the sample-complexity bound's
per-class count the expertise class is misidentified with probability at
most delta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UnsupportedTaskError
from .evaluation import Curve
from .simulate import SyntheticTaskSpec, generate_gaussian_task


@dataclass
class TrialConfig:
    """Monte Carlo setup for expertise identification trials."""

    num_classes: int
    accuracies: np.ndarray  # true per-class accuracy
    best_class: int
    samples_per_class: int
    trials: int
    delta: float
    seed: int

    def __post_init__(self) -> None:
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        if len(self.accuracies) != self.num_classes:
            raise ValueError("accuracies must have one entry per class")
        if np.any(self.accuracies < 0) or np.any(self.accuracies > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        others = np.delete(self.accuracies, self.best_class)
        if others.size and self.accuracies[self.best_class] <= others.max():
            raise ValueError("best_class must strictly dominate the other accuracies")


def posterior_convergence_errors(
    theta: float, n_schedule: Sequence[int], rng: np.random.Generator
) -> list[float]:
    """|posterior mean - theta| for fresh draws at each schedule point,
    using the uniform prior."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    errors = []
    for n in n_schedule:
        t = rng.binomial(n, theta) if n > 0 else 0
        mu = (1.0 + t) / (2.0 + n)
        errors.append(abs(mu - theta))
    return errors


def misidentification_rate(cfg: TrialConfig) -> float:
    """Fraction of trials where the argmax posterior mean is not the best
    class, with ``samples_per_class`` observations per class and uniform
    priors."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.samples_per_class
    t = rng.binomial(n, cfg.accuracies, size=(cfg.trials, cfg.num_classes))
    mu = (1.0 + t) / (2.0 + n)
    predicted = np.argmax(mu, axis=1)
    return float(np.mean(predicted != cfg.best_class))


def bayes_optimal_reference(
    task: SyntheticTaskSpec, expert_accuracies: np.ndarray
) -> tuple[Curve, Curve]:
    """Optimal system/expert accuracy curves on the task's test partition.

    The optimal classifier takes the argmax of the exact Gaussian class
    posterior. Deferral value for each case is the best expert's expected
    correctness Sum_y P(y|x) acc_E(y); cases are deferred in order of that
    value minus the top posterior, and expert correctness enters the curves
    in expectation, so the result is the ceiling any trained system can only
    reach up to sampling noise.
    """
    if not isinstance(task, SyntheticTaskSpec):
        raise UnsupportedTaskError(
            "the optimal reference needs a Gaussian task with known densities"
        )
    acc = np.atleast_2d(np.asarray(expert_accuracies, dtype=np.float64))
    if acc.shape[1] != task.num_classes:
        raise ValueError("expert accuracies must have one column per class")

    data = generate_gaussian_task(task)
    x = data.test.features
    y = data.test.labels
    if len(x) == 0:
        raise ValueError("task has an empty test partition")

    # Balanced classes and isotropic noise: posterior is a softmax over
    # -||x - mean_k||^2 / (2 sigma^2).
    d2 = ((x[:, None, :] - data.class_means[None, :, :]) ** 2).sum(axis=2)
    logp = -d2 / (2.0 * task.noise_scale**2)
    logp -= logp.max(axis=1, keepdims=True)
    post = np.exp(logp)
    post /= post.sum(axis=1, keepdims=True)

    clf_correct = (np.argmax(post, axis=1) == y).astype(np.float64)
    defer_value = (post @ acc.T).max(axis=1)  # best expert per case
    best_expert = np.argmax(post @ acc.T, axis=1)
    expert_correct = acc[best_expert, y]  # expected correctness on the true label
    priority = defer_value - post.max(axis=1)

    order = np.argsort(-priority, kind="stable")
    exp_prefix = np.concatenate([[0.0], np.cumsum(expert_correct[order])])
    clf_prefix = np.concatenate([[0.0], np.cumsum(clf_correct[order])])
    n = len(y)
    j = np.arange(n + 1)
    rates = j / n
    system = (exp_prefix + (clf_prefix[-1] - clf_prefix)) / n
    expert = np.empty(n + 1)
    expert[1:] = exp_prefix[1:] / j[1:]
    expert[0] = expert[1]
    return Curve(rates, system), Curve(rates, expert)


@dataclass
class TheoryCheckRow:
    check: str
    params: dict
    observed: float
    threshold: float
    passed: bool

    def as_csv_row(self) -> list:
        return [
            self.check,
            json.dumps(self.params, sort_keys=True),
            repr(float(self.observed)),
            repr(float(self.threshold)),
            "pass" if self.passed else "fail",
        ]


THEORY_CSV_HEADER = ["check", "param_json", "observed", "threshold", "pass"]
