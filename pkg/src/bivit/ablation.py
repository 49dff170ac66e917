"""Component ablation (scaling factors x ranking distillation) and lambda sweeps."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .distill import TeacherBundle
from .train import TrainConfig, evaluate, train_student, train_teacher

COMPONENTS = {
    "baseline": dict(lsf=False, lam=0.0),
    "+LSF": dict(lsf=True, lam=0.0),
    "+RD": dict(lsf=False, lam=10.0),
    "+LSF+RD": dict(lsf=True, lam=10.0),
}


@dataclass
class AblationResult:
    accs: dict = field(default_factory=dict)  # config name -> list of val accuracies (one per seed)
    teacher_accs: list = field(default_factory=list)
    seeds: tuple = ()
    seconds: float = 0.0

    def mean(self, name: str) -> float:
        return float(np.mean(self.accs[name]))

    def rows(self) -> list[tuple[str, float, list]]:
        return [(name, self.mean(name), list(v)) for name, v in self.accs.items()]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["config", "mean_top1"] + [f"seed{s}" for s in self.seeds])
            for name, mean, vals in self.rows():
                w.writerow([name, f"{100 * mean:.2f}"] + [f"{100 * v:.2f}" for v in vals])

    def format(self) -> str:
        base = self.mean("baseline") if "baseline" in self.accs else None
        lines = []
        for name, mean, _ in self.rows():
            delta = "" if base is None or name == "baseline" else f"  ({100 * (mean - base):+.1f})"
            lines.append(f"{name:<10} {100 * mean:6.2f}{delta}")
        return "\n".join(lines)


def run_components(base: TrainConfig, data: Dataset, seeds=(0, 1, 2), configs=None,
                   log=None) -> AblationResult:
    """Train a teacher per seed, then one student per configuration.

    Every configuration of a given seed shares the teacher, the data order
    and the initialisation, so differences come only from the toggles.
    """
    configs = configs or COMPONENTS
    t0 = time.perf_counter()
    result = AblationResult({name: [] for name in configs}, [], tuple(seeds))
    for seed in seeds:
        cfg_seed = replace(base, seed=seed)
        teacher, t_acc = train_teacher(cfg_seed, data)
        result.teacher_accs.append(t_acc)
        bundle = TeacherBundle(teacher, base.ranking_stage)
        bundle.precompute(data.x_train)
        for name, overrides in configs.items():
            student, _ = train_student(replace(cfg_seed, **overrides), bundle, data)
            acc = evaluate(student, data.x_val, data.y_val)
            result.accs[name].append(acc)
            if log:
                log(f"seed {seed} {name}: {100 * acc:.2f}")
    result.seconds = time.perf_counter() - t0
    return result


def lambda_sweep(base: TrainConfig, data: Dataset, lams=(0.0, 10.0), seeds=(0, 1, 2),
                 log=None) -> AblationResult:
    configs = {f"lambda={lam:g}": dict(lam=float(lam)) for lam in lams}
    return run_components(base, data, seeds, configs, log)
