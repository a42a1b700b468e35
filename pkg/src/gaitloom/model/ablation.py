"""Strategy ablation: train every flag combination under identical splits and
seeds, evaluating on a held-out subject."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from ..dataset import PipelineConfig, Recording, prepare_split
from .networks import AblationFlags, EncoderConfig
from .training import TrainConfig, evaluate, train_main, train_timing
from .networks import ModelBundle

TABLE_ORDER = [
    AblationFlags(False, False, False),
    AblationFlags(True, False, False),
    AblationFlags(False, True, False),
    AblationFlags(False, False, True),
    AblationFlags(True, True, False),
    AblationFlags(True, False, True),
    AblationFlags(False, True, True),
    AblationFlags(True, True, True),
]


@dataclass
class AblationRow:
    flags: AblationFlags
    rmse_per_seed: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.rmse_per_seed))


def loso_test_keys(recordings: list[Recording], target: str, n_target_trials: int) -> set:
    trials = sorted({r.trial_id for r in recordings if r.subject_id == target})
    if not trials:
        raise ValueError(f"unknown subject {target!r}")
    return {(target, t) for t in trials[n_target_trials:]}


def run_ablation(
    recordings: list[Recording],
    combos: list[AblationFlags],
    seeds: list[int],
    pcfg: PipelineConfig = PipelineConfig(),
    tcfg: TrainConfig = TrainConfig(),
    cfg: EncoderConfig = EncoderConfig(),
    n_target_trials: int = 1,
) -> list[AblationRow]:
    """Held-out-subject RMSE for each flag combination across seeds.

    The held-out subject rotates with the seed index; within one seed every
    combination shares the same split, timing model, and initialization seed,
    so rows differ only in the strategy switches.
    """
    subjects = sorted({r.subject_id for r in recordings})
    rows = {f.marks(): AblationRow(f, []) for f in combos}
    for i, seed in enumerate(seeds):
        target = subjects[i % len(subjects)]
        split = prepare_split(recordings, loso_test_keys(recordings, target, n_target_trials), pcfg)
        tc = replace(tcfg, seed=seed)
        timing = train_timing(split.train, cfg, tc)
        for flags in combos:
            main = train_main(split.train, split.masks, flags, cfg, tc, timing=timing)
            bundle = ModelBundle(main=main, timing=timing, flags=flags, cfg=cfg)
            report = evaluate(bundle, split.test, split.masks)
            rows[flags.marks()].rmse_per_seed.append(report["overall"]["rmse"])
    return [rows[f.marks()] for f in combos]


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    n_seeds = max((len(r.rmse_per_seed) for r in rows), default=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["A", "B", "C"] + [f"seed{i}" for i in range(n_seeds)] + ["median"])
        for r in rows:
            marks = ["Y" if v else "x" for v in
                     (r.flags.decoupling, r.flags.activation_aux, r.flags.mask_filter)]
            w.writerow(marks + [f"{v:.4f}" for v in r.rmse_per_seed] + [f"{r.median:.4f}"])
