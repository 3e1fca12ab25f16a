"""Cumulative component ablation over several seeds."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .data import SyntheticDatasetSpec, gen_dataset
from .evaluate import EvalReport
from .infer import evaluate_checkpoint
from .train import train

log = logging.getLogger(__name__)

TOGGLES = ("instance_guidance", "multiscale", "influence", "crf")
ROWS = ("baseline", "+IG", "+MS", "+Inf", "+CRF")


def row_configs(cfg: TrainConfig) -> dict:
    """Each row switches on one more component than its predecessor."""
    out = {}
    for i, name in enumerate(ROWS):
        out[name] = cfg.with_(**{t: j < i for j, t in enumerate(TOGGLES)})
    return out


def _training_key(cfg: TrainConfig) -> str:
    # the CRF flag only changes post-processing, so rows differing in it share a checkpoint
    return json.dumps(cfg.with_(crf=False).to_dict(), sort_keys=True)


@dataclass
class AblationTable:
    rows: tuple
    seeds: tuple
    miou: dict  # row -> list over seeds
    reports: dict = field(default_factory=dict)  # (row, seed) -> EvalReport
    seconds: float = 0.0

    def mean(self, row: str) -> float:
        return float(np.mean(self.miou[row]))

    def wins(self, better: str, worse: str, strict: bool = True) -> list[bool]:
        a, b = self.miou[better], self.miou[worse]
        return [x > y if strict else x >= y for x, y in zip(a, b)]

    def monotone(self) -> dict:
        """Per adjacent pair, whether each row is >= its predecessor on every seed."""
        return {f"{lo} -> {hi}": all(self.wins(hi, lo, strict=False)) for lo, hi in zip(self.rows, self.rows[1:])}

    def format(self) -> str:
        head = "row".ljust(10) + "".join(f"seed {s}".rjust(10) for s in self.seeds) + "mean".rjust(10)
        lines = [head]
        for r in self.rows:
            lines.append(r.ljust(10) + "".join(f"{v:10.4f}" for v in self.miou[r]) + f"{self.mean(r):10.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "seeds": list(self.seeds), "miou": self.miou,
                "mean": {r: self.mean(r) for r in self.rows}, "seconds": self.seconds,
                "monotone": self.monotone()}


def ablate(cfg: TrainConfig = TrainConfig(), data_spec: SyntheticDatasetSpec = SyntheticDatasetSpec(),
           seeds: Sequence[int] = (0, 1, 2, 3, 4), rows: Sequence[str] = ROWS,
           progress: Optional[Callable[[str], None]] = None) -> AblationTable:
    """Train and evaluate every row for every seed; each seed fixes both data and model init."""
    start = time.perf_counter()
    configs = row_configs(cfg)
    miou = {r: [] for r in rows}
    reports: dict = {}
    for seed in seeds:
        data = gen_dataset(data_spec.with_seed(seed))
        checkpoints: dict = {}
        for r in rows:
            rc = configs[r].with_(seed=seed)
            key = _training_key(rc)
            if key not in checkpoints:
                checkpoints[key] = train(rc, data).checkpoint
            report: EvalReport = evaluate_checkpoint(checkpoints[key], data, rc)
            miou[r].append(report.mean_iou)
            reports[(r, seed)] = report
            msg = f"seed {seed} {r}: mIoU {report.mean_iou:.4f}"
            log.info(msg)
            if progress:
                progress(msg)
    return AblationTable(tuple(rows), tuple(seeds), miou, reports, time.perf_counter() - start)
