"""Desk-scale end-to-end run: data, baseline, refiner, threshold sweep, evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..nn.optim import TrainConfig
from ..refiner import DESK_CHANNELS, RefinerConfig
from .evaluate import EvalReport, evaluate
from .synth import SynthSpec, load_split, synth_generate
from .train import cache_baseline_logits, select_from_logits, train_baseline, train_refiner

log = logging.getLogger(__name__)

ALPHA_GRID = (0.1, 0.3, 0.6, 0.8)
REPORT_MODES = ("baseline", "gated", "direct", "entropy", "oracle")


def _train_cfg(d):
    return d if isinstance(d, TrainConfig) else TrainConfig(**d)


@dataclass
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    baseline_channels: tuple = DESK_CHANNELS
    refiner_channels: tuple = DESK_CHANNELS
    blocks: int = 1
    baseline_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=2e-3, epochs=6, batch_size=4))
    refiner_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(lr=2e-3, epochs=3, batch_size=4))
    crop: tuple | None = (32, 64)
    hidden: int = 64
    alphas: tuple = ALPHA_GRID
    density_budget: float = 0.2
    tolerance: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthSpec.from_dict(self.synth)
        self.baseline_train = _train_cfg(self.baseline_train)
        self.refiner_train = _train_cfg(self.refiner_train)
        self.baseline_channels = tuple(self.baseline_channels)
        self.refiner_channels = tuple(self.refiner_channels)
        self.alphas = tuple(sorted(float(a) for a in self.alphas))
        if self.crop is not None:
            self.crop = tuple(self.crop)
        if not self.alphas:
            raise ValueError("need at least one alpha")

    def arch(self, channels) -> RefinerConfig:
        return RefinerConfig(channels=channels, num_classes=self.synth.num_classes,
                             enc_blocks=self.blocks, dec_blocks=self.blocks)

    def seeded(self):
        """Training configs with seeds derived from the experiment seed."""
        b = TrainConfig(**dict(self.baseline_train.to_dict(), seed=self.seed))
        r = TrainConfig(**dict(self.refiner_train.to_dict(), seed=self.seed + 1))
        return b, r

    def to_dict(self):
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def choose_alpha(sweep: list[dict], tolerance: float) -> float:
    """Cheapest setting (fewest MACs) within ``tolerance`` mIoU points of the best."""
    best = max(s["miou"] for s in sweep)
    ok = [s for s in sweep if 100 * (best - s["miou"]) <= tolerance + 1e-12]
    return min(ok, key=lambda s: (s["macs"], -s["alpha"]))["alpha"]


@dataclass
class ExperimentResult:
    config: dict
    densities: dict
    train_alpha: float
    sweep: list
    alpha: float
    reports: dict
    timings: dict

    def report(self) -> dict:
        """Everything deterministic: no wall-clock fields."""
        return {
            "config": self.config,
            "densities": self.densities,
            "train_alpha": self.train_alpha,
            "sweep": self.sweep,
            "alpha": self.alpha,
            "reports": {k: r.to_dict(timings=False) for k, r in self.reports.items()},
        }

    def canonical(self) -> str:
        return json.dumps(self.report(), sort_keys=True, indent=1) + "\n"

    def gains(self) -> dict:
        r = self.reports
        return {
            "refined_minus_baseline": 100 * (r["gated"].miou - r["baseline"].miou),
            "density": r["gated"].density,
            "mac_ratio": r["gated"].macs["total"] / r["gated"].macs["dense_full"],
            "gated_minus_direct": 100 * (r["gated"].miou - r["direct"].miou),
            "oracle_minus_gated": 100 * (r["oracle"].miou - r["gated"].miou),
        }


def run_experiment(cfg: ExperimentConfig, work_dir) -> ExperimentResult:
    """Run every stage, writing data, checkpoints and reports under ``work_dir``."""
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    clock = {}
    t0 = time.perf_counter()
    synth_generate(cfg.synth, work / "data")
    train, val = load_split(work / "data", "train"), load_split(work / "data", "val")
    clock["data"] = time.perf_counter() - t0

    base_cfg, ref_cfg = cfg.seeded()
    t = time.perf_counter()
    model, base_log = train_baseline(train, cfg.arch(cfg.baseline_channels), base_cfg, crop=cfg.crop)
    model.save(work / "baseline.srck")
    clock["train_baseline"] = time.perf_counter() - t

    # selection depends only on the frozen baseline, so densities are known up front
    val_logits = cache_baseline_logits(model, val.images)
    densities = {str(a): float(np.mean([select_from_logits(lg, a, model.factor).mean()
                                        for lg in val_logits])) for a in cfg.alphas}
    admissible = [a for a in cfg.alphas if densities[str(a)] <= cfg.density_budget]
    if not admissible:
        admissible = [cfg.alphas[-1]]
        log.warning("no alpha meets the density budget; using %s", admissible[0])
    train_alpha = admissible[0]
    log.info("densities %s; training refiner at alpha %s", densities, train_alpha)

    t = time.perf_counter()
    model, ref_log = train_refiner(train, model, train_alpha, cfg.arch(cfg.refiner_channels),
                                   ref_cfg, hidden=cfg.hidden)
    clock["train_refiner"] = time.perf_counter() - t

    t = time.perf_counter()
    sweep = []
    for a in admissible:
        r = evaluate(val, model, "gated", a, low_logits=val_logits)
        sweep.append({"alpha": a, "density": r.density, "recall": r.recall,
                      "miou": r.miou, "macs": r.macs["total"]})
    alpha = choose_alpha(sweep, cfg.tolerance)
    model.alpha = alpha
    model.save(work / "refiner.srck")
    clock["sweep"] = time.perf_counter() - t

    t = time.perf_counter()
    reports: dict[str, EvalReport] = {m: evaluate(val, model, m, alpha, low_logits=val_logits)
                                      for m in REPORT_MODES}
    clock["evaluate"] = time.perf_counter() - t
    clock["total"] = time.perf_counter() - t0

    result = ExperimentResult(cfg.to_dict(), densities, train_alpha, sweep, alpha, reports,
                              {"stages": clock, "per_image": {k: r.timings for k, r in reports.items()}})
    (work / "report.json").write_text(result.canonical())
    (work / "timings.json").write_text(json.dumps(result.timings, indent=1, sort_keys=True) + "\n")
    (work / "train_log.json").write_text(json.dumps(
        {"baseline": base_log.to_dict(), "refiner": ref_log.to_dict()}, sort_keys=True) + "\n")
    return result
