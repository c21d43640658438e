"""Optimization loop and the ablation harness."""

from __future__ import annotations

import logging
import math
import pickle
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .assignment import CollisionStats, distance_stats
from .geometry import ConfigError, elementwise_iou
from .losses import LossConfig, LossReport, NonFiniteLossError
from .metrics import MetricsReport, evaluate
from .model import MATRModel, ModelConfig
from .rollout import MODES, forward_clip, rollout_loss
from .synthdata import SequenceClip, truth_as_mot_rows
from .tracker import TrackerConfig, run as run_tracker

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    clip_len: int = 5
    max_stride: int = 4
    drop_prob: float = 0.1
    batch_clips: int = 3  # clips averaged into one optimizer step
    seed: int = 0
    mode: str = "matr"

    def validate(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode in ("matr", "klf", "qim_like") and self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2 for modes that propagate track queries")
        if self.batch_clips < 1:
            raise ConfigError("batch_clips must be >= 1")
        if self.max_stride < 1 or self.clip_len < 1:
            raise ConfigError("clip_len and max_stride must be positive")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError("drop_prob must be in [0, 1)")


@dataclass
class TrainResult:
    model: MATRModel
    log: list[LossReport]
    grad_norms: list[float] = field(default_factory=list)  # before clipping
    clipped_norms: list[float] = field(default_factory=list)  # after clipping

    def loss_csv(self) -> str:
        rows = [LossReport.CSV_HEADER] + [r.csv_row(i) for i, r in enumerate(self.log)]
        return "\n".join(rows) + "\n"


def sample_clip(dataset: Sequence[SequenceClip], clip_len: int, max_stride: int,
                rng: np.random.Generator) -> SequenceClip:
    seq = dataset[int(rng.integers(len(dataset)))]
    stride = int(rng.integers(1, max_stride + 1))
    # shorter sequences fall back to the largest stride that fits
    while stride > 1 and (clip_len - 1) * stride >= seq.length:
        stride -= 1
    span = (clip_len - 1) * stride
    if span >= seq.length:
        raise ConfigError(f"sequence {seq.name} is shorter than clip_len={clip_len}")
    start = int(rng.integers(0, seq.length - span))
    return seq.subclip(range(start, start + span + 1, stride))


def _dump_failure(path: Path, step: int, clip: SequenceClip, model: MATRModel, err: Exception):
    path.mkdir(parents=True, exist_ok=True)
    with open(path / f"nonfinite_step{step}.pkl", "wb") as fh:
        pickle.dump({"step": step, "frames": clip.frames, "truth": clip.truth,
                     "state": {k: v.numpy() for k, v in model.state_dict().items()},
                     "error": str(err)}, fh)


def _mean_report(batch: list[LossReport]) -> LossReport:
    if len(batch) == 1:
        return batch[0]
    mean = lambda key: float(np.mean([getattr(r, key) for r in batch]))  # noqa: E731
    return LossReport(mean("total"), mean("traj"), mean("cls"), mean("box_l1"), mean("box_giou"),
                      sum((r.per_frame for r in batch), []), batch[0].traj_weight)


def _grad_norm(model: MATRModel) -> float:
    grads = [p.grad.detach().double().norm() for p in model.parameters() if p.grad is not None]
    return float(torch.stack(grads).norm()) if grads else 0.0


def train(model: MATRModel, dataset: Sequence[SequenceClip], config: TrainConfig,
          loss_config: LossConfig | None = None, failure_dir: str | Path | None = None,
          progress_every: int = 0) -> TrainResult:
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    loss_config = loss_config or LossConfig()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay, foreach=True)
    model.train()
    reports, norms, clipped = [], [], []
    for step in range(config.steps):
        opt.zero_grad(set_to_none=True)
        batch = []
        for _ in range(config.batch_clips):
            clip = sample_clip(dataset, config.clip_len, config.max_stride, rng)
            try:
                rollout = forward_clip(model, clip, config.mode, True, rng, config.drop_prob)
                report = rollout_loss(rollout, loss_config)
                (report.tensor / config.batch_clips).backward()
            except (NonFiniteLossError, RuntimeError) as err:
                if failure_dir is not None:
                    _dump_failure(Path(failure_dir), step, clip, model, err)
                raise NonFiniteLossError(f"step {step}: {err}") from err
            report.tensor = None
            batch.append(report)
        try:
            total_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm,
                                                              error_if_nonfinite=True))
        except RuntimeError as err:
            if failure_dir is not None:
                _dump_failure(Path(failure_dir), step, clip, model, err)
            raise NonFiniteLossError(f"step {step}: {err}") from err
        clipped.append(_grad_norm(model))
        opt.step()
        reports.append(_mean_report(batch))
        norms.append(total_norm)
        if progress_every and (step + 1) % progress_every == 0:
            recent = np.mean([r.total for r in reports[-progress_every:]])
            log.info("mode=%s step=%d loss=%.4f", config.mode, step + 1, recent)
    model.eval()
    return TrainResult(model, reports, norms, clipped)


# --- evaluation and the ablation harness --------------------------------------

ABLATION_COLUMNS = ("hota", "deta", "assa", "mota", "idf1", "mean_distance", "fraction_at_one")


def collision_eval(model: MATRModel, dataset: Sequence[SequenceClip], mode: str,
                   clips: int = 50, clip_len: int = 5, max_stride: int = 4,
                   seed: int = 0) -> CollisionStats:
    """Distance (1 - IoU) between track queries entering the decoder and their truth.

    Clips are sampled with a fixed generator and rolled out in eval mode (no
    dropout), so every mode is measured on the same frames.
    """
    rng = np.random.default_rng(seed)
    distances = []
    with torch.no_grad():
        for _ in range(clips):
            clip = sample_clip(dataset, clip_len, max_stride, rng)
            preds, truth = forward_clip(model, clip, mode, False, 0, 0.0).collision_pairs()
            if len(preds):
                distances.append(1.0 - elementwise_iou(preds.astype(np.float64), truth))
    return distance_stats(np.concatenate(distances) if distances else [])


def tracking_eval(model: MATRModel, dataset: Sequence[SequenceClip],
                  tracker_config: TrackerConfig) -> MetricsReport:
    from .metrics import combine

    reports = []
    with torch.no_grad():
        for seq in dataset:
            emissions = run_tracker(list(seq.frames), model, tracker_config)
            reports.append(evaluate(truth_as_mot_rows(seq), emissions))
    return combine(reports)


@dataclass
class AblationRow:
    mode: str
    seed: int | None  # None marks the per-mode mean
    values: dict[str, float]
    metrics: MetricsReport | None = None
    collision: CollisionStats | None = None


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def seed_rows(self, mode: str) -> list[AblationRow]:
        return [r for r in self.rows if r.mode == mode and r.seed is not None]

    def mean_row(self, mode: str) -> AblationRow:
        return next(r for r in self.rows if r.mode == mode and r.seed is None)

    def value(self, mode: str, seed: int, column: str) -> float:
        return next(r.values[column] for r in self.seed_rows(mode) if r.seed == seed)

    def to_csv(self) -> str:
        lines = ["mode,seed," + ",".join(ABLATION_COLUMNS)]
        for r in self.rows:
            seed = "mean" if r.seed is None else str(r.seed)
            lines.append(f"{r.mode},{seed}," + ",".join(f"{r.values[c]:.6f}" for c in ABLATION_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["mode", "seed", *ABLATION_COLUMNS]
        body = [[r.mode, "mean" if r.seed is None else str(r.seed),
                 *(f"{r.values[c]:.4f}" for c in ABLATION_COLUMNS)] for r in self.rows]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(v.rjust(w) for v, w in zip(row, widths))  # noqa: E731
        return "\n".join([fmt(header), *(fmt(row) for row in body)]) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        cols = lines[0].split(",")[2:]
        rows = []
        for ln in lines[1:]:
            mode, seed, *vals = ln.split(",")
            rows.append(AblationRow(mode, None if seed == "mean" else int(seed),
                                    dict(zip(cols, map(float, vals)))))
        return cls(rows)


def _row_values(metrics: MetricsReport, collision: CollisionStats) -> dict[str, float]:
    nan = float("nan")
    return {"hota": metrics.hota, "deta": metrics.deta, "assa": metrics.assa,
            "mota": metrics.mota, "idf1": metrics.idf1,
            "mean_distance": nan if collision.mean_distance is None else collision.mean_distance,
            "fraction_at_one": nan if collision.fraction_at_one is None else collision.fraction_at_one}


def ablation_run(train_set: Sequence[SequenceClip], eval_set: Sequence[SequenceClip],
                 modes: Sequence[str], seeds: Sequence[int],
                 train_config: TrainConfig | None = None,
                 model_config: ModelConfig | None = None,
                 loss_config: LossConfig | None = None,
                 tracker_config: TrackerConfig | None = None,
                 collision_clips: int = 200,
                 checkpoint_dir: str | Path | None = None) -> AblationTable:
    """Train every (mode, seed) pair on ``train_set`` and score it on ``eval_set``.

    With ``checkpoint_dir`` set, each trained model is saved as
    ``{mode}_seed{seed}.ckpt`` and an existing checkpoint whose recorded
    training settings match is loaded instead of retrained.
    """
    from .model import load_checkpoint, save_checkpoint

    base_train = train_config or TrainConfig()
    base_model = model_config or ModelConfig()
    base_tracker = tracker_config or TrackerConfig()
    rows = []
    for mode in modes:
        per_seed = []
        for seed in seeds:
            tc = TrainConfig(**{**asdict(base_train), "mode": mode, "seed": seed})
            mc = ModelConfig(**{**asdict(base_model), "seed": seed})
            tag = ";".join(f"{k}:{v}" for k, v in sorted(asdict(tc).items()))
            ckpt = Path(checkpoint_dir) / f"{mode}_seed{seed}.ckpt" if checkpoint_dir else None
            model = None
            if ckpt is not None and ckpt.exists():
                with zipfile.ZipFile(ckpt) as zf:
                    meta = zf.read("meta.txt").decode() if "meta.txt" in zf.namelist() else ""
                if f"train={tag}\n" in meta and load_checkpoint(ckpt).config == mc:
                    model = load_checkpoint(ckpt)
                    model.eval()
                    log.info("reusing %s", ckpt)
            if model is None:
                model = MATRModel(mc)
                train(model, train_set, tc, loss_config, progress_every=500)
                if ckpt is not None:
                    ckpt.parent.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(model, ckpt, {"train": tag})
            trk = TrackerConfig(**{**asdict(base_tracker), "mode": mode})
            metrics = tracking_eval(model, eval_set, trk)
            collision = collision_eval(model, eval_set, mode, collision_clips, tc.clip_len,
                                       tc.max_stride, seed=seed)
            row = AblationRow(mode, seed, _row_values(metrics, collision), metrics, collision)
            log.info("mode=%s seed=%d %s", mode, seed,
                     " ".join(f"{k}={v:.4f}" for k, v in row.values.items()))
            per_seed.append(row)
            rows.append(row)
        mean = {c: float(np.mean([r.values[c] for r in per_seed])) for c in ABLATION_COLUMNS}
        rows.append(AblationRow(mode, None, mean))
    return AblationTable(rows)
