"""End-to-end optimisation of the composite objective, early stopping and
model archives."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import Sentence
from .evaluation import MetricReport, evaluate, tune_tau
from .model import ASTEModel, ModelConfig

log = logging.getLogger(__name__)

ARCHIVE_FORMAT = "aste-model-archive"
ARCHIVE_VERSION = 1
LOSS_PARTS = ("aste", "span_sel", "ao", "crf")


class TrainingDivergedError(RuntimeError):
    pass


class ArchiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    min_epochs: int = 30
    max_epochs: int = 130
    grad_clip_norm: float = 0.8
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 10
    seed: int = 0
    auto_tau: bool = True
    knee: float = 0.02
    tau_margin: float = 1.0  # training threshold trails the tuned test one by this much

    def __post_init__(self):
        if not 0 <= self.min_epochs <= self.max_epochs:
            raise ValueError("need 0 <= min_epochs <= max_epochs")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.tau_margin < 0:
            raise ValueError("tau_margin must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")


@dataclass
class ModelArchive:
    model: ASTEModel
    train_config: TrainConfig
    history: list[dict] = field(default_factory=list)
    val_metrics: MetricReport | None = None
    phases: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    grad_norms: list[float] = field(default_factory=list)  # post-clip, per step; not persisted

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config

    @property
    def seed(self) -> int:
        return self.train_config.seed

    @property
    def backbone_id(self) -> str:
        return self.model.config.encoder.identifier

    def manifest(self) -> dict:
        return {
            "format": ARCHIVE_FORMAT,
            "version": ARCHIVE_VERSION,
            "backbone": self.backbone_id,
            "seed": self.seed,
            "model_config": self.model_config.to_dict(),
            "train_config": dataclasses.asdict(self.train_config),
            "history": self.history,
            "val_metrics": self.val_metrics.as_dict() if self.val_metrics else None,
            "phases": self.phases,
            "provenance": self.provenance,
        }


def save(archive: ModelArchive, path: str | Path) -> None:
    payload = {
        "manifest": json.dumps(archive.manifest(), sort_keys=True),
        "state_dict": {k: v.detach().cpu().clone() for k, v in archive.model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path, expected_backbone: str | None = None) -> ModelArchive:
    try:
        payload = torch.load(io.BytesIO(Path(path).read_bytes()), weights_only=True)
        manifest = json.loads(payload["manifest"])
        state = payload["state_dict"]
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise ArchiveError(f"corrupt model archive {path}: {exc}") from exc
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path} is not a model archive")
    if manifest.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(
            f"archive version {manifest.get('version')} unsupported (expected {ARCHIVE_VERSION})"
        )
    if expected_backbone is not None and manifest["backbone"] != expected_backbone:
        raise ArchiveError(
            f"archive backbone {manifest['backbone']!r} does not match {expected_backbone!r}"
        )
    config = ModelConfig.from_dict(manifest["model_config"])
    model = ASTEModel(config, seed=manifest["seed"])
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ArchiveError(f"archive parameters do not fit its config: {exc}") from exc
    model.eval()
    vm = manifest.get("val_metrics")
    return ModelArchive(
        model,
        TrainConfig(**manifest["train_config"]),
        manifest.get("history", []),
        MetricReport(**vm) if vm else None,
        manifest.get("phases", []),
        manifest.get("provenance", {}),
    )


def write_metric_log(path: str | Path, history: Sequence[dict]) -> None:
    cols = ["epoch", "phase", *LOSS_PARTS, "total", "tau", "val_precision", "val_recall", "val_f1"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([
                f"{row[c]:.6f}" if isinstance(row.get(c), float) else row.get(c, "") for c in cols
            ])


# ---------------------------------------------------------------------------


def composite_loss(batch: Sequence[Sentence], model: ASTEModel, tau: float | None = None):
    """Teacher-forced loss; returns (total, parts) with total == sum(parts)."""
    tau = model.config.pair.tau_train if tau is None else tau
    out = model(list(batch), tau=tau, teacher_forcing=True)
    return out.total, out.parts


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return math.sqrt(float(torch.stack(sq).sum())) if sq else 0.0


class Trainer:
    """Holds the model, optimizer and random state across training phases."""

    def __init__(self, model_config: ModelConfig, config: TrainConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.model = ASTEModel(model_config, seed=config.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.history: list[dict] = []
        self.phases: list[dict] = []
        self.grad_norms: list[float] = []

    def _epoch(self, data: Sequence[Sentence], epoch: int) -> dict:
        model, cfg = self.model, self.config
        model.train()
        order = torch.randperm(len(data), generator=self.generator).tolist()
        sums = dict.fromkeys(LOSS_PARTS, 0.0)
        n_batches = 0
        params = [p for p in model.parameters() if p.requires_grad]
        for k in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[k : k + cfg.batch_size]]
            total, parts = composite_loss(batch, model)
            if not torch.isfinite(total):
                detail = {n: float(v.detach()) for n, v in parts.items()}
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {n_batches}: {detail}")
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            self.grad_norms.append(_grad_norm(params))
            self.optimizer.step()
            for n in LOSS_PARTS:
                sums[n] += float(parts[n].detach())
            n_batches += 1
        row = {n: sums[n] / n_batches for n in LOSS_PARTS}
        row["total"] = sum(row[n] for n in LOSS_PARTS)
        return row

    def fit(self, data: Sequence[Sentence], dev: Sequence[Sentence], *, min_epochs: int,
            max_epochs: int, phase: str = "train", early_stopping: bool = True) -> MetricReport | None:
        """Run one phase; keeps the parameters with the best dev F1."""
        if not data:
            raise ValueError(f"empty training split for phase {phase!r}")
        if not dev:
            raise ValueError("empty validation split")
        start = len(self.history)
        best_f1, best_state, best_report, since_best = -1.0, None, None, 0
        best_tau = (self.model.config.pair.tau_test, self.model.config.pair.tau_train)
        for e in range(max_epochs):
            row = self._epoch(data, len(self.history))
            if self.config.auto_tau:
                self.tune_tau(dev)
            tau = self.model.config.pair.tau_test
            report = evaluate(self.model, dev)
            row.update(epoch=len(self.history), phase=phase, tau=tau, val_precision=report.precision,
                       val_recall=report.recall, val_f1=report.f1)
            self.history.append(row)
            log.info("%s epoch %d total %.4f val F1 %.4f", phase, row["epoch"], row["total"], report.f1)
            if report.f1 > best_f1:
                best_f1, best_report, since_best = report.f1, report, 0
                best_state = copy.deepcopy(self.model.state_dict())
                best_tau = (self.model.config.pair.tau_test, self.model.config.pair.tau_train)
            else:
                since_best += 1
            if early_stopping and e + 1 >= min_epochs and since_best >= self.config.patience:
                break
        if best_state is not None:
            self.model.load_state_dict(best_state)
            self._set_tau(*best_tau)
        self.phases.append({"phase": phase, "first_epoch": start, "last_epoch": len(self.history) - 1})
        return best_report

    def _set_tau(self, tau_test: float, tau_train: float) -> None:
        pair_cfg = dataclasses.replace(self.model.config.pair, tau_train=tau_train, tau_test=tau_test)
        self.model.config = dataclasses.replace(self.model.config, pair=pair_cfg)

    def tune_tau(self, dev: Sequence[Sentence]) -> float:
        """Set the test threshold from the dev pair-layer curve; the training
        threshold follows it at ``tau_margin`` below."""
        tau, _ = tune_tau(self.model, dev, knee=self.config.knee)
        self._set_tau(tau, tau - self.config.tau_margin)
        return tau

    def archive(self, dev: Sequence[Sentence]) -> ModelArchive:
        self.model.eval()
        return ModelArchive(self.model, self.config, list(self.history), evaluate(self.model, dev),
                            list(self.phases), grad_norms=list(self.grad_norms))


def train(train_split: Sequence[Sentence], dev_split: Sequence[Sentence],
          config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig()) -> ModelArchive:
    trainer = Trainer(model_config, config)
    trainer.fit(train_split, dev_split, min_epochs=config.min_epochs, max_epochs=config.max_epochs)
    return trainer.archive(dev_split)
