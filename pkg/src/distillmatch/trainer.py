"""Training loop: AdamW with decoupled weight decay, global gradient-norm
clipping, per-step JSON-line metrics, and deterministic checkpointing.

Checkpoints are directories of DMT1 tensors plus a manifest; under a fixed
seed and dataset the written bytes are identical across runs.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline, tensorio
from . import tensor as T
from .feature_nets import ModelConfig, StudentConfig
from .matcher import MatchThresholds
from .supervision import CoarseLossWeights, GroundTruth, LossWeights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 6e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 1
    loss: LossWeights = field(default_factory=LossWeights)
    coarse_loss: CoarseLossWeights = field(default_factory=CoarseLossWeights)
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64)
                  for k, p in params.items()}

    def step(self):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - c.beta1 ** t
        bias2 = 1.0 - c.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            update = m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * p.data
            p.data = (p.data.astype(np.float64)
                      - c.lr * update).astype(np.float32)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_gradients(params, max_norm: float) -> float:
    """Global L2-norm clipping in place; returns the pre-clip norm."""
    sq = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def _diverged_diagnostics(model, step):
    bad = []
    for name, p in model.named_parameters().items():
        if not np.isfinite(p.data).all():
            bad.append(name)
        elif p.grad is not None and not np.isfinite(p.grad).all():
            bad.append(name + ".grad")
    return (f"non-finite loss at step {step}; "
            f"affected tensors: {bad[:8] or 'none (loss only)'}")


def train(model: pipeline.DistillMatchModel, pairs, cfg: TrainConfig,
          out_dir, metrics_path=None):
    """Run the loop over a list of synthetic pairs (cycled), checkpointing
    at the end. Returns the per-step metric dicts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(metrics_path or out_dir / "metrics.jsonl")
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"train": _train_config_dict(cfg),
                   "model": _model_config_dict(model.cfg)},
                  fh, indent=1, sort_keys=True)
    params = model.named_parameters()
    opt = AdamW(params, cfg)
    teacher_params = model.teacher.net.named_parameters()
    history = []
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))
    t_start = time.time()
    with open(metrics_path, "w") as mfh:
        for step in range(cfg.steps):
            rec = pairs[order[step % len(pairs)]]
            if step % len(pairs) == len(pairs) - 1:
                order = rng.permutation(len(pairs))
            pair = pipeline.pair_from_arrays(rec.img_vis, rec.img_pir)
            opt.zero_grad()
            out = model.forward_train(pair, rec.gt, cfg.thresholds,
                                      cfg.loss, cfg.coarse_loss)
            if not np.isfinite(out.total.data):
                raise TrainingDiverged(_diverged_diagnostics(model, step))
            T.backward(out.total)
            for name, p in teacher_params.items():
                if p.grad is not None:
                    raise AssertionError(
                        f"frozen teacher received gradient: {name}")
            grad_norm = clip_gradients(params.values(), cfg.clip_norm)
            opt.step()
            # no wall-clock fields here: metrics.jsonl must be
            # byte-identical across runs with the same seed
            metric = {"step": step, "grad_norm": round(grad_norm, 6),
                      "n_coarse": len(out.match.coarse),
                      "n_gt": len(out.gt_assignment.pairs),
                      "modality_correct": out.modality_correct}
            metric.update({f"loss_{k}": round(v, 6)
                           for k, v in out.parts.items()})
            history.append(metric)
            if step % cfg.log_every == 0:
                mfh.write(json.dumps(metric, sort_keys=True) + "\n")
                mfh.flush()
                log.info("step %d total %.4f coarse %d/%d elapsed %.1fs",
                         step, out.parts["total"], metric["n_coarse"],
                         metric["n_gt"], time.time() - t_start)
    save_model(out_dir / "checkpoint", model, cfg)
    return history


def save_model(directory, model: pipeline.DistillMatchModel,
               train_cfg: TrainConfig | None = None):
    extra = {"model_config": _model_config_dict(model.cfg)}
    if train_cfg is not None:
        extra["train_config"] = _train_config_dict(train_cfg)
    tensorio.save_checkpoint(directory, model.named_parameters(), extra)


def load_model(directory) -> pipeline.DistillMatchModel:
    manifest = tensorio.load_manifest(directory)
    raw = dict(manifest.get("model_config", {}))
    student = StudentConfig(**raw.pop("student", {}))
    cfg = ModelConfig(student=student, **raw)
    model = pipeline.DistillMatchModel(cfg, seed=0)
    model.load_state(tensorio.load_checkpoint(directory))
    return model


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    return d


def _train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
