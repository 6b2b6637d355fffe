"""Training, validation and checkpointing.

One optimizer step per batch: all stages share ``model.block``, so a single
``loss.backward()`` accumulates every stage's gradient into the same weights.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .datagen import PairedSample, augment
from .errors import ConfigError
from .losses import LossWeights, VGGFeatures, total_loss
from .metrics import MetricsReport, aggregate, evaluate_pair, psnr
from .model import PERT, ModelConfig, parameter_count

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    num_stages: int = 3
    region_ms: bool = True
    rg_loss: bool = True
    ssim_loss: bool = True
    vgg_loss: bool = True
    augment: bool = True
    eval_every: int = 1
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")

    def loss_weights(self, base: Optional[LossWeights] = None) -> LossWeights:
        base = base or LossWeights()
        return LossWeights(**{**asdict(base), "rg_loss": self.rg_loss, "ssim_loss": self.ssim_loss,
                              "vgg_loss": self.vgg_loss})


@dataclass
class History:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    best_psnr: float = float("-inf")
    best_epoch: int = -1

    def losses(self) -> list[float]:
        return [r["total"] for r in self.steps]


def to_batch(samples: Sequence[PairedSample]):
    """Stack HWC numpy samples into NCHW float32 tensors."""

    def stack(key):
        arr = np.stack([getattr(s, key) for s in samples]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))

    return stack("original"), stack("gt"), stack("mask_gt")


def to_image(t: torch.Tensor) -> np.ndarray:
    """N x C x H x W tensor -> N x H x W x C float64 numpy array."""
    return t.detach().cpu().double().permute(0, 2, 3, 1).numpy()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def train(
    model: PERT,
    train_set: Sequence[PairedSample],
    cfg: TrainConfig,
    val_set: Optional[Sequence[PairedSample]] = None,
    fx: Optional[VGGFeatures] = None,
    weights: Optional[LossWeights] = None,
) -> History:
    """Train in place; returns per-step loss records and per-eval metrics.

    When ``cfg.checkpoint_dir`` is set, ``history.jsonl``, ``last.npz`` and
    the best-validation-PSNR ``best.npz`` are written there.
    """
    if model.cfg.num_stages != cfg.num_stages or model.cfg.region_ms != cfg.region_ms:
        raise ConfigError("model config disagrees with TrainConfig on num_stages/region_ms")
    if not train_set:
        raise ValueError("empty training set")
    w = cfg.loss_weights(weights)
    if fx is None and (w.rg_loss or w.vgg_loss):
        fx = VGGFeatures.random(w.feature_layer_indices)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        hist_fh = open(ckpt_dir / "history.jsonl", "w")
    else:
        hist_fh = None

    history = History()
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train_set))
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment(s, rng) for s in batch]
                original, gt, mask_gt = to_batch(batch)
                stages = model(original)
                loss, breakdown = total_loss(stages, gt, mask_gt, fx, w)
                if not torch.isfinite(loss):
                    _dump_nonfinite(ckpt_dir, epoch, step, breakdown, [s.id for s in batch])
                    raise FloatingPointError(f"non-finite loss at step {step}: {breakdown}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                record = {"epoch": epoch, "step": step, **breakdown}
                history.steps.append(record)
                if hist_fh:
                    hist_fh.write(json.dumps(record) + "\n")
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            if val_set and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                report, stage_psnr = validate(model, val_set)
                rec = {"epoch": epoch, "step": step, "kind": "eval", **report.as_dict(), "stage_psnr": stage_psnr}
                history.evals.append(rec)
                if hist_fh:
                    hist_fh.write(json.dumps(rec) + "\n")
                log.info("epoch %d  loss %.4f  val psnr %.3f", epoch, history.steps[-1]["total"], report.psnr)
                if report.psnr > history.best_psnr:
                    history.best_psnr, history.best_epoch = report.psnr, epoch
                    if ckpt_dir:
                        save_checkpoint(model, ckpt_dir / "best.npz", optimizer)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if hist_fh:
            hist_fh.close()
    if ckpt_dir:
        save_checkpoint(model, ckpt_dir / "last.npz", optimizer)
    model.eval()
    return history


def _dump_nonfinite(ckpt_dir, epoch, step, breakdown, ids):
    if ckpt_dir is None:
        return
    dump = {"epoch": epoch, "step": step, "breakdown": breakdown, "sample_ids": ids}
    (ckpt_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))


@torch.no_grad()
def predict_stages(model: PERT, samples: Sequence[PairedSample], batch_size: int = 16) -> list[np.ndarray]:
    """Composited outputs per stage, each N x H x W x 3 (inference mode)."""
    was_training = model.training
    model.eval()
    per_stage = None
    for start in range(0, len(samples), batch_size):
        original, _, _ = to_batch(samples[start : start + batch_size])
        outs = [to_image(s.composited) for s in model(original)]
        per_stage = outs if per_stage is None else [np.concatenate([a, b]) for a, b in zip(per_stage, outs)]
    model.train(was_training)
    return per_stage


def validate(model: PERT, samples: Sequence[PairedSample]) -> tuple[MetricsReport, list[float]]:
    """Six metrics on final outputs plus mean PSNR of every stage's output."""
    stages = predict_stages(model, samples)
    gts = [s.gt for s in samples]
    report = aggregate(evaluate_pair(out, gt) for out, gt in zip(stages[-1], gts))
    stage_psnr = [float(np.mean([psnr(o, g) for o, g in zip(outs, gts)])) for outs in stages]
    return report, stage_psnr


def per_image_stage_psnr(model: PERT, samples: Sequence[PairedSample]) -> np.ndarray:
    """N x T array of PSNR(stage output, gt)."""
    stages = predict_stages(model, samples)
    return np.array([[psnr(outs[i], samples[i].gt) for outs in stages] for i in range(len(samples))])


def save_checkpoint(model: PERT, path, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    """Single ``.npz`` archive: format version, config JSON, little-endian float32 params."""
    arrays = {
        "__format_version__": np.array(CHECKPOINT_VERSION, dtype="<i4"),
        "__config__": np.array(model.cfg.to_json()),
    }
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy().astype("<f4")
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                n = names[id(p)]
                arrays[f"optim/{n}/step"] = np.array(float(state["step"]), dtype="<f4")
                arrays[f"optim/{n}/exp_avg"] = state["exp_avg"].cpu().numpy().astype("<f4")
                arrays[f"optim/{n}/exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> PERT:
    """Rebuild the model; ``expected`` (if given) must match the stored config."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__format_version__"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {version}")
        cfg = ModelConfig.from_json(str(data["__config__"]))
        if expected is not None:
            mismatched = {k: (v, getattr(cfg, k)) for k, v in asdict(expected).items() if getattr(cfg, k) != v
                          and k not in ("num_stages", "region_ms", "seed")}
            if mismatched:
                raise ConfigError(f"checkpoint config mismatch (expected, stored): {mismatched}")
        model = PERT(cfg)
        state = model.state_dict()
        for name in state:
            key = f"param/{name}"
            if key not in data:
                raise ConfigError(f"checkpoint is missing parameter {name}")
            arr = data[key]
            if arr.shape != tuple(state[name].shape):
                raise ConfigError(f"parameter {name}: stored shape {arr.shape} != model shape {tuple(state[name].shape)}")
            state[name] = torch.from_numpy(arr.astype(np.float32))
        model.load_state_dict(state)
    model.eval()
    return model


def plot_history(history: History, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    by_epoch: dict = {}
    for r in history.steps:
        by_epoch.setdefault(r["epoch"], []).append(r)
    epochs = sorted(by_epoch)
    keys = [k for k in history.steps[0] if k not in ("epoch", "step")] if history.steps else []
    for k in keys:
        axes[0].plot(epochs, [np.mean([r[k] for r in by_epoch[e]]) for e in epochs], label=k)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    if history.evals:
        axes[1].plot([e["epoch"] for e in history.evals], [e["psnr"] for e in history.evals], marker="o")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def summary(model: PERT, history: History) -> dict:
    return {
        "parameter_count": parameter_count(model),
        "model_config": json.loads(model.cfg.to_json()),
        "best_psnr": history.best_psnr,
        "best_epoch": history.best_epoch,
        "steps": len(history.steps),
    }
