"""Command-line entry point: ``pert generate | train | erase | eval``.

Exit codes: 0 success, 1 validation error, 2 IO error.
Every command writes ``run_manifest.json`` into its output directory.
Set ``PERT_DETERMINISTIC=1`` to force deterministic kernels and one thread.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import PertError

log = logging.getLogger("pert")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
ABLATIONS = ("region_ms", "rg_loss", "ssim_loss", "vgg_loss")

TRAIN_DEFAULTS = {
    "stages": 3,
    "epochs": 30,
    "batch_size": 8,
    "lr": 1e-3,
    "seed": 0,
    "base_channels": 32,
    "eval_every": 1,
    "ablate": [],
    "val_fraction": 0.0,
    "pretrained_vgg": False,
    "no_augment": False,
    "max_steps": None,
}


class UsageError(PertError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def tree_hash(root: Path, exclude=("run_manifest.json",)) -> str:
    """sha256 over (relative path, file digest) of every file under ``root``."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_run_manifest(out: Path, command: str, config: dict, seed, started: str, outputs: list) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifact_hash": tree_hash(out),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def _deterministic_mode():
    if os.environ.get("PERT_DETERMINISTIC", "").lower() in ("1", "true", "yes"):
        import torch

        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def cmd_generate(args) -> int:
    from .datagen import build_dataset, manifest_hash

    if args.n < 0:
        raise UsageError("--n must be >= 0")
    if args.size <= 0 or args.size % 8:
        raise UsageError("--size must be a positive multiple of 8")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    out = Path(args.out)
    build_dataset(args.n, out, (args.size, args.size), seed=args.seed, background=args.background,
                  background_dir=args.background_dir)
    cfg = {"n": args.n, "size": args.size, "seed": args.seed, "background": args.background}
    write_run_manifest(out, "generate", cfg, args.seed, started, [out / "manifest.json"])
    print(manifest_hash(out))
    return EXIT_OK


def _resolve_train_config(args) -> dict:
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        path = Path(args.config)
        file_cfg = json.loads(path.read_text())
        unknown = set(file_cfg) - set(TRAIN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False and value != []:
            cfg[key] = value
    bad = set(cfg["ablate"]) - set(ABLATIONS)
    if bad:
        raise UsageError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")
    return cfg


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .losses import LossWeights, VGGFeatures
    from .model import PERT, ModelConfig
    from .trainer import TrainConfig, plot_history, summary, train

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    cfg = _resolve_train_config(args)
    data = Path(args.data)
    if not (data / "manifest.json").exists():
        raise FileNotFoundError(f"{data} has no manifest.json")
    samples = load_dataset(data)
    if not samples:
        raise UsageError("training set is empty")
    val = load_dataset(args.val_data) if args.val_data else None
    if val is None and cfg["val_fraction"] > 0:
        k = max(1, int(round(len(samples) * cfg["val_fraction"])))
        samples, val = samples[:-k], samples[-k:]
    H, W = samples[0].original.shape[:2]
    ablate = set(cfg["ablate"])
    model_cfg = ModelConfig(base_channels=cfg["base_channels"], num_stages=cfg["stages"], input_size=(H, W),
                            region_ms="region_ms" not in ablate, seed=cfg["seed"])
    train_cfg = TrainConfig(
        learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], num_stages=cfg["stages"],
        region_ms="region_ms" not in ablate, rg_loss="rg_loss" not in ablate,
        ssim_loss="ssim_loss" not in ablate, vgg_loss="vgg_loss" not in ablate,
        augment=not cfg["no_augment"], eval_every=cfg["eval_every"], seed=cfg["seed"],
        checkpoint_dir=str(args.out), max_steps=cfg["max_steps"],
    )
    weights = train_cfg.loss_weights(LossWeights())
    fx = VGGFeatures.pretrained(weights.feature_layer_indices) if cfg["pretrained_vgg"] else None
    model = PERT(model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train(model, samples, train_cfg, val_set=val, fx=fx, weights=weights)
    plot_history(history, out / "curves.png")
    info = summary(model, history)
    info["final_loss"] = history.steps[-1]["total"] if history.steps else None
    info["ablate"] = sorted(ablate)
    (out / "summary.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    print(json.dumps({"parameter_count": info["parameter_count"], "best_psnr": info["best_psnr"]}))
    outputs = [out / n for n in ("last.npz", "history.jsonl", "curves.png", "summary.json")]
    write_run_manifest(out, "train", cfg, cfg["seed"], started, outputs)
    return EXIT_OK


def _read_rgb(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255


def _save_rgb(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)).save(path)


def _save_mask(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), mode="L").save(path)


def cmd_erase(args) -> int:
    import torch
    import torch.nn.functional as F

    from .trainer import load_checkpoint

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    model = load_checkpoint(args.ckpt)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(src)
    files = [src] if src.is_file() else sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.binarize is not None and not 0 <= args.binarize < 1:
        raise UsageError("--binarize must be in [0, 1)")
    outputs = []
    for f in files:
        img = _read_rgb(f)
        H, W = img.shape[:2]
        x = torch.from_numpy(img).permute(2, 0, 1)[None]
        ph, pw = (-H) % 8, (-W) % 8
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        with torch.no_grad():
            stages = model(x, binarize=args.binarize)
        final = stages[-1].composited[0, :, :H, :W].permute(1, 2, 0).numpy()
        target = out / f"{f.stem}.png"
        _save_rgb(final, target)
        outputs.append(target)
        if args.dump_stages:
            sd = out / "stages" / f.stem
            sd.mkdir(parents=True, exist_ok=True)
            for s in stages:
                _save_rgb(s.composited[0, :, :H, :W].permute(1, 2, 0).numpy(), sd / f"stage{s.stage_index}_out.png")
                _save_mask(s.mask[0, 0, :H, :W].numpy(), sd / f"stage{s.stage_index}_mask.png")
    cfg = {"ckpt": str(args.ckpt), "input": str(src), "dump_stages": args.dump_stages, "binarize": args.binarize}
    write_run_manifest(out, "erase", cfg, None, started, outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    report_dir = Path(args.report)
    agg, _ = evaluate_dataset(args.pred, args.gt, report_dir, allow_missing=args.allow_missing,
                              threshold=args.threshold)
    print(json.dumps(agg.as_dict()))
    cfg = {"pred": str(args.pred), "gt": str(args.gt), "allow_missing": args.allow_missing, "threshold": args.threshold}
    write_run_manifest(report_dir, "eval", cfg, None, started,
                       [report_dir / "per_image.csv", report_dir / "aggregate.json"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pert", description="Multi-stage scene text eraser: data, training, inference, metrics")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic paired dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--background", default="mixed", choices=("mixed", "gradient", "noise", "image"))
    g.add_argument("--background-dir", default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON file; flags override it")
    t.add_argument("--stages", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    t.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    t.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    t.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    t.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    t.add_argument("--pretrained-vgg", dest="pretrained_vgg", action="store_true")
    t.add_argument("--no-augment", dest="no_augment", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("erase", help="erase text from images with a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-stages", action="store_true")
    e.add_argument("--binarize", type=float, default=None, help="threshold predicted masks (hard compositing)")
    e.set_defaults(func=cmd_erase)

    v = sub.add_parser("eval", help="Image-Eval metrics of predictions against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--allow-missing", action="store_true")
    v.add_argument("--threshold", type=float, default=20.0)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _deterministic_mode()
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PertError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
