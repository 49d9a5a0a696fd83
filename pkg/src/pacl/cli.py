"""Command-line entry point: ``pacl <command> [options]``.

Every command reads and writes plain files so the stages compose without
hidden state: gen-data -> pretrain -> train-pacl -> {align-probe, eval-seg,
coherence, classify}.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

FORMATS = """\
file formats:
  dataset dir   images/NNNNNN.ppm (PPM, binary P6, 8-bit RGB), labels/NNNNNN.pgm (PGM, binary P5,
                class id per pixel, 255 = ignore), captions.tsv (index TAB caption, UTF-8),
                classes.txt (one class name per line, line index = class id), manifest.json
  checkpoint    .pacl container: b"PACL", u32 version, u32 entry count, entries of
                (u32 name length, UTF-8 name, u8 dtype tag 0=f32 1=f64 2=i64, u32 rank,
                u64 extents, little-endian data), trailing CRC-32 of everything before it
  config        TOML with [model] (+ [model.vision]), [train], [data], [infer]; unknown
                keys are rejected; the resolved config is echoed as config.toml into
                every --out directory
  outputs       metrics as JSON (stdout, and metrics.json under --out), curves and training
                history as CSV, masks as PGM (class id per pixel, 255 = background)

environment:
  PACL_SEED     overrides the seed of the loaded config (model, training and data)

invalid flag combinations:
  segment       exactly one of --image / --dataset
  eval-seg      exactly one of --model / --pred
  segment, eval-seg
                --upscale needs a stride that divides the training stride
"""


class CLIError(Exception):
    pass


def _load_config(path):
    from .config import RunConfig

    return RunConfig.load(path)


def _prepare_out(out, cfg) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.toml")
    return out


def _emit(metrics: dict, out: Path | None) -> None:
    from .diagnostics import write_json

    if out is not None:
        write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}")
    return p


def _dataset(path):
    from .data import read_dataset

    root = _existing(path, "dataset")
    if not (root / "manifest.json").exists():
        raise CLIError(f"{root} is not a dataset directory (no manifest.json)")
    return read_dataset(root)


def _classes(path, fallback: list[str]) -> list[str]:
    from .data import read_classes

    return read_classes(_existing(path, "class list")) if path else fallback


def _model(path):
    from .model import PACLModel

    return PACLModel.load(_existing(path, "checkpoint"))


def _bank(model, names, cfg):
    from .inference import build_class_bank

    return build_class_bank(names, model, cfg.infer.prompts)


def _with_scene(cfg, manifest):
    from .data import SceneSpec

    if manifest.get("spec"):
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, scene=SceneSpec(**manifest["spec"])))
    return cfg


def _training_pairs(cfg, pairs):
    from .data import augment_dataset

    if cfg.data.augment_prompts:
        pairs = augment_dataset(pairs, cfg.data.scene.lexicon(), seed=cfg.data.scene.seed, prompts=cfg.infer.prompts)
    return pairs


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args):
    from .config import ConfigError, RunConfig, read_toml, seed_from_env
    from .data import SceneSpec, generate_dataset, write_dataset

    cfg = RunConfig()
    if args.spec:
        doc = read_toml(_existing(args.spec, "spec"))
        if set(doc) & {"model", "train", "data", "infer"}:
            cfg = RunConfig.from_dict(doc)
        else:
            try:
                cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, scene=SceneSpec(**doc)))
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
    cfg = seed_from_env(cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    n = cfg.data.n if args.n is None else args.n
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, n=n))
    out = _prepare_out(args.out, cfg)
    pairs = generate_dataset(cfg.data.scene, n)
    write_dataset(out, pairs, cfg.data.scene)
    _emit({"count": n, "classes": cfg.data.scene.class_names, "seed": cfg.data.scene.seed}, None)


def cmd_pretrain(args):
    from .pipeline import pretrain

    cfg = _load_config(args.config)
    pairs, names, manifest = _dataset(args.data)
    cfg = _with_scene(cfg, manifest)
    out = _prepare_out(args.out, cfg)
    model, history = pretrain(cfg, _training_pairs(cfg, pairs), class_names=names)
    model.save(out / "model.pacl", {"phase": "clip_pretrain", "steps": len(history)})
    history.write_csv(out / "history.csv")
    _emit({"phase": "clip_pretrain", "steps": len(history), "final_loss": history.losses[-1] if len(history) else None}, out)


def cmd_train_pacl(args):
    from .numerics import state_hashes
    from .training import train_pacl

    cfg = _load_config(args.config)
    model = _model(args.towers)
    cfg = dataclasses.replace(cfg, model=model.config)
    pairs, _, manifest = _dataset(args.data)
    cfg = _with_scene(cfg, manifest)
    out = _prepare_out(args.out, cfg)
    towers = set(model.tower_state())
    before = {k: v for k, v in state_hashes(model).items() if k in towers}
    history = train_pacl(_training_pairs(cfg, pairs), model, cfg.train.for_phase("pacl"))
    after = {k: v for k, v in state_hashes(model).items() if k in towers}
    model.save(out / "model.pacl", {"phase": "pacl", "steps": len(history)})
    history.write_csv(out / "history.csv")
    _emit({
        "phase": "pacl",
        "steps": len(history),
        "final_loss": history.losses[-1] if len(history) else None,
        "towers_unchanged": before == after,
    }, out)


def _check_upscale(model, stride, upscale):
    if upscale and model.config.vision.train_stride % stride:
        raise CLIError(f"--upscale needs a stride dividing the training stride {model.config.vision.train_stride}")


def cmd_segment(args):
    from . import formats
    from .inference import segment

    if (args.image is None) == (args.dataset is None):
        raise CLIError("segment needs exactly one of --image or --dataset")
    cfg = _load_config(args.config)
    model = _model(args.model)
    stride = cfg.infer.stride if args.stride is None else args.stride
    _check_upscale(model, stride, args.upscale)
    thr = cfg.infer.background_entropy if args.bg_entropy is None else args.bg_entropy
    if args.image:
        images = [formats.load_ppm(_existing(args.image, "image"))]
        fallback, names = cfg.data.scene.class_names, ["mask"]
    else:
        pairs, fallback, _ = _dataset(args.dataset)
        images, names = [p.image for p in pairs], [f"{i:06d}" for i in range(len(pairs))]
    bank = _bank(model, _classes(args.classes, fallback), cfg)
    out = _prepare_out(args.out, dataclasses.replace(
        cfg, infer=dataclasses.replace(cfg.infer, stride=stride, background_entropy=thr), model=model.config))
    mask_dir = out if args.image else out / "masks"
    mask_dir.mkdir(exist_ok=True)
    scores = {}
    for name, img in zip(names, images):
        res = segment(model, img, bank, stride, thr, cfg.infer.softmax_first,
                      "upscale" if args.upscale else "interpolate")
        formats.save_pgm(mask_dir / f"{name}.pgm", res.mask_with_background())
        if args.dump_scores:
            scores[f"scores/{name}"] = res.scores.float()
    if args.dump_scores:
        formats.save_checkpoint(out / "scores.pacl", scores)
    (out / "classes.txt").write_text("".join(n + "\n" for n in bank.names), encoding="utf-8")
    _emit({"images": len(images), "stride": stride, "classes": bank.names}, out)


def cmd_eval_seg(args):
    from . import formats
    from .diagnostics import evaluate_segmentation, miou

    if (args.model is None) == (args.pred is None):
        raise CLIError("eval-seg needs exactly one of --model or --pred")
    cfg = _load_config(args.config)
    pairs, fallback, _ = _dataset(args.dataset)
    names = _classes(args.classes, fallback)
    stride = cfg.infer.stride if args.stride is None else args.stride
    thr = cfg.infer.background_entropy if args.bg_entropy is None else args.bg_entropy
    if args.pred:
        pred_dir = _existing(args.pred, "prediction directory")
        if (pred_dir / "masks").is_dir():
            pred_dir = pred_dir / "masks"
        preds = [formats.load_pgm(_existing(pred_dir / f"{i:06d}.pgm", "mask")) for i in range(len(pairs))]
        ious, m = miou(preds, [p.labels for p in pairs], len(names))
    else:
        model = _model(args.model)
        _check_upscale(model, stride, args.upscale)
        ious, m = evaluate_segmentation(model, pairs, _bank(model, names, cfg), stride, thr,
                                        method="upscale" if args.upscale else "interpolate")
    out = _prepare_out(args.out, cfg) if args.out else None
    _emit({"miou": m, "per_class_iou": dict(zip(names, ious)), "stride": stride, "images": len(pairs)}, out)


def cmd_align_probe(args):
    from .diagnostics import patch_alignment_accuracy

    cfg = _load_config(args.config)
    model = _model(args.model)
    pairs, fallback, _ = _dataset(args.dataset)
    acc = patch_alignment_accuracy(model, pairs, _bank(model, _classes(args.classes, fallback), cfg), args.mode)
    out = _prepare_out(args.out, cfg) if args.out else None
    _emit({"mode": args.mode, "accuracy": acc}, out)


def cmd_coherence(args):
    from .diagnostics import coherence_auroc

    cfg = _load_config(args.config)
    model = _model(args.towers)
    pairs, _, _ = _dataset(args.dataset)
    seed = args.seed if args.seed is not None else cfg.data.scene.seed
    n_pairs = None if args.pairs == 0 else args.pairs
    roc = coherence_auroc(model, pairs, n_pairs, seed)
    out = _prepare_out(args.out, cfg) if args.out else None
    if out is not None:
        roc.write_csv(out / "roc.csv")
    _emit({"auroc": roc.auroc, "pairs": roc.n_pairs, "seed": seed}, out)


def cmd_classify(args):
    from .diagnostics import classification_accuracy

    cfg = _load_config(args.config)
    model = _model(args.model)
    pairs, fallback, _ = _dataset(args.dataset)
    labelled = [p for p in pairs if p.classes]
    if not labelled:
        raise CLIError("classify needs images with at least one labelled object")
    acc = classification_accuracy(model, labelled, _bank(model, _classes(args.classes, fallback), cfg), args.mode)
    out = _prepare_out(args.out, cfg) if args.out else None
    _emit({"mode": args.mode, "accuracy": acc, "images": len(labelled)}, out)


def cmd_grad_check(args):
    from .gradcheck import grad_check_report

    report = grad_check_report(args.seed, args.tol, similarity=args.similarity)
    _emit(report, None)
    if not report["pass"]:
        raise CLIError(f"gradient check failed: max relative error {report['max_rel_err']:.3g} > {args.tol:g}")


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pacl",
        description="Patch-aligned contrastive learning on synthetic scenes.",
        epilog=FORMATS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        s = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.set_defaults(func=func)
        return s

    s = add("gen-data", cmd_gen_data, "generate a seeded synthetic dataset directory")
    s.add_argument("--spec", help="TOML scene spec (SceneSpec keys) or a full run config")
    s.add_argument("--n", type=int, help="number of scenes (default: [data] n)")
    s.add_argument("--seed", type=int, help="override the scene seed")
    s.add_argument("--out", required=True, help="output dataset directory")

    s = add("pretrain", cmd_pretrain, "phase A: CLS-level contrastive pretraining of both towers")
    s.add_argument("--config", help="run config TOML (defaults if omitted)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory (model.pacl, history.csv)")

    s = add("train-pacl", cmd_train_pacl, "phase B: train the patch embedder against frozen towers")
    s.add_argument("--config", help="run config TOML; [model] is taken from the checkpoint")
    s.add_argument("--towers", required=True, help="phase-A checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory (model.pacl, history.csv)")

    s = add("segment", cmd_segment, "zero-shot segmentation masks")
    s.add_argument("--config")
    s.add_argument("--model", required=True, help="phase-B checkpoint")
    s.add_argument("--image", help="single PPM image")
    s.add_argument("--dataset", help="dataset directory")
    s.add_argument("--classes", help="class list file (default: dataset classes.txt or config scene)")
    s.add_argument("--stride", type=int, help="patchifier stride (default: [infer] stride)")
    s.add_argument("--bg-entropy", type=float, help="flag pixels with entropy (nats) above this as 255")
    s.add_argument("--upscale", action="store_true", help="upscale the image instead of interpolating positions")
    s.add_argument("--dump-scores", action="store_true", help="also write per-pixel class scores to scores.pacl")
    s.add_argument("--out", required=True)

    s = add("eval-seg", cmd_eval_seg, "mIoU of predicted masks against dataset label maps")
    s.add_argument("--config")
    s.add_argument("--model", help="phase-B checkpoint to segment with")
    s.add_argument("--pred", help="directory of precomputed NNNNNN.pgm masks")
    s.add_argument("--dataset", required=True)
    s.add_argument("--classes")
    s.add_argument("--stride", type=int)
    s.add_argument("--bg-entropy", type=float)
    s.add_argument("--upscale", action="store_true")
    s.add_argument("--out")

    s = add("align-probe", cmd_align_probe, "patch-level classification accuracy before/after alignment")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--classes")
    s.add_argument("--mode", choices=("pre", "post"), required=True)
    s.add_argument("--out")

    s = add("coherence", cmd_coherence, "semantic-coherence ROC of raw vision patch tokens")
    s.add_argument("--config")
    s.add_argument("--towers", required=True, help="any checkpoint with a vision tower")
    s.add_argument("--dataset", required=True)
    s.add_argument("--pairs", type=int, default=10000, help="sampled patch pairs; 0 scores every pair")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (metrics.json, roc.csv)")

    s = add("classify", cmd_classify, "zero-shot image classification accuracy (first object's class)")
    s.add_argument("--config")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--classes")
    s.add_argument("--mode", choices=("pacl", "clip"), default="pacl")
    s.add_argument("--out")

    s = add("grad-check", cmd_grad_check, "autograd vs finite differences on the PACL loss (float64)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--similarity", choices=("dot", "cosine"), default="dot")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("pacl: error: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("pacl: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"pacl: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
