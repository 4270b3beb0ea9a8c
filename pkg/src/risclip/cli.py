"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad flags, configs, files,
preconditions), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .backbone import TokenBatch, Vocabulary, split_words, tokenize
from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, SyntheticSpec, from_dict, load_run_config
from .data.manifest import load_samples, read_image, resize_image, resize_mask, write_mask_png
from .data.synthetic import generate_synthetic
from .errors import ConfigError, RisclipError, ValidationError
from .model import RISCLIP
from .objectives import aggregate_metrics, metrics_report_json
from .training import StageTrainer, TrainState, evaluate_patch, evaluate_pixel, predict_masks, tokenize_all
from .visualize import render_overlay, save_overlay

log = logging.getLogger("risclip")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_vocab(cfg: RunConfig, manifest: Path) -> Vocabulary:
    if cfg.paths.vocab:
        words = json.loads(Path(cfg.paths.vocab).read_text(encoding="utf-8"))
    elif (manifest.parent / "vocab.json").is_file():
        words = json.loads((manifest.parent / "vocab.json").read_text(encoding="utf-8"))
    else:
        words = set()
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if line.strip():
                words.update(split_words(json.loads(line)["expression"]))
        words = sorted(words)
    vocab = Vocabulary(words)
    if len(vocab) > cfg.model.backbone.vocab_size:
        raise ConfigError(
            f"vocabulary has {len(vocab)} tokens but backbone.vocab_size is {cfg.model.backbone.vocab_size}"
        )
    return vocab


def _training_state(completed: list[int], trainer: Optional[StageTrainer]) -> dict:
    state = {"completed_stages": sorted(set(completed)), "in_progress": None}
    if trainer is not None:
        summary = trainer.state.summary()
        summary["optimizer_steps"] = trainer.optimizer_steps()
        summary["last_loss"] = trainer.history[-1]["loss"] if trainer.history else None
        state["last_stage"] = summary
        if not trainer.done:
            state["in_progress"] = summary
    return state


def _save(path: str, model: RISCLIP, cfg: RunConfig, vocab: Vocabulary, completed: list[int],
          trainer: Optional[StageTrainer]) -> None:
    extra = trainer.optimizer_tensors() if trainer is not None else None
    save_checkpoint(path, model, cfg, vocab, _training_state(completed, trainer), extra)


def _restore_trainer(trainer: StageTrainer, ckpt: LoadedCheckpoint) -> None:
    prog = ckpt.training_state["in_progress"]
    state = TrainState(stage=prog["stage"], step=prog["step"], best_metric=prog.get("best_metric"))
    trainer.restore(state, ckpt.extra_tensors, prog.get("optimizer_steps", {}))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    patch_grid = args.patch_grid
    if isinstance(raw, dict) and "data" in raw:
        cfg = from_dict(RunConfig, raw)
        cfg.validate()
        spec = cfg.data
        if patch_grid is None:
            patch_grid = cfg.model.backbone.grid_size
    else:
        spec = from_dict(SyntheticSpec, raw)
    ds = generate_synthetic(spec, args.out, patch_grid=patch_grid)
    print(f"wrote {len(ds.records)} samples to {ds.manifest}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.manifest:
        cfg.paths.train_manifest = args.manifest
    if not cfg.paths.train_manifest:
        raise ConfigError("no training manifest: set paths.train_manifest or pass --manifest")
    manifest = Path(cfg.paths.train_manifest)
    init_path = args.init or cfg.paths.init_checkpoint
    init = load_checkpoint(init_path) if init_path else None
    completed: list[int] = list(init.training_state.get("completed_stages", [])) if init else []
    in_progress = init.training_state.get("in_progress") if init else None

    if init is not None:
        if init.model.cfg != cfg.model:
            raise ConfigError(f"model config in {args.config} differs from the one stored in {init_path}")
        model, vocab = init.model, init.vocab
    else:
        vocab = _resolve_vocab(cfg, manifest)
        model = RISCLIP(cfg.model)

    stages = {"1": [1], "2": [2], "both": [1, 2]}[args.stage]
    if stages[0] == 2 and 1 not in completed:
        raise ValidationError(
            "stage 2 needs a checkpoint that finished stage 1; pass --init <stage-1 checkpoint>"
        )
    samples = load_samples(manifest, cfg.model.backbone.image_size)
    history = args.history or cfg.paths.history
    trainer = None
    for stage in stages:
        trainer = StageTrainer(model, samples, vocab, cfg, stage, history)
        if in_progress and in_progress["stage"] == stage:
            _restore_trainer(trainer, init)
            in_progress = None
        trainer.run(args.max_steps)
        if trainer.done:
            completed.append(stage)
        else:
            break
    _save(args.out, model, cfg, vocab, completed, trainer)
    last = trainer.history[-1] if trainer and trainer.history else None
    print(json.dumps({"checkpoint": args.out, "completed_stages": sorted(set(completed)), "last": last}))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    samples = load_samples(args.manifest, ck.model.cfg.backbone.image_size)
    if len(samples) == 0:
        raise ValidationError(f"manifest {args.manifest} has no samples")
    if args.level == "patch":
        acc = evaluate_patch(ck.model, samples, ck.vocab)
    else:
        acc = evaluate_pixel(ck.model, samples, ck.vocab)
    report = aggregate_metrics(acc)
    text = metrics_report_json(report)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model.eval()
    bb = model.cfg.backbone
    if not Path(args.image).is_file():
        raise ValidationError(f"image not found: {args.image}")
    image = read_image(args.image)
    h, w = image.shape[:2]
    x = torch.from_numpy(resize_image(image, bb.image_size))[None]
    tokens = TokenBatch.from_sequences([tokenize(args.text, ck.vocab, bb.context_length)])
    with torch.no_grad():
        _, pred = model.predict(x, tokens)
    mask = resize_mask(pred.mask[0].numpy(), h, w)
    write_mask_png(mask, args.out)
    print(json.dumps({"out": args.out, "size": [h, w], "foreground_pixels": int(mask.sum())}))
    return EXIT_OK


def cmd_visualize(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    model = ck.model.eval()
    samples = load_samples(args.manifest, model.cfg.backbone.image_size)
    n = len(samples) if args.limit is None else min(args.limit, len(samples))
    masks = predict_masks(model, samples, ck.vocab)
    tokens = tokenize_all([r.expression for r in samples.records], ck.vocab, model.cfg.backbone.context_length)
    out_dir = Path(args.out)
    for i in range(n):
        rec = samples.records[i]
        tb = TokenBatch(tokens.ids[i : i + 1], tokens.eos_index[i : i + 1], tokens.valid_mask[i : i + 1])
        with torch.no_grad():
            probs = model(torch.from_numpy(samples.images[i : i + 1]), tb).grounding.patch_probs[0].numpy()
        image = read_image(Path(args.manifest).parent / rec.image_path)
        pred = resize_mask(masks[i], *image.shape[:2])
        gt = rec.decode_mask()
        save_overlay(out_dir / f"{rec.sample_id}.png", render_overlay(image, pred, gt, probs))
    print(f"wrote {n} overlays to {out_dir}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    print(json.dumps(ck.manifest, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="risclip", description="Desk-scale referring image segmentation with a frozen dual encoder.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bitwise reproducible)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes corpus")
    g.add_argument("--spec", required=True, help="SyntheticSpec JSON, or a run config with a 'data' section")
    g.add_argument("--out", required=True)
    g.add_argument("--patch-grid", type=int, default=None, help="reject referents that vanish on this patch grid")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage 1, 2 or both")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--init", default=None, help="checkpoint to start from (required for --stage 2)")
    t.add_argument("--manifest", default=None, help="overrides paths.train_manifest")
    t.add_argument("--history", default=None, help="JSON-lines per-step history output")
    t.add_argument("--max-steps", type=int, default=None, help="stop each stage after this many steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", default=None)
    e.add_argument("--level", choices=("pixel", "patch"), default="pixel")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--text", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("visualize", help="write overlay PNGs")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--limit", type=int, default=None)
    v.set_defaults(func=cmd_visualize)

    i = sub.add_parser("inspect", help="dump a checkpoint manifest")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RisclipError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
