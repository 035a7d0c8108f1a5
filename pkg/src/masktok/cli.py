"""Command-line entry point.

Subcommands cover the full desk workflow: synthesize a mask corpus,
train, tokenize/detokenize single masks, sweep prefix-length curves, run
the prompt codec over stdin/stdout, and inspect checkpoint headers.
Diagnostics go to stderr; data goes to stdout or --out files. Exit code
0 means no error was reported.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import codec, evaluate, maskdata, trainer
from .checkpoint import CheckpointError, load_tensors, load_checkpoint
from .codec import CodecError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masktok", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mask dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=maskdata.CANONICAL_SIDE)
    p.add_argument("--splits", default="0.8,0.1,0.1", help="train,val,test fractions")

    p = sub.add_parser("train", help="run stage-1 training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="flat key=value file with train/model settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("tokenize", help="print the token sequence for a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("detokenize", help="reconstruct a mask from tokens")
    p.add_argument("--tokens", required=True, help="codec text, e.g. '<mt_start>mt_1 mt_2<mt_end>'")
    p.add_argument("--length", type=int, help="prefix length (default: all tokens)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--soft", action="store_true", help="write sigmoid probabilities instead of a binary mask")

    p = sub.add_parser("eval-curve", help="prefix-length reconstruction curve")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=maskdata.SPLITS)
    p.add_argument("--lengths", default="4,8,16,32")
    p.add_argument("--out", required=True)

    sub.add_parser("codec-encode", help="render JSON atoms from stdin to protocol text")
    sub.add_parser("codec-decode", help="parse protocol text from stdin to JSON atoms")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's config header")
    p.add_argument("--ckpt", required=True)
    return parser


def _atoms_to_json(atoms) -> list[dict]:
    out = []
    for atom in atoms:
        if isinstance(atom, codec.Text):
            out.append({"type": "text", "text": atom.text})
        elif isinstance(atom, codec.Ref):
            out.append({"type": "ref", "text": atom.text})
        elif isinstance(atom, codec.Box):
            out.append({"type": "box", "box": [atom.x1, atom.y1, atom.x2, atom.y2]})
        else:
            out.append({"type": "mask_tokens", "tokens": list(atom.tokens)})
    return out


def _atoms_from_json(data: list[dict]):
    atoms = []
    for item in data:
        kind = item.get("type")
        if kind == "text":
            atoms.append(codec.Text(item["text"]))
        elif kind == "ref":
            atoms.append(codec.Ref(item["text"]))
        elif kind == "box":
            atoms.append(codec.Box(*item["box"]))
        elif kind == "mask_tokens":
            atoms.append(codec.MaskTokens(tuple(item["tokens"])))
        else:
            raise CodecError(f"unknown atom type {kind!r}")
    return atoms


def _load_model(path: str):
    model, header, _ = load_checkpoint(path)
    model.eval()
    return model, header


def _cmd_synth(args) -> int:
    fractions = tuple(float(x) for x in args.splits.split(","))
    if len(fractions) != 3:
        raise ValueError("--splits must have three comma-separated fractions")
    specs = maskdata.mixed_specs(args.count, args.seed, side=args.side)
    manifest = maskdata.build_dataset(specs, args.out, splits=fractions)
    counts = {s: len(manifest.paths(s)) for s in maskdata.SPLITS}
    print(f"{Path(args.out) / 'manifest.tsv'}")
    print(f"wrote {len(manifest.entries)} masks ({counts})", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    train_cfg, model_cfg = trainer.parse_flat_config(text)
    if args.seed is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=args.seed)
    manifest = maskdata.DatasetManifest.load(args.manifest)
    report = trainer.fit(manifest, model_cfg, train_cfg, args.out, resume_from=args.resume)
    last = report.scalars[-1] if report.scalars else {}
    print(report.final_checkpoint)
    print(
        f"trained {len(report.scalars)} steps in {report.wall_clock:.1f}s, "
        f"final total={last.get('total', float('nan')):.4f}",
        file=sys.stderr,
    )
    return 0


def _cmd_tokenize(args) -> int:
    model, _ = _load_model(args.ckpt)
    mask = maskdata.load_mask(args.mask)
    if mask.shape != (model.config.image_side, model.config.image_side):
        raise ValueError(
            f"mask is {mask.shape[1]}x{mask.shape[0]} but checkpoint expects "
            f"{model.config.image_side}x{model.config.image_side}"
        )
    with torch.no_grad():
        indices = model.tokenize(maskdata.binarize(mask))[0].tolist()
    print(codec.render([codec.MaskTokens(tuple(indices))], model.config.codebook_size))
    return 0


def _cmd_detokenize(args) -> int:
    model, _ = _load_model(args.ckpt)
    atoms = codec.parse(args.tokens, model.config.codebook_size)
    spans = [a for a in atoms if isinstance(a, codec.MaskTokens)]
    if len(spans) != 1:
        raise CodecError(f"--tokens must contain exactly one mask token span, found {len(spans)}")
    with torch.no_grad():
        logits = model.decode_tokens(list(spans[0].tokens), length=args.length)
        probs = torch.sigmoid(logits)[0].cpu().numpy()
    maskdata.save_mask(probs if args.soft else (probs > 0.5).astype(np.float64), args.out)
    print(args.out)
    return 0


def _cmd_eval_curve(args) -> int:
    model, _ = _load_model(args.ckpt)
    manifest = maskdata.DatasetManifest.load(args.manifest)
    paths = manifest.paths(args.split)
    if not paths:
        raise ValueError(f"manifest split {args.split!r} is empty")
    masks = [maskdata.binarize(maskdata.load_mask(p)) for p in paths]
    lengths = tuple(int(x) for x in args.lengths.split(","))
    curve = evaluate.prefix_curve(model, masks, lengths=lengths)
    evaluate.emit_curve(curve, args.out)
    print(args.out)
    values = list(curve.mean_iou) + list(curve.ciou) + list(curve.giou)
    if any(v != v for v in values):
        print("eval-curve produced NaN metrics", file=sys.stderr)
        return 1
    return 0


def _cmd_codec_encode(_args) -> int:
    data = json.loads(sys.stdin.read())
    sys.stdout.write(codec.render(_atoms_from_json(data)))
    sys.stdout.write("\n")
    return 0


def _cmd_codec_decode(_args) -> int:
    atoms = codec.parse(sys.stdin.read().rstrip("\n"))
    json.dump(_atoms_to_json(atoms), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _cmd_inspect(args) -> int:
    header, tensors = load_tensors(args.ckpt)
    summary = dict(header)
    summary["tensor_records"] = len(tensors)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "tokenize": _cmd_tokenize,
    "detokenize": _cmd_detokenize,
    "eval-curve": _cmd_eval_curve,
    "codec-encode": _cmd_codec_encode,
    "codec-decode": _cmd_codec_decode,
    "inspect-checkpoint": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, CheckpointError, CodecError, trainer.NonFiniteLossError) as exc:
        print(f"masktok {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
