"""Command-line interface for the redaction pipeline.

Subcommands cover the full flow: attention stack -> heatmap -> mask -> blur,
span extraction and prompt building from a manifest, scoring and leaderboard
generation, masker training/prediction, a gradient self-check, and manifest
validation.  Exit codes: 0 success, 1 usage error, 2 data error.  stdout
carries machine-readable output only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attention, evaluate, manifest, masker, numerics, pngio, redact, textproc
from .errors import DehateError, ManifestError

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """A flag combination the parser grammar cannot express."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _thread_count() -> int:
    raw = os.environ.get("DEHATE_THREADS")
    if raw is None:
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ValueError(f"DEHATE_THREADS must be an integer, got {raw!r}") from None
    return max(1, count)


def _write_text(text: str, out_path) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _row_spans(row) -> tuple[list, bool]:
    """Spans conditioning a row: the hateful-vs-normalized diff when one
    exists, otherwise the whole text as a single span (flagged fallback)."""
    words = row.text.split()
    if not words:
        raise ManifestError(f"{row.id}: text has no words")
    if row.normalized_text is not None:
        try:
            spans = textproc.extract_spans(row.text, row.normalized_text)
        except ValueError as exc:
            raise ManifestError(f"{row.id}: {exc}") from exc
        if spans:
            return spans, False
    return [textproc.HateSpan(0, len(words), tuple(words))], True


# --- subcommand handlers -------------------------------------------------------


def _cmd_heatmap(args) -> int:
    if args.out_png is None and args.out_tensor is None:
        raise UsageError("nothing to write: pass --out-png and/or --out-tensor")
    stack = attention.load_stack(args.stack, args.meta)
    if args.tokens is None:
        selected = range(len(stack.tokens))
    else:
        try:
            selected = [int(part) for part in args.tokens.split(",")]
        except ValueError:
            raise ValueError(
                f"--tokens must be comma-separated indices, got {args.tokens!r}"
            ) from None
    heat = attention.aggregate(stack, selected)
    if args.out_tensor:
        numerics.tensor_write(heat.values, args.out_tensor)
    if args.out_png:
        attention.export_gray(heat, args.out_png)
    return 0


def _cmd_mask(args) -> int:
    heat = attention.Heatmap(numerics.tensor_read(args.heatmap))
    mask = attention.binarize(heat, args.tau)
    pngio.write_mask_bits(mask.bits, args.out)
    return 0


def _cmd_blur(args) -> int:
    img = redact.ImageRGB8.read(args.image)
    heat = attention.Heatmap(numerics.tensor_read(args.heatmap))
    params = redact.RedactionParams(tau_black=args.tau_black,
                                    tau_avg=args.tau_avg,
                                    box_radius=args.box_radius)
    blurred, step1 = redact.anonymize(img, heat, params)
    blurred.write(args.out_image)
    pngio.write_mask_bits(step1.bits, args.out_mask)
    return 0


def _cmd_recover_mask(args) -> int:
    original = redact.ImageRGB8.read(args.original)
    blurred = redact.ImageRGB8.read(args.blurred)
    mask = redact.recover_mask(original, blurred, args.tol)
    pngio.write_mask_bits(mask.bits, args.out)
    return 0


def _cmd_spans(args) -> int:
    rows = manifest.load_manifest(args.manifest)
    lines = []
    for row in rows:
        spans, fallback = _row_spans(row)
        obj = {
            "id": row.id,
            "fallback": fallback,
            "spans": [{"start": s.start, "end": s.end, "words": list(s.words)}
                      for s in spans],
        }
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True))
    _write_text("".join(line + "\n" for line in lines), args.out)
    return 0


def _cmd_prompt(args) -> int:
    rows = manifest.load_manifest(args.manifest)
    lines = []
    for row in rows:
        spans, _ = _row_spans(row)
        spec = textproc.build_prompt(row.text, spans, args.word_budget)
        obj = {
            "id": row.id,
            "prompt": spec.full_text,
            "truncated": spec.truncated,
            "spans": [[s.start, s.end] for s in spans],
        }
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True))
    _write_text("".join(line + "\n" for line in lines), args.out)
    return 0


def _cmd_score(args) -> int:
    rows = manifest.load_manifest(args.manifest)
    report = evaluate.score(args.pred, rows, threads=_thread_count())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_obj(), fh, ensure_ascii=False,
                      sort_keys=True, indent=2)
            fh.write("\n")
    for message in report.errors.values():
        print(f"error: {message}", file=sys.stderr)
    print(f"{report.mean:.6f}")
    return 0


def _cmd_leaderboard(args) -> int:
    rows = manifest.load_manifest(args.manifest)
    teams = sorted(entry.name for entry in os.scandir(args.teams)
                   if entry.is_dir())
    if not teams:
        raise ValueError(f"no team directories under {args.teams}")
    threads = _thread_count()
    reports = {team: evaluate.score(os.path.join(args.teams, team), rows,
                                    threads=threads)
               for team in teams}
    entries = evaluate.leaderboard(reports)
    _write_text(evaluate.leaderboard_csv(entries), args.out)
    return 0


def _masker_config(args) -> masker.MaskerConfig:
    return masker.MaskerConfig(
        image_size=args.image_size, patch_size=args.patch_size,
        embed_dim=args.embed_dim, encoder_blocks=args.blocks,
        decoder_blocks=args.blocks, span_embed_dim=args.span_embed_dim,
        seed=args.seed,
    )


def _cmd_train(args) -> int:
    config = _masker_config(args)
    rows = [r for r in manifest.load_manifest(args.manifest)
            if r.split == "train"]
    if not rows:
        raise ManifestError("manifest has no train rows")
    images, embeds, truths = [], [], []
    for row in sorted(rows, key=lambda r: r.id):
        images.append(redact.ImageRGB8.read(row.image))
        spans, _ = _row_spans(row)
        embeds.append([masker.embed_span(s, config.span_embed_dim)
                       for s in spans])
        truths.append(evaluate.truth_mask(row))
    batch = masker.TrainBatch(images=images, span_embeddings=embeds,
                              truth_masks=truths)
    model = masker.init(config)
    log = masker.train(model, [batch], steps=args.steps, lr=args.lr,
                       loss_kind=args.loss)
    masker.save_model(model, args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            json.dump(log, fh)
            fh.write("\n")
    print(f"{log[-1]:.6f}")
    return 0


def _cmd_predict(args) -> int:
    model = masker.load_model(args.model)
    rows = manifest.load_manifest(args.manifest)
    if args.split != "all":
        rows = [r for r in rows if r.split == args.split]
    if not rows:
        raise ManifestError(f"no rows for split {args.split!r}")
    os.makedirs(args.out, exist_ok=True)
    for row in sorted(rows, key=lambda r: r.id):
        img = redact.ImageRGB8.read(row.image)
        spans, _ = _row_spans(row)
        mask, _ = masker.predict(model, img, spans, args.tau)
        pngio.write_mask_bits(mask.bits, os.path.join(args.out, f"{row.id}.png"))
    print(f"wrote {len(rows)} masks to {args.out}", file=sys.stderr)
    return 0


def _gradcheck_graph():
    """One graph touching every op kind, with relu fed squared values so the
    only kink sits at an unreachable zero."""
    g = numerics.Graph()
    x = g.input()
    w = g.input()
    scale = g.input()
    shift = g.input()
    y = g.matmul(x, w)
    r = g.relu(g.multiply(y, y))
    mod = g.scale_shift(r, scale, shift)
    cat = g.concat([g.sigmoid(mod), r], axis=1)
    loss = g.mean(g.add(cat, cat))
    g.outputs = (loss,)
    return g, (x, w, scale, shift), loss


def _forward64(g, leaf64):
    """Evaluate the graph with float64 leaves (for finite differencing)."""
    vals = []
    for i, node in enumerate(g.nodes):
        if node.kind in numerics.LEAF_KINDS:
            vals.append(leaf64[i])
        else:
            vals.append(numerics._eval_node(i, node, vals, g, None))
    return vals


def _cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ValueError(f"--trials must be >= 1, got {args.trials}")
    rng = np.random.default_rng(args.seed)
    g, leaves, loss_node = _gradcheck_graph()
    x, w, scale, shift = leaves
    eps = 1e-3
    worst = 0.0
    for trial in range(args.trials):
        inputs = {
            x: numerics.Tensor(rng.uniform(0.2, 0.7, (3, 4)).astype(np.float32)),
            w: numerics.Tensor(rng.uniform(0.2, 0.7, (4, 3)).astype(np.float32)),
            scale: numerics.Tensor(rng.uniform(0.5, 1.5, 3).astype(np.float32)),
            shift: numerics.Tensor(rng.uniform(-0.5, 0.5, 3).astype(np.float32)),
        }
        grads = numerics.backward(g, inputs, loss_node)
        leaf64 = {n: t.array.astype(np.float64) for n, t in inputs.items()}
        for node in leaves:
            flat = leaf64[node].reshape(-1)
            analytic = grads[node].array.reshape(-1)
            for idx in range(flat.size):
                saved = flat[idx]
                flat[idx] = saved + eps
                hi = float(_forward64(g, leaf64)[loss_node])
                flat[idx] = saved - eps
                lo = float(_forward64(g, leaf64)[loss_node])
                flat[idx] = saved
                fd = (hi - lo) / (2 * eps)
                a = float(analytic[idx])
                err = abs(a - fd) / max(1e-2, abs(a), abs(fd))
                worst = max(worst, err)
    print(f"max-rel-err {worst:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed (tolerance {GRADCHECK_TOLERANCE})",
              file=sys.stderr)
        return 2
    return 0


def _cmd_manifest_validate(args) -> int:
    rows = manifest.load_manifest(args.manifest)
    summary = manifest.validate_manifest(rows)
    print(f"train {summary['train']}")
    print(f"test {summary['test']}")
    print(f"total {summary['total']}")
    for problem in summary["problems"]:
        print(f"problem: {problem}", file=sys.stderr)
    return 2 if summary["problems"] else 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dehate",
                     description="Hate-region localization and redaction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("heatmap", help="aggregate an attention stack into a heatmap")
    p.add_argument("--stack", required=True, help="attention stack tensor (DHT1)")
    p.add_argument("--meta", required=True, help="stack metadata JSON")
    p.add_argument("--tokens", help="comma-separated token indices (default: all)")
    p.add_argument("--out-png", help="grayscale heatmap PNG")
    p.add_argument("--out-tensor", help="heatmap tensor (DHT1)")
    p.set_defaults(handler=_cmd_heatmap)

    p = sub.add_parser("mask", help="binarize a heatmap into a mask PNG")
    p.add_argument("--heatmap", required=True, help="heatmap tensor (DHT1)")
    p.add_argument("--tau", type=float, default=attention.DEFAULT_TAU)
    p.add_argument("--out", required=True, help="mask PNG (255 = masked)")
    p.set_defaults(handler=_cmd_mask)

    p = sub.add_parser("blur", help="two-step anonymizing blur")
    p.add_argument("--image", required=True)
    p.add_argument("--heatmap", required=True, help="heatmap tensor (DHT1)")
    p.add_argument("--tau-black", type=float, default=redact.DEFAULT_TAU_BLACK)
    p.add_argument("--tau-avg", type=float, default=redact.DEFAULT_TAU_AVG)
    p.add_argument("--box-radius", type=int, default=redact.DEFAULT_BOX_RADIUS)
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-mask", required=True, help="step-1 mask PNG")
    p.set_defaults(handler=_cmd_blur)

    p = sub.add_parser("recover-mask",
                       help="recover the redacted region by image differencing")
    p.add_argument("--original", required=True)
    p.add_argument("--blurred", required=True)
    p.add_argument("--tol", type=int, default=0, help="per-channel tolerance")
    p.add_argument("--out", required=True, help="mask PNG")
    p.set_defaults(handler=_cmd_recover_mask)

    p = sub.add_parser("spans", help="extract hate spans per manifest row (JSONL)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(handler=_cmd_spans)

    p = sub.add_parser("prompt", help="build generation prompts per row (JSONL)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--word-budget", type=int, default=textproc.DEFAULT_WORD_BUDGET)
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(handler=_cmd_prompt)

    p = sub.add_parser("score", help="mean IoU of <id>.png predictions")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="full report JSON")
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("leaderboard",
                       help="rank per-team prediction directories (CSV)")
    p.add_argument("--teams", required=True,
                   help="directory with one subdirectory per team")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output path (default: stdout)")
    p.set_defaults(handler=_cmd_leaderboard)

    for name, helptext in (("train", "train the masker on manifest train rows"),
                           ("predict", "write predicted masks for manifest rows")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        if name == "train":
            p.add_argument("--out", required=True, help="checkpoint directory")
            p.add_argument("--steps", type=int, default=200)
            p.add_argument("--lr", type=float, default=1.0)
            p.add_argument("--loss", choices=masker.LOSS_KINDS, default="bce")
            p.add_argument("--log", help="per-step loss log JSON")
            p.add_argument("--image-size", type=int, default=32)
            p.add_argument("--patch-size", type=int, default=4)
            p.add_argument("--embed-dim", type=int, default=32)
            p.add_argument("--blocks", type=int, default=2,
                           help="encoder and decoder block count")
            p.add_argument("--span-embed-dim", type=int, default=32)
            p.add_argument("--seed", type=int, default=42)
            p.set_defaults(handler=_cmd_train)
        else:
            p.add_argument("--model", required=True, help="checkpoint directory")
            p.add_argument("--out", required=True, help="mask output directory")
            p.add_argument("--tau", type=float, default=masker.DEFAULT_PREDICT_TAU)
            p.add_argument("--split", choices=("train", "test", "all"),
                           default="test")
            p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the autodiff engine")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("manifest", help="manifest utilities")
    msub = p.add_subparsers(dest="manifest_command", required=True,
                            metavar="subcommand")
    mp = msub.add_parser("validate", help="check structure and split counts")
    mp.add_argument("--manifest", required=True)
    mp.set_defaults(handler=_cmd_manifest_validate)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DehateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())
