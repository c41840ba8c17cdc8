"""Command line: ``hsg {synth,train,segment,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import gradcheck, pipeline, synth
from .config import ConfigError, RunConfig, dump_config, load_config
from .netpbm import NetpbmError, read_ppm, to_unit, write_pgm, write_ppm

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("hsg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(extra: list) -> dict:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def _config(args, extra) -> RunConfig:
    values = _overrides(extra)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return load_config(args.config, values)


def _palette(n: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.integers(40, 256, size=(max(n, 1), 3)).astype(np.uint8)


def composite(levels: list) -> np.ndarray:
    """Side-by-side colour rendering of label maps, one panel per level."""
    panels = [_palette(int(lab.max()) + 1)[lab] for lab in levels]
    gap = np.zeros((levels[0].shape[0], 2, 3), dtype=np.uint8)
    out = [panels[0]]
    for p in panels[1:]:
        out += [gap, p]
    return np.concatenate(out, axis=1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    spec = synth.SceneSpec(size=args.size, seed=args.seed or 0)
    out = synth.write_corpus(args.out, spec, args.n_train, args.n_eval)
    print(f"wrote {args.n_train} train / {args.n_eval} eval samples to {out}")


def cmd_train(args, extra):
    cfg = _config(args, extra)
    resume = None
    if args.resume:
        resume = ckpt_io.load(args.resume)
        cfg = RunConfig.from_dict(resume.config).updated(_overrides(extra))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    def progress(r):
        if args.verbose or r.step % 50 == 0:
            print(f"step {r.step:5d}  edge {r.loss_edge:.4f}  levels {r.loss_levels:.4f}  "
                  f"goodness {r.loss_goodness:.4f}  total {r.total:.4f}", flush=True)

    result = pipeline.train(cfg, resume=resume, out_dir=out, progress=progress)
    print(f"checkpoint at step {result.step}: {out / 'checkpoint.hsg'}")


def cmd_segment(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    model, cfg = pipeline.model_from_checkpoint(ckpt_io.load(args.checkpoint))
    seg = pipeline.segment_image(model, cfg, to_unit(read_ppm(args.image)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for lv, labels in enumerate(seg.levels):
        write_pgm(out / f"{stem}_G{lv}.pgm", labels)
    if args.composite:
        write_ppm(out / f"{stem}_levels.ppm", composite(seg.levels))
    counts = ", ".join(f"G{lv}={int(lab.max()) + 1}" for lv, lab in enumerate(seg.levels))
    print(f"{stem}: {counts}")


def cmd_eval(args, extra):
    ck = ckpt_io.load(args.checkpoint)
    model, cfg = pipeline.model_from_checkpoint(ck)
    over = _overrides(extra)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if over:
        cfg = cfg.updated(over)
    report = pipeline.evaluate(model, cfg, args.corpus or cfg.corpus, args.split, args.bank_split,
                               args.k)
    print(pipeline.format_report(report))
    if args.out:
        pipeline.write_report(args.out, report)


def cmd_gradcheck(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    checks = gradcheck.run_gradcheck(args.seed or 0, args.step, args.tolerance)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.report.passed]
    if failed:
        raise RuntimeError(f"gradient check failed: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hsg", description="Hierarchical segment grouping at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=50)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train encoder and clustering transformers")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="hierarchical segmentation of one PPM image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--composite", action="store_true", help="also write a colour PPM")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("eval", help="NFCovering and k-NN retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", default="eval")
    p.add_argument("--bank-split", default="train")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="key=value report file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"hsg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError, AssertionError, NetpbmError) as exc:
        print(f"hsg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
