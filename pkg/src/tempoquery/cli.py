"""Command-line entry point: ``tempoquery {gen-data,train,eval,attend}``.

Exit codes: 0 success, 2 usage/config/variant error, 3 runtime or training
failure, 4 file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .attention import attention_entropy
from .errors import (ConfigError, FormatError, InvalidArgument, TrainingDiverged,
                     VariantError)
from .retrieval import evaluate
from .train import load_model, read_config, save_model, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_FORMAT = 0, 2, 3, 4

log = logging.getLogger("tempoquery")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.pieces < 1 or args.windows < 1:
        raise UsageError("--pieces and --windows must be positive")
    if not 0 < args.tempo_lo <= args.tempo_hi:
        raise UsageError(f"need 0 < --tempo-lo <= --tempo-hi, got {args.tempo_lo}, {args.tempo_hi}")
    ds = sd.make_pair_dataset(args.pieces, args.windows, (args.tempo_lo, args.tempo_hi),
                              args.frames, seed=args.seed)
    sd.save_dataset(ds, args.out)
    log.info("wrote %d pairs (%d x %d spectrograms) to %s", len(ds), ds.n_bins, ds.n_frames, args.out)


def cmd_train(args):
    cfg = read_config(args.config)
    ds = sd.load_dataset(args.dataset)
    try:
        model = train(cfg, cfg.model_variant, ds)
    except TrainingDiverged as e:
        if e.last_good is not None:
            save_model(e.last_good, args.out)
            log.error("last finite model written to %s", args.out)
        raise
    save_model(model, args.out)
    best = max((h["best_mrr"] for h in model.history), default=float("nan"))
    log.info("saved %s model to %s (best validation MRR %.2f)", cfg.variant, args.out, best)


def cmd_eval(args):
    model = load_model(args.checkpoint)
    ds = sd.load_dataset(args.dataset)
    if ds.n_frames != model.variant.t_frames:
        raise VariantError(f"{model.variant.tag} needs {model.variant.t_frames}-frame excerpts, "
                           f"dataset has {ds.n_frames}")
    ev = evaluate(model, ds, args.pool, seed=args.seed, split=args.split, details=True)
    if args.dump_sim:
        np.ascontiguousarray(ev.similarity, dtype="<f4").tofile(args.dump_sim)
    print(ev.report.csv_line(model.variant.tag))


def cmd_attend(args):
    model = load_model(args.checkpoint)
    if model.attention is None:
        raise VariantError(f"variant {model.variant.tag} has no attention pathway")
    ds = sd.load_dataset(args.dataset)
    if ds.n_frames != model.variant.t_frames:
        raise VariantError(f"{model.variant.tag} needs {model.variant.t_frames}-frame excerpts, "
                           f"dataset has {ds.n_frames}")
    pool = np.flatnonzero(ds.split_mask(args.split)) if args.split else np.arange(len(ds))
    if args.queries and args.queries < len(pool):
        pool = np.sort(np.random.default_rng(args.seed).choice(pool, args.queries, replace=False))
    if len(pool) == 0:
        raise UsageError(f"no pairs in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    A = model.attend(ds.spectrograms[pool])
    T = A.shape[1]
    with open(out / "attention.csv", "w") as fh:
        fh.write("query_id," + ",".join(f"a_{t + 1}" for t in range(T)) + "\n")
        for qid, a in zip(pool, A):
            fh.write(f"{qid}," + ",".join(repr(float(x)) for x in a) + "\n")
    for qid, a in zip(pool, A):
        svg = attention_svg(ds.spectrograms[qid], a,
                            title=f"query {qid}, {float(ds.tempos[qid]):.1f} bpm, "
                                  f"entropy {attention_entropy(a):.3f} nats")
        (out / f"query_{qid:06d}.svg").write_text(svg)
    log.info("wrote %d attention vectors and SVGs to %s", len(pool), out)


# --------------------------------------------------------------------------
# SVG


def attention_svg(spec, a, title="", band=4, cell=(4, 4), curve_height=60):
    """Figure-2 style overlay: frame-weighted spectrogram below its attention curve.

    Frequency bins are summed in bands of ``band`` bins; each heat cell is the
    band energy scaled by ``a_t`` (normalized to the brightest cell).
    """
    spec = np.asarray(spec, dtype=float)
    a = np.asarray(a, dtype=float)
    F, T = spec.shape
    n_bands = -(-F // band)
    bands = np.add.reduceat(spec, np.arange(0, F, band), axis=0) * a
    peak = bands.max() or 1.0
    cw, ch = cell
    top = 20 + curve_height + 10
    width, height = T * cw, top + n_bands * ch
    parts = [f'<?xml version="1.0" encoding="UTF-8"?>',
             f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="2" y="13" font-family="sans-serif" font-size="11">{_escape(title)}</text>']
    amax = a.max() or 1.0
    pts = " ".join(f"{(t + 0.5) * cw:.1f},{20 + curve_height * (1 - v / amax):.2f}"
                   for t, v in enumerate(a))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="1.5"/>')
    parts.append(f'<g shape-rendering="crispEdges">')
    for b in range(n_bands):
        y = top + (n_bands - 1 - b) * ch  # low frequencies at the bottom
        for t in range(T):
            v = bands[b, t] / peak
            if v <= 0:
                continue
            g = int(round(255 * (1 - v)))
            parts.append(f'<rect x="{t * cw}" y="{y}" width="{cw}" height="{ch}" '
                         f'fill="rgb({g},{g},{g})"/>')
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(s):
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="tempoquery", description="Audio-to-sheet retrieval with frame attention.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic paired dataset (CMA1)")
    g.add_argument("--pieces", type=int, default=50)
    g.add_argument("--windows", type=int, default=10, help="windows per piece")
    g.add_argument("--tempo-lo", type=float, default=60.0)
    g.add_argument("--tempo-hi", type=float, default=180.0)
    g.add_argument("--frames", type=int, choices=sd.VALID_FRAMES, default=84)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant from a key=value config")
    t.add_argument("config")
    t.add_argument("dataset")
    t.add_argument("out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print variant,pool,R@1,R@5,R@25,MRR,MR")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--pool", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", default="test", help="split to draw the pool from ('' for all)")
    e.add_argument("--dump-sim", metavar="PATH",
                   help="write the queries x pool similarity matrix as little-endian float32")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attend", help="dump attention vectors (CSV) and overlays (SVG)")
    a.add_argument("checkpoint")
    a.add_argument("dataset")
    a.add_argument("out", help="output directory")
    a.add_argument("--queries", type=int, default=0, help="sample this many queries (0: all)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--split", default="test")
    a.set_defaults(func=cmd_attend)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ConfigError, VariantError, InvalidArgument) as e:
        print(f"tempoquery {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"tempoquery {args.command}: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as e:
        print(f"tempoquery {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ArithmeticError, RuntimeError, OSError) as e:
        print(f"tempoquery {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
