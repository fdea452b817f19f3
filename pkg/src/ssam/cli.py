"""Command-line entry point: ``ssam <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant failure.
Every command accepts ``--seed`` and ``--config``; the config file is a
JSON object whose keys are the command's long flag names (with ``_`` for
``-``). Flags given on the command line win over the config file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio_frontend import AUDIO_SUFFIXES, load_audio, log_mel, patchify_array
from .container import read_header, save_tensors, write_text_atomic
from .errors import DataError, EvaluationError, GeometryError, ParameterError, ShapeError, SsamError
from .eval import (ProbeConfig, aggregate_score, align_labels, embed_clip, load_embeddings,
                   read_labels, read_score_table, save_embeddings, train_probe)
from .model import ModelConfig
from .numerics import Rng
from .selective_scan import SelectiveScanInput, selective_scan_chunked, selective_scan_ref
from .train import TrainConfig, load_checkpoint, pretrain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
FEATURE_MANIFEST = "manifest.tsv"
BENCH_TOLERANCE = 1e-5

log = logging.getLogger("ssam")


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _chunk_list(text: str) -> list[str]:
    items = [v for v in text.split(",") if v]
    for v in items:
        if v != "L" and not v.isdigit():
            raise argparse.ArgumentTypeError(f"chunk lengths are integers or 'L', got {v!r}")
    return items


def _patch(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"patch must be 't,f' with positive integers, got {text!r}")
    return vals[0], vals[1]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, help="JSON file of flag values for this command")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ssam {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("features", help="log-mel spectrograms and patches for a directory of audio")
    p.add_argument("--in", dest="input", type=Path, required=True, help="directory of .wav/.f32 files")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--patch", type=_patch, default=(4, 16), help="patch shape t,f (default 4,16)")
    p.add_argument("--lenient", action="store_true", help="exit 0 even if some inputs are unreadable")
    _common(p)

    p = sub.add_parser("pretrain", help="masked-spectrogram pretraining")
    p.add_argument("--data", type=Path, required=True, help="directory of audio or feature files")
    p.add_argument("--out", type=Path, required=True, help="run directory (metrics + checkpoint)")
    p.add_argument("--preset", default="tiny", help="model preset: tiny, small, base or toy")
    p.add_argument("--model-config", type=Path, help="ModelConfig JSON; overrides --preset")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="passes over the data")
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size, help="clips per step")
    p.add_argument("--weight-decay", type=float, default=TrainConfig.weight_decay,
                   help="decoupled AdamW weight decay")
    p.add_argument("--peak-lr", type=float, default=None, help="default 1e-3 * batch_size / 1024")
    p.add_argument("--warmup-epochs", type=int, default=TrainConfig.warmup_epochs,
                   help="epochs of linear learning-rate warmup")
    p.add_argument("--crop-seconds", type=float, default=TrainConfig.crop_seconds,
                   help="length of the random training crop")
    p.add_argument("--data-fraction", type=float, default=TrainConfig.data_fraction,
                   help="fraction of files used, chosen by seed")
    p.add_argument("--betas", type=float, nargs=2, default=TrainConfig.betas, help="Adam moment decay rates")
    p.add_argument("--eps", type=float, default=TrainConfig.eps, help="Adam denominator epsilon")
    p.add_argument("--checkpoint-every", type=int, default=0, help="steps between checkpoints")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop once this many steps are done")
    _common(p)

    p = sub.add_parser("embed", help="clip embeddings from a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint written by pretrain")
    p.add_argument("--in", dest="input", type=Path, required=True, help="directory of audio files")
    p.add_argument("--out", type=Path, required=True, help="embeddings container to write")
    p.add_argument("--pooling", choices=("mean", "cls"), default="mean",
                   help="mean of patch tokens or the cls token")
    p.add_argument("--model-id", default=None, help="identifier stored with the embeddings")
    _common(p)

    p = sub.add_parser("probe", help="train an MLP probe on embeddings")
    p.add_argument("--embeddings", type=Path, required=True, help="training embeddings container")
    p.add_argument("--labels", type=Path, required=True, help="CSV clip_id,label or clip_id,labels")
    p.add_argument("--eval-embeddings", type=Path, help="held-out embeddings (default: 20%% split)")
    p.add_argument("--eval-labels", type=Path, help="labels CSV for --eval-embeddings")
    p.add_argument("--hidden", type=int, default=ProbeConfig.hidden, help="probe hidden units")
    p.add_argument("--epochs", type=int, default=ProbeConfig.epochs, help="probe training epochs")
    p.add_argument("--lr", type=float, default=ProbeConfig.lr, help="probe learning rate")
    p.add_argument("--batch-size", type=int, default=ProbeConfig.batch_size, help="probe minibatch size")
    p.add_argument("--weight-decay", type=float, default=ProbeConfig.weight_decay,
                   help="probe weight decay")
    _common(p)

    p = sub.add_parser("score", help="aggregated normalized score from a results table")
    p.add_argument("--table", type=Path, required=True, help="CSV: model,<task>...; optional min/max rows")
    p.add_argument("--model", help="score only this model")
    _common(p)

    p = sub.add_parser("bench-scan", help="time scan implementations against the reference")
    p.add_argument("--L", type=_int_list, default=[256], help="sequence lengths, comma-separated")
    p.add_argument("--D", type=int, default=16, help="channels")
    p.add_argument("--N", type=int, default=8, help="state size")
    p.add_argument("--batch", type=int, default=1, help="batch items per scan")
    p.add_argument("--chunk", type=_chunk_list, default=["32", "L"], help="chunk lengths; 'L' = whole sequence")
    p.add_argument("--repeats", type=int, default=5, help="timing samples per row (median reported)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="scan precision")
    p.add_argument("--out", type=Path, help="CSV report path (default stdout)")
    _common(p)

    p = sub.add_parser("inspect-ckpt", help="summarize a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--tensors", action="store_true", help="list every tensor")
    _common(p)

    p = sub.add_parser("selftest", help="run the oracle, equivalence and gradient suite")
    p.add_argument("--inject-fault", choices=("zoh-sign",), help=argparse.SUPPRESS)
    _common(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace):
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in subparser._actions} - {"help", "config"}
    unknown = set(cfg) - dests
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _audio_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"input directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in AUDIO_SUFFIXES)
    if not files:
        raise DataError(f"no audio files in {directory}")
    return files


def cmd_features(args) -> int:
    files = _audio_files(args.input)
    args.out.mkdir(parents=True, exist_ok=True)
    pt, pf = args.patch
    rows, warnings, written = [], 0, 0
    for src in files:
        digest = _sha256(src)
        dst = args.out / (src.stem + ".ssam")
        try:
            meta = read_header(dst)["meta"] if dst.exists() else {}
        except DataError:
            meta = {}
        if meta.get("sha256") == digest and meta.get("patch") == [pt, pf]:
            rows.append((dst.name, digest, meta["frames"], meta["degenerate"]))
            continue
        try:
            mel = log_mel(load_audio(src))
        except DataError as exc:
            warnings += 1
            print(f"warning: {exc}", file=sys.stderr)
            continue
        T = mel.shape[0] // pt * pt
        if T == 0:
            warnings += 1
            print(f"warning: {src}: shorter than one patch", file=sys.stderr)
            continue
        patches = patchify_array(mel.values[:T], pt, pf)
        save_tensors(dst, {"spectrogram": mel.values, "patches": patches},
                     {"kind": "features", "source": src.name, "sha256": digest, "patch": [pt, pf],
                      "frames": mel.shape[0], "patched_frames": T, "degenerate": mel.degenerate})
        written += 1
        rows.append((dst.name, digest, mel.shape[0], mel.degenerate))
    manifest = "".join(f"{n}\t{d}\t{t}\t{int(g)}\n" for n, d, t, g in rows)
    mpath = args.out / FEATURE_MANIFEST
    if not mpath.exists() or mpath.read_text() != manifest:
        write_text_atomic(mpath, manifest)
    print(f"{len(rows)} outputs ({written} written), {warnings} warnings", file=sys.stderr)
    if warnings and not args.lenient:
        return EXIT_DATA
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    if args.model_config is not None:
        try:
            return ModelConfig.from_json(args.model_config)
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"bad model config {args.model_config}: {exc}")
    return ModelConfig.preset(args.preset)


def cmd_pretrain(args) -> int:
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, weight_decay=args.weight_decay,
                     peak_lr=args.peak_lr, warmup_epochs=args.warmup_epochs, seed=args.seed,
                     crop_seconds=args.crop_seconds, data_fraction=args.data_fraction,
                     betas=tuple(args.betas), eps=args.eps, checkpoint_every=args.checkpoint_every)
    result = pretrain(tc, _model_config(args), args.data, args.out, resume_from=args.resume,
                      stop_after=args.stop_after)
    print(json.dumps({"steps": result.step, "files": result.n_files, "skipped": len(result.skipped),
                      "first_loss": result.losses[0] if result.losses else None,
                      "last_loss": result.losses[-1] if result.losses else None,
                      "checkpoint": str(result.checkpoint_path), "metrics": str(result.metrics_path)}))
    return EXIT_OK


def cmd_embed(args) -> int:
    ck = load_checkpoint(args.ckpt)
    weights = ck.weights(requires_grad=False)
    model_id = args.model_id or args.ckpt.stem
    embeddings = []
    for path in _audio_files(args.input):
        embeddings.append(embed_clip(ck.model_config, weights, load_audio(path), args.pooling,
                                     clip_id=path.stem, model_id=model_id))
    ids = save_embeddings(args.out, embeddings, {"pooling": args.pooling, "step": ck.step})
    print(f"{len(embeddings)} embeddings -> {args.out} (ids in {ids})", file=sys.stderr)
    return EXIT_OK


def _labeled(emb_path: Path, label_path: Path):
    X, ids, _ = load_embeddings(emb_path)
    label_ids, labels, _ = read_labels(label_path)
    return X, align_labels(ids, label_ids, labels)


def cmd_probe(args) -> int:
    if (args.eval_embeddings is None) != (args.eval_labels is None):
        raise UsageError("--eval-embeddings and --eval-labels go together")
    X, y = _labeled(args.embeddings, args.labels)
    Xe = ye = None
    if args.eval_embeddings is not None:
        Xe, ye = _labeled(args.eval_embeddings, args.eval_labels)
    pcfg = ProbeConfig(hidden=args.hidden, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                       seed=args.seed, weight_decay=args.weight_decay)
    r = train_probe(pcfg, X, y, Xe, ye)
    print(json.dumps({"metric": r.metric_name, "value": r.metric, "classes": len(r.classes),
                      "final_loss": r.losses[-1] if r.losses else None}))
    return EXIT_OK


def cmd_score(args) -> int:
    table = read_score_table(args.table)
    models = [args.model] if args.model else table.models
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["model", "score"])
    for m in models:
        out.writerow([m, f"{aggregate_score(table, m):.6f}"])
    return EXIT_OK


def _bench_input(rng: Rng, B: int, L: int, D: int, N: int, dtype) -> SelectiveScanInput:
    g = rng.generator
    lead = (B,) if B > 1 else ()
    return SelectiveScanInput(
        x=g.standard_normal(lead + (L, D)).astype(dtype),
        delta=g.uniform(1e-3, 1e-1, lead + (L, D)).astype(dtype),
        B_t=g.standard_normal(lead + (L, N)).astype(dtype),
        C_t=g.standard_normal(lead + (L, N)).astype(dtype),
        A=-np.tile(np.arange(1, N + 1, dtype=dtype), (D, 1)),
        D_skip=np.ones(D, dtype=dtype))


def _timed(fn, repeats: int):
    samples, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return out, samples


def cmd_bench_scan(args) -> int:
    if args.repeats < 1 or min(args.L + [args.D, args.N, args.batch]) < 1:
        raise UsageError("sizes and --repeats must be positive")
    dtype = np.dtype(args.dtype)
    rows = []
    for L in args.L:
        s = _bench_input(Rng(args.seed, L), args.batch, L, args.D, args.N, dtype)
        (y_ref, _), ref_t = _timed(lambda: selective_scan_ref(s), args.repeats)
        rows.append(["reference", L, L, args.repeats, statistics.median(ref_t), ref_t, 0.0])
        for c in args.chunk:
            chunk = L if c == "L" else int(c)
            (y, _), t = _timed(lambda: selective_scan_chunked(s, chunk_len=chunk), args.repeats)
            diff = float(np.abs(y.astype(np.float64) - y_ref).max())
            if not diff < BENCH_TOLERANCE:
                raise InvariantError(f"chunked scan (L={L}, chunk={chunk}) differs from the reference "
                                     f"by {diff:.3e} > {BENCH_TOLERANCE}; no timings reported")
            rows.append(["chunked", L, chunk, args.repeats, statistics.median(t), t, diff])
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["implementation", "L", "chunk_len", "repeats", "median_ms", "timings_ms", "max_abs_diff"])
    for impl, L, c, r, med, t, diff in rows:
        out.writerow([impl, L, c, r, f"{med:.4f}", ";".join(f"{v:.4f}" for v in t), f"{diff:.3e}"])
    if args.out:
        write_text_atomic(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_inspect(args) -> int:
    header = read_header(args.ckpt)
    ck = load_checkpoint(args.ckpt)
    summary = {"format_version": header["format_version"], "checkpoint_version": ck.format_version,
               "step": ck.step, "adam_t": ck.adam.t, "model_config": ck.model_config.to_dict(),
               "n_tensors": len(header["tensors"]),
               "n_parameters": int(sum(v.size for v in ck.params.values()))}
    if args.tensors:
        summary["tensors"] = [{k: e[k] for k in ("name", "dtype", "shape")} for e in header["tensors"]]
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(args.inject_fault)
    print("selftest: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_INVARIANT


COMMANDS = {"features": cmd_features, "pretrain": cmd_pretrain, "embed": cmd_embed,
            "probe": cmd_probe, "score": cmd_score, "bench-scan": cmd_bench_scan,
            "inspect-ckpt": cmd_inspect, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, argv, args)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ParameterError, GeometryError, ShapeError) as exc:
        print(f"ssam {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, EvaluationError) as exc:
        print(f"ssam {args.command}: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, SsamError, OSError) as exc:
        print(f"ssam {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
