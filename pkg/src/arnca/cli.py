"""``arnca`` command line: gen, train, eval, render, verify.

Every command writes under ``--out`` with a fixed layout (``chunks/``,
``ckpt/``, ``logs/``, ``renders/``) and leaves one ``manifest.json`` that
records the flags, input digests, code version and timestamps.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__, verify
from .grid import ChunkFormatError, read_chunk
from .models import Model
from .render import render_chunk
from .sim import generate_dataset
from .training import (
    OraclePredictor, PersistencePredictor, TrainConfig, default_t_pred, evaluate, scale_transfer_eval, train,
)


class CliError(Exception):
    pass


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: Sequence[Path],
                   outputs: Sequence[Path], started: str, extra: dict | None = None) -> Path:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func", "command")}
    manifest = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "version": __version__,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p.relative_to(out)): sha256(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra or {})
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    path = out / "manifest.json"
    path.write_text(text)
    # later commands sharing --out replace manifest.json; keep a per-command copy
    (out / "logs").mkdir(exist_ok=True)
    (out / "logs" / f"{command}.manifest.json").write_text(text)
    return path


def chunk_files(data: Path) -> list[Path]:
    """Chunk files in ``data`` or, for a run directory, in ``data/chunks``."""
    data = Path(data)
    if data.is_file():
        return [data]
    if (data / "chunks").is_dir():
        data = data / "chunks"
    files = sorted(data.glob("*.arnc")) if data.is_dir() else []
    if not files:
        raise CliError(f"no chunk files found in {data}")
    return files


def load_chunks(files: Sequence[Path]):
    try:
        chunks = [read_chunk(f) for f in files]
    except ChunkFormatError as exc:
        raise CliError(str(exc)) from exc
    envs = {c.env for c in chunks}
    if len(envs) > 1:
        raise CliError(f"dataset mixes environments: {sorted(e.label for e in envs)}")
    return chunks


# ----------------------------------------------------------------- commands

def cmd_gen(args: argparse.Namespace) -> dict:
    try:
        paths = generate_dataset(args.env, args.variant, args.n, args.frames, args.chunks, args.seed,
                                 args.out / "chunks")
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(f"wrote {len(paths)} chunks to {args.out / 'chunks'}")
    return {"inputs": [], "outputs": paths}


def cmd_train(args: argparse.Namespace) -> dict:
    files = chunk_files(args.data)
    chunks = load_chunks(files)
    valid_files = chunk_files(args.valid) if args.valid else []
    valid = load_chunks(valid_files) if valid_files else []
    env = chunks[0].env
    if valid and valid[0].env != env:
        raise CliError(f"validation env {valid[0].env.label} does not match training env {env.label}")
    try:
        config = TrainConfig(model=args.model, env=env.label, variant="stoch" if chunks[0].stochastic else "det",
                             t_obs=args.t_obs, t_pred=args.t_pred, epochs=args.epochs, lr=args.lr,
                             batch=args.batch, data_fraction=args.fraction, seed=args.seed, u=args.u,
                             radius=args.radius, eval_every=args.eval_every)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    def progress(row: dict) -> None:
        if not args.quiet:
            extra = "" if row["valid_f1"] is None else f" valid_f1={row['valid_f1']:.4f}"
            print(f"epoch {row['epoch']:4d} loss={row['loss']:.5f}{extra}", flush=True)

    try:
        result = train(config, chunks, valid, progress)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    ckpt = args.out / "ckpt" / "model.arnp"
    count = result.model.params.count()
    sidecar = result.model.save(ckpt, extra={"train": vars(config) | {"model": result.model.kind},
                                             "n_train": chunks[0].n,
                                             "subset": result.subset.tolist()})
    log = args.out / "logs" / "train.csv"
    result.write_log(log)
    print(f"subset: {len(result.subset)} of {len(chunks)} chunks")
    print(f"parameters: {count}")
    print(f"checkpoint: {ckpt}")
    return {"inputs": files + valid_files, "outputs": [ckpt, sidecar, log],
            "extra": {"param_count": count, "subset_size": len(result.subset)}}


def _predictor(args: argparse.Namespace):
    if args.oracle:
        return OraclePredictor(), []
    if args.baseline == "persistence":
        return PersistencePredictor(), []
    if not args.ckpt:
        raise CliError("eval needs --ckpt, --oracle or --baseline persistence")
    try:
        return Model.load(args.ckpt), [Path(args.ckpt), Path(args.ckpt).with_suffix(".json")]
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc


def cmd_eval(args: argparse.Namespace) -> dict:
    files = chunk_files(args.data)
    chunks = load_chunks(files)
    predictor, ckpt_files = _predictor(args)
    t_pred = args.t_pred or default_t_pred(chunks[0].env)
    try:
        if isinstance(predictor, Model):
            meta = json.loads(Path(args.ckpt).with_suffix(".json").read_text())
            report = scale_transfer_eval(predictor, chunks, args.t_obs, t_pred, n_train=meta.get("n_train"),
                                         env=chunks[0].env)
        else:
            report = evaluate(predictor, chunks, args.t_obs, t_pred, env=chunks[0].env)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = args.out / "logs" / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    # runtime goes to the manifest so the report itself is reproducible byte for byte
    out.write_text(report.to_json(include_runtime=False) + "\n")
    print(f"F1 {report.f1_mean:.4f} +- {report.f1_std:.4f}  AUC {report.auc_mean:.4f} +- {report.auc_std:.4f}")
    return {"inputs": files + ckpt_files, "outputs": [out],
            "extra": {"runtime_seconds": report.runtime_seconds}}


def cmd_render(args: argparse.Namespace) -> dict:
    try:
        chunk = read_chunk(args.chunk)
    except ChunkFormatError as exc:
        raise CliError(str(exc)) from exc
    inputs = [Path(args.chunk)]
    maps = None
    if args.ckpt:
        model, ckpt_files = _predictor(argparse.Namespace(oracle=False, baseline=None, ckpt=args.ckpt))
        inputs += ckpt_files
        t_pred = args.t_pred or min(chunk.T, default_t_pred(chunk.env))
        if not 0 < args.t_obs <= t_pred <= chunk.T:
            raise CliError(f"need 0 < t_obs <= t_pred <= {chunk.T}")
        maps = model.predict([chunk], args.t_obs, t_pred)[0]
    elif args.overlay:
        raise CliError("--overlay needs --ckpt")
    written = render_chunk(chunk, args.out / "renders", maps, args.t_obs, overlay=args.overlay)
    print(f"wrote {len(written)} files to {args.out / 'renders'}")
    return {"inputs": inputs, "outputs": written}


def cmd_verify(args: argparse.Namespace) -> dict:
    suites = args.suite or list(verify.SUITES)
    try:
        results = verify.run(suites, mutation=args.inject)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    for r in results:
        print(r.line())
    failed = [f"{r.suite}.{r.name}" for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    report = args.out / "logs" / "verify.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps([vars(r) for r in results], indent=2) + "\n")
    return {"inputs": [], "outputs": [report], "failed": failed}


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arnca", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"arnca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate and write chunk files")
    p.add_argument("--env", required=True, choices=["forest", "host", "stock"])
    p.add_argument("--variant", required=True, choices=["det", "stoch"])
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--chunks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a chunk directory")
    p.add_argument("--model", default="arnca", choices=["arnca", "attn_ca", "attention_ca", "convlstm_ca"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--valid", type=Path)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--u", type=int, default=16)
    p.add_argument("--radius", type=int, default=1, choices=[1, 2])
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-obs", type=int, default=10)
    p.add_argument("--t-pred", type=int)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or reference predictor")
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    p.add_argument("--baseline", choices=["persistence"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--t-obs", type=int, default=10)
    p.add_argument("--t-pred", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write PPM frames, heatmaps and a metrics CSV")
    p.add_argument("--chunk", type=Path, required=True)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--t-obs", type=int, default=10)
    p.add_argument("--t-pred", type=int)
    p.add_argument("--overlay", action="store_true", help="paint true target cells over the heatmap")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("verify", help="run the built-in invariant suites")
    p.add_argument("--suite", action="append", choices=list(verify.SUITES))
    p.add_argument("--inject", choices=sorted(verify.MUTATIONS), help=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = _now()
    clock = time.perf_counter()
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        result = args.func(args)
    except CliError as exc:
        print(f"arnca {args.command}: error: {exc}", file=sys.stderr)
        return 2
    extra = dict(result.get("extra", {}))
    extra["wall_seconds"] = round(time.perf_counter() - clock, 3)
    write_manifest(args.out, args.command, args, result["inputs"], result["outputs"], started, extra)
    return 1 if result.get("failed") else 0


if __name__ == "__main__":
    sys.exit(main())
