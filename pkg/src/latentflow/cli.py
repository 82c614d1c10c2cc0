"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Every report carries the resolved configuration and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalstats as es
from .extension import (ar_generate, beam_extend, mask_report, multidiffusion_solve,
                        plan_segments, segment_rng, target_field)
from .model import (CheckpointError, TrainConfig, TrainingDiverged, gaussian_mixture,
                    load_checkpoint, sample_model, save_checkpoint, train_flow)
from .numerics import Rng
from .sampler import GuidanceConfig, parse_schedule
from .tae import latent_frame_count
from .tokens import PatchSpec, token_count

DEFAULT_SEED = 0
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("latentflow")


class ConfigError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, default):
    p.add_argument("--seed", type=int, default=default(DEFAULT_SEED))
    p.add_argument("--out-dir", default=default("."))
    p.add_argument("--format", choices=("json", "csv"), default=default("json"))
    p.add_argument("--config", default=default(None), help="JSON file whose keys mirror the flags")


def build_parser(explicit_only: bool = False) -> argparse.ArgumentParser:
    """The CLI parser; with ``explicit_only`` every default is suppressed so only given flags appear."""

    def default(value):
        return argparse.SUPPRESS if explicit_only else value

    parser = argparse.ArgumentParser(prog="latentflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy velocity MLP on a 2-Gaussian mixture")
    _add_common(p, default)
    p.add_argument("--steps", type=int, default=default(4000))
    p.add_argument("--batch", type=int, default=default(256))
    p.add_argument("--lr", type=float, default=default(1e-3))
    p.add_argument("--lr-schedule", choices=("cosine", "constant"), default=default("cosine"))
    p.add_argument("--hidden", default=default("64,64"), help="comma-separated hidden widths")
    p.add_argument("--n-data", type=int, default=default(4096))
    p.add_argument("--log-every", type=int, default=default(50))
    p.add_argument("--conditional", action="store_true", default=default(False),
                   help="condition on the mixture component (enables --guidance when sampling)")
    p.add_argument("--out", default=default(None), help="checkpoint path (default OUT_DIR/model.json)")

    p = sub.add_parser("sample", help="draw samples from a trained checkpoint")
    _add_common(p, default)
    p.add_argument("--ckpt", default=default(None))
    p.add_argument("--n", type=int, default=default(1000))
    p.add_argument("--schedule", default=default("linquad:50,250"), help="linear:N or linquad:S,N")
    p.add_argument("--solver", choices=("euler", "midpoint"), default=default("euler"))
    p.add_argument("--guidance", type=float, default=default(None), help="CFG scale")
    p.add_argument("--cls", type=int, default=default(None), help="class to condition on")

    p = sub.add_parser("tokens", help="transformer token count for a raw video size")
    _add_common(p, default)
    p.add_argument("--frames", type=int, default=default(256))
    p.add_argument("--height", type=int, default=default(768))
    p.add_argument("--width", type=int, default=default(768))
    p.add_argument("--tae-factor", type=int, default=default(8))
    p.add_argument("--patch", default=default("1,2,2"), help="kt,kh,kw")

    p = sub.add_parser("extend", help="long-sequence generation with a toy segment field")
    _add_common(p, default)
    p.add_argument("--mode", choices=("md", "ar", "beam"), default=default("md"))
    p.add_argument("--n", type=int, default=default(100))
    p.add_argument("--hop", type=int, default=default(30))
    p.add_argument("--ctx", type=int, default=default(10))
    p.add_argument("--window", choices=("uniform", "triangle"), default=default("triangle"))
    p.add_argument("--channels", type=int, default=default(2))
    p.add_argument("--schedule", default=default("linear:16"))
    p.add_argument("--ar-mode", choices=("context_cond", "trajectory_reg", "both"),
                   default=default("both"))
    p.add_argument("--candidates", type=int, default=default(4))
    p.add_argument("--beam", type=int, default=default(2))

    p = sub.add_parser("eval", help="pairwise evaluation statistics from JSONL")
    _add_common(p, default)
    p.add_argument("kind", choices=("nwt", "elo", "bt"))
    p.add_argument("--in", dest="input", default=default(None))
    p.add_argument("--sigma", type=float, default=default(None))
    p.add_argument("--bootstrap", type=int, default=default(1000))
    p.add_argument("--method", choices=("mle", "sequential"), default=default("mle"))
    p.add_argument("--prior", type=float, default=default(1.0))
    return parser


def resolve_args(argv: list[str]) -> argparse.Namespace:
    """Parse flags, then fill anything not given on the command line from ``--config``."""
    args = build_parser().parse_args(argv)
    if not args.config:
        return args
    explicit = vars(build_parser(explicit_only=True).parse_args(argv))
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    known = vars(args)
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest == "in":
            dest = "input"
        if dest not in known or dest in ("command", "config"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if dest not in explicit:
            setattr(args, dest, value)
    return args


def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(args, report: dict, header=None, rows=None) -> None:
    if args.format == "csv" and header is not None:
        sys.stdout.write(_csv_text(header, rows))
    else:
        sys.stdout.write(json.dumps(report, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_train(args) -> int:
    config = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed,
                         hidden=_ints(args.hidden), log_every=args.log_every,
                         lr_schedule=args.lr_schedule)
    config.validate()
    if args.n_data < 1:
        raise ConfigError("--n-data must be >= 1")
    out = _out_dir(args)
    ckpt = Path(args.out) if args.out else out / "model.json"
    points, labels = gaussian_mixture(args.n_data, Rng(args.seed, stream=1))
    if args.conditional:
        model, trace = train_flow(points, config, labels=labels, n_classes=2)
    else:
        model, trace = train_flow(points, config)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    trace_path = out / "loss_trace.csv"
    trace_path.write_text(_csv_text(["step", "loss"], [(s, repr(v)) for s, v in trace]),
                          encoding="utf-8")
    report = {"command": "train", "config": _config_dict(args), "seed": args.seed,
              "checkpoint": str(ckpt), "loss_trace": str(trace_path),
              "initial_loss": trace[0][1], "final_loss": trace[-1][1]}
    _emit(args, report, ["step", "loss"], [(s, repr(v)) for s, v in trace])
    return EXIT_OK


def cmd_sample(args) -> int:
    if not args.ckpt:
        raise ConfigError("--ckpt is required")
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    try:
        model = load_checkpoint(args.ckpt)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    sched = parse_schedule(args.schedule)
    guidance = GuidanceConfig(args.guidance) if args.guidance is not None else None
    cond = None
    if args.cls is not None:
        if not 0 <= args.cls < model.cond_dim:
            raise ConfigError(f"--cls must lie in [0, {model.cond_dim}) for this checkpoint")
        cond = np.eye(model.cond_dim)[args.cls]
    if guidance is not None and cond is None:
        raise ConfigError("--guidance needs --cls on a conditional checkpoint")
    samples = sample_model(model, args.n, sched, guidance, Rng(args.seed), cond, args.solver)
    points = samples.tolist()
    path = _out_dir(args) / "samples.json"
    path.write_text(json.dumps(points) + "\n", encoding="utf-8")
    report = {"command": "sample", "config": _config_dict(args), "seed": args.seed,
              "schedule": sched.knots.tolist(), "samples_file": str(path), "samples": points}
    _emit(args, report, ["x", "y"], [(repr(a), repr(b)) for a, b in points])
    return EXIT_OK


def cmd_tokens(args) -> int:
    spec = PatchSpec.parse(args.patch)
    f = args.tae_factor
    if f < 1:
        raise ConfigError("--tae-factor must be >= 1")
    for name, v in (("height", args.height), ("width", args.width)):
        if v < 1 or v % f:
            raise ConfigError(f"--{name} {v} is not a positive multiple of the TAE factor {f}")
    latent = (latent_frame_count(args.frames, f), args.height // f, args.width // f)
    count = token_count(*latent, spec)
    report = {"command": "tokens", "config": _config_dict(args), "seed": args.seed,
              "latent_thw": list(latent), "patch": [spec.k_t, spec.k_h, spec.k_w], "tokens": count}
    _emit(args, report, ["frames", "height", "width", "latent_t", "latent_h", "latent_w", "tokens"],
          [(args.frames, args.height, args.width, *latent, count)])
    return EXIT_OK


def _extend_targets(n: int, channels: int, n_segments: int) -> list[np.ndarray]:
    frames = np.arange(n, dtype=np.float64)[:, None]
    phase = np.arange(channels, dtype=np.float64)[None, :]
    base = np.sin(2 * np.pi * frames / 24.0 + phase)
    # each segment's "caption" shifts its target slightly, so overlaps disagree
    return [base + 0.1 * ((-1) ** j) for j in range(n_segments)]


def smoothness_score(x: np.ndarray) -> float:
    """Negative total squared frame-to-frame change; higher is smoother."""
    if x.shape[0] < 2:
        return 0.0
    return -float(np.sum(np.diff(x, axis=0) ** 2))


def cmd_extend(args) -> int:
    if args.channels < 1:
        raise ConfigError("--channels must be >= 1")
    plan = plan_segments(args.n, args.hop, args.ctx)
    window = "bartlett" if args.window == "triangle" else "uniform"
    sched = parse_schedule(args.schedule)
    fields = [target_field(t) for t in _extend_targets(args.n, args.channels, plan.n_segments)]
    rng = Rng(args.seed)
    if args.mode == "md":
        x_init = segment_rng(rng, 0, 0).normal((args.n, args.channels))
        seq = multidiffusion_solve(fields, plan, sched, x_init, window=window)
    elif args.mode == "ar":
        seq = ar_generate(fields, plan, sched, rng, args.channels, mode=args.ar_mode)
    else:
        seq = beam_extend(fields, plan, sched, smoothness_score, args.candidates, args.beam, rng,
                          args.channels, mode=args.ar_mode)
    masks = mask_report(plan, window)
    out = _out_dir(args)
    seg_cols = [f"seg{j}" for j in range(plan.n_segments)]
    (out / "sequence.csv").write_text(
        _csv_text(["frame"] + [f"c{c}" for c in range(args.channels)],
                  [(i, *map(repr, row)) for i, row in enumerate(seq.tolist())]), encoding="utf-8")
    mask_rows = [(i, *map(repr, row)) for i, row in enumerate(masks.tolist())]
    (out / "masks.csv").write_text(_csv_text(["frame"] + seg_cols, mask_rows), encoding="utf-8")
    report = {"command": "extend", "config": _config_dict(args), "seed": args.seed,
              "plan": {"n_total": plan.n_total, "n_win": plan.n_win, "n_hop": plan.n_hop,
                       "n_ctx": plan.n_ctx, "spans": [list(s) for s in plan.spans]},
              "mask_report": masks.tolist(), "sequence": seq.tolist()}
    _emit(args, report, ["frame"] + seg_cols, mask_rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.input:
        raise ConfigError("--in is required")
    try:
        records = es.read_jsonl(args.input)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from None
    report = {"command": "eval", "kind": args.kind, "config": _config_dict(args), "seed": args.seed}
    if args.kind == "nwt":
        items = es.parse_votes(records)
        if not items:
            raise ConfigError("no items in input")
        pairs: dict[tuple[str, str], list[float]] = {}
        for it in items:
            pairs.setdefault((it.model_a, it.model_b), []).append(es.consensus(it))
        results = []
        for k, ((a, b), scores) in enumerate(sorted(pairs.items())):
            nwt = es.net_win_rate(scores)
            row = {"model_a": a, "model_b": b, "items": len(scores), "nwt": nwt,
                   "ci_low": None, "ci_high": None, "band": None}
            if len(scores) >= 2 and args.bootstrap > 0:
                row["ci_low"], row["ci_high"] = es.bootstrap_ci(scores, args.bootstrap,
                                                                Rng(args.seed).child(k))
            if args.sigma is not None:
                row["band"] = es.significance_band(nwt, args.sigma)
            results.append(row)
        report["results"] = results
        cols = ["model_a", "model_b", "items", "nwt", "ci_low", "ci_high", "band"]
        _emit(args, report, cols, [[r[c] for c in cols] for r in results])
    elif args.kind == "elo":
        battles = es.parse_battles(records)
        ratings = es.elo_fit(battles, prior=args.prior, method=args.method)
        ranked = sorted(ratings.items(), key=lambda kv: (-kv[1], kv[0]))
        report["ratings"] = [{"model": m, "rating": r} for m, r in ranked]
        _emit(args, report, ["model", "rating"], ranked)
    else:
        fit = es.bt_fit(es.parse_bt_items(records))
        report["offsets"] = fit.offsets
        report["coef"] = fit.coef.tolist()
        report["log_likelihood"] = fit.log_likelihood
        report["iterations"] = fit.iterations
        rows = [("offset", m, "", v) for m, v in fit.offsets.items()]
        rows += [("coef", r, g, fit.coef[r, g]) for r in range(fit.coef.shape[0])
                 for g in range(fit.coef.shape[1])]
        _emit(args, report, ["kind", "key", "group", "value"], rows)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "tokens": cmd_tokens,
            "extend": cmd_extend, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = resolve_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, es.ConvergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
