"""Command-line surface: dataset generation through profiling.

Every subcommand is deterministic given its flags, seed, and input
files. Outputs land under --out together with a manifest recording the
invocation; files holding per-query lines start with # comment headers
carrying the same information. Exit codes: 0 success, 1 domain error,
2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checks import run_all
from .config import PipelineConfig
from .dataset import load_sequence, save_sequence
from .encoder import FeatureDb
from .errors import BevLoopError, NotFoundError
from .evaluate import eligible_size, run_evaluation
from .pipeline import PipelineModel
from .profiler import (
    STAGE_DESCRIBE,
    STAGE_ENCODE,
    STAGE_OVERLAP,
    STAGE_SELECT,
    STAGE_VOXELIZE,
    StageTimer,
    exhaustive_cost_hours,
    projected_cost_hours,
)
from .retrieval import CandidateSet, DescriptorDb, top_k
from .synth import SynthConfig, synth_world
from .trainer import TrainConfig, train


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"{path}: does not exist")
    return path


def _write_manifest(out_dir: Path, entries: dict) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="full", choices=("full", "desk"),
                   help="configuration preset (default full)")
    p.add_argument("--config", default=None, help="key = value file applied over the preset")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and sampling")


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig.preset(args.preset)
    if args.config:
        cfg = cfg.with_file(_require(args.config))
    return cfg


def _load_model(args, cfg: PipelineConfig) -> PipelineModel:
    model = PipelineModel(cfg, args.seed)
    weights = getattr(args, "weights", None)
    if weights:
        model.load_weights(_require(weights))
    return model


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_scans=args.n_scans,
        revisit_count=args.revisits,
        reverse_fraction=args.reverse_fraction,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    clouds, poses = synth_world(cfg)
    out = _out_dir(args)
    save_sequence(out, clouds, poses)
    _write_manifest(out, {
        "command": "synth",
        "seed": args.seed,
        "n_scans": cfg.n_scans,
        "revisits": cfg.revisit_count,
        "reverse_fraction": cfg.reverse_fraction,
        "noise_sigma": cfg.noise_sigma,
        "out": out,
    })
    print(f"wrote {len(clouds)} scans to {out}")
    return 0


def _cmd_train(args) -> int:
    data = _require(args.data)
    clouds, poses = load_sequence(data)
    cfg = _build_config(args).with_overrides(
        lr=args.lr, overlap_lr=args.overlap_lr, epochs=args.epochs,
        overlap_epochs=args.overlap_epochs, batches_per_epoch=args.batches,
    )
    model = PipelineModel(cfg, args.seed)
    tcfg = TrainConfig(
        margin=cfg.margin,
        sigma_pos=cfg.sigma_pos,
        sigma_neg=cfg.sigma_neg,
        n_pos=cfg.n_pos,
        n_neg=cfg.n_neg,
        lr=cfg.lr,
        overlap_lr=cfg.overlap_lr,
        epochs=cfg.epochs,
        overlap_epochs=cfg.overlap_epochs,
        batches_per_epoch=cfg.batches_per_epoch,
        seed=args.seed,
        mode=args.mode,
    )
    out = _out_dir(args)
    with open(out / "train_log.txt", "w") as log:
        history = train(model, clouds, poses, tcfg, out_dir=out, log=log)
    model.save_weights(out / "weights.ckpt")
    _write_manifest(out, {
        "command": "train",
        "seed": args.seed,
        "preset": args.preset,
        "config": args.config or "",
        "data": data,
        "mode": args.mode,
        "out": out,
    })
    final = history[-1] if history else float("nan")
    print(f"trained {tcfg.mode} for {len(history)} epochs, final loss {final:.6f}")
    return 0


def _cmd_index(args) -> int:
    data = _require(args.data)
    clouds, _ = load_sequence(data)
    cfg = _build_config(args)
    model = _load_model(args, cfg)
    out = _out_dir(args)
    feature_path = out / "features.db"
    descriptor_path = out / "descriptors.db"
    for stale in (feature_path, descriptor_path):
        if stale.exists():
            stale.unlink()
    model.index_sequence(
        clouds, jobs=args.jobs, feature_path=feature_path, descriptor_path=descriptor_path
    )
    _write_manifest(out, {
        "command": "index",
        "seed": args.seed,
        "preset": args.preset,
        "config": args.config or "",
        "data": data,
        "weights": args.weights or "",
        "jobs": args.jobs,
        "out": out,
    })
    print(f"indexed {len(clouds)} scans into {out}")
    return 0


def _cmd_retrieve(args) -> int:
    index_dir = _require(args.index)
    vdb = DescriptorDb.open(_require(index_dir / "descriptors.db"))
    cfg = _build_config(args)
    k = args.k if args.k is not None else cfg.top_k
    exclusion = args.exclusion if args.exclusion is not None else cfg.exclusion
    lines = [f"# retrieve seed={args.seed} k={k} exclusion={exclusion}"]
    for q in vdb.ids():
        cands = top_k(vdb, vdb.get(q), q, k, exclusion)
        for sid, aff in cands.entries:
            lines.append(f"{q} {sid} {aff:.17g}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote candidates for {len(vdb)} queries to {out}")
    return 0


def _cmd_verify(args) -> int:
    index_dir = _require(args.index)
    fdb = FeatureDb.open(_require(index_dir / "features.db"))
    cfg = _build_config(args)
    model = _load_model(args, cfg)
    per_query: dict[int, list] = {}
    for raw in _require(args.candidates).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        q_str, sid_str, aff_str = line.split()
        per_query.setdefault(int(q_str), []).append((int(sid_str), float(aff_str)))
    out = _out_dir(args)
    tau_lines = [f"# verify seed={args.seed}"]
    match_lines = [f"# verify seed={args.seed}"]
    for q in sorted(per_query):
        entries = per_query[q]
        decision = model.overlap.verify(
            fdb.get(q), CandidateSet(q, tuple(entries), len(entries)), fdb
        )
        for sid, tau in decision.scores:
            tau_lines.append(f"{q} {sid} {tau:.17g}")
        match_lines.append(f"{q} {decision.best_id} {decision.tau_best:.17g}")
    (out / "taus.txt").write_text("\n".join(tau_lines) + "\n")
    (out / "matches.txt").write_text("\n".join(match_lines) + "\n")
    _write_manifest(out, {
        "command": "verify",
        "seed": args.seed,
        "index": index_dir,
        "candidates": args.candidates,
        "weights": args.weights or "",
        "out": out,
    })
    print(f"verified {len(per_query)} queries into {out}")
    return 0


def _cmd_evaluate(args) -> int:
    data = _require(args.data)
    clouds, poses = load_sequence(data)
    cfg = _build_config(args)
    model = _load_model(args, cfg)
    k = args.k if args.k is not None else cfg.top_k
    exclusion = args.exclusion if args.exclusion is not None else cfg.exclusion
    report = run_evaluation(
        model, clouds, poses, k=k, exclusion=exclusion, sequence=data.name, jobs=args.jobs
    )
    out = _out_dir(args)
    (out / "report.txt").write_text("\n".join(report.metric_lines()) + "\n")
    (out / "curve.dat").write_text(report.curve_table())
    match_lines = [f"# evaluate seed={args.seed} k={k} exclusion={exclusion}"]
    for q in sorted(report.final_matches):
        sid, tau = report.final_matches[q]
        match_lines.append(f"{q} {sid} {tau:.17g}")
    (out / "matches.txt").write_text("\n".join(match_lines) + "\n")
    _write_manifest(out, {
        "command": "evaluate",
        "seed": args.seed,
        "preset": args.preset,
        "config": args.config or "",
        "data": data,
        "weights": args.weights or "",
        "k": k,
        "exclusion": exclusion,
        "jobs": args.jobs,
        "out": out,
    })
    for line in report.metric_lines():
        print(line)
    return 0


def _cmd_profile(args) -> int:
    data = _require(args.data)
    clouds, poses = load_sequence(data)
    if not clouds:
        raise NotFoundError(f"{data}: no scans")
    cfg = _build_config(args)
    model = _load_model(args, cfg)
    k = args.k if args.k is not None else cfg.top_k
    exclusion = args.exclusion if args.exclusion is not None else cfg.exclusion
    timer = StageTimer()
    fdb, vdb = model.index_sequence(clouds, timer=timer, jobs=args.jobs)
    queryable = [q for q in range(len(clouds)) if eligible_size(q, exclusion) > 0]
    probes = queryable if args.queries is None else queryable[: args.queries]
    for q in probes:
        cands = top_k(vdb, vdb.get(q), q, k, exclusion)
        model.overlap.verify(fdb.get(q), cands, fdb, timer=timer)
    with timer.stage(STAGE_SELECT):
        pass  # guarantee the stage exists even with no eligible queries
    ms = {name: timer.mean_ms(name) for name in (
        STAGE_VOXELIZE, STAGE_ENCODE, STAGE_DESCRIBE, STAGE_SELECT, STAGE_OVERLAP,
    )}
    n = len(clouds)
    n_queries = len(queryable)
    total_pairs = sum(eligible_size(q, exclusion) for q in queryable)
    cf_hours = projected_cost_hours(
        n, n_queries, ms[STAGE_VOXELIZE], ms[STAGE_ENCODE], ms[STAGE_DESCRIBE],
        ms[STAGE_SELECT], ms[STAGE_OVERLAP], k,
    )
    ex_hours = exhaustive_cost_hours(
        n, ms[STAGE_VOXELIZE], ms[STAGE_ENCODE], ms[STAGE_DESCRIBE],
        total_pairs, ms[STAGE_OVERLAP],
    )
    lines = timer.report_lines()
    lines.append(f"projected_cf_hours {cf_hours:.6f}")
    lines.append(f"projected_exhaustive_hours {ex_hours:.6f}")
    for line in lines:
        print(line)
    if args.out:
        out = _out_dir(args)
        (out / "profile.txt").write_text("\n".join(lines) + "\n")
        _write_manifest(out, {
            "command": "profile",
            "seed": args.seed,
            "data": data,
            "weights": args.weights or "",
            "k": k,
            "queries": len(probes),
            "out": out,
        })
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    for name, report in run_all(args.tolerance).items():
        print(f"{name}: {report.summary()}")
        failed = failed or not report.passed
    return 1 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scans", type=int, default=200)
    p.add_argument("--revisits", type=int, default=20)
    p.add_argument("--reverse-fraction", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train descriptor (and overlap) weights")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="B", choices=("A", "B"))
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--overlap-lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--overlap-epochs", type=int, default=None)
    p.add_argument("--batches", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("index", help="voxelize, encode, describe a sequence")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("retrieve", help="coarse Top-K candidates per query")
    _add_model_flags(p)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--exclusion", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("verify", help="fine stage over a candidates file")
    _add_model_flags(p)
    p.add_argument("--index", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("evaluate", help="full coarse-to-fine evaluation")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--exclusion", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("profile", help="stage timings and cost projections")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--exclusion", type=int, default=None)
    p.add_argument("--queries", type=int, default=None,
                   help="probe only this many queries (default: all)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BevLoopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
