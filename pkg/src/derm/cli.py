"""Command-line surface: every pipeline stage as a subcommand over one config.

Commands are deterministic given (config, seed); rerunning a stage rewrites
its artifacts bit for bit, so the filesystem doubles as a resumable cache.
Errors print a single machine-parsable line to stderr:

  error: <Condition>: message
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from .config import (
    PipelineConfig,
    UPSTREAM_MODELS,
    UPSTREAM_SOURCES,
    build_model,
    default_config,
    emit_config,
    load_config,
)
from .data import EmbeddingRecord, KIND_CODES, KIND_NAMES
from .downstream import (
    DERM_INPUTS,
    DownstreamModel,
    DownstreamTrainConfig,
    build_features,
    evaluate,
    heuristic_arms,
    input_count_arms,
    run_sensitivity_experiment,
    train_downstream,
)
from .errors import (
    ConfigParseError,
    DermError,
    DimInconsistentError,
    MissingPrerequisiteError,
)
from .lifecycle import (
    DailyEmbeddingSet,
    aggregate_day,
    apply_retention,
    coverage_report,
    infer_daily,
    dedup_day,
    back_infer,
    initial_state,
    stability_report,
)
from .store import (
    STATE_META,
    StoreGeneration,
    generation_bytes,
    list_generations,
    load_generation,
    load_state,
    parse_generation,
    publish,
    save_state,
    serve,
    source_code,
    state_payload,
)
from .synth import load_world_files, write_world_files
from .trainer import load_snapshot, save_snapshot, train_batch_window, train_incremental

SOURCE_MODELS = {source: model for model, source in UPSTREAM_SOURCES.items()}


# ---------------------------------------------------------------------------
# path layout


def snapshot_path(cfg: PipelineConfig, model: str, day: int) -> Path:
    return cfg.paths.snapshots / model / f"day{day:03d}.snap"


def embedding_path(cfg: PipelineConfig, model: str, day: int) -> Path:
    return cfg.paths.embeddings / model / f"day{day:03d}.kv"


def state_dir(cfg: PipelineConfig, model: str, label: str) -> Path:
    return cfg.paths.state / model / label


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"{what} missing: {path}")
    return path


def _load_world(cfg: PipelineConfig):
    manifest = cfg.paths.world / "world.json"
    _require(manifest, "world manifest (run `derm generate` first)")
    world_cfg, data = load_world_files(cfg.paths.world)
    if world_cfg != cfg.world:
        raise ConfigParseError(
            f"world files under {cfg.paths.world} were generated from a "
            "different [world] section; rerun `derm generate`"
        )
    return data


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: PipelineConfig, args) -> int:
    manifest = write_world_files(cfg.paths.world, cfg.world)
    events = sum(manifest["event_counts"].values())
    print(f"wrote {cfg.world.days} day files, {events} events, "
          f"under {cfg.paths.world}")
    return 0


def cmd_train_upstream(cfg: PipelineConfig, args) -> int:
    data = _load_world(cfg)
    spec = cfg.upstream[args.model]
    model = build_model(cfg.world, spec)
    end = spec.batch_window_end
    window = {d: data[d] for d in range(1, end + 1)}
    loss_log: list = []
    snapshot = train_batch_window(model, window, spec.train, loss_log)
    out = snapshot_path(cfg, args.model, end)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(snapshot, out)
    print(f"batch window days 1..{end}: "
          f"{len(loss_log)} steps, wrote {out}")
    for day in range(end + 1, cfg.upstream_end_day + 1):
        day_log: list = []
        snapshot = train_incremental(snapshot, day, data.get(day, []),
                                     spec.train, model, day_log)
        out = snapshot_path(cfg, args.model, day)
        save_snapshot(snapshot, out)
        print(f"incremental day {day}: {len(day_log)} steps, wrote {out}")
    final = [loss for _, _, _, loss in loss_log[-20:]]
    if final:
        print(f"final batch-window loss (mean of last {len(final)} steps): "
              f"{np.mean(final):.4f}")
    return 0


def _write_daily(cfg: PipelineConfig, model: str, daily: DailyEmbeddingSet,
                 source: str) -> Path:
    vectors = {}
    dim = 0
    for (kind, entity_id), rec in daily.records.items():
        vec = np.asarray(rec.vector, dtype="<f4")
        dim = len(vec)
        vectors[(KIND_CODES[kind], entity_id, source_code(source))] = vec
    path = embedding_path(cfg, model, daily.day)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(generation_bytes(daily.day, dim, vectors))
    return path


def cmd_infer(cfg: PipelineConfig, args) -> int:
    data = _load_world(cfg)
    spec = cfg.upstream[args.model]
    if args.day is not None:
        spath = _require(snapshot_path(cfg, args.model, args.day),
                         f"snapshot for day {args.day} "
                         "(run `derm train-upstream` first)")
        snapshot = load_snapshot(spath)
        model = build_model(cfg.world, spec)
        records = infer_daily(snapshot, model, args.day,
                              data.get(args.day, []), spec.source)
        daily = dedup_day(records, day=args.day)
        path = _write_daily(cfg, args.model, daily, spec.source)
        print(f"day {args.day}: {len(daily.records)} entities, wrote {path}")
        return 0
    end = spec.batch_window_end
    spath = _require(snapshot_path(cfg, args.model, end),
                     f"batch snapshot for day {end} "
                     "(run `derm train-upstream` first)")
    snapshot = load_snapshot(spath)
    model = build_model(cfg.world, spec)
    first = max(1, end - args.back_window + 1)
    sets = back_infer(snapshot, model, list(range(first, end + 1)), data,
                      spec.source)
    for daily in sets:
        path = _write_daily(cfg, args.model, daily, spec.source)
        print(f"day {daily.day}: {len(daily.records)} entities, wrote {path}")
    return 0


def _daily_from_file(path: Path, source: str) -> DailyEmbeddingSet:
    gen = load_generation(path)
    records = {}
    for (kind_code, entity_id, _), vec in gen.vectors.items():
        kind = KIND_NAMES[kind_code]
        records[(kind, entity_id)] = EmbeddingRecord(
            entity_id, kind, gen.day, vec.astype(np.float64), source, 0)
    return DailyEmbeddingSet(gen.day, records)


def cmd_aggregate(cfg: PipelineConfig, args) -> int:
    spec = cfg.upstream[args.model]
    heuristic = cfg.lifecycle.heuristic
    sdir = state_dir(cfg, args.model, heuristic.label)
    if (sdir / STATE_META).exists():
        state = load_state(sdir)
    else:
        state = initial_state(heuristic)
    if args.day is not None:
        target = args.day
    else:
        available = _list_embedding_days(cfg, args.model)
        if not available:
            raise MissingPrerequisiteError(
                f"daily embeddings missing: {embedding_path(cfg, args.model, 1)} "
                "(run `derm infer` first)"
            )
        target = max(available)
    before = state
    for day in range(state.day + 1, target + 1):
        path = _require(embedding_path(cfg, args.model, day),
                        f"daily embeddings for day {day}")
        daily = _daily_from_file(path, spec.source)
        before = state
        state = aggregate_day(state, daily)
        state = apply_retention(state, day, cfg.lifecycle.retention_days)
    save_state(state, sdir, spec.source)
    report = {
        "model": args.model,
        "heuristic": heuristic.label,
        "day": state.day,
        "entities": len(state.entries),
        "stability_mean": None,
        "coverage": None,
    }
    if before is not state and before.entries:
        try:
            report["stability_mean"] = stability_report(before, state).mean
        except DermError:
            pass
    universe = {"user": set(range(cfg.world.num_users)),
                "pin": set(range(cfg.world.num_pins))}
    report["coverage"] = coverage_report(state, universe)
    cfg.paths.reports.mkdir(parents=True, exist_ok=True)
    rpath = cfg.paths.reports / \
        f"aggregate-{args.model}-{heuristic.label}-day{state.day:03d}.json"
    rpath.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    stab = report["stability_mean"]
    line = (f"state at day {state.day}: {len(state.entries)} entities, "
            f"coverage user {report['coverage'].get('user', 0.0):.2f} "
            f"pin {report['coverage'].get('pin', 0.0):.2f}")
    if stab is not None:
        line += f", stability {stab:.4f}"
    print(line)
    print(f"wrote {rpath}")
    return 0


_DAY_FILE_RE = re.compile(r"day(\d{3})\.kv$")


def _list_embedding_days(cfg: PipelineConfig, model: str) -> list[int]:
    edir = cfg.paths.embeddings / model
    if not edir.is_dir():
        return []
    days = []
    for p in edir.iterdir():
        m = _DAY_FILE_RE.fullmatch(p.name)
        if m:
            days.append(int(m.group(1)))
    return sorted(days)


def cmd_publish(cfg: PipelineConfig, args) -> int:
    spec = cfg.upstream[args.model]
    heuristic = cfg.lifecycle.heuristic
    sdir = state_dir(cfg, args.model, heuristic.label)
    _require(sdir / STATE_META,
             "aggregated state (run `derm aggregate` first)")
    state = load_state(sdir)
    candidate = state_payload(state, state.day, spec.source)
    existing = [(d, a, p) for d, a, p in
                list_generations(cfg.paths.store, spec.source)
                if d == state.day]
    if existing and existing[-1][2].read_bytes() == candidate:
        _, _, path = existing[-1]
        print(f"unchanged since {path}; not republishing")
        return 0
    path, gen = publish(state, state.day, spec.source, cfg.paths.store)
    print(f"published {len(gen)} vectors (day {gen.day}) to {path}")
    return 0


def _latest_generation(cfg: PipelineConfig, source: str,
                       store_dir: Path | None = None) -> StoreGeneration:
    sdir = store_dir if store_dir is not None else cfg.paths.store
    found = list_generations(sdir, source)
    if not found:
        raise MissingPrerequisiteError(
            f"no published generation for {source} under {sdir} "
            "(run `derm publish` first)"
        )
    return load_generation(found[-1][2])


def cmd_serve(cfg: PipelineConfig, args) -> int:
    sdir = args.store_dir if args.store_dir is not None else cfg.paths.store
    merged: dict = {}
    dims = set()
    days = []
    loaded = 0
    for source in UPSTREAM_SOURCES.values():
        found = list_generations(sdir, source)
        if not found:
            continue
        gen = load_generation(found[-1][2])
        merged.update(gen.vectors)
        dims.add(gen.dim)
        days.append(gen.day)
        loaded += 1
    if not merged:
        raise MissingPrerequisiteError(
            f"no generations under {sdir} (run `derm publish` first)"
        )
    if len(dims) > 1:
        raise DimInconsistentError(
            f"generations disagree on vector dim: {sorted(dims)}"
        )
    gen = StoreGeneration(max(days), dims.pop(), merged)
    handle = serve(gen, (cfg.serve.host, cfg.serve.port))
    host, port = handle.address
    print(f"serving {len(merged)} vectors from {loaded} generations "
          f"on {host}:{port}", flush=True)
    try:
        if args.ttl_seconds is not None:
            time.sleep(args.ttl_seconds)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return 0


def _split_samples(cfg: PipelineConfig, data):
    ds = cfg.downstream
    train = [s for d in range(ds.train_day_start, ds.test_day)
             for s in data.get(d, [])]
    test = data.get(ds.test_day, [])
    return train, test


def _generations_for(cfg: PipelineConfig, inputs) -> dict[str, StoreGeneration]:
    sources = {DERM_INPUTS[name][0] for name in inputs}
    gens = {}
    for source in sorted(sources):
        gen = _latest_generation(cfg, source)
        if gen.day >= cfg.downstream.test_day:
            raise MissingPrerequisiteError(
                f"need a generation for {source} published before test day "
                f"{cfg.downstream.test_day}; latest under {cfg.paths.store} "
                f"is day {gen.day}"
            )
        gens[source] = gen
    return gens


def cmd_train_downstream(cfg: PipelineConfig, args) -> int:
    data = _load_world(cfg)
    ds = cfg.downstream
    model_cfg = ds.model_config()
    gens = _generations_for(cfg, ds.derm_inputs)
    train, test = _split_samples(cfg, data)
    train_feats = build_features(train, model_cfg, gens)
    test_feats = build_features(test, model_cfg, gens)
    model = DownstreamModel(model_cfg, train_feats.base.shape[1],
                            train_feats.derm.shape[1],
                            seq_vocab=cfg.world.num_pins, seed=ds.seed)
    train_downstream(model, train_feats,
                     DownstreamTrainConfig(learning_rate=ds.learning_rate,
                                           batch_size=ds.batch_size,
                                           epochs=ds.epochs, seed=ds.seed))
    train_rep = evaluate(model, train_feats)
    test_rep = evaluate(model, test_feats)
    report = {
        "task": ds.task,
        "derm_inputs": list(ds.derm_inputs),
        "train": {"roc_auc": train_rep.roc_auc, "pr_auc": train_rep.pr_auc,
                  "samples": train_rep.samples},
        "test": {"roc_auc": test_rep.roc_auc, "pr_auc": test_rep.pr_auc,
                 "samples": test_rep.samples},
    }
    cfg.paths.reports.mkdir(parents=True, exist_ok=True)
    rpath = cfg.paths.reports / f"downstream-{ds.task}.json"
    rpath.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"{ds.task}: train roc_auc {train_rep.roc_auc:.4f}, "
          f"test roc_auc {test_rep.roc_auc:.4f} "
          f"pr_auc {test_rep.pr_auc:.4f} over {test_rep.samples} samples")
    print(f"wrote {rpath}")
    return 0


def _fold_generations(cfg: PipelineConfig, heuristics, sources):
    """Aggregate the daily embedding files in memory, one state per
    (heuristic, source), and freeze each into a generation."""
    end = cfg.upstream_end_day
    dailies = {}
    for source in sources:
        model = SOURCE_MODELS[source]
        per_day = []
        for day in range(1, end + 1):
            path = _require(embedding_path(cfg, model, day),
                            f"daily embeddings for day {day}")
            per_day.append(_daily_from_file(path, source))
        dailies[source] = per_day
    out: dict[str, dict[str, StoreGeneration]] = {}
    for h in heuristics:
        per_source = {}
        for source in sources:
            state = initial_state(h)
            for daily in dailies[source]:
                state = aggregate_day(state, daily)
                state = apply_retention(state, daily.day,
                                        cfg.lifecycle.retention_days)
            per_source[source] = parse_generation(
                state_payload(state, state.day, source))
        out[h.label] = per_source
    return out


def cmd_experiment(cfg: PipelineConfig, args) -> int:
    data = _load_world(cfg)
    ex = cfg.experiment
    ds = cfg.downstream
    if ex.grid == "heuristics":
        arms = heuristic_arms(ex.derm_inputs, list(ex.heuristics))
        heuristics = list(ex.heuristics)
        sources = sorted({DERM_INPUTS[name][0] for name in ex.derm_inputs})
    else:
        arms = input_count_arms(cfg.lifecycle.heuristic)
        heuristics = [cfg.lifecycle.heuristic]
        sources = sorted({src for src, _ in DERM_INPUTS.values()})
    generations = _fold_generations(cfg, heuristics, sources)
    train, test = _split_samples(cfg, data)
    result = run_sensitivity_experiment(
        ex.task, arms, list(ex.seeds), train, test, generations,
        seq_vocab=cfg.world.num_pins,
        model_cfg_base=ds.model_config(),
        train_cfg=DownstreamTrainConfig(learning_rate=ds.learning_rate,
                                        batch_size=ds.batch_size,
                                        epochs=ds.epochs, seed=ds.seed),
    )
    cfg.paths.reports.mkdir(parents=True, exist_ok=True)
    stem = f"experiment-{ex.grid}-{ex.task}"
    csv_path = cfg.paths.reports / f"{stem}.csv"
    csv_path.write_text(result.to_csv())
    txt_path = cfg.paths.reports / f"{stem}.txt"
    txt_path.write_text(result.summary_text())
    print(result.summary_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_default_config(args) -> int:
    print(emit_config(default_config()), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="derm",
        description="Entity-representation pipeline: synthetic world, "
                    "upstream training, embedding lifecycle, store, "
                    "downstream consumers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, desc: str):
        sp = sub.add_parser(name, help=desc, description=desc)
        sp.add_argument("-c", "--config", type=Path, default=Path("derm.ini"),
                        help="pipeline config file (default: derm.ini)")
        sp.set_defaults(func=func)
        return sp

    add("generate", cmd_generate, "generate the synthetic event world")

    tu = add("train-upstream", cmd_train_upstream,
             "train one upstream model: batch window, then daily increments")
    tu.add_argument("--model", choices=UPSTREAM_MODELS, required=True)

    inf = add("infer", cmd_infer,
              "infer daily embeddings from a snapshot")
    inf.add_argument("--model", choices=UPSTREAM_MODELS, required=True)
    group = inf.add_mutually_exclusive_group(required=True)
    group.add_argument("--day", type=int,
                       help="infer one day with that day's snapshot")
    group.add_argument("--back-window", type=int, metavar="DAYS",
                       help="re-infer the trailing window with the batch "
                            "snapshot")

    ag = add("aggregate", cmd_aggregate,
             "fold daily embeddings into the aggregated store state")
    ag.add_argument("--model", choices=UPSTREAM_MODELS, required=True)
    ag.add_argument("--day", type=int, default=None,
                    help="aggregate through this day (default: all available)")

    pub = add("publish", cmd_publish,
              "publish the aggregated state as an immutable generation")
    pub.add_argument("--model", choices=UPSTREAM_MODELS, required=True)

    srv = add("serve", cmd_serve, "serve published generations over TCP")
    srv.add_argument("--store-dir", type=Path, default=None,
                     help="serve from this directory instead of the "
                          "configured store")
    srv.add_argument("--ttl-seconds", type=float, default=None,
                     help="exit after this many seconds (default: run until "
                          "interrupted)")

    add("train-downstream", cmd_train_downstream,
        "train and evaluate the configured consumer model")
    add("experiment", cmd_experiment,
        "run the configured sensitivity grid, write CSV and summary")

    dc = sub.add_parser("default-config",
                        help="print the default config to stdout",
                        description="print the default config to stdout")
    dc.set_defaults(func=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "default-config":
            return cmd_default_config(args)
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except DermError as e:
        print(f"error: {e.condition}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
