"""Command-line pipeline: generate, train, detect, eval, and replay.

Every command writes ``run_manifest.json`` next to its outputs. The manifest
holds the command, its resolved arguments and the full config, so
``adaptprop replay --manifest PATH`` reruns it and reproduces the outputs
byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from .config import ABLATIONS, RunConfig, write_json
from .environment import HISTORY_LEN, trace_csv
from .evaluation import (
    class_centroids,
    curve_csv,
    detect_video,
    gts_by_video,
    group_by_video,
    map_at_05,
    parse_proposals_csv,
    per_class_ap,
    proposals_csv,
    recall_at,
    recall_vs_iou,
    recall_vs_num_proposals,
    relabel,
    top_k,
)
from .features import (
    FeatureMode,
    SyntheticSpec,
    atomic_write_bytes,
    generate_synthetic_dataset,
    load_dataset,
    load_manifest,
    save_dataset,
)
from .qnet import load_checkpoint, save_checkpoint
from .geometry import NUM_ACTIONS
from .trainer import ClassModel, log_csv, new_class_model, train_class_model

log = logging.getLogger("adaptprop")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST = "run_manifest.json"
DEFAULT_KS = (1, 2, 5, 10, 20, 50, 100, 200)
STATE_EXTRA = HISTORY_LEN * NUM_ACTIONS


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _package_version() -> str:
    try:
        return version("adaptprop")
    except PackageNotFoundError:
        return "unknown"


def worker_count(jobs: int) -> int:
    """Workers to use for ``jobs`` independent tasks, capped by ``TS_THREADS``."""
    cap = os.environ.get("TS_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"TS_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, jobs))


def _map(fn, items: list) -> list:
    """Ordered map, run in worker processes when more than one is allowed."""
    n = worker_count(len(items))
    if n == 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, *zip(*items)))


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_manifest(out_dir: Path, command: str, args: dict, config: dict | None = None) -> None:
    write_json(out_dir / MANIFEST, {
        "command": command,
        "args": args,
        "config": config,
        "package_version": _package_version(),
    })


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} file {p} must hold a JSON object")
    return data


def _load_data(data_dir, split=None):
    try:
        info = load_manifest(data_dir)
        return info, load_dataset(data_dir, split)
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot load dataset {data_dir}: {exc}") from None


# generate ---------------------------------------------------------------

def cmd_generate(spec: str, out: str, seed: int | None = None) -> int:
    data = _read_json(spec, "spec")
    if seed is not None:
        data["seed"] = seed
    try:
        synth = SyntheticSpec.from_dict(data)
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if synth.k_max == 0:
        log.warning("spec places no action instances; training is impossible on this dataset")
    out_dir = Path(out)
    save_dataset(generate_synthetic_dataset(synth), out_dir, synth)
    write_manifest(out_dir, "generate", {"spec": str(spec), "out": str(out), "seed": seed}, synth.to_dict())
    return EXIT_OK


# train ------------------------------------------------------------------

def _ckpt_paths(models: Path, c: int) -> tuple[Path, Path, Path]:
    return models / f"class_{c}_qnet.ckpt", models / f"class_{c}_regressor.ckpt", models / f"class_{c}_log.csv"


def _train_one(videos, c: int, cfg: RunConfig, out_dir: Path, resume: bool) -> int:
    q_path, r_path, log_path = _ckpt_paths(out_dir, c)
    model, start, prior = None, 0, ""
    if resume and q_path.exists():
        q_net, q_opt, meta = load_checkpoint(q_path)
        reg, reg_opt, _ = load_checkpoint(r_path)
        start = int(meta["epochs_done"])
        model = ClassModel(c, q_net, reg, q_opt, reg_opt)
        prior = log_path.read_text() if log_path.exists() else ""
    if cfg.epochs == 0:
        if model is None:
            model = new_class_model(c, videos[0].dim, videos[0].dim + STATE_EXTRA, cfg.train_config())
    else:
        model = train_class_model(videos, c, cfg.train_config(), cfg.episode_config(), model=model,
                                  start_epoch=start)
    new_rows = log_csv([e for e in model.log if e.epoch >= start])
    text = new_rows if not prior else prior + new_rows.split("\n", 1)[1]
    meta = {"class_id": c, "epochs_done": start + cfg.epochs, "feature_mode": cfg.feature_mode}
    save_checkpoint(q_path, model.q_net, model.q_opt, {**meta, "role": "qnet"})
    save_checkpoint(r_path, model.regressor, model.reg_opt, {**meta, "role": "regressor"})
    write_text(log_path, text)
    return c


def cmd_train(data: str, out: str, config: str | None = None, resume: bool = False,
              overrides: dict | None = None) -> int:
    raw = _read_json(config, "config") if config else {}
    raw.update(overrides or {})
    try:
        cfg = RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    info, videos = _load_data(data, "train")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = list(range(info.class_count))
    if cfg.epochs > 0:
        missing = [c for c in classes if not any(v.has_class(c) for v in videos)]
        if missing:
            raise DataError(f"no training video contains class {missing[0]}")
    _map(_train_one, [(videos, c, cfg, out_dir, resume) for c in classes])
    write_json(out_dir / "config.json", cfg.to_dict())
    write_manifest(out_dir, "train", {"data": str(data), "out": str(out), "config": config,
                                      "resume": resume, "overrides": overrides or {}}, cfg.to_dict())
    return EXIT_OK


# detect -----------------------------------------------------------------

def _detect_video(video, models: Path, class_ids: list[int], cfg: RunConfig):
    q_nets = [load_checkpoint(_ckpt_paths(models, c)[0])[0] for c in class_ids]
    for c, net in zip(class_ids, q_nets):
        if net.cfg.input_dim != video.dim + STATE_EXTRA:
            raise DataError(f"model for class {c} expects {net.cfg.input_dim - STATE_EXTRA}-d features, "
                            f"data has {video.dim}")
    regs = [load_checkpoint(_ckpt_paths(models, c)[1])[0] for c in class_ids] if cfg.use_regression else None
    props, runs = detect_video(video, q_nets, cfg.episode_config(), regs, cfg.trigger_bonus)
    return props, {c: trace_csv(run) for c, run in zip(class_ids, runs)}


def cmd_detect(data: str, models: str, out: str, ablation: str = "full", traces: str | None = None) -> int:
    if ablation not in ABLATIONS:
        raise UsageError(f"unknown ablation {ablation!r}")
    models_dir = Path(models)
    cfg_path = models_dir / "config.json"
    if not cfg_path.is_file():
        raise DataError(f"no trained models in {models_dir}")
    try:
        cfg = RunConfig.from_dict(json.loads(cfg_path.read_text())).with_ablation(ablation)
    except ValueError as exc:
        raise DataError(f"bad model config {cfg_path}: {exc}") from None
    info, videos = _load_data(data, "test")
    class_ids = list(range(info.class_count))
    for c in class_ids:
        q_path = _ckpt_paths(models_dir, c)[0]
        if not q_path.is_file():
            raise DataError(f"missing checkpoint {q_path}")
        trained_mode = load_checkpoint(q_path)[2].get("feature_mode")
        if trained_mode and trained_mode != cfg.feature_mode:
            log.warning("class %d model was trained with %s features, detecting with %s",
                        c, trained_mode, cfg.feature_mode)
    results = _map(_detect_video, [(v, models_dir, class_ids, cfg) for v in videos])
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trace_dir = Path(traces) if traces else out_path.parent / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    proposals = []
    for v, (props, per_class) in zip(videos, results):
        proposals.extend(props)
        for c, text in per_class.items():
            write_text(trace_dir / f"{v.id}_class{c}.csv", text)
    write_text(out_path, proposals_csv(proposals))
    write_manifest(out_path.parent, "detect", {"data": str(data), "models": str(models), "out": str(out),
                                               "ablation": ablation, "traces": traces}, cfg.to_dict())
    return EXIT_OK


# eval -------------------------------------------------------------------

def cmd_eval(proposals: str, data: str, out: str, classifier: str = "oracle",
             num_proposals: int = 50, theta: float = 0.5) -> int:
    if classifier not in ("oracle", "centroid"):
        raise UsageError(f"unknown classifier {classifier!r}")
    if num_proposals < 0:
        raise UsageError("--num-proposals must be >= 0")
    p = Path(proposals)
    if not p.is_file():
        raise UsageError(f"proposal file not found: {p}")
    try:
        props = parse_proposals_csv(p.read_text())
    except ValueError as exc:
        raise DataError(f"{p}: {exc}") from None
    info, test = _load_data(data, "test")
    by_id = {v.id: v for v in test}
    unknown = sorted({q.video_id for q in props} - set(by_id))
    if unknown:
        raise DataError(f"{p}: unknown video id {unknown[0]}")
    if not props:
        log.warning("proposal file is empty; every metric is 0")
    if num_proposals == 0:
        log.warning("--num-proposals 0 keeps no proposals; every metric is 0")

    gts = gts_by_video(test)
    grouped = group_by_video(props)
    kept = top_k(props, num_proposals)
    centroids = None
    if classifier == "centroid":
        _, train = _load_data(data, "train")
        try:
            centroids = class_centroids(train, info.class_count, FeatureMode.AVERAGE_POOL)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    labelled = relabel(kept, by_id, classifier, centroids, theta)
    aps = per_class_ap(labelled, test, info.class_count)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_text(out_dir / "recall_vs_proposals.csv",
               curve_csv(recall_vs_num_proposals(grouped, gts, 0.5, DEFAULT_KS), "avg_proposals", "recall"))
    write_text(out_dir / "recall_vs_iou.csv", curve_csv(recall_vs_iou(grouped, gts, k=100), "iou", "recall"))
    write_text(out_dir / "per_class_ap.csv",
               curve_csv([(c, ap) for c, ap in sorted(aps.items())], "class_id", "ap"))
    summary = {
        "classifier": classifier,
        "num_proposals": num_proposals,
        "num_videos": len(test),
        "num_ground_truths": sum(len(g) for g in gts.values()),
        "recall@0.5": recall_at(grouped, gts, 0.5, num_proposals) if num_proposals else 0.0,
        "map@0.5": map_at_05(labelled, test, info.class_count),
        "per_class_ap": {str(c): ap for c, ap in sorted(aps.items())},
    }
    write_json(out_dir / "summary.json", summary)
    write_manifest(out_dir, "eval", {"proposals": str(proposals), "data": str(data), "out": str(out),
                                     "classifier": classifier, "num_proposals": num_proposals,
                                     "theta": theta})
    return EXIT_OK


# replay -----------------------------------------------------------------

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval}


def cmd_replay(manifest: str, out: str | None = None) -> int:
    m = _read_json(manifest, "manifest")
    command = m.get("command")
    if command not in COMMANDS:
        raise UsageError(f"manifest {manifest} names no known command")
    args = dict(m.get("args") or {})
    if out is not None:
        if command == "detect":
            args["out"] = str(Path(out) / Path(args["out"]).name)
            if args.get("traces"):
                args["traces"] = str(Path(out) / "traces")
        else:
            args["out"] = out
    if command == "train" and m.get("config") is not None:
        # the resolved config wins over whatever the config file holds now
        args["config"], args["overrides"] = None, m["config"]
    return COMMANDS[command](**args)


# entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptprop", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="JSON synthetic dataset spec")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one Q-network and regressor per class")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat JSON run config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--feature-mode", choices=[m.value for m in FeatureMode])

    d = sub.add_parser("detect", help="search the test videos and write proposals")
    d.add_argument("--data", required=True)
    d.add_argument("--models", required=True)
    d.add_argument("--ablation", choices=ABLATIONS, default="full")
    d.add_argument("--out", required=True, help="proposal CSV path")
    d.add_argument("--traces", help="trace directory (default: traces/ next to --out)")

    e = sub.add_parser("eval", help="recall curves, per-class AP and mAP")
    e.add_argument("--proposals", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--classifier", choices=("oracle", "centroid"), default="oracle")
    e.add_argument("--out", required=True)
    e.add_argument("--num-proposals", type=int, default=50)
    e.add_argument("--theta", type=float, default=0.5, help="centroid background threshold")

    r = sub.add_parser("replay", help="rerun a command from its run manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", help="write outputs here instead of the recorded location")
    return p


def dispatch(ns: argparse.Namespace) -> int:
    if ns.command == "generate":
        return cmd_generate(ns.spec, ns.out, ns.seed)
    if ns.command == "train":
        overrides = {k: v for k, v in (("epochs", ns.epochs), ("seed", ns.seed),
                                       ("feature_mode", ns.feature_mode)) if v is not None}
        return cmd_train(ns.data, ns.out, ns.config, ns.resume, overrides)
    if ns.command == "detect":
        return cmd_detect(ns.data, ns.models, ns.out, ns.ablation, ns.traces)
    if ns.command == "eval":
        return cmd_eval(ns.proposals, ns.data, ns.out, ns.classifier, ns.num_proposals, ns.theta)
    return cmd_replay(ns.manifest, ns.out)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(ns)
    except UsageError as exc:
        print(f"adaptprop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"adaptprop: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, AssertionError, RuntimeError) as exc:
        print(f"adaptprop: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
