"""Command-line entry point.

Subcommands: `gen` (synthetic dataset), `train`, `detect`, `probe`,
`bench`, `ablate`, and `gradcheck`. Every run requires --seed, resolves
its configuration as flags over config file over built-in defaults, and
writes a JSON manifest recording the resolved configuration, seed, git
revision, output paths, and wall time. Exit codes: 0 success, 1 usage
error, 2 runtime failure. The SHIFTSSD_LOG environment variable
(error / info / debug) controls stderr verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import data as DT
from . import detector as D
from . import geometry as G
from . import harness as H
from . import ssa as S
from . import tensor as T

log = logging.getLogger("shiftssd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config serialization (JSON mirrors the dataclass field names)


def scale_to_dict(s: S.ScaleConfig) -> dict:
    return {"radius": s.radius, "k": s.k, "mlp": list(s.mlp)}


def scale_from_dict(d: dict) -> S.ScaleConfig:
    return S.ScaleConfig(radius=d["radius"], k=d["k"], mlp=list(d["mlp"]))


def ssa_to_dict(c: S.SsaConfig) -> dict:
    return {
        "scales": [scale_to_dict(s) for s in c.scales],
        "shift_ratio": c.shift_ratio,
        "r_prime": c.r_prime,
        "candidate_k": c.candidate_k,
        "aggregation": list(c.aggregation),
        "exchange_op": c.exchange_op,
        "selection": c.selection,
    }


def ssa_from_dict(d: dict) -> S.SsaConfig:
    return S.SsaConfig(
        scales=[scale_from_dict(s) for s in d["scales"]],
        shift_ratio=d.get("shift_ratio", 1.0 / 8.0),
        r_prime=d.get("r_prime"),
        candidate_k=d.get("candidate_k"),
        aggregation=list(d.get("aggregation", [])),
        exchange_op=d.get("exchange_op", "cs"),
        selection=d.get("selection", "farthest"),
    )


def model_to_dict(c: D.ModelConfig) -> dict:
    return {
        "stage_points": list(c.stage_points),
        "stage_ssa": [ssa_to_dict(s) for s in c.stage_ssa],
        "num_classes": c.num_classes,
        "anchors": [list(a) for a in c.anchors],
        "in_channels": c.in_channels,
        "vote_hidden": list(c.vote_hidden),
        "agg_radius": c.agg_radius,
        "agg_k": c.agg_k,
        "agg_f": list(c.agg_f),
        "agg_a": list(c.agg_a),
        "head_hidden": list(c.head_hidden),
        "angle_bins": c.angle_bins,
        "nms_iou": c.nms_iou,
        "score_threshold": c.score_threshold,
    }


def model_from_dict(d: dict) -> D.ModelConfig:
    return D.ModelConfig(
        stage_points=tuple(d["stage_points"]),
        stage_ssa=[ssa_from_dict(s) for s in d["stage_ssa"]],
        num_classes=d["num_classes"],
        anchors=[tuple(a) for a in d["anchors"]],
        in_channels=d.get("in_channels", 1),
        vote_hidden=list(d.get("vote_hidden", [64])),
        agg_radius=d.get("agg_radius", 4.0),
        agg_k=d.get("agg_k", 16),
        agg_f=list(d.get("agg_f", [128, 128])),
        agg_a=list(d.get("agg_a", [128])),
        head_hidden=list(d.get("head_hidden", [64])),
        angle_bins=d.get("angle_bins", 12),
        nms_iou=d.get("nms_iou", 0.25),
        score_threshold=d.get("score_threshold", 0.3),
    )


def synth_to_dict(c: DT.SynthConfig) -> dict:
    return {
        "extent": c.extent,
        "points_per_scene": c.points_per_scene,
        "noise_points": c.noise_points,
        "objects_min": c.objects_min,
        "objects_max": c.objects_max,
        "point_jitter": c.point_jitter,
        "noise_height": c.noise_height,
        "classes": [
            {"name": s.name, "mean_size": list(s.mean_size), "size_jitter": list(s.size_jitter)}
            for s in c.classes
        ],
    }


def synth_from_dict(d: dict) -> DT.SynthConfig:
    kwargs = {k: d[k] for k in (
        "extent", "points_per_scene", "noise_points", "objects_min",
        "objects_max", "point_jitter", "noise_height",
    ) if k in d}
    if "classes" in d:
        kwargs["classes"] = [
            DT.ClassSpec(s["name"], tuple(s["mean_size"]), tuple(s["size_jitter"]))
            for s in d["classes"]
        ]
    return DT.SynthConfig(**kwargs)


def train_to_dict(c: H.TrainConfig) -> dict:
    return {
        "epochs": c.epochs,
        "peak_lr": c.peak_lr,
        "beta1": c.beta1,
        "beta2": c.beta2,
        "adam_eps": c.adam_eps,
        "warmup_frac": c.warmup_frac,
        "div_factor": c.div_factor,
        "final_div_factor": c.final_div_factor,
        "seed": c.seed,
    }


def train_from_dict(d: dict) -> H.TrainConfig:
    kwargs = {k: d[k] for k in (
        "epochs", "peak_lr", "beta1", "beta2", "adam_eps",
        "warmup_frac", "div_factor", "final_div_factor", "seed",
    ) if k in d}
    return H.TrainConfig(**kwargs)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config file {path}: {err}") from err
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return payload


def anchors_from_synth(synth: DT.SynthConfig) -> list[tuple[float, float, float]]:
    return [tuple(spec.mean_size) for spec in synth.classes]


# ---------------------------------------------------------------------------
# manifests


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _atomic_write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


class ManifestWriter:
    """Collects run metadata and writes it atomically on success or
    handled failure."""

    def __init__(self, subcommand: str, seed: int, resolved_config: dict, path: Path):
        self.path = Path(path)
        self.record = {
            "subcommand": subcommand,
            "seed": seed,
            "config": resolved_config,
            "git": _git_describe(),
            "outputs": [],
            "status": "running",
        }
        self._start = time.perf_counter()

    def add_output(self, path) -> None:
        self.record["outputs"].append(str(path))

    def finish(self, status: str, error: str | None = None) -> None:
        self.record["status"] = status
        if error:
            self.record["error"] = error
        self.record["wall_time_s"] = round(time.perf_counter() - self._start, 6)
        _atomic_write_json(self.path, self.record)


def _run_with_manifest(subcommand, seed, resolved, manifest_path, body) -> None:
    writer = ManifestWriter(subcommand, seed, resolved, manifest_path)
    try:
        body(writer)
    except Exception as err:
        writer.finish("failed", error=str(err))
        raise
    writer.finish("ok")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    synth = synth_from_dict(file_cfg.get("synth", {}))
    for flag, attr in (
        ("points", "points_per_scene"),
        ("noise", "noise_points"),
        ("extent", "extent"),
        ("objects_min", "objects_min"),
        ("objects_max", "objects_max"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(synth, attr, value)
    synth.__post_init__()
    out_dir = Path(args.out)
    resolved = {"synth": synth_to_dict(synth), "scenes": args.scenes}

    def body(writer):
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.scenes):
            sid = f"scene_{i:04d}"
            scene = DT.generate_scene(synth, seed=G.derive_seed(args.seed, 50, i))
            DT.write_scene(out_dir, sid, scene)
            writer.add_output(out_dir / f"{sid}.bin")
            writer.add_output(out_dir / f"{sid}.json")
        log.info("wrote %d scenes to %s", args.scenes, out_dir)

    _run_with_manifest("gen", args.seed, resolved, out_dir / "manifest.json", body)
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    scenes = DT.dataset(args.data)
    if "model" in file_cfg:
        model = model_from_dict(file_cfg["model"])
    else:
        # anchors default to the class mean sizes of the generator config
        synth_meta = synth_from_dict(file_cfg.get("synth", {}))
        anchors = anchors_from_synth(synth_meta)
        model = D.default_model_config(num_classes=len(anchors), anchors=anchors)
    train = train_from_dict(file_cfg.get("train", {}))
    train.seed = args.seed
    if args.epochs is not None:
        train.epochs = args.epochs
    if args.lr is not None:
        train.peak_lr = args.lr

    out_dir = Path(args.out)
    ckpt = out_dir / "model.ckpt"
    loss_csv = out_dir / "loss.csv"
    train.checkpoint_path = str(ckpt)
    train.log_csv_path = str(loss_csv)
    resolved = {"model": model_to_dict(model), "train": train_to_dict(train)}

    def body(writer):
        out_dir.mkdir(parents=True, exist_ok=True)
        result = H.train_toy(scenes, model, train)
        T.save_checkpoint(
            ckpt, result.params.named(),
            meta={"model_config": model_to_dict(model), "train_config": train_to_dict(train)},
        )
        writer.add_output(ckpt)
        writer.add_output(loss_csv)
        ratio = result.final_loss / max(result.first_epoch_loss, 1e-12)
        print(
            f"trained {train.epochs} epochs on {len(scenes)} scenes: "
            f"loss {result.first_epoch_loss:.4f} -> {result.final_loss:.4f} "
            f"(x{ratio:.3f})"
        )

    _run_with_manifest("train", args.seed, resolved, out_dir / "manifest.json", body)
    return 0


def _load_model(path) -> tuple[D.ModelConfig, D.ModelParams]:
    arrays, meta = T.load_checkpoint(path)
    if "model_config" not in meta:
        raise ValueError(f"checkpoint {path} carries no model config")
    config = model_from_dict(meta["model_config"])
    params = D.init_model_params(config, seed=0)
    T.load_into(params.named(), arrays)
    return config, params


def cmd_detect(args) -> int:
    config, params = _load_model(args.model)
    if args.score_threshold is not None:
        config.score_threshold = args.score_threshold
    if args.nms_iou is not None:
        config.nms_iou = args.nms_iou
    cloud = DT.read_cloud(args.input)
    out_path = Path(args.out)
    resolved = {"model": model_to_dict(config)}

    def body(writer):
        dets = D.detect(cloud, config, params, args.seed)
        scene_id = Path(args.input).stem
        DT.write_detections(out_path, scene_id, dets)
        writer.add_output(out_path)
        print(f"{len(dets)} detections -> {out_path}")

    _run_with_manifest(
        "detect", args.seed, resolved,
        out_path.with_name(out_path.name + ".manifest.json"), body,
    )
    return 0


def cmd_probe(args) -> int:
    config, params = _load_model(args.model)
    scenes = DT.dataset(args.data)
    if args.scenes is not None:
        scenes = scenes[: args.scenes]
    out_path = Path(args.out)
    resolved = {
        "model": model_to_dict(config),
        "eps": args.eps,
        "tol": args.tol,
        "scenes": len(scenes),
    }

    def body(writer):
        rows = []
        for idx, (scene, sid) in enumerate(scenes):
            report = H.receptive_field_probe(
                config, params, scene.cloud, eps=args.eps, tol=args.tol,
                seed=H.scene_seed(args.seed, idx),
            )
            violations = report.plain_containment_violations(scene.cloud.positions)
            for c in range(report.cluster_positions.shape[0]):
                rows.append(
                    [
                        sid, c,
                        f"{report.radius_shift[c]:.6f}",
                        f"{report.radius_plain[c]:.6f}",
                        int(report.pairing[c]),
                        int(report.qualifying[c]),
                        int(report.expanded()[c]),
                        f"{report.composed_reach:.6f}",
                        violations,
                    ]
                )
            log.info("probe %s: %s", sid, report.summary())
        with open(out_path, "w", newline="") as fh:
            writer_csv = csv.writer(fh)
            writer_csv.writerow(
                [
                    "scene_id", "cluster", "radius_shift", "radius_plain",
                    "pairing", "qualifying", "expanded", "composed_reach",
                    "plain_violations",
                ]
            )
            writer_csv.writerows(rows)
        writer.add_output(out_path)
        print(f"probed {len(scenes)} scenes -> {out_path}")

    _run_with_manifest(
        "probe", args.seed, resolved,
        out_path.with_name(out_path.name + ".manifest.json"), body,
    )
    return 0


def cmd_bench(args) -> int:
    file_cfg = _load_config_file(args.config)
    scenes = DT.dataset(args.data)
    clouds = [scene.cloud for scene, _ in scenes]
    if "model" in file_cfg:
        base = model_from_dict(file_cfg["model"])
        cs_cfg = base
        import dataclasses

        none_cfg = dataclasses.replace(
            base, stage_ssa=[dataclasses.replace(c, exchange_op="none") for c in base.stage_ssa]
        )
    else:
        cs_cfg = D.default_model_config(exchange_op="cs")
        none_cfg = D.default_model_config(exchange_op="none")
    out_path = Path(args.out)
    resolved = {"model": model_to_dict(cs_cfg), "repetitions": args.reps}

    def body(writer):
        variants = [
            ("cs", cs_cfg, D.init_model_params(cs_cfg, seed=args.seed)),
            ("none", none_cfg, D.init_model_params(none_cfg, seed=args.seed)),
        ]
        report = H.latency_bench(variants, clouds, repetitions=args.reps, seed=args.seed)
        H.write_bench_csv(out_path, report)
        writer.add_output(out_path)
        for row in report.rows:
            print(
                f"{row.name}: median {row.median_ms:.2f} ms, "
                f"mean {row.mean_ms:.2f} ms, {row.param_count} params"
            )

    _run_with_manifest(
        "bench", args.seed, resolved,
        out_path.with_name(out_path.name + ".manifest.json"), body,
    )
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    scenes = DT.dataset(args.data)
    train = train_from_dict(file_cfg.get("train", {}))
    train.seed = args.seed
    if args.epochs is not None:
        train.epochs = args.epochs
    axes = None if args.axis == "all" else [args.axis]
    out_path = Path(args.out)
    anchors = anchors_from_synth(synth_from_dict(file_cfg.get("synth", {})))

    def factory(ratio, selection, exchange):
        return D.default_model_config(
            num_classes=len(anchors),
            anchors=anchors,
            exchange_op=exchange,
            selection=selection,
            shift_ratio=ratio,
        )

    resolved = {"train": train_to_dict(train), "axes": axes or ["ratio", "selection", "exchange"]}

    def body(writer):
        report = H.run_ablation(scenes, factory, train, axes=axes, jobs=args.jobs)
        H.write_ablation_csv(out_path, report)
        writer.add_output(out_path)
        for cell in report.cells:
            metric = f"recall {cell.recall:.3f} loss {cell.mean_loss:.4f}" if cell.status == "ok" else cell.detail
            print(f"{cell.axis}={cell.value}: {cell.status} {metric}")

    _run_with_manifest(
        "ablate", args.seed, resolved,
        out_path.with_name(out_path.name + ".manifest.json"), body,
    )
    return 0


def cmd_gradcheck(args) -> int:
    resolved = {"eps": args.eps, "tol": args.tol}
    worst_holder = {}

    def body(writer):
        errors = H.gradcheck_suite(args.seed, eps=args.eps)
        for name, err in errors.items():
            print(f"{name}: {err:.3e}")
        worst = max(errors.values())
        worst_holder["worst"] = worst
        print(f"worst relative error: {worst:.3e} (tolerance {args.tol:.1e})")

    manifest_path = Path(args.manifest) if args.manifest else Path("gradcheck.manifest.json")
    _run_with_manifest("gradcheck", args.seed, resolved, manifest_path, body)
    if worst_holder["worst"] >= args.tol:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="shiftssd", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, required=True, help="master random seed")
        p.add_argument("--config", type=str, default=None, help="JSON config file")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--noise", type=int, default=None)
    p.add_argument("--extent", type=float, default=None)
    p.add_argument("--objects-min", dest="objects_min", type=int, default=None)
    p.add_argument("--objects-max", dest="objects_max", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="overfit the toy detector on a dataset")
    add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection on one scene file")
    add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--in", dest="input", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--score-threshold", dest="score_threshold", type=float, default=None)
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("probe", help="measure receptive radii by perturbation")
    add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--scenes", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", help="forward latency and parameter counts")
    add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--reps", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="one-axis-at-a-time ablation sweep")
    add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--axis", choices=["ratio", "selection", "exchange", "all"], default="all")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--manifest", type=str, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("SHIFTSSD_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        level_name = "error"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers.clear()
    log.addHandler(handler)
    log.setLevel(levels[level_name])


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
