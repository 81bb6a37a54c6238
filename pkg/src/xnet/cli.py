"""Command-line entry point.

Subcommands: pgm-train, pretrain, track, eval, synth-gen, dump-heatmaps.
Every run writes a ``run_manifest.json`` with the fully resolved config,
seeds and checkpoint hashes; ``track --from-manifest`` re-executes a run
bit-for-bit (in test precision).  ``XNET_SEED`` overrides the seed.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .backends import active_backend_name
from .boxes import BBox
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, VARIANTS
from .data import SynthSpec, load_sequence, save_sequence, synth_sequence
from .imageops import to_uint8
from .metrics import compute_report, render_overlays, write_report
from .pgm import analytic_teacher, distill_train, default_toy_set
from .pipeline import TrackingModel, pretrain, track_sequence


class UsageError(Exception):
    pass


def _resolve_seed(args, config: RunConfig) -> int:
    env = os.environ.get("XNET_SEED")
    if env is not None:
        return int(env)
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return config.seed


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        config = RunConfig.from_json(path)
    else:
        config = RunConfig()
    if getattr(args, "variant", None):
        config = config.with_variant(args.variant)
    return config


def _resolve_dataset(spec: str, fallback_seed: int):
    """'synth', 'synth:<spec.json>' or a sequence directory."""
    if spec == "synth":
        return synth_sequence(SynthSpec(n_frames=30, distractors=1, seed=fallback_seed)), {"builtin": "synth", "seed": fallback_seed}
    if spec.startswith("synth:"):
        path = Path(spec[len("synth:") :])
        if not path.exists():
            raise UsageError(f"synth spec file not found: {path}")
        d = json.loads(path.read_text())
        return synth_sequence(SynthSpec.from_dict(d)), {"synth_spec": d}
    path = Path(spec)
    if not path.is_dir():
        raise UsageError(f"dataset path not found: {spec}")
    return load_sequence(path), {"directory": str(path)}


def _write_manifest(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_results_csv(path: Path, results) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "x", "y", "w", "h", "confidence", "branch"])
        for r in results:
            w.writerow(
                [r.frame, f"{r.box.x:.4f}", f"{r.box.y:.4f}", f"{r.box.w:.4f}", f"{r.box.h:.4f}",
                 f"{r.confidence:.6f}", r.branch]
            )


def _read_results_csv(path: Path) -> list[BBox]:
    boxes = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            boxes.append(BBox(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])))
    return boxes


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pgm_train(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    T.set_mode(config.precision)
    if args.data == "synth":
        pairs = default_toy_set(seed)
        data_desc = {"builtin": "toy", "seed": seed}
    else:
        record, data_desc = _resolve_dataset(args.data, seed)
        pairs = record.frames
    epochs = args.epochs if args.epochs is not None else config.pgm_epochs
    params, trace = distill_train(
        pairs, analytic_teacher, epochs=epochs, batch=config.pgm_batch,
        noise_sigma=args.noise_sigma if args.noise_sigma is not None else config.pgm_noise_sigma,
        seed=seed, lr=config.pgm_lr, critic_iters=config.pgm_critic_iters,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    trace_path = out.with_suffix(".loss.csv")
    with open(trace_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "l1_loss"])
        for i, v in enumerate(trace):
            w.writerow([i, f"{v:.6f}"])
    _write_manifest(out.parent, {
        "command": "pgm-train",
        "version": __version__,
        "backend": active_backend_name(),
        "seed": seed,
        "epochs": epochs,
        "data": data_desc,
        "config": config.to_dict(),
        "checkpoints": {"pgm": {"path": str(out), "sha256": checkpoint_hash(out)}},
    })
    final = trace[-1] if trace else float("nan")
    print(f"pgm-train: {epochs} epochs, final loss {final:.4f}, checkpoint {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    T.set_mode(config.precision)
    records = []
    for spec in args.data.split(","):
        record, _ = _resolve_dataset(spec.strip(), seed)
        records.append(record)
    pgm_params = None
    if config.pgm:
        if args.pgm_checkpoint:
            pgm_params = {k: T.Tensor(v, requires_grad=True) for k, v in load_checkpoint(args.pgm_checkpoint).items()}
    model = TrackingModel.initialize(config, pgm_params=pgm_params)
    epochs = args.epochs if args.epochs is not None else config.pretrain_epochs
    trace = pretrain(model, records, epochs=epochs, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _write_manifest(out.parent, {
        "command": "pretrain",
        "version": __version__,
        "backend": active_backend_name(),
        "seed": seed,
        "epochs": epochs,
        "config": config.to_dict(),
        "checkpoints": {"model": {"path": str(out), "sha256": checkpoint_hash(out)}},
    })
    print(f"pretrain: {epochs} epochs over {len(records)} domains, final loss "
          f"{trace[-1] if trace else float('nan'):.4f}, checkpoint {out}")
    return 0


def _track_run(config: RunConfig, seed: int, dataset: str, out_dir: Path,
               pgm_ckpt: str | None, model_ckpt: str | None,
               dump_heatmaps: bool, dump_flow: bool, render: bool) -> int:
    T.set_mode(config.precision)
    record, data_desc = _resolve_dataset(dataset, seed)

    checkpoints: dict = {}
    pgm_params = None
    if config.pgm:
        if pgm_ckpt:
            pgm_params = {k: T.Tensor(v, requires_grad=True) for k, v in load_checkpoint(pgm_ckpt).items()}
            checkpoints["pgm"] = {"path": str(pgm_ckpt), "sha256": checkpoint_hash(pgm_ckpt)}
        else:
            pgm_params, _ = distill_train(
                default_toy_set(seed), analytic_teacher, epochs=config.pgm_epochs,
                batch=config.pgm_batch, noise_sigma=config.pgm_noise_sigma,
                seed=seed, lr=config.pgm_lr, critic_iters=config.pgm_critic_iters,
            )
            checkpoints["pgm"] = {"trained_inline_seed": seed}

    model = TrackingModel.initialize(config, pgm_params=pgm_params)
    if model_ckpt:
        model.load_weights(model_ckpt)
        checkpoints["model"] = {"path": str(model_ckpt), "sha256": checkpoint_hash(model_ckpt)}
    else:
        checkpoints["model"] = {"seed_init": seed}

    state = track_sequence(model, record, seed=seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_results_csv(out_dir / "results.csv", state.results)
    report = compute_report([r.box for r in state.results], record.gt, config.pr_threshold_px)
    write_report(report, out_dir)
    if render:
        render_overlays(record.frames, [r.box for r in state.results], record.gt, out_dir / "overlays")
    if dump_heatmaps:
        _dump_heatmaps(model, record, out_dir / "heatmaps")
    if dump_flow:
        _dump_flow(state, out_dir / "flow.csv")
    for wmsg in state.warnings:
        print(f"warning: {wmsg}", file=sys.stderr)
    _write_manifest(out_dir, {
        "command": "track",
        "version": __version__,
        "backend": active_backend_name(),
        "seed": seed,
        "dataset": dataset,
        "data": data_desc,
        "config": config.to_dict(),
        "checkpoints": checkpoints,
        "counters": model.counters,
    })
    print(f"track: {len(state.results)} frames, PR@{config.pr_threshold_px:g}px={report.pr_at:.3f}, "
          f"SR-AUC={report.sr_auc:.3f}, results in {out_dir}")
    return 0


def cmd_track(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        config = RunConfig.from_dict(manifest["config"])
        ckpts = manifest.get("checkpoints", {})
        pgm_ckpt = ckpts.get("pgm", {}).get("path")
        model_ckpt = ckpts.get("model", {}).get("path")
        out_dir = Path(args.out_dir) if args.out_dir else Path(args.from_manifest).parent / "rerun"
        return _track_run(config, manifest["seed"], manifest["dataset"], out_dir,
                          pgm_ckpt, model_ckpt, False, False, False)
    if not args.dataset:
        raise UsageError("track needs --dataset (or --from-manifest)")
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    out_dir = Path(args.out_dir or "runs/track")
    return _track_run(config, seed, args.dataset, out_dir, args.pgm_checkpoint,
                      args.model_checkpoint, args.dump_heatmaps, args.dump_flow, args.render)


def _dump_heatmaps(model: TrackingModel, record, out_dir: Path) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(record.frames):
        model.prepare_pair(pair)
        _, maps = model.frame_features(pair)
        if maps is None:
            raise UsageError("heatmap dump needs the feature interaction module enabled")
        heat = maps.att_rgbt.data.mean(axis=0)
        lo, hi = heat.min(), heat.max()
        norm = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
        Image.fromarray(to_uint8(norm)).save(out_dir / f"{i:05d}.png")


def _dump_flow(state, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "point_x", "point_y", "dx", "dy", "kept"])
        for frame, diag in state.flow_log:
            for (px, py), d in zip(diag.points, diag.displacements):
                if d is None:
                    w.writerow([frame, f"{px:.2f}", f"{py:.2f}", "", "", 0])
                else:
                    w.writerow([frame, f"{px:.2f}", f"{py:.2f}", f"{d.dx:.4f}", f"{d.dy:.4f}", 1])


def cmd_eval(args) -> int:
    config = _load_config(args)
    seed = _resolve_seed(args, config)
    results_path = Path(args.results)
    if not results_path.exists():
        raise UsageError(f"results file not found: {results_path}")
    record, _ = _resolve_dataset(args.dataset, seed)
    pred = _read_results_csv(results_path)
    if len(pred) != len(record.gt):
        raise ValueError(f"results have {len(pred)} rows but the dataset has {len(record.gt)} frames")
    threshold = 5.0 if args.gtot else (args.threshold if args.threshold is not None else config.pr_threshold_px)
    report = compute_report(pred, record.gt, threshold)
    out_dir = Path(args.out_dir or results_path.parent)
    write_report(report, out_dir)
    if args.render:
        render_overlays(record.frames, pred, record.gt, out_dir / "overlays")
    print(f"eval: PR@{threshold:g}px={report.pr_at:.3f}, SR-AUC={report.sr_auc:.3f}")
    return 0


def cmd_synth_gen(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise UsageError(f"synth spec file not found: {spec_path}")
    spec = SynthSpec.from_dict(json.loads(spec_path.read_text()))
    record = synth_sequence(spec)
    save_sequence(record, args.out)
    print(f"synth-gen: wrote {len(record.frames)} frames to {args.out}")
    return 0


def cmd_dump_heatmaps(args) -> int:
    config = _load_config(args)
    if not config.fim:
        raise UsageError("heatmap dump needs the feature interaction module enabled")
    seed = _resolve_seed(args, config)
    T.set_mode(config.precision)
    record, _ = _resolve_dataset(args.dataset, seed)
    pgm_params = None
    if config.pgm and args.pgm_checkpoint:
        pgm_params = {k: T.Tensor(v, requires_grad=True) for k, v in load_checkpoint(args.pgm_checkpoint).items()}
    model = TrackingModel.initialize(config, pgm_params=pgm_params)
    if args.model_checkpoint:
        model.load_weights(args.model_checkpoint)
    _dump_heatmaps(model, record, Path(args.out_dir))
    print(f"dump-heatmaps: wrote {len(record.frames)} maps to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xnet", description=__doc__)
    p.add_argument("--version", action="version", version=f"xnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config (flat keys)")
        sp.add_argument("--seed", type=int, default=None, help="seed (XNET_SEED env wins)")

    sp = sub.add_parser("pgm-train", help="distill the fusion student against the teacher")
    sp.add_argument("--data", required=True, help="'synth', 'synth:<spec.json>' or sequence dir")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--noise-sigma", type=float, default=None)
    sp.add_argument("--out", default="runs/pgm.xnt")
    common(sp)
    sp.set_defaults(func=cmd_pgm_train)

    sp = sub.add_parser("pretrain", help="offline multi-domain training of the feature pathway")
    sp.add_argument("--data", required=True, help="comma-separated dataset specs (domains)")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--pgm-checkpoint", default=None)
    sp.add_argument("--out", default="runs/model.xnt")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("track", help="run the online tracker over a sequence")
    sp.add_argument("--dataset", default=None, help="'synth', 'synth:<spec.json>' or sequence dir")
    sp.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    sp.add_argument("--pgm-checkpoint", default=None)
    sp.add_argument("--model-checkpoint", default=None)
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--from-manifest", default=None, help="re-execute a recorded run")
    sp.add_argument("--dump-heatmaps", action="store_true")
    sp.add_argument("--dump-flow", action="store_true")
    sp.add_argument("--render", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="compute PR/SR metrics for a results CSV")
    sp.add_argument("--results", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--threshold", type=float, default=None, help="center-error threshold in px (default 20)")
    sp.add_argument("--gtot", action="store_true", help="use the 5 px threshold")
    sp.add_argument("--render", action="store_true")
    sp.add_argument("--out-dir", default=None)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth-gen", help="render a synthetic sequence to disk")
    sp.add_argument("--spec", required=True, help="synth spec JSON file")
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("dump-heatmaps", help="write per-frame attention heatmaps")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pgm-checkpoint", default=None)
    sp.add_argument("--model-checkpoint", default=None)
    sp.add_argument("--out-dir", required=True)
    common(sp)
    sp.set_defaults(func=cmd_dump_heatmaps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
