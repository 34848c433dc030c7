"""Command-line front end.

Subcommands cover the whole workflow: synthetic data generation, the two
training stages, capsule encoding, the alignment and retrieval
protocols, the ablation grid, PLY export, and the finite-difference
gradient checks.  Progress and human-readable summaries go to standard
error; machine-readable metrics and reports go to files under the
chosen output directory, each accompanied by a manifest.

Exit codes: 0 success, 2 configuration problem (bad key, bad value,
malformed input file), 3 missing file (checkpoint, dataset), 4 numeric
failure (non-finite loss, gradient check above tolerance), 1 anything
unexpected.

The dataset directory defaults to ``$GEOCAPS_DATA_ROOT`` or ``./data``.
``--threads N`` pins the BLAS/OpenMP pools; it must take effect before
numpy is first imported, which is why this module defers every numeric
import into the subcommand bodies.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _configure_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ValueError(f"--threads must be >= 1, got {threads}")
    if "numpy" in sys.modules:
        _say("note: numpy already imported; --threads may not take effect")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def _data_root(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(os.environ.get("GEOCAPS_DATA_ROOT", "data"))


def _resolve_config(args):
    """Preset -> config file -> --set overrides -> --seed, later wins."""
    from .config import apply_overrides, load_config_file, preset

    cfg = preset(getattr(args, "preset", None) or "desk")
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_dataset(args):
    from .data import load_dataset

    root = _data_root(args)
    if not root.exists():
        raise FileNotFoundError(f"dataset directory {root} does not exist (run gen-data first)")
    return load_dataset(root)


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return path


def _load_part_model(args, cfg):
    from .parts import PartModel

    return PartModel.load(_require_file(args.checkpoint, "part checkpoint"), cfg)


def _load_object_model(args, cfg):
    from .objects import ObjectModel

    return ObjectModel.load(_require_file(args.object_checkpoint, "object checkpoint"), cfg)


def _eval_subset(cfg, dataset):
    from .evaluation import likely_asymmetric_subset

    points, labels, ids = likely_asymmetric_subset(dataset)
    n = min(cfg.eval.n_objects, len(points))
    return points[:n], labels[:n], ids[:n]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .config import config_to_text
    from .data import generate_dataset, write_dataset

    cfg = _resolve_config(args)
    out = Path(args.out) if args.out else _data_root(args)
    _say(f"generating dataset (seed {cfg.seed}) into {out}")
    dataset = generate_dataset(cfg.data, cfg.seed)
    write_dataset(dataset, out, cfg, cfg.seed)
    for split, part in dataset.items():
        _say(f"  {split}: {len(part['ids'])} objects x {part['points'].shape[1]} points")
    if args.print_config:
        _say(config_to_text(cfg))
    return EXIT_OK


def cmd_train_parts(args) -> int:
    from .parts import train_part_layer

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    out = Path(args.out)
    _say(f"training part layer for {cfg.parts.steps} steps (seed {cfg.seed}) into {out}")

    def progress(step, loss):
        _say(f"  step {step}: loss {loss:.5f}")

    summary = train_part_layer(cfg, dataset["train"]["points"], dataset["val"]["points"],
                               out, seed=cfg.seed, progress=progress)
    _say(f"done: val chamfer {summary['val_chamfer_final']:.5f} "
         f"(init {summary['val_chamfer_init']:.5f}) in {summary['wall_time']:.0f} s")
    return EXIT_OK


def cmd_train_object(args) -> int:
    from .objects import train_object_layer

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    part_model = _load_part_model(args, cfg)
    out = Path(args.out)
    _say(f"training object layer for {cfg.objects.steps} steps (seed {cfg.seed}) into {out}")

    def progress(step, loss):
        _say(f"  step {step}: loss {loss:.5f}")

    summary = train_object_layer(cfg, dataset["train"]["points"], part_model, out,
                                 seed=cfg.seed, progress=progress)
    _say(f"done: final loss {summary['loss_final']:.5f} in {summary['wall_time']:.0f} s")
    return EXIT_OK


def cmd_encode(args) -> int:
    import numpy as np

    from .formats import write_feature_db, write_manifest
    from .parts import points_to_parts

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    if args.split not in dataset:
        raise ValueError(f"unknown split {args.split!r}; have {sorted(dataset)}")
    part_model = _load_part_model(args, cfg)
    object_model = _load_object_model(args, cfg) if args.object_checkpoint else None
    split = dataset[args.split]
    points, ids = split["points"], split["ids"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    part_ids, part_poses, part_feats = [], [], []
    obj_poses, obj_feats = [], []
    for i, (X, oid) in enumerate(zip(points, ids)):
        poses, feats, _ = points_to_parts(
            part_model, X[None], np.random.default_rng([cfg.seed, 41, i]))
        for j in range(poses.shape[1]):
            part_ids.append(f"{oid}:part{j}")
            part_poses.append(poses[0, j])
            part_feats.append(feats[0, j])
        if object_model is not None:
            from .evaluation import encode_eval
            from .geometry import random_rotation

            q0 = random_rotation(np.random.default_rng([cfg.seed, 42, i]))
            h_pose, h_feat = encode_eval(object_model, poses, feats, q0)
            obj_poses.append(h_pose[0])
            obj_feats.append(h_feat[0])
        if (i + 1) % 32 == 0:
            _say(f"  encoded {i + 1}/{len(ids)} objects")

    parts_path = out / f"parts_{args.split}.db"
    write_feature_db(parts_path, part_ids, np.stack(part_poses), np.stack(part_feats))
    entries = {"kind": "encode", "seed": str(cfg.seed), "split": args.split,
               "part_checkpoint": str(args.checkpoint), "parts_db": parts_path.name}
    _say(f"wrote {parts_path} ({len(part_ids)} part capsules)")
    if object_model is not None:
        objects_path = out / f"objects_{args.split}.db"
        write_feature_db(objects_path, list(ids), np.stack(obj_poses), np.stack(obj_feats))
        entries["object_checkpoint"] = str(args.object_checkpoint)
        entries["objects_db"] = objects_path.name
        _say(f"wrote {objects_path} ({len(ids)} object capsules)")
    write_manifest(out / "manifest.txt", entries)
    return EXIT_OK


def cmd_align(args) -> int:
    from .evaluation import eval_equivariance_parts, eval_equivariance_points
    from .formats import write_manifest

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    part_model = _load_part_model(args, cfg)
    object_model = _load_object_model(args, cfg)
    points, _, ids = _eval_subset(cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trials = args.trials if args.trials is not None else cfg.eval.trials
    _say(f"alignment protocol ({args.mode} pose) on {len(ids)} likely-asymmetric objects")
    if args.mode == "points":
        report = eval_equivariance_points(object_model, part_model, points, cfg.seed,
                                          trials=trials, ids=ids)
    else:
        report = eval_equivariance_parts(object_model, part_model, points, cfg.seed, ids=ids)
    csv_path = out / f"align_{args.mode}.csv"
    report.write_csv(csv_path)
    write_manifest(out / "manifest.txt", {
        "kind": f"align-{args.mode}", "seed": str(cfg.seed),
        "part_checkpoint": str(args.checkpoint),
        "object_checkpoint": str(args.object_checkpoint),
        "n_objects": str(len(ids)), "report": csv_path.name,
    })
    _say(report.summary())
    _say(f"wrote {csv_path}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from .evaluation import eval_retrieval
    from .formats import write_manifest

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    part_model = _load_part_model(args, cfg)
    object_model = _load_object_model(args, cfg)
    points, labels, ids = _eval_subset(cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _say(f"retrieval protocol ({args.mode}) on {len(ids)} objects")
    report = eval_retrieval(object_model, part_model, points, labels, ids,
                            cfg.seed, mode=args.mode)
    csv_path = out / f"retrieval_{args.mode.replace('-', '_')}.csv"
    report.write_csv(csv_path)
    write_manifest(out / "manifest.txt", {
        "kind": f"retrieval-{args.mode}", "seed": str(cfg.seed),
        "part_checkpoint": str(args.checkpoint),
        "object_checkpoint": str(args.object_checkpoint),
        "n_objects": str(len(ids)), "report": csv_path.name,
    })
    _say(report.summary())
    _say(f"wrote {csv_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    part_model = _load_part_model(args, cfg)
    out = Path(args.out)
    table = run_ablation(cfg, dataset, part_model, out, cfg.seed,
                         settings=args.settings, progress=_say)
    for row in table:
        _say(f"setting {row['setting']}: rotation_error {row['rotation_error']:.4f} "
             f"top1 {row['top1']:.4f} top10 {row['top10']:.4f} nn_class {row['nn_class']:.4f}")
    _say(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_export_ply(args) -> int:
    import numpy as np

    from .formats import write_manifest, write_ply

    cfg = _resolve_config(args)
    dataset = _load_dataset(args)
    if args.split not in dataset:
        raise ValueError(f"unknown split {args.split!r}; have {sorted(dataset)}")
    split = dataset[args.split]
    wanted = set(args.ids.split(",")) if args.ids else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    part_model = _load_part_model(args, cfg) if args.checkpoint else None

    written = []
    for i, (X, oid) in enumerate(zip(split["points"], split["ids"])):
        if wanted is not None and oid not in wanted:
            continue
        path = out / f"{oid}.ply"
        write_ply(path, X)
        written.append(path.name)
        if part_model is not None:
            from .parts import points_to_parts
            from .nets import unit_square_samples

            poses, feats, _ = points_to_parts(
                part_model, X[None], np.random.default_rng([cfg.seed, 41, i]))
            grid = unit_square_samples(cfg.parts.decoder_points, "grid", dtype=part_model.dtype)
            decoded = part_model.decode(poses.astype(part_model.dtype),
                                        feats.astype(part_model.dtype), grid).data[0]
            labels = np.repeat(np.arange(decoded.shape[0]), decoded.shape[1])
            recon_path = out / f"{oid}_recon.ply"
            write_ply(recon_path, decoded.reshape(-1, 3), part_ids=labels)
            written.append(recon_path.name)
    if not written:
        raise ValueError(f"no objects matched ids {sorted(wanted)} in split {args.split!r}")
    write_manifest(out / "manifest.txt", {
        "kind": "export-ply", "split": args.split, "seed": str(cfg.seed),
        "files": ",".join(written),
    })
    _say(f"wrote {len(written)} PLY files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suites

    results = run_suites(instances=args.instances, seed=args.seed if args.seed is not None else 2024)
    failed = [r for r in results if not r.ok]
    for r in results:
        _say(str(r))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["name,instances,max_rel_err,tol,ok"]
        lines += [f"{r.name},{r.instances},{r.max_rel_err:.17g},{r.tol:.17g},{int(r.ok)}" for r in results]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        _say(f"wrote {out / 'gradcheck.csv'}")
    if failed:
        _say(f"{len(failed)} of {len(results)} checks FAILED")
        return EXIT_NUMERIC
    _say(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p, out_required=True, checkpoint=False, object_checkpoint=False):
    p.add_argument("--config", help="config file (flat key = value lines)")
    p.add_argument("--preset", choices=("desk", "paper"), help="base preset (default desk)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--data", help="dataset directory (default $GEOCAPS_DATA_ROOT or ./data)")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP thread pools")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")
    else:
        p.add_argument("--out", help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="part-layer checkpoint")
    if object_checkpoint:
        p.add_argument("--object-checkpoint", required=True, help="object-layer checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geocaps",
        description="Geometric capsule autoencoder workflows on synthetic point clouds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p, out_required=False)
    p.add_argument("--print-config", action="store_true", help="echo the resolved config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-parts", help="train the part-capsule layer")
    _add_common(p)
    p.set_defaults(func=cmd_train_parts)

    p = sub.add_parser("train-object", help="train the object-capsule layer")
    _add_common(p, checkpoint=True)
    p.set_defaults(func=cmd_train_object)

    p = sub.add_parser("encode", help="dump part (and object) capsules for a split")
    _add_common(p, checkpoint=True)
    p.add_argument("--object-checkpoint", help="optional object-layer checkpoint")
    p.add_argument("--split", default="test", help="dataset split (default test)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("align", help="pose-equivariance / alignment protocol")
    _add_common(p, checkpoint=True, object_checkpoint=True)
    p.add_argument("--mode", choices=("points", "parts"), default="points",
                   help="rotate raw points (default) or part poses")
    p.add_argument("--trials", type=int, help="alignment restarts (default from config)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("retrieve", help="instance-retrieval protocol")
    _add_common(p, checkpoint=True, object_checkpoint=True)
    p.add_argument("--mode", choices=("parts-pose", "points-pose"), default="parts-pose")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate", help="train and compare the ablation settings")
    _add_common(p, checkpoint=True)
    p.add_argument("--settings", default="ABCDE", help="subset of ABCDE (default all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-ply", help="write dataset clouds (and reconstructions) as PLY")
    _add_common(p)
    p.add_argument("--checkpoint", help="optional part checkpoint for reconstructions")
    p.add_argument("--split", default="test", help="dataset split (default test)")
    p.add_argument("--ids", help="comma-separated object ids (default: whole split)")
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    p.add_argument("--instances", type=int, default=20, help="random instances per check")
    p.add_argument("--seed", type=int, help="suite seed")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP thread pools")
    p.add_argument("--out", help="also write gradcheck.csv here")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except FileNotFoundError as e:
        _say(f"error: {e}")
        return EXIT_MISSING
    except ArithmeticError as e:
        _say(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (KeyError, ValueError) as e:
        msg = e.args[0] if e.args else e
        _say(f"config error: {msg}")
        return EXIT_CONFIG
    except Exception as e:  # pragma: no cover - last-resort reporting
        _say(f"unexpected {type(e).__name__}: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    raise SystemExit(main())
