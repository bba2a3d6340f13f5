"""Command-line entry point: ``seqgrasp <stage> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Progress goes to stdout as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .geometry import load_object_library, read_xyz
from .hand_model import HandModelError, load_hand_model
from .pipeline import (DataError, ExperimentConfig, atomic_write_text, build_datasets, heatmap_stats,
                       learned_records, object_cloud, read_dataset, run_trials, sampled_record,
                       write_dataset)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def emit(**kw):
    print(" ".join(f"{k}={v}" for k, v in kw.items()), flush=True)


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None


def _models(args):
    hand = load_hand_model(args.hand)
    objects = load_object_library(args.objects)
    return hand, objects


def cmd_synth(args):
    from .synthesis import SynthesisConfig, synthesize

    hand, objects = _models(args)
    if args.object not in objects:
        raise DataError(f"unknown object id '{args.object}' (known: {', '.join(sorted(objects))})")
    conf = _load_json(args.config)
    conf["style"] = args.style
    if args.seed is not None:
        conf["seed"] = args.seed
    try:
        cfg = SynthesisConfig(**conf)
    except TypeError as e:
        raise DataError(f"bad synthesis config: {e}") from None
    res = synthesize(hand, objects[args.object], cfg,
                     progress=lambda start, k, ch: emit(stage="synth", batch=start, step=k))
    write_dataset(args.out, res.records, hand, objects, {"stage": "synth", "config": cfg.to_json()})
    emit(records=len(res.records), candidates=cfg.n_candidates, acceptance=f"{res.acceptance_rate:.4f}")
    emit(**{"yield": f"{res.yield_fraction:.6f}"})


def cmd_validate(args):
    from .validation import validate

    hand, objects = _models(args)
    _, records = read_dataset(args.inp, hand, objects, kind="grasp")
    kept = []
    for r in records:
        r.validation = validate(hand, r, objects[r.object_id])
        if r.validation.valid:
            kept.append(r)
    write_dataset(args.out, kept, hand, objects, {"stage": "validate"})
    emit(total=len(records), valid=len(kept))
    emit(**{"yield": f"{len(kept) / len(records):.6f}"})


def cmd_merge(args):
    from .merge import MergeStats, merge_datasets

    hand, objects = _models(args)
    _, pinch = read_dataset(args.pinch, hand, objects, kind="grasp")
    _, side = read_dataset(args.side, hand, objects, kind="grasp")
    st = MergeStats()
    out = merge_datasets(hand, pinch, side, objects, args.max_pairs, np.random.default_rng(args.seed),
                         stats=st)
    write_dataset(args.out, out, hand, objects, {"stage": "merge"})
    emit(tried=st.pairs_tried, incompatible=st.incompatible, merged=st.merged,
         **{f"rejected_{k}": v for k, v in sorted(st.rejected.items())})


def cmd_train(args):
    from .diffusion import TrainConfig, save_model, train

    hand, objects = _models(args)
    records = []
    for path in args.data:
        records += read_dataset(path, hand, objects, kind="multigrasp")[1]
    conf = _load_json(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    try:
        cfg = TrainConfig(**conf)
    except TypeError as e:
        raise DataError(f"bad training config: {e}") from None
    ids = sorted({o for r in records for o in r.object_ids})
    clouds = {o: object_cloud(objects[o], cfg.n_points) for o in ids}
    model = train(records, clouds, cfg, dof=hand.dof,
                  progress=lambda s, loss: emit(stage="train", step=s, loss=f"{loss:.5f}"))
    save_model(args.model, model, {"hand": hand.fingerprint(), "train": cfg.to_json()})
    emit(records=len(records), final_loss=f"{np.mean(model.loss_trace[-100:]):.5f}")


def _cloud_arg(arg: str, objects: dict):
    """Object id from the library, or a path to an ``.xyz`` file named after the object."""
    p = Path(arg)
    if p.suffix == ".xyz":
        pts, _, _ = read_xyz(p)
        return p.stem, pts
    if arg not in objects:
        raise DataError(f"unknown object id '{arg}'")
    return arg, None


def cmd_sample(args):
    from .diffusion import load_model, resample_cloud, sample_vectors

    hand, objects = _models(args)
    model = load_model(args.model)
    ids, clouds = [], []
    rng = np.random.default_rng(args.seed)
    n_pts = next(iter(model.clouds.values())).shape[0] if model.clouds else 512
    for arg in args.clouds:
        oid, pts = _cloud_arg(arg, objects)
        if pts is None:
            pts = model.clouds.get(oid)
            if pts is None:
                pts = object_cloud(objects[oid], n_pts)
        else:
            pts = resample_cloud(pts, n_pts, rng)
        ids.append(oid)
        clouds.append(pts)
    missing = [o for o in ids if o not in objects]
    if missing:
        raise DataError(f"objects {missing} are not in the object library")
    X = sample_vectors(model, clouds, args.n, args.seed)
    recs = []
    for i, x in enumerate(X):
        theta, T1, T2 = model.codec.decode(x)
        recs.append(sampled_record(hand, objects, ids, theta, T1, T2, f"sample/{args.seed}/{i}"))
    write_dataset(args.out, recs, hand, objects, {"stage": "sample", "model": str(args.model)})
    emit(samples=len(recs))


def cmd_run_experiment(args):
    hand, objects = _models(args)
    conf = _load_json(args.config)
    if args.mode is not None:
        conf["mode"] = args.mode
    try:
        cfg = ExperimentConfig.from_json(conf)
    except (TypeError, ValueError) as e:
        raise DataError(f"bad experiment config: {e}") from None
    for pair in cfg.pairs:
        for oid in pair:
            if oid not in objects:
                raise DataError(f"unknown object id '{oid}'")
    if cfg.mode == "LG":
        if args.model is None:
            raise UsageError("LG mode needs --model")
        from .diffusion import load_model

        pools = learned_records(hand, objects, load_model(args.model), cfg)
    elif args.merged:
        pools = {}
        for path in args.merged:
            for r in read_dataset(path, hand, objects, kind="multigrasp")[1]:
                pools.setdefault(tuple(r.object_ids), []).append(r)
    else:
        pools = build_datasets(hand, objects, cfg, progress=emit).merged
    outcomes = run_trials(hand, objects, cfg, pools, cfg.mode, progress=emit)
    hm = heatmap_stats(outcomes, cfg.rows, cfg.cols)
    atomic_write_text(args.out, hm.to_csv())
    if args.outcomes:
        write_dataset(args.outcomes, outcomes, hand, objects, {"stage": "run-experiment", "mode": cfg.mode})
    emit(mode=cfg.mode, trials=int(hm.trials.sum()), successes=int(hm.successes.sum()),
         mean_rate=f"{hm.mean_rate():.4f}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqgrasp", description="Sequential two-object grasp pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--hand", default=None, help="hand model JSON (default: bundled)")
        sp.add_argument("--objects", default=None, help="object library JSON (default: bundled)")

    sp = sub.add_parser("synth", help="synthesize single-object grasps")
    common(sp)
    sp.add_argument("--object", required=True)
    sp.add_argument("--style", required=True, choices=["pinch", "side"])
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="keep grasps that pass validation")
    common(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("merge", help="merge pinch and side grasps")
    common(sp)
    sp.add_argument("--pinch", required=True)
    sp.add_argument("--side", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-pairs", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("train", help="train the diffusion model on merged records")
    common(sp)
    sp.add_argument("--data", required=True, nargs="+")
    sp.add_argument("--model", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="sample two-object configurations")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--clouds", required=True, nargs=2, metavar=("PINCH", "SIDE"),
                    help="object ids or .xyz point-cloud files")
    sp.add_argument("--n", type=int, default=25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("run-experiment", help="execute SG or LG trials and write a heatmap CSV")
    common(sp)
    sp.add_argument("--config", default=None)
    sp.add_argument("--mode", choices=["SG", "LG"], default=None)
    sp.add_argument("--model", default=None)
    sp.add_argument("--merged", nargs="+", default=None, help="prebuilt multigrasp datasets (SG)")
    sp.add_argument("--outcomes", default=None, help="also write per-trial outcome records")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, HandModelError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
