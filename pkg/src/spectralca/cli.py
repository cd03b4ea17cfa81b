"""Command-line surface: scene generation, training, evaluation,
self-training, the parameter audit, gradient verification, and block
benchmarks. Every failure exits nonzero with a single machine-parsable
"ERR:<code>: <text>" line on stderr."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .block import PRESETS, AuditMismatchError, param_audit
from .classifier import (
    CheckpointError,
    ModelConfig,
    PatchClassifier,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from .data import (
    DataFormatError,
    SplitError,
    extract_patches,
    generate_synthetic,
    load_cube,
    load_labels,
    save_cube,
    save_labels,
    split,
)
from .metrics import ObjectiveWeights, objective_j
from .selftrain import SslConfig, run_self_training
from .tensor import NonFiniteError, ShapeError
from .trainer import TrainConfig, benchmark, comparative_benchmark, evaluate, train
from .verify import GRADCHECK_TOLERANCE, gradcheck_suite

_ERROR_CODES: list[tuple[type, str]] = [
    (AuditMismatchError, "audit-mismatch"),
    (CheckpointError, "checkpoint"),
    (DataFormatError, "data-format"),
    (SplitError, "split"),
    (NonFiniteError, "non-finite"),
    (ShapeError, "shape"),
    (FileNotFoundError, "not-found"),
    (json.JSONDecodeError, "config-parse"),
    (ValueError, "invalid-argument"),
    (RuntimeError, "runtime"),
]


def _fail(code: str, message: str) -> int:
    print(f"ERR:{code}: {message}", file=sys.stderr)
    return 1


def _load_scene(data_dir: Path):
    cube = load_cube(data_dir / "cube.hdr", data_dir / "cube.raw")
    labels = load_labels(data_dir / "labels.raw", cube.height, cube.width)
    return cube, labels


def _split_from_recipe(data_dir: Path, recipe: dict):
    cube, labels = _load_scene(data_dir)
    patches = extract_patches(cube, labels, recipe["patch_size"])
    return split(patches, recipe["train_fraction"], recipe["split_seed"],
                 test_fraction=recipe.get("test_fraction"))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    cube, labels = generate_synthetic(args.seed, args.height, args.width,
                                      args.bands, args.classes, args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(cube, out / "cube.hdr", out / "cube.raw")
    save_labels(labels, out / "labels.raw")
    scene = {"seed": args.seed, "height": args.height, "width": args.width,
             "bands": args.bands, "classes": args.classes, "noise": args.noise}
    (out / "scene.json").write_text(json.dumps(scene, sort_keys=True) + "\n",
                                    encoding="utf-8")
    print(f"wrote scene to {out} ({args.height}x{args.width}x{args.bands}, "
          f"{args.classes} classes)")
    return 0


_TRAIN_CONFIG_DEFAULTS = {
    "patch_size": 9,
    "train_fraction": 0.1,
    "test_fraction": None,
    "split_seed": 0,
}


def _cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    recipe = {k: raw.get(k, v) for k, v in _TRAIN_CONFIG_DEFAULTS.items()}
    train_cfg = TrainConfig(**raw.get("train", {}))

    cube, labels = _load_scene(Path(args.data))
    patches = extract_patches(cube, labels, recipe["patch_size"])
    train_set, test_set, _ = split(patches, recipe["train_fraction"],
                                   recipe["split_seed"],
                                   test_fraction=recipe.get("test_fraction"))

    model_fields = dict(raw.get("model", {}))
    from .block import SpectralCAConfig  # local to keep module import light

    for key in ("block1", "block2"):
        if key in model_fields:
            model_fields[key] = SpectralCAConfig(**model_fields[key])
    config = ModelConfig(num_classes=labels.num_classes,
                         patch_size=recipe["patch_size"], bands=cube.bands,
                         **model_fields)
    model = PatchClassifier(config, rng=np.random.default_rng(train_cfg.seed))

    history = train(model, train_set, train_cfg,
                    test_set=test_set if train_cfg.eval_cadence else None)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.bin", seed=train_cfg.seed,
                    data_recipe=recipe)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    final = history[-1] if history else {}
    print(f"trained {len(history)} epochs; final loss {final.get('loss'):.4f} "
          f"acc {final.get('acc'):.4f}; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    manifest = read_manifest(args.model)
    recipe = manifest.get("data_recipe") or dict(_TRAIN_CONFIG_DEFAULTS)
    _, test_set, _ = _split_from_recipe(Path(args.data), recipe)
    weights = None
    if args.infer_time_s is not None:
        weights = ObjectiveWeights(1 / 3, 1 / 3, 1 / 3, args.time_ref,
                                   args.params_ref)
    report = evaluate(model, test_set, infer_time_s=args.infer_time_s,
                      weights=weights)
    text = report.to_json()
    Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_ssl(args) -> int:
    model = load_checkpoint(args.model)
    manifest = read_manifest(args.model)
    recipe = manifest.get("data_recipe")
    if recipe is None:
        return _fail("checkpoint", "checkpoint carries no data recipe for re-splitting")
    train_set, test_set, pool = _split_from_recipe(Path(args.data), recipe)
    if len(pool) == 0:
        return _fail("invalid-argument",
                     "no unlabeled pool (generate with test_fraction or unlabeled pixels)")
    ssl_cfg = SslConfig(threshold=args.tau, rounds=args.rounds,
                        per_round_cap=args.cap, epochs_per_round=args.epochs_per_round)
    train_cfg = TrainConfig(seed=args.train_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "ssl_rounds.jsonl"
    log_path.write_text("", encoding="utf-8")
    _, _, rounds = run_self_training(model, train_set, pool, ssl_cfg, train_cfg,
                                     test_set=test_set, log_path=log_path)
    save_checkpoint(model, out / "checkpoint.bin", seed=args.train_seed,
                    data_recipe=recipe)
    added = sum(r["selected"] for r in rounds)
    last_oa = rounds[-1].get("test_oa") if rounds else None
    print(f"{len(rounds)} rounds, {added} pseudo-labels added; "
          f"final test OA {last_oa}; outputs in {out}")
    return 0


def _cmd_audit(args) -> int:
    table = param_audit(PRESETS[args.preset])
    print(table)
    if args.expect_total is not None and table.total != args.expect_total:
        return _fail("expect-mismatch",
                     f"total {table.total} != expected {args.expect_total}")
    return 0


def _cmd_gradcheck(args) -> int:
    suite = gradcheck_suite(seed=args.seed,
                            samples_per_parameter=args.samples,
                            include_full_size_spot=not args.no_full_size_spot)
    failed = []
    for name, report in suite.items():
        status = "ok" if report.ok else "FAIL"
        print(f"{name}: max_rel_err={report.max_rel_err:.6e} "
              f"tol={report.tolerance:.0e} {status}")
        if not report.ok:
            failed.append(name)
    if failed:
        return _fail("gradcheck-failed",
                     f"modules over {GRADCHECK_TOLERANCE:g}: {', '.join(failed)}")
    return 0


def _cmd_bench(args) -> int:
    preset = PRESETS[args.preset]
    if args.block == "both":
        payload = comparative_benchmark(preset, batch=args.batch,
                                        height=args.height, width=args.width,
                                        bands=args.bands, warmup=args.warmup,
                                        runs=args.runs, seed=args.seed)
    else:
        from .block import BaselineViTBlock, SpectralCABlock

        rng = np.random.default_rng(args.seed)
        cls = SpectralCABlock if args.block == "spectralca" else BaselineViTBlock
        module = cls(preset, rng)
        shape = (args.batch, preset.channels, args.height, args.width, args.bands)
        payload = benchmark(module, shape, args.warmup, args.runs, args.seed).as_dict()
        payload["block"] = args.block
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectralca",
        description="Hyperspectral cross-attention block: training, audits, benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic labeled scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a patch classifier on a scene directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON config file (see README)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--infer-time-s", type=float, default=None)
    p.add_argument("--time-ref", type=float, default=50.0)
    p.add_argument("--params-ref", type=float, default=6.628)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ssl", help="confidence-thresholded self-training rounds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--cap", type=int, default=5000)
    p.add_argument("--epochs-per-round", type=int, default=5)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ssl)

    p = sub.add_parser("audit", help="exact per-component parameter table")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--expect-total", type=int, default=None)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--no-full-size-spot", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="inference timing for the block or baseline")
    p.add_argument("--block", choices=["spectralca", "baseline", "both"],
                   default="both")
    p.add_argument("--preset", choices=sorted(PRESETS), default="cfg32")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--height", type=int, default=9)
    p.add_argument("--width", type=int, default=9)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # mapped to stable error codes
        for etype, code in _ERROR_CODES:
            if isinstance(exc, etype):
                return _fail(code, str(exc))
        raise


if __name__ == "__main__":
    sys.exit(main())
