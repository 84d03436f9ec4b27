"""Command-line pipeline: synthesize, preprocess, train, evaluate, export.

Each subcommand covers one pipeline stage so stages can be tested and
rerun independently.  Every run with the same inputs and seed writes
byte-identical artifacts.  Exit codes: 0 success, 2 configuration
errors, 3 data errors, 4 broken internal invariants.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    FEATURE_METHODS,
    extract_features,
    save_classifier,
    save_features,
    train_linear_hinge,
)
from .checkpoint import load_model, model_kind, save_model
from .csm_branch import CsmConfig, CsmModel
from .errors import ConfigError, ContractError, DataError, DyadsyncError
from .evaluate import (
    BranchPrediction,
    bin_score,
    compute_metrics,
    confusion_normalized,
    format_report,
    fuse_predictions,
    load_predictions,
    predicted_classes,
    save_metrics,
    save_predictions,
)
from .pose_io import (
    CLASS_NAMES,
    TARGET_FRAMES,
    load_dataset,
    load_keypoint_file,
    load_manifest,
    preprocess,
)
from .similarity import (
    SimilarityMatrix,
    compute_csm,
    compute_ssm,
    normalize_minmax,
    resize_nearest,
    save_binary,
    save_csv,
    save_pgm,
)
from .sttf import MhsaParams, ModelConfig, SttfModel, export_attention, mhsa
from .synthgen import SynthConfig, generate_dataset, sequence_to_document
from .tensor import ParamStore, Tensor, check_gradients, linear_apply, reduce_mean
from .training import (
    TrainConfig,
    cross_entropy_loss,
    fit,
    load_train_config,
    mse_loss,
    save_history,
)

SEED_ENV = "DYADSYNC_SEED"
log = logging.getLogger("dyadsync")


def _resolve_seed(flag_value, fallback: int = 0) -> int:
    """Explicit --seed wins, then the environment variable, then fallback."""
    if flag_value is not None:
        return flag_value
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _map_ordered(fn, tasks: list, workers: int) -> list:
    """Apply fn to tasks, optionally on a pool; results keep input order."""
    if workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {workers}")
    if workers == 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _load_entry(task):
    path, label_class, label_score, target_f = task
    frames = load_keypoint_file(path)
    return preprocess(frames, target_f=target_f, source_id=Path(path).stem,
                      label_class=label_class, label_score=label_score)


def _matrix_entry(task):
    path, label_class, label_score, target_f, kind = task
    seq = _load_entry((path, label_class, label_score, target_f))
    if kind == "cross":
        return seq.source_id, compute_csm(seq)
    return seq.source_id, compute_ssm(seq.person(int(kind[-1])))


def _entry_tasks(manifest_path, target_f: int, extra=()) -> list:
    return [(str(e.path), e.label_class, e.label_score, target_f, *extra)
            for e in load_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(f=args.frames, lag=args.lag, amp_mismatch=args.amp_mismatch,
                      jitter=args.jitter, seed=_resolve_seed(args.seed))
    manifest = generate_dataset(cfg, args.per_class, args.out)
    log.info("wrote %d clips per class under %s", args.per_class, args.out)
    print(manifest)
    return 0


def cmd_preprocess(args) -> int:
    tasks = _entry_tasks(args.data, args.frames)
    sequences = _map_ordered(_load_entry, tasks, args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in sequences:
        name = f"{seq.source_id}.json"
        doc = sequence_to_document(seq, (1, 1))
        (out_dir / name).write_text(json.dumps(doc, separators=(",", ":")))
        record = {"path": name}
        if seq.label_class is not None:
            record["label_class"] = seq.label_class
        if seq.label_score is not None:
            record["label_score"] = seq.label_score
        entries.append(record)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    log.info("preprocessed %d clips to %d frames", len(sequences), args.frames)
    print(manifest)
    return 0


def cmd_csm(args) -> int:
    tasks = _entry_tasks(args.data, args.frames, extra=(args.kind,))
    results = _map_ordered(_matrix_entry, tasks, args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    savers = {"bin": save_binary, "csv": save_csv, "pgm": save_pgm}
    for source_id, matrix in results:
        if args.size:
            matrix = resize_nearest(matrix, args.size)
        if args.normalize:
            matrix = normalize_minmax(matrix)
        savers[args.format](matrix, out_dir / f"{source_id}.{args.format}")
    log.info("wrote %d %s matrices to %s", len(results), args.kind, out_dir)
    return 0


def _class_labels(sequences) -> list:
    labels = []
    for seq in sequences:
        if seq.label_class is None:
            raise DataError(f"{seq.source_id}: class label required")
        labels.append(CLASS_NAMES.index(seq.label_class))
    return labels


def _linear_margins(clf, features) -> np.ndarray:
    x = np.stack([f.vector for f in features])
    return (x - clf.mean) / clf.std @ clf.weights.T + clf.bias


def cmd_baseline(args) -> int:
    train_seqs = load_dataset(args.data, target_f=args.frames)
    feats = [extract_features(seq, args.method) for seq in train_seqs]
    labels = _class_labels(train_seqs)
    clf = train_linear_hinge(feats, labels)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_features(feats, out_dir / "train_features.csv")
    save_classifier(clf, out_dir / "classifier.json")
    log.info("trained %s baseline on %d clips", args.method, len(train_seqs))
    if args.test:
        test_seqs = load_dataset(args.test, target_f=args.frames)
        test_feats = [extract_features(seq, args.method) for seq in test_seqs]
        margins = _linear_margins(clf, test_feats)
        preds = [BranchPrediction(args.method, seq.source_id, logits=row)
                 for seq, row in zip(test_seqs, margins)]
        save_predictions(preds, out_dir / "predictions.csv")
        cm = confusion_normalized(_class_labels(test_seqs), predicted_classes(preds))
        report = compute_metrics(cm)
        save_metrics(report, cm, out_dir / "metrics.json")
        print(format_report(report, cm))
    return 0


def _build_model(branch: str, model_config_path, seed: int):
    if model_config_path:
        doc = json.loads(Path(model_config_path).read_text())
    else:
        doc = {}
    if branch == "tfn":
        cfg = ModelConfig.from_dict(doc) if doc else ModelConfig()
        return SttfModel(cfg, seed=seed)
    cfg = CsmConfig.from_dict(doc) if doc else CsmConfig()
    return CsmModel(cfg, seed=seed)


def cmd_train(args) -> int:
    train_cfg = load_train_config(args.config) if args.config else TrainConfig()
    seed = _resolve_seed(args.seed, fallback=train_cfg.seed)
    train_cfg = dataclasses.replace(train_cfg, seed=seed)
    model = _build_model(args.branch, args.model_config, seed)
    target_f = model.config.f if args.branch == "tfn" else TARGET_FRAMES
    sequences = load_dataset(args.data, target_f=target_f)
    history = fit(model, sequences, train_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.bin")
    save_history(history, out_dir / "history.csv")
    best = max(h["val_metric"] for h in history) if train_cfg.loss_kind == "cross_entropy" \
        else min(h["val_metric"] for h in history)
    log.info("trained %s for %d epochs; best val metric %.4f", args.branch,
             len(history), best)
    print(out_dir / "model.bin")
    return 0


def cmd_eval(args) -> int:
    if not args.ckpt and not args.external:
        raise ConfigError("eval needs at least one --ckpt or --external source")
    models = [load_model(p) for p in args.ckpt or []]
    target_f = TARGET_FRAMES
    for model in models:
        if model_kind(model) == "sttf":
            target_f = model.config.f
    sequences = load_dataset(args.data, target_f=target_f)

    predictions = []
    seen: dict = {}
    for model in models:
        kind = {"sttf": "tfn", "csm": "csm"}[model_kind(model)]
        seen[kind] = seen.get(kind, 0) + 1
        name = kind if seen[kind] == 1 else f"{kind}{seen[kind]}"
        out = model.predict_batch(model.prepare_inputs(sequences))
        for seq, row in zip(sequences, out):
            if out.shape[1] == 1:
                predictions.append(BranchPrediction(name, seq.source_id, score=float(row[0])))
            else:
                predictions.append(BranchPrediction(name, seq.source_id, logits=row))
    if args.external:
        predictions.extend(load_predictions(args.external))

    fused = fuse_predictions(predictions)
    regress = fused[0].score is not None
    decisions = predicted_classes(fused)

    by_id = {seq.source_id: seq for seq in sequences}
    labels = []
    targets = []
    for pred in fused:
        seq = by_id.get(pred.source_id)
        if seq is None:
            raise DataError(f"prediction for unknown sample {pred.source_id!r}")
        if regress:
            if seq.label_score is None:
                raise DataError(f"{seq.source_id}: score label required")
            targets.append(seq.label_score)
            labels.append(CLASS_NAMES.index(seq.label_class) if seq.label_class
                          else bin_score(seq.label_score))
        else:
            if seq.label_class is None:
                raise DataError(f"{seq.source_id}: class label required")
            labels.append(CLASS_NAMES.index(seq.label_class))

    cm = confusion_normalized(labels, decisions)
    if regress:
        report = compute_metrics(cm, mode="regress",
                                 preds=[p.score for p in fused], targets=targets)
    else:
        report = compute_metrics(cm)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_predictions(predictions + fused, out_dir / "predictions.csv")
    save_metrics(report, cm, out_dir / "metrics.json")
    print(format_report(report, cm))
    return 0


def _gradcheck_suite(seed: int) -> list:
    """(name, max relative error) for the stock derivative checks."""
    rng = np.random.default_rng(seed)
    results = []

    ce_params = ParamStore(seed)
    ce_params.add("logits", rng.normal(size=(4, 3)))
    ce_labels = np.array([0, 2, 1, 1])
    results.append(("softmax-cross-entropy", check_gradients(
        lambda p, tape: cross_entropy_loss(p.tracked(tape)["logits"], ce_labels),
        ce_params)))

    d = 6
    attn_params = ParamStore(seed, scope="gradcheck")
    attn_params.add("x", rng.normal(size=(5, d)))
    for name in ("wq", "wk", "wv", "wo"):
        attn_params.add(name, rng.normal(size=(d, d)) / np.sqrt(d))

    def attn_loss(p, tape):
        t = p.tracked(tape)
        out = mhsa(t["x"], MhsaParams(t["wq"], t["wk"], t["wv"], t["wo"]), heads=2)
        return reduce_mean(out * out)

    results.append(("multi-head-attention", check_gradients(attn_loss, attn_params)))

    micro = ModelConfig(f=2, num_joints=1, d_joint=4, layers=1, heads=2, dropout=0.0)
    model = SttfModel(micro, seed=seed)
    x = rng.uniform(size=(2, micro.f, 2, micro.num_joints, 2))
    y = np.array([0, 2])
    results.append(("reduced-transformer", check_gradients(
        lambda p, tape: cross_entropy_loss(model.forward(x, tape), y), model.params)))

    reg_params = ParamStore(seed)
    reg_params.add("w", rng.normal(size=(d, 1)))
    reg_params.add("b", np.zeros(1))
    reg_x = rng.normal(size=(8, d))
    reg_y = rng.normal(size=8)
    results.append(("regression-head", check_gradients(
        lambda p, tape: mse_loss(
            linear_apply(Tensor(reg_x), p.tracked(tape)["w"], p.tracked(tape)["b"]),
            reg_y),
        reg_params)))
    return results


def cmd_gradcheck(args) -> int:
    tolerance = 1e-4
    failed = False
    for name, err in _gradcheck_suite(_resolve_seed(args.seed)):
        status = "ok" if err < tolerance else "FAIL"
        print(f"{name}: max rel err {err:.3e} [{status}]")
        failed |= err >= tolerance
    if failed:
        raise ContractError("gradient check exceeded tolerance")
    return 0


def cmd_export_attn(args) -> int:
    model = load_model(args.ckpt)
    if model_kind(model) != "sttf":
        raise ConfigError("attention export needs a transformer checkpoint")
    sequences = load_dataset(args.data, target_f=model.config.f)
    if not 0 <= args.index < len(sequences):
        raise ConfigError(f"--index {args.index} outside dataset of {len(sequences)}")
    seq = sequences[args.index]
    maps = export_attention(model, seq)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    savers = {"pgm": save_pgm, "csv": save_csv}
    count = 0
    for branch, stack in (("spatial", maps.spatial), ("temporal", maps.temporal)):
        layers, heads = stack.shape[:2]
        for layer in range(layers):
            for head in range(heads):
                m = SimilarityMatrix(stack[layer, head], kind="attention")
                name = f"{seq.source_id}_{branch}_l{layer}_h{head}.{args.format}"
                savers[args.format](m, out_dir / name)
                count += 1
    log.info("wrote %d attention maps for %s", count, seq.source_id)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyadsync",
        description="Dyadic movement-synchrony pipeline: synthetic data, "
                    "preprocessing, similarity matrices, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a labeled synthetic keypoint dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", required=True, type=int,
                   help="clips to generate for each of the three classes")
    p.add_argument("--seed", type=int, help=f"generator seed (default ${SEED_ENV} or 0)")
    p.add_argument("--frames", type=int, default=148, help="frames per clip")
    p.add_argument("--lag", type=int, default=10,
                   help="frame lag applied to the moderately synchronized class")
    p.add_argument("--amp-mismatch", type=float, default=1.15,
                   help="amplitude ratio for the moderately synchronized class")
    p.add_argument("--jitter", type=float, default=0.004,
                   help="noise added to the second person's joints")

    p = add("preprocess", cmd_preprocess, "filter, resample, and normalize clips")
    p.add_argument("--data", required=True, help="input manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=TARGET_FRAMES,
                   help="frames after resampling")
    p.add_argument("--workers", type=int, default=1, help="parallel workers")

    p = add("csm", cmd_csm, "compute similarity matrices for every clip")
    p.add_argument("--data", required=True, help="input manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=("cross", "self0", "self1"), default="cross",
                   help="cross-similarity or one person's self-similarity")
    p.add_argument("--frames", type=int, default=TARGET_FRAMES,
                   help="frames after resampling")
    p.add_argument("--size", type=int, help="resize matrices to this side length")
    p.add_argument("--normalize", action="store_true",
                   help="min-max normalize each matrix to [0, 1]")
    p.add_argument("--format", choices=("bin", "csv", "pgm"), default="bin",
                   help="artifact format")
    p.add_argument("--workers", type=int, default=1, help="parallel workers")

    p = add("baseline", cmd_baseline, "train a linear baseline on handcrafted features")
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--test", help="optional test manifest for metrics")
    p.add_argument("--method", choices=FEATURE_METHODS, required=True,
                   help="feature extractor")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=TARGET_FRAMES,
                   help="frames after resampling")

    p = add("train", cmd_train, "train the transformer or the CSM classifier")
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--branch", choices=("tfn", "csm"), default="tfn",
                   help="which network to train")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--seed", type=int,
                   help=f"overrides the config seed (default ${SEED_ENV})")

    p = add("eval", cmd_eval, "evaluate checkpoints, optionally fused with external scores")
    p.add_argument("--ckpt", action="append", help="model checkpoint (repeatable)")
    p.add_argument("--external", help="external predictions CSV to fuse in")
    p.add_argument("--data", required=True, help="test manifest JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gradcheck", cmd_gradcheck, "verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, help="seed for the randomized checkpoints")

    p = add("export-attn", cmd_export_attn, "export attention maps for one clip")
    p.add_argument("--ckpt", required=True, help="transformer checkpoint")
    p.add_argument("--data", required=True, help="manifest JSON")
    p.add_argument("--index", type=int, default=0, help="clip index within the manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm",
                   help="artifact format")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"error (internal): {exc}", file=sys.stderr)
        return 4
    except DyadsyncError as exc:
        print(f"error (internal): {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # safety net: anything unexpected is an internal error
        log.exception("unhandled failure")
        print(f"error (internal): {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
