"""Command-line entry point: gen / train / eval / bench.

A JSON config file may supply any long-option value; explicit flags win.
Exit codes: 0 success, 1 validation error, 2 numerical failure.
All report numbers are printed with 4 decimals so runs diff cleanly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import checkpoint, cost, pack_io
from .episodes import FusionProjector, SynthConfig, synth_episodes
from .metrics import evaluate
from .scorer import DivergenceError, Phase, ScoreModel, TrainConfig, train
from .selector import Adaptive, All, TopN, run_inference
from .tensor_ops import Level

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _strategy(args):
    if args.strategy == "all":
        return All()
    if args.strategy == "topn":
        return TopN(args.top_n)
    if args.strategy == "adaptive":
        return Adaptive(args.threshold)
    raise ValueError(f"unknown strategy {args.strategy}")


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        num_classes=args.classes,
        present_count=args.present,
        k=args.shots,
        blob_amplitude=args.amplitude,
        noise_sigma=args.sigma,
    )


def cmd_gen(args) -> int:
    cfg = _synth_config(args)
    episodes = synth_episodes(cfg, args.seed, args.episodes)
    pack_io.write_pack(args.output, episodes, cfg)
    dims = {lv.value: episodes[0].levels[lv].data.shape for lv in episodes[0].levels}
    print(f"config {_config_hash(args)}")
    print(f"wrote {len(episodes)} episodes, {cfg.num_classes} classes, "
          f"k={cfg.k}, dims {dims} -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    episodes = pack_io.read_pack(args.pack)
    first = episodes[0]
    channels = {lv: first.levels[lv].channels for lv in first.levels}
    c4 = channels[Level.L4]
    model = ScoreModel.init(c4, hidden=args.hidden, seed=args.seed)
    proj = FusionProjector.identity(channels, c4)

    phases = [Phase(p) for p in args.phases.split(",") if p]
    print(f"config {_config_hash(args)}")
    for phase in phases:
        joint = phase is Phase.JOINT
        tcfg = TrainConfig(
            learning_rate=args.joint_lr if joint else args.lr,
            epochs=args.joint_epochs if joint else args.epochs,
            batch_size=args.batch_size,
            negative_ratio=args.negative_ratio,
            phase=phase,
            seed=args.seed,
        )
        model, proj, losses = train(model, proj, episodes, tcfg)
        for i, loss in enumerate(losses):
            print(f"phase {phase.value} epoch {i} loss {loss:.4f}")

    acc = _train_accuracy(model, proj, episodes)
    print(f"train accuracy {acc:.4f}")
    checkpoint.save_checkpoint(args.output, model, proj)
    print(f"wrote checkpoint -> {args.output}")
    return EXIT_OK


def _train_accuracy(model, proj, episodes) -> float:
    """Present/absent accuracy of the 0.5-score decision on L4 maps."""
    from .selector import score_all

    correct = total = 0
    for ep in episodes:
        scores = score_all(model, ep)
        for cid, s in scores.items():
            total += 1
            if (s >= 0.5) == (cid in ep.present_classes):
                correct += 1
    return correct / max(total, 1)


def cmd_eval(args) -> int:
    model, proj = checkpoint.load_checkpoint(args.checkpoint)
    episodes = pack_io.read_pack(args.pack)
    report = evaluate(model, proj, episodes, _strategy(args),
                      iou_threshold=args.iou, peak_threshold=args.peak)
    chash = _config_hash(args)
    record = {
        "config": chash,
        "ap_full": round(report.ap_full, 4),
        "ap_minor": round(report.ap_minor, 4),
        "omission_rate": round(report.omission_rate, 4),
        "mean_recall": round(report.mean_recall, 4),
    }
    print(json.dumps(record, sort_keys=True))
    print(f"OR {report.omission_rate:.4f} recall {report.mean_recall:.4f} "
          f"(timings non-deterministic, seconds): "
          + " ".join(f"{k}={v:.4f}" for k, v in sorted(report.timings.items())))
    if args.recall_csv:
        with open(args.recall_csv, "w") as f:
            f.write("class_id,recall\n")
            for cid, r in sorted(report.per_class_recall.items()):
                f.write(f"{cid},{r:.4f}\n")
        print(f"wrote per-class recall -> {args.recall_csv}")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(record, f, sort_keys=True, indent=2)
            f.write("\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, proj = checkpoint.load_checkpoint(args.checkpoint)
    episodes = pack_io.read_pack(args.pack)
    strategy = _strategy(args)
    n_classes = len(episodes[0].class_ids)

    records = []
    totals = {"full": 0.0, "minor": 0.0, "full_heavy": 0.0, "minor_heavy": 0.0,
              "minor_scoring": 0.0}
    for ep in episodes:
        t0 = time.perf_counter()
        full = run_inference(model, proj, ep, All(), args.peak)
        t_full = time.perf_counter() - t0
        t0 = time.perf_counter()
        minor = run_inference(model, proj, ep, strategy, args.peak)
        t_minor = time.perf_counter() - t0
        totals["full"] += t_full
        totals["minor"] += t_minor
        for res, tag in ((full, "full"), (minor, "minor")):
            totals[f"{tag}_heavy"] = totals.get(f"{tag}_heavy", 0.0) + \
                res.timings["fusion"] + res.timings["detect"]
        totals["minor_scoring"] += minor.timings["scoring"]
        for res in (full, minor):
            records.append(cost.TimingRecord(
                n_candidates=n_classes,
                n_selected=len(res.selected),
                scoring_seconds=res.timings["scoring"],
                fusion_seconds=res.timings["fusion"],
                detect_seconds=res.timings["detect"],
                setup_seconds=res.timings["setup"],
            ))

    print(f"config {_config_hash(args)}")
    ratio = totals["minor_heavy"] / totals["full_heavy"] if totals["full_heavy"] else 1.0
    print(f"measured (non-deterministic): full {totals['full']:.4f}s "
          f"minor {totals['minor']:.4f}s heavy-ratio {ratio:.4f} "
          f"scoring-overhead {totals['minor_scoring'] / totals['full']:.4f}")
    try:
        fit = cost.measure(records, n_ref=n_classes)
    except ValueError as e:
        print(f"profile fit failed: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"fitted profile: backbone {fit.profile.t_backbone:.4f}s "
          f"per-class heavy {cost.per_class_cost(fit.profile):.4f}s "
          f"scoring/class {fit.profile.t_tpf_per_class:.4f}s "
          f"residual {fit.residual:.4f}s")

    # Published profile figures: 20 candidates, 10 kept by the filter.
    ref = cost.REFERENCE_PROFILE
    print(f"reference-profile prediction (20 classes, keep 10): full "
          f"{cost.predict_time(ref, 20, 20, False):.4f}s "
          f"minor {cost.predict_time(ref, 20, 10, True):.4f}s")
    return EXIT_OK


def _add_strategy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=["all", "topn", "adaptive"], default="topn")
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--peak", type=float, default=0.5,
                   help="relative heat-map threshold of the toy detector")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="preselect",
        description="Few-shot detection class pre-selection pipeline",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of default option values")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic episode pack")
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--present", type=int, default=3)
    g.add_argument("--episodes", type=int, default=64)
    g.add_argument("--shots", type=int, default=3)
    g.add_argument("--amplitude", type=float, default=10.0)
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a scorer on an episode pack")
    t.add_argument("--pack", type=Path, required=True)
    t.add_argument("--phases", default="joint,tpf",
                   help="comma-separated: joint, tpf")
    t.add_argument("--joint-epochs", type=int, default=5)
    t.add_argument("--joint-lr", type=float, default=0.05)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--negative-ratio", type=int, default=1)
    t.add_argument("--hidden", type=int, default=512)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("-o", "--output", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a pack")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--pack", type=Path, required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--recall-csv", type=Path, default=None)
    e.add_argument("--report", type=Path, default=None)
    _add_strategy_args(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time full vs. minor loops")
    b.add_argument("--checkpoint", type=Path, required=True)
    b.add_argument("--pack", type=Path, required=True)
    _add_strategy_args(b)
    b.set_defaults(func=cmd_bench)
    return parser


def _apply_config_file(parser, argv):
    """Pre-parse --config and inject its values as new defaults."""
    ns, _ = parser.parse_known_args(argv)
    if ns.config is None:
        return
    with open(ns.config) as f:
        values = json.load(f)
    for action in parser._subparsers._group_actions[0].choices.values():
        defaults = {
            k: v for k, v in values.items()
            if any(a.dest == k for a in action._actions)
        }
        action.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
