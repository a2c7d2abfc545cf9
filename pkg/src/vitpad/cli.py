"""Command-line entry point. Each subcommand is a thin composition of
module operations; no model or metric logic lives here.

Exit codes: 0 success, 1 usage error, 2 runtime error. All randomized
subcommands take --seed and are bit-reproducible; VITPAD_THREADS caps
worker counts without changing any output.
"""

import argparse
import sys
from pathlib import Path

from . import config as runconfig
from . import data, explain, metrics, train, vit, weights_io
from .errors import VitPadError
from .tensor import Tensor


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="vitpad", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic PAD dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--attack-types", default="print,replay,mask")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("protocol", help="emit a protocol.csv for a manifest")
    psub = p.add_subparsers(dest="protocol_kind", metavar="kind")
    loo = psub.add_parser("loo", help="leave-one-out attack protocol")
    loo.add_argument("--manifest", required=True)
    loo.add_argument("--left-out", required=True)
    loo.add_argument("--dev-fraction", type=float, default=None)
    loo.add_argument("--config", default=None)
    loo.add_argument("--seed", type=int, default=None)
    loo.add_argument("--out", required=True)
    grand = psub.add_parser("grandtest", help="identity-disjoint grandtest protocol")
    grand.add_argument("--manifest", required=True)
    grand.add_argument("--fractions", default=None, help="train,dev,eval e.g. 0.6,0.2,0.2")
    grand.add_argument("--config", default=None)
    grand.add_argument("--seed", type=int, default=None)
    grand.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fine-tune and keep the best-dev-loss weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--policy", choices=["fc", "e_fc", "all"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--weights-in", default=None, help="initial weights; fresh seeded init when omitted")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--out-dir", default=None, help="where history.csv and the loss figure go")

    p = sub.add_parser("score", help="score samples into a CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights-in", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--protocol", default=None)
    p.add_argument("--fold", choices=list(data.FOLDS), default="eval")
    p.add_argument("--ids", default=None, help="comma-separated sample ids (overrides protocol/fold)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="error-rate report from score CSVs")
    p.add_argument("--dev-scores", default=None)
    p.add_argument("--eval-scores", required=True)
    p.add_argument("--regime", choices=["bpcer1", "fixed05", "eer-hter"], required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--video-agg", action="store_true", help="mean-pool frames into videos first")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("cross-evaluate", help="HTER on one dataset at another's dev EER threshold")
    p.add_argument("--dev-scores", required=True, help="dev scores of the training dataset")
    p.add_argument("--eval-scores", required=True, help="eval scores of the other dataset")
    p.add_argument("--video-agg", action="store_true")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("explain", help="relevancy heatmaps for one sample")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights-in", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("embed", help="export class-token features to CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights-in", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ids", default=None, help="comma-separated sample ids; all when omitted")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="verify backprop against finite differences (tiny model)")
    p.add_argument("--seed", type=int, default=7)

    return parser


def _load_weights(path, cfg):
    entries = weights_io.read_container(path)
    params = {name: Tensor(arr, name=name) for name, arr in entries.items()}
    vit.validate_params(params, cfg)
    return params


def _cmd_synth(args) -> int:
    types = [t for t in args.attack_types.split(",") if t]
    manifest = data.synth_dataset(args.out_dir, args.identities, args.frames, types, seed=args.seed)
    print(f"wrote {len(manifest)} samples under {args.out_dir}")
    return 0


def _cmd_protocol(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    manifest = data.load_manifest(args.manifest)
    seed = cfg["seed"] if args.seed is None else args.seed
    if args.protocol_kind == "loo":
        dev_fraction = cfg["dev_fraction"] if args.dev_fraction is None else args.dev_fraction
        protocol = data.gen_loo(manifest, args.left_out, dev_fraction=dev_fraction, seed=seed)
    else:
        if args.fractions is not None:
            fractions = tuple(float(v) for v in args.fractions.split(","))
        else:
            fractions = (cfg["train_fraction"], cfg["dev_fraction"], cfg["eval_fraction"])
        protocol = data.gen_grandtest(manifest, fractions, seed=seed)
    data.write_protocol(protocol, args.out)
    sizes = {fold: len(protocol.fold_ids(fold)) for fold in data.FOLDS}
    print(f"protocol '{protocol.name}': {sizes}")
    return 0


def _cmd_train(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    if args.policy is not None:
        cfg["policy"] = args.policy
    if args.seed is not None:
        cfg["seed"] = args.seed
    vit_cfg = runconfig.vit_config_from(cfg)
    train_cfg = runconfig.train_config_from(cfg)

    manifest = data.load_manifest(args.manifest)
    protocol = data.load_protocol(args.protocol)
    if args.weights_in:
        init = _load_weights(args.weights_in, vit_cfg)
    else:
        init = vit.init_params(vit_cfg, seed=train_cfg.seed)

    best, history = train.train(manifest, protocol, init, vit_cfg, train_cfg,
                                eye_x=cfg["eye_x"], eye_y=cfg["eye_y"])
    weights_io.write_container(best, args.weights_out)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        train.write_history_csv(history, out_dir / "history.csv")
        from . import report

        report.render_loss_curves(history, out_dir / "loss_curve.png")
    print(f"best epoch {history.best_epoch + 1}: dev loss {history.dev_loss[history.best_epoch]:.9g} "
          f"(initial {history.initial_dev_loss:.9g})")
    return 0


def _cmd_score(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    vit_cfg = runconfig.vit_config_from(cfg)
    manifest = data.load_manifest(args.manifest)
    params = _load_weights(args.weights_in, vit_cfg)
    if args.ids:
        ids = [s for s in args.ids.split(",") if s]
    elif args.protocol:
        ids = data.load_protocol(args.protocol).fold_ids(args.fold)
    else:
        ids = manifest.ids()
    scores = train.score_samples(params, vit_cfg, manifest, ids,
                                 eye_x=cfg["eye_x"], eye_y=cfg["eye_y"])
    metrics.write_scores_csv(scores, args.out)
    print(f"wrote {len(scores)} scores to {args.out}")
    return 0


def _assemble_report(args, regime, dev_scores, eval_scores, target_bpcer):
    if regime == "bpcer1":
        tau = metrics.threshold_at_bpcer(dev_scores, target_bpcer)
        return metrics.evaluate_at(eval_scores, tau)
    if regime == "fixed05":
        report = metrics.evaluate_at(eval_scores, 0.5)
        _, report.eer = metrics.eer(eval_scores)
        return report
    # eer-hter
    tau, _ = metrics.eer(dev_scores)
    report = metrics.evaluate_at(eval_scores, tau)
    report.hter = metrics.hter(eval_scores, tau)
    return report


def _write_report_files(report_obj, eval_scores, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(report_obj, out_dir / "metrics.csv")
    text = metrics.format_metrics_text(report_obj)
    (out_dir / "metrics.txt").write_text(text, encoding="utf-8")
    from . import report

    report.render_score_histogram(eval_scores, report_obj.threshold, out_dir / "score_hist.png")
    sys.stdout.write(text)


def _cmd_evaluate(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    eval_scores = metrics.read_scores_csv(args.eval_scores)
    dev_scores = metrics.read_scores_csv(args.dev_scores) if args.dev_scores else None
    if args.video_agg:
        eval_scores = metrics.aggregate_by_video(eval_scores)
        dev_scores = metrics.aggregate_by_video(dev_scores) if dev_scores else None
    if args.regime in ("bpcer1", "eer-hter") and dev_scores is None:
        raise VitPadError(f"regime {args.regime} needs --dev-scores")
    report_obj = _assemble_report(args, args.regime, dev_scores, eval_scores, cfg["target_bpcer"])
    _write_report_files(report_obj, eval_scores, args.out_dir)
    return 0


def _cmd_cross_evaluate(args) -> int:
    dev_scores = metrics.read_scores_csv(args.dev_scores)
    eval_scores = metrics.read_scores_csv(args.eval_scores)
    if args.video_agg:
        dev_scores = metrics.aggregate_by_video(dev_scores)
        eval_scores = metrics.aggregate_by_video(eval_scores)
    report_obj = _assemble_report(args, "eer-hter", dev_scores, eval_scores, None)
    _write_report_files(report_obj, eval_scores, args.out_dir)
    return 0


def _cmd_explain(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    vit_cfg = runconfig.vit_config_from(cfg)
    manifest = data.load_manifest(args.manifest)
    params = _load_weights(args.weights_in, vit_cfg)
    rollout, gradmap, trace = explain.relevancy_for_sample(
        params, vit_cfg, manifest, args.sample_id, eye_x=cfg["eye_x"], eye_y=cfg["eye_y"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    explain.export_heatmap(rollout, out_dir / f"{args.sample_id}_rollout.pgm")
    explain.export_heatmap(gradmap, out_dir / f"{args.sample_id}_gradrel.pgm")
    from . import report

    report.render_relevancy(rollout, out_dir / f"{args.sample_id}_rollout.png")
    report.render_relevancy(gradmap, out_dir / f"{args.sample_id}_gradrel.png")
    print(f"logit {trace.logit:.9g}; maps written to {out_dir}")
    return 0


def _cmd_embed(args) -> int:
    cfg = runconfig.load_run_config(args.config)
    vit_cfg = runconfig.vit_config_from(cfg)
    manifest = data.load_manifest(args.manifest)
    params = _load_weights(args.weights_in, vit_cfg)
    ids = [s for s in args.ids.split(",") if s] if args.ids else manifest.ids()
    explain.export_embeddings(params, vit_cfg, manifest, ids, args.out,
                              eye_x=cfg["eye_x"], eye_y=cfg["eye_y"])
    print(f"wrote {len(ids)} embeddings to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = train.gradcheck(seed=args.seed)
    print(f"max relative error: {worst:.3e}")
    if worst >= 1e-5:
        print("gradient check FAILED (>= 1e-5)", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "protocol": _cmd_protocol,
    "train": _cmd_train,
    "score": _cmd_score,
    "evaluate": _cmd_evaluate,
    "cross-evaluate": _cmd_cross_evaluate,
    "explain": _cmd_explain,
    "embed": _cmd_embed,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a command is required")
        if args.command == "protocol" and getattr(args, "protocol_kind", None) is None:
            raise _UsageError("protocol needs a kind: loo or grandtest")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (VitPadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
