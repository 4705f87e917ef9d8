"""Command-line front end binding the pipeline stages together.

Subcommands: pretrain | reorder | adapt | family | eval | analyze | ablate.
Every run writes its resolved configuration beside its outputs; the
report-producing stages also render PNG figures next to the CSV/JSON.
Exit codes: 0 success, 1 invalid config or failed run, 2 usage error.
"""

import argparse
import os
import sys

import numpy as np

from . import analysis, figures
from .adapt import adapt, build_family, calibrate_and_reorder
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import encode_with_vocab, ingest_corpus, load_text, split_text
from .errors import CheckpointError, ConfigError
from .labels import dump_labels_csv
from .model import eval_loss, pretrain

OUT_DIR_ENV = "NESTMOE_OUT"

# CLI flag destination -> (RunConfig field per command, or same name for all)
_STEPS_FIELD = {"pretrain": "pretrain_steps", "adapt": "adapt_steps",
                "family": "adapt_steps", "ablate": "adapt_steps"}
_LR_FIELD = {"pretrain": "pretrain_lr", "adapt": "adapt_lr",
             "family": "adapt_lr", "ablate": "adapt_lr"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nestmoe",
        description="Convert a dense character-level LM into a token-difficulty-routed "
                    "nested-expert model, then evaluate it.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_ckpt=False):
        p.add_argument("--config", help="JSON config file (flags override file values)")
        p.add_argument("--corpus", help="text corpus path")
        p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=["float32", "float64"])
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--seq-len", type=int, dest="seq_len")
        p.add_argument("--log-every", type=int, dest="log_every")
        if needs_ckpt:
            p.add_argument("--ckpt", required=True, help="input checkpoint")

    p = sub.add_parser("pretrain", help="train the dense base model")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("reorder", help="importance-reorder a dense checkpoint")
    common(p, needs_ckpt=True)

    p = sub.add_parser("adapt", help="adapt one nested-expert model at a single theta")
    common(p, needs_ckpt=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--num-experts", type=int, dest="num_experts")
    p.add_argument("--router-hidden", type=int, dest="router_hidden")
    p.add_argument("--auto-reorder", action="store_true", default=None, dest="auto_reorder")

    p = sub.add_parser("family", help="adapt a family of models across thetas")
    common(p, needs_ckpt=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--thetas", help="comma-separated thresholds, e.g. 0.7,0.8,0.9")
    p.add_argument("--num-experts", type=int, dest="num_experts")
    p.add_argument("--router-hidden", type=int, dest="router_hidden")
    p.add_argument("--auto-reorder", action="store_true", default=None, dest="auto_reorder")

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    common(p, needs_ckpt=True)
    p.add_argument("--mode", choices=["dense", "routed"], default="dense")
    p.add_argument("--max-windows", type=int, dest="eval_max_windows")

    p = sub.add_parser("analyze", help="confusion, usage, activated params, perplexity")
    common(p, needs_ckpt=True)
    p.add_argument("--theta", type=float, help="label threshold (default: checkpoint's)")
    p.add_argument("--max-windows", type=int, dest="eval_max_windows")

    p = sub.add_parser("ablate", help="train the no-router-loss twin")
    common(p, needs_ckpt=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--num-experts", type=int, dest="num_experts")
    p.add_argument("--router-hidden", type=int, dest="router_hidden")
    p.add_argument("--auto-reorder", action="store_true", default=None, dest="auto_reorder")
    p.add_argument("--paired", help="default-trained checkpoint to compare usage entropy against")
    return parser


def resolve_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    fields = RunConfig.field_names()
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "func", "ckpt", "mode", "paired"):
            continue
        if key == "out":
            overrides["out_dir"] = value
        elif key == "steps":
            overrides[_STEPS_FIELD[args.command]] = value
        elif key == "lr":
            overrides[_LR_FIELD[args.command]] = value
        elif key == "thetas":
            overrides["thetas"] = [float(x) for x in str(value).split(",") if x]
        elif key in fields:
            overrides[key] = value
    cfg = cfg.merged(overrides, source="command line")
    if cfg.out_dir is None:
        cfg = cfg.merged({"out_dir": os.environ.get(OUT_DIR_ENV, "runs")})
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _need_corpus(cfg):
    if cfg.corpus is None:
        raise ConfigError("this stage needs --corpus (or a corpus entry in the config file)")
    return cfg.corpus


def _tokens_for(model, cfg):
    """Encode the configured corpus with the checkpoint's own vocabulary."""
    text = load_text(_need_corpus(cfg))
    vocab = model.meta.get("vocab")
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; was it produced by `pretrain`?")
    train_text, heldout_text = split_text(text, cfg.split_fraction)
    return encode_with_vocab(train_text, vocab), encode_with_vocab(heldout_text, vocab)


def _write_config(cfg, name):
    path = os.path.join(cfg.out_dir, f"{name}_config.json")
    cfg.write(path)
    return path


def cmd_pretrain(cfg, args):
    corpus = ingest_corpus(_need_corpus(cfg), cfg.split_fraction)
    mc = cfg.model_config(corpus.vocab_size)
    log_path = os.path.join(cfg.out_dir, "pretrain_log.csv")
    result = pretrain(
        corpus.train, mc, steps=cfg.pretrain_steps, batch_size=cfg.batch_size,
        seq_len=cfg.seq_len, lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay,
        dtype=cfg.dtype, log_path=log_path, log_every=cfg.log_every)
    result.model.meta["vocab"] = "".join(corpus.vocab)
    ckpt = os.path.join(cfg.out_dir, "dense.ckpt")
    save_checkpoint(result.model, ckpt)
    figures.plot_training_curve(log_path, os.path.join(cfg.out_dir, "pretrain_loss.png"),
                                title="dense pretraining")
    _write_config(cfg, "pretrain")
    held = eval_loss(result.model, corpus.heldout, seq_len=cfg.seq_len,
                     max_windows=cfg.eval_max_windows)
    print(f"wrote {ckpt}")
    print(f"held-out loss {held:.4f} (uniform baseline ln V = {np.log(corpus.vocab_size):.4f})")
    return 0


def cmd_reorder(cfg, args):
    model = load_checkpoint(args.ckpt)
    train, _ = _tokens_for(model, cfg)
    calibrate_and_reorder(model, train, cfg.calib_tokens(), cfg.seq_len)
    ckpt = os.path.join(cfg.out_dir, "reordered.ckpt")
    save_checkpoint(model, ckpt)
    _write_config(cfg, "reorder")
    print(f"wrote {ckpt}")
    return 0


def _run_adapt(cfg, args, theta, ablation_mode=False):
    model = load_checkpoint(args.ckpt)
    train, _ = _tokens_for(model, cfg)
    tag = "ablated" if ablation_mode else f"theta{theta:g}"
    log_path = os.path.join(cfg.out_dir, f"adapt_log_{tag}.csv")
    adapt(model, train, cfg.adapt_config(theta=theta, ablation_mode=ablation_mode),
          log_path=log_path, auto_reorder=cfg.auto_reorder,
          calib_tokens=cfg.calib_tokens(), log_every=cfg.log_every)
    ckpt = os.path.join(cfg.out_dir, f"adapted_{tag}.ckpt")
    save_checkpoint(model, ckpt)
    figures.plot_training_curve(log_path, os.path.join(cfg.out_dir, f"adapt_loss_{tag}.png"),
                                title=f"adaptation ({tag})")
    print(f"wrote {ckpt}")
    return model, ckpt


def cmd_adapt(cfg, args):
    theta = cfg.theta if args.theta is None else args.theta
    _run_adapt(cfg, args, theta)
    _write_config(cfg, "adapt")
    return 0


def cmd_family(cfg, args):
    model = load_checkpoint(args.ckpt)
    train, _ = _tokens_for(model, cfg)
    if not model.meta.get("reordered") and not cfg.auto_reorder:
        raise ConfigError(
            "model is not importance-reordered; run the reorder stage or pass --auto-reorder")
    results = build_family(
        model, train, cfg.thetas, cfg.adapt_config(), calib_tokens=cfg.calib_tokens(),
        log_path_for=lambda t: os.path.join(cfg.out_dir, f"adapt_log_theta{t:g}.csv"))
    for theta, result in zip(cfg.thetas, results):
        tag = f"theta{theta:g}"
        ckpt = os.path.join(cfg.out_dir, f"adapted_{tag}.ckpt")
        save_checkpoint(result.model, ckpt)
        figures.plot_training_curve(
            os.path.join(cfg.out_dir, f"adapt_log_{tag}.csv"),
            os.path.join(cfg.out_dir, f"adapt_loss_{tag}.png"),
            title=f"adaptation ({tag})")
        print(f"wrote {ckpt}")
    _write_config(cfg, "family")
    return 0


def cmd_eval(cfg, args):
    model = load_checkpoint(args.ckpt)
    _, heldout = _tokens_for(model, cfg)
    ppl = analysis.perplexity(model, heldout, mode=args.mode, seq_len=cfg.seq_len,
                              max_windows=cfg.eval_max_windows)
    metrics = {"mode": args.mode, "perplexity": ppl, "loss": float(np.log(ppl)),
               "checkpoint": os.path.basename(args.ckpt)}
    path = os.path.join(cfg.out_dir, f"eval_{args.mode}.json")
    analysis.write_metrics_json(metrics, path)
    _write_config(cfg, "eval")
    print(f"{args.mode} perplexity {ppl:.4f} -> {path}")
    return 0


def cmd_analyze(cfg, args):
    model = load_checkpoint(args.ckpt)
    _, heldout = _tokens_for(model, cfg)
    theta = args.theta
    max_w = cfg.eval_max_windows

    labels, preds = analysis.collect_label_prediction_pairs(
        model, heldout, theta=theta, seq_len=cfg.seq_len, max_windows=max_w)
    cm = analysis.confusion_from_pairs(labels, preds, len(model.widths))
    choices = analysis.collect_choices(model, heldout, seq_len=cfg.seq_len, max_windows=max_w)
    usage = analysis.usage_from_choices(choices, len(model.widths))
    activated = analysis.activated_params_from_choices(model, choices)
    ppl_routed = analysis.perplexity(model, heldout, mode="routed", seq_len=cfg.seq_len,
                                     max_windows=max_w)
    ppl_dense = analysis.perplexity(model, heldout, mode="dense", seq_len=cfg.seq_len,
                                    max_windows=max_w)

    out = cfg.out_dir
    analysis.write_confusion_csv(cm, os.path.join(out, "confusion.csv"))
    analysis.write_usage_csv(usage, os.path.join(out, "usage.csv"))
    dump_labels_csv(labels, os.path.join(out, "labels.csv"))
    metrics = {
        "accuracy": cm.accuracy,
        "adjacent_error_fraction": cm.adjacent_error_fraction,
        "errors": cm.errors,
        "pairs_total": cm.total,
        "activated_params_mean": activated,
        "total_params": model.param_count(),
        "perplexity_routed": ppl_routed,
        "perplexity_dense": ppl_dense,
        "mean_usage_entropy": usage.mean_entropy,
        "theta": model.meta.get("theta") if theta is None else theta,
        "checkpoint": os.path.basename(args.ckpt),
    }
    analysis.write_metrics_json(metrics, os.path.join(out, "metrics.json"))
    figures.plot_confusion(cm.counts, os.path.join(out, "confusion.png"))
    figures.plot_usage(usage.fractions, os.path.join(out, "usage.png"))
    _write_config(cfg, "analyze")
    print(f"router accuracy {cm.accuracy:.4f}, "
          f"activated params {activated:,.0f} / {model.param_count():,}, "
          f"routed ppl {ppl_routed:.4f}")
    return 0


def cmd_ablate(cfg, args):
    theta = cfg.theta if args.theta is None else args.theta
    model, ckpt = _run_adapt(cfg, args, theta, ablation_mode=True)
    if args.paired:
        paired = load_checkpoint(args.paired)
        _, heldout = _tokens_for(model, cfg)
        with_loss, ablated = analysis.usage_entropy_compare(
            paired, model, heldout, seq_len=cfg.seq_len, max_windows=cfg.eval_max_windows)
        metrics = {"mean_usage_entropy_with_router_loss": with_loss,
                   "mean_usage_entropy_ablated": ablated,
                   "ablated_lower": ablated < with_loss}
        path = os.path.join(cfg.out_dir, "entropy_compare.json")
        analysis.write_metrics_json(metrics, path)
        print(f"usage entropy: with router loss {with_loss:.4f}, ablated {ablated:.4f}")
    _write_config(cfg, "ablate")
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "reorder": cmd_reorder,
    "adapt": cmd_adapt,
    "family": cmd_family,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
