"""Command-line entry point: train, tokenize, eval, ablate, ppr-cache."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .autograd import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .errors import ConfigurationError, QuietError, ShapeError, UserInputError
from .gate import save_gate_weight_log, save_tokens_tsv
from .graph import build_gcn_adjacency, load_graph, make_splits, save_splits
from .heads import compute_ppr_table, ppr_cache_key, save_ppr_cache
from .quantizer import save_codebooks
from .training import evaluate, load_model, model_tensors, tokenize_graph, train

CHECKPOINT_NAME = "checkpoint.qtck"
CODEBOOK_NAME = "codebooks.qtcb"
TOKENS_NAME = "tokens.tsv"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.resolved"
GATE_LOG_NAME = "gate_weights.csv"


def _metric_csv_lines(history, num_levels: int) -> list[str]:
    cols = ["epoch", "split", "metric", "value"]
    cols += [f"w{i + 1}" for i in range(num_levels)]
    cols += ["Lcommit", "Lbal", "Ldiv", "Ltask"]
    lines = [",".join(cols)]
    for row in history:
        cells = [str(row["epoch"]), row["split"], row["metric"], repr(row["value"])]
        cells += [repr(float(w)) for w in row["weights"]]
        cells += [repr(row["l_commit"]), repr(row["l_bal"]),
                  repr(row["l_div"]), repr(row["l_task"])]
        lines.append(",".join(cells))
    return lines


def _load_split_graph(cfg: RunConfig):
    graph = load_graph(cfg.edges, cfg.features, cfg.labels or None)
    task = "node" if cfg.task == "nc" else "link"
    return make_splits(graph, cfg.seed, task, cfg.split_ratios)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if getattr(args, "freeze_encoder", False):
        updates["freeze_encoder"] = True
    return dataclasses.replace(cfg, **updates).validate()


def _run_and_export(cfg: RunConfig):
    """Train under cfg and write all artifacts into cfg.out_dir."""
    graph = _load_split_graph(cfg)
    result = train(graph, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, model_tensors(result.model))
    save_codebooks(out / CODEBOOK_NAME, result.model.stack,
                   fused=result.fused_codebook)
    save_tokens_tsv(out / TOKENS_NAME, result.tokens)
    (out / METRICS_NAME).write_text(
        "\n".join(_metric_csv_lines(result.history,
                                    result.model.stack.num_levels)) + "\n",
        encoding="utf-8")
    save_config(cfg, out / CONFIG_NAME)
    save_gate_weight_log(out / GATE_LOG_NAME, result.gate_log)
    save_splits(graph.splits, out)
    return result, out


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    result, out = _run_and_export(cfg)
    summary = " ".join(f"{k}={v:.4f}" for k, v in result.test_metrics.items())
    print(f"trained {cfg.task} for {result.state.epoch + 1} epochs "
          f"(best val {result.state.best_val:.4f} at epoch "
          f"{result.state.best_epoch}); test: {summary}")
    print(f"artifacts written to {out}")
    return 0


def _load_model_for(args, need_graph: bool = True):
    ckpt_path = Path(args.checkpoint)
    cfg_path = args.config or ckpt_path.parent / CONFIG_NAME
    if not Path(cfg_path).exists():
        raise ConfigurationError(
            f"no config found at {cfg_path}; pass --config explicitly")
    cfg = load_config(cfg_path)
    tensors = load_checkpoint(ckpt_path)
    feature_dim = tensors["gnn.layer0.weight"].shape[0]
    num_classes = (tensors["head.out.weight"].shape[1]
                   if "head.out.weight" in tensors else 0)
    model = load_model(cfg, feature_dim, num_classes, tensors)
    return cfg, model, feature_dim


def cmd_tokenize(args) -> int:
    cfg, model, feature_dim = _load_model_for(args)
    edges = args.edges or cfg.edges
    features = args.features or cfg.features
    graph = load_graph(edges, features, None)
    if graph.feature_dim != feature_dim:
        raise ShapeError(
            f"graph features have dim {graph.feature_dim}, checkpoint "
            f"expects {feature_dim}")
    assignment, _ = tokenize_graph(model, graph, cfg)
    save_tokens_tsv(args.out, assignment)
    print(f"wrote {graph.num_nodes} tokens to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, model, feature_dim = _load_model_for(args)
    if args.task is not None and args.task != cfg.task:
        raise ConfigurationError(
            f"checkpoint was trained for task {cfg.task!r}, not {args.task!r}")
    if args.edges:
        cfg = dataclasses.replace(cfg, edges=args.edges,
                                  features=args.features or cfg.features,
                                  labels=args.labels if args.labels is not None
                                  else cfg.labels).validate()
    graph = _load_split_graph(cfg)
    if graph.feature_dim != feature_dim:
        raise ShapeError(
            f"graph features have dim {graph.feature_dim}, checkpoint "
            f"expects {feature_dim}")
    metrics = evaluate(model, graph, cfg)
    for name, value in metrics.items():
        print(f"{name}={value}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    header = ",".join(metrics)
    row = ",".join(repr(float(v)) for v in metrics.values())
    Path(out).write_text(f"{header}\n{row}\n", encoding="utf-8")
    return 0


VARIANTS = ("no_gating", "no_diversity", "no_balance")


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.variant not in VARIANTS:
        raise ConfigurationError(
            f"unknown variant {args.variant!r}; choices: {VARIANTS}")
    cfg = dataclasses.replace(
        cfg, out_dir=f"{cfg.out_dir.rstrip('/')}-{args.variant}",
        **{args.variant: True})
    result, out = _run_and_export(cfg)
    summary = " ".join(f"{k}={v:.4f}" for k, v in result.test_metrics.items())
    print(f"ablation {args.variant}: test {summary}; artifacts in {out}")
    return 0


def cmd_ppr_cache(args) -> int:
    cfg = load_config(args.config)
    graph = _load_split_graph(cfg) if cfg.task == "lp" else load_graph(
        cfg.edges, cfg.features, cfg.labels or None)
    adj = build_gcn_adjacency(graph)
    import numpy as np

    table = compute_ppr_table(adj, np.arange(graph.num_nodes),
                              cfg.alpha_restart, cfg.eps_ppr)
    key = ppr_cache_key(adj, cfg.alpha_restart, cfg.eps_ppr)
    save_ppr_cache(args.out, table, key)
    print(f"cached {len(table.rows)} ppr rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quiet",
        description="Hierarchical residual-quantized graph tokenizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train tokenizer and task head")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--freeze-encoder", action="store_true",
                         dest="freeze_encoder")
    p_train.set_defaults(fn=cmd_train)

    p_tok = sub.add_parser("tokenize", help="emit tokens for a graph")
    p_tok.add_argument("--checkpoint", required=True)
    p_tok.add_argument("--config", default=None)
    p_tok.add_argument("--edges", default=None)
    p_tok.add_argument("--features", default=None)
    p_tok.add_argument("--out", required=True)
    p_tok.set_defaults(fn=cmd_tokenize)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--task", choices=("nc", "lp"), default=None)
    p_eval.add_argument("--edges", default=None)
    p_eval.add_argument("--features", default=None)
    p_eval.add_argument("--labels", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train a single-ablation variant")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--variant", required=True, choices=VARIANTS)
    p_abl.add_argument("--out", default=None)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.set_defaults(fn=cmd_ablate, freeze_encoder=False)

    p_ppr = sub.add_parser("ppr-cache", help="precompute the PPR table")
    p_ppr.add_argument("--config", required=True)
    p_ppr.add_argument("--out", required=True)
    p_ppr.set_defaults(fn=cmd_ppr_cache)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UserInputError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QuietError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
