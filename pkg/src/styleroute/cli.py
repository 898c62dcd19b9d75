"""Command-line entry points tying the pipeline together.

Every command is deterministic under a fixed ``--seed``: file outputs are
byte-identical across reruns (log lines may carry no timestamps for this
reason). Failures exit nonzero after printing a machine-readable JSON error
record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, desk_profile, paper_profile, parse_config, serialize_config
from .dit import DiTConfig
from .encoder import EncoderConfig, train_encoder
from .evaluation import (
    MockSemanticJudge,
    aggregate_scores,
    convergence_ab,
    retrieval_report,
    semantic_score,
    staged_iou_report,
)
from .features import ExtractorSpec
from .moe import MoEConfig
from .pipeline import curate_dataset, generate_dataset, load_examples
from .rasters import load_png, save_png
from .training import (
    TripletExample,
    load_encoder_checkpoint,
    load_stylizer_checkpoint,
    save_encoder_checkpoint,
    save_stylizer_checkpoint,
    stylize,
    train_stylizer,
    write_trace_file,
)

__all__ = ["main"]


def _load_config(args) -> RunConfig:
    cfg = paper_profile() if getattr(args, "profile", "desk") == "paper" else desk_profile()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"), base=cfg)
    for item in getattr(args, "set", None) or []:
        cfg = parse_config(item, base=cfg)
    return cfg.validate()


def _dit_config(cfg: RunConfig) -> DiTConfig:
    return DiTConfig(
        image_size=cfg.data_image_size,
        patch_size=cfg.dit_patch,
        width=cfg.dit_width,
        heads=cfg.dit_heads,
        blocks=cfg.dit_blocks,
        mlp_ratio=cfg.dit_mlp_ratio,
        cond_vocab=max(cfg.data_categories, 1),
    )


def _moe_config(cfg: RunConfig) -> MoEConfig:
    return MoEConfig(
        num_experts=cfg.stage2_experts,
        top_k=cfg.stage2_top_k,
        rank=cfg.stage2_rank,
        alpha=cfg.stage2_alpha,
        sites=cfg.sites(),
    )


def _encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        input_width=ExtractorSpec(image_size=cfg.data_image_size).width,
        hidden_width=cfg.stage1_hidden_width,
        embedding_dim=cfg.stage1_embedding_dim,
        tau=cfg.stage1_tau,
    )


def _encoder_corpus(manifest: Path, cfg: RunConfig):
    """Training corpus: train-split styles, minus the per-style holdout shard."""
    examples = load_examples(manifest)
    holdout_from = cfg.data_images_per_style - cfg.data_holdout_per_style
    train_imgs, train_labels, eval_imgs, eval_labels, eval_is_test_style = [], [], [], [], []
    for ex in examples:
        content_index = int(ex.record.content_path.split("/")[-1][1:-4])
        held = content_index >= holdout_from
        if held:
            eval_imgs.append(ex.stylized)
            eval_labels.append(ex.record.style_id)
            eval_is_test_style.append(ex.record.split == "test")
        elif ex.record.split == "train":
            train_imgs.append(ex.stylized)
            train_labels.append(ex.record.style_id)
    return train_imgs, train_labels, eval_imgs, eval_labels, eval_is_test_style


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    manifest = generate_dataset(cfg, Path(args.out), args.seed)
    (Path(args.out) / "run_config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"wrote {manifest}")
    return 0


def cmd_curate(args) -> int:
    out = Path(args.out) if args.out else Path(args.manifest).parent / "curated_manifest.jsonl"
    result = curate_dataset(args.manifest, args.judge, out)
    print(f"kept={len(result.kept)} rejected={len(result.rejected)} held={len(result.held)} -> {out}")
    if result.held:
        _error({"error": "judge unavailable for some items", "held": len(result.held)})
        return 3
    return 0


def cmd_train_encoder(args) -> int:
    cfg = _load_config(args)
    train_imgs, train_labels, _, _, _ = _encoder_corpus(Path(args.manifest), cfg)
    steps = cfg.stage1_steps if args.steps is None else args.steps
    encoder, history = train_encoder(
        train_imgs,
        train_labels,
        _encoder_config(cfg),
        steps=steps,
        lr=cfg.stage1_lr,
        batch_size=cfg.stage1_batch,
        seed=args.seed,
        optimizer=cfg.stage1_optimizer,
        spec=ExtractorSpec(image_size=cfg.data_image_size),
    )
    meta = {
        "config": cfg.to_dict(),
        "seed": args.seed,
        "iteration": steps,
        "loss_curve": history["loss"],
        "zero_positive_rows": history["zero_positive_rows"],
    }
    save_encoder_checkpoint(args.out, encoder, meta)
    print(f"wrote {args.out} (final loss {history['loss'][-1]:.4f})" if history["loss"] else f"wrote {args.out}")
    return 0


def _examples_for_training(manifest: Path, split: str | None = "train") -> list[TripletExample]:
    return [
        TripletExample(
            content=ex.content,
            style_ref=ex.style_ref,
            stylized=ex.stylized,
            style_id=ex.record.style_id,
            cond_id=ex.cond_id,
        )
        for ex in load_examples(manifest, split=split)
    ]


def cmd_train_stylizer(args) -> int:
    cfg = _load_config(args)
    encoder, _ = load_encoder_checkpoint(args.encoder)
    examples = _examples_for_training(Path(args.manifest))
    iterations = cfg.stage2_iterations if args.iterations is None else args.iterations
    result = train_stylizer(
        examples,
        encoder,
        _dit_config(cfg),
        _moe_config(cfg),
        iterations=iterations,
        lr=cfg.stage2_lr,
        seed=args.seed,
        base_steps=cfg.stage2_base_steps,
        base_lr=cfg.stage2_base_lr,
        balance_loss=cfg.stage2_balance_loss,
        record_traces=args.traces is not None,
    )
    save_stylizer_checkpoint(args.out, result, {"config": cfg.to_dict(), "seed": args.seed, "iteration": iterations})
    if args.traces is not None:
        write_trace_file(args.traces, result.traces)
    final = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
    print(f"wrote {args.out} (final loss {final}, collapse warnings {result.collapse_warnings})")
    return 0


def cmd_stylize(args) -> int:
    model, encoder, _ = load_stylizer_checkpoint(args.ckpt)
    content = load_png(args.content)
    style = load_png(args.style)
    trace: list = []
    out = stylize(content, style, model, encoder, steps=args.steps, seed=args.seed, cond_id=args.cond_id, trace=trace)
    save_png(out, args.out)
    if args.traces:
        entries = [(0, Path(args.style).stem, [(n, d.indices, d.weights.tolist()) for n, d in trace])]
        write_trace_file(args.traces, entries)
    print(f"wrote {args.out}")
    return 0


def cmd_eval_iou(args) -> int:
    model, encoder, _ = load_stylizer_checkpoint(args.ckpt)
    examples = load_examples(Path(args.manifest))
    report = staged_iou_report(
        model,
        encoder,
        [ex.stylized for ex in examples],
        [ex.record.content_path for ex in examples],
        [ex.record.style_id for ex in examples],
        samples=args.samples,
        seed=args.seed,
    )
    out = Path(args.out)
    report.write(out / "iou_report.txt", out / "iou_report.jsonl")
    print(report.to_text())
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = _load_config(args)
    encoder, _ = load_encoder_checkpoint(args.encoder)
    _, _, eval_imgs, eval_labels, eval_is_test = _encoder_corpus(Path(args.manifest), cfg)
    report = retrieval_report(encoder, eval_imgs, eval_labels, spec=ExtractorSpec(image_size=cfg.data_image_size))
    unseen_queries = [i for i, t in enumerate(eval_is_test) if t]
    payload = {"heldout": report.to_dict()}
    if unseen_queries:
        unseen = retrieval_report(
            encoder, eval_imgs, eval_labels, query_indices=unseen_queries,
            spec=ExtractorSpec(image_size=cfg.data_image_size),
        )
        payload["unseen_styles"] = unseen.to_dict()
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_eval_semantic(args) -> int:
    model, encoder, _ = load_stylizer_checkpoint(args.ckpt)
    examples = load_examples(Path(args.manifest))
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(examples), size=min(args.samples, len(examples)), replace=False)
    judge = MockSemanticJudge(encoder, threshold=args.threshold)
    scores = []
    for i in picks:
        ex = examples[int(i)]
        output = stylize(ex.content, ex.style_ref, model, encoder, steps=args.steps, seed=args.seed + int(i), cond_id=ex.cond_id)
        scores.append(semantic_score(ex.style_ref, output, judge))
    mean, unscored = aggregate_scores(scores)
    payload = {"mean": mean, "scored": len(scores) - unscored, "unscored": unscored}
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_ablate_convergence(args) -> int:
    cfg = _load_config(args)
    encoder, _ = load_encoder_checkpoint(args.encoder)
    examples = _examples_for_training(Path(args.manifest))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    result = convergence_ab(
        examples,
        encoder,
        _dit_config(cfg),
        _moe_config(cfg),
        iterations=cfg.stage2_iterations if args.iterations is None else args.iterations,
        lr=cfg.stage2_lr,
        seeds=seeds,
        base_steps=cfg.stage2_base_steps,
        base_lr=cfg.stage2_base_lr,
    )
    Path(args.out).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"medians": result.medians, "divergence": result.divergence}, sort_keys=True))
    return 0


def _error(record: dict) -> None:
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file with dotted keys")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="inline config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural triplet corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("curate", help="filter triplets through a judge")
    p.add_argument("--manifest", required=True)
    p.add_argument("--judge", default="mock", help="mock or remote:<url>")
    p.add_argument("--out")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train-encoder", help="stage-1 contrastive encoder training")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-stylizer", help="stage-2 MoE adapter training")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--traces", help="optional routing-trace output file")
    p.set_defaults(func=cmd_train_stylizer)

    p = sub.add_parser("stylize", help="render a content image in a reference style")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cond-id", type=int, default=0)
    p.add_argument("--traces")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("eval-iou", help="expert-overlap analysis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_iou)

    p = sub.add_parser("eval-retrieval", help="embedding retrieval report")
    _add_config_flags(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-semantic", help="binary style-match scoring of stylizer outputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_semantic)

    p = sub.add_parser("ablate-convergence", help="frozen vs random-encoder A/B")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_convergence)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _error({"error": "config", "detail": str(exc)})
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        _error({"error": type(exc).__name__, "detail": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
