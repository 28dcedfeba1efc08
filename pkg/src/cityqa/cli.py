"""Batch command-line entry points: gen, train, eval, infer, selftest.

Configuration precedence is flags > config file > built-in defaults, with a
single --seed governing all randomness. Every command echoes its effective
configuration into its output artifacts. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import report, selftest, svmgen
from .decoder import DecoderInput, tokenize
from .evalkit import (
    JudgeConfig,
    JudgeConfigError,
    Triplet,
    aggregate,
    exact_judge,
    remote_judge,
)
from .imf import EmptyBundleError, ModalityBundle, fuse
from .numerics import NumericError
from .svmgen import RelationConfig, SceneFormatError
from .training import (
    CONDITIONS,
    CheckpointError,
    Dataset,
    SyntheticTaskSpec,
    TrainConfig,
    decode_answer,
    featurize_pairs,
    load_checkpoint,
    make_synthetic_dataset,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

CONFIG_SECTIONS = ("seed", "train", "synthetic", "relations", "judge", "paraphrase")


class UsageError(ValueError):
    """Bad flags or configuration; maps to exit code 2."""


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    for key in cfg:
        if key not in CONFIG_SECTIONS:
            raise UsageError(
                f"unknown config section {key!r}; allowed: {', '.join(CONFIG_SECTIONS)}"
            )
    return cfg


def _train_config(file_cfg: dict, args) -> TrainConfig:
    merged = dict(file_cfg.get("train", {}))
    if "seed" in file_cfg and "seed" not in merged:
        merged["seed"] = file_cfg["seed"]
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        merged["epochs"] = args.epochs
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def _synthetic_spec(file_cfg: dict) -> SyntheticTaskSpec:
    try:
        return SyntheticTaskSpec.from_dict(file_cfg.get("synthetic", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic task config: {exc}") from exc


def _relation_config(file_cfg: dict) -> RelationConfig:
    section = dict(file_cfg.get("relations", {}))
    cfg = RelationConfig()
    if "near_thresholds" in section:
        thresholds = dict(cfg.near_thresholds)
        for tier, value in section.pop("near_thresholds").items():
            if tier not in thresholds:
                raise UsageError(f"unknown tier {tier!r} in relations.near_thresholds")
            thresholds[tier] = float(value)
        cfg.near_thresholds = thresholds
    for key in ("far_factor", "dead_zone_deg"):
        if key in section:
            setattr(cfg, key, float(section.pop(key)))
    if section:
        raise UsageError(f"unknown relations config fields: {', '.join(section)}")
    return cfg


def _judge_config(file_cfg: dict) -> JudgeConfig:
    section = file_cfg.get("judge", {})
    known = {f for f in JudgeConfig.__dataclass_fields__}
    for key in section:
        if key not in known:
            raise UsageError(f"unknown judge config field {key!r}")
    return JudgeConfig(**section)


def _effective_config(command: str, seed, extra: dict) -> dict:
    return {"command": command, "seed": seed, **extra}


# -- gen -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    relations = _relation_config(file_cfg)
    scenes = svmgen.load_scenes(args.scenes)
    client = None
    if args.paraphrase:
        section = file_cfg.get("paraphrase", {})
        if not section.get("endpoint"):
            raise UsageError(
                "--paraphrase needs paraphrase.endpoint in the config file"
            )
        client = svmgen.RemoteLLMClient(**section)
    pairs = svmgen.generate_corpus(scenes, relations, client)
    svmgen.emit_corpus(pairs, args.out)
    summary = svmgen.corpus_summary(pairs)
    summary["config"] = _effective_config("gen", seed, {
        "scenes": str(args.scenes),
        "out": str(args.out),
        "paraphrase": bool(args.paraphrase),
        "relations": {
            "near_thresholds": relations.near_thresholds,
            "far_factor": relations.far_factor,
            "dead_zone_deg": relations.dead_zone_deg,
        },
    })
    out = Path(args.out)
    summary_path = out.with_suffix(out.suffix + ".summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    report.plot_corpus_split(summary, out.with_suffix(out.suffix + ".split.png"))
    print(f"wrote {summary['pairs']} pairs to {args.out}")
    print("by qtype:   ", json.dumps(summary["by_qtype"]))
    print("by modality:", json.dumps(summary["by_modality"]))
    return 0


# -- train -----------------------------------------------------------------------


def _load_dataset(data: str, config: TrainConfig, file_cfg: dict,
                  for_eval: bool = False) -> Dataset:
    """Synthetic splits from the config seed, or a featurized corpus file.

    Training on a corpus holds out the final 20% of records; evaluation
    scores every record (with both modalities synthesized so each condition
    can be exercised).
    """
    if data == "synthetic":
        spec = _synthetic_spec(file_cfg)
        return make_synthetic_dataset(spec, seed=config.seed)
    pairs = svmgen.load_corpus(data)
    if not pairs:
        raise ValueError(f"no records in {data}")
    examples = featurize_pairs(pairs, config, respect_tags=not for_eval)
    if for_eval:
        return Dataset(train=[], test=examples)
    split = max(1, int(round(len(examples) * 0.8)))
    return Dataset(train=examples[:split], test=examples[split:] or examples[:split])


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _train_config(file_cfg, args)
    dataset = _load_dataset(args.data, config, file_cfg)
    t0 = time.time()
    ckpt, trace = train(config, dataset)
    save_checkpoint(ckpt, args.out)
    out = Path(args.out)
    trace_path = out.with_suffix(out.suffix + ".trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("# config: " + json.dumps(asdict(config)) + "\n")
        fh.write("epoch,loss,ce,kl\n")
        for row in trace:
            fh.write(f"{row['epoch']},{row['loss']!r},{row['ce']!r},{row['kl']!r}\n")
    report.plot_loss_trace(trace, out.with_suffix(out.suffix + ".loss.png"))
    last = trace[-1]
    print(f"trained {config.epochs} epochs on {len(dataset.train)} items "
          f"in {time.time() - t0:.1f}s")
    print(f"final loss {last['loss']:.6f} (answer nll {last['ce']:.6f}, "
          f"kl {last['kl']:.6f})")
    print(f"checkpoint: {args.out}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    judge_cfg = _judge_config(file_cfg)
    if args.judge == "remote":
        judge_cfg.validate()  # fail before any decoding
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    dataset = _load_dataset(args.data, ckpt.config, file_cfg, for_eval=True)
    items = dataset.test
    if not items:
        raise ValueError(f"no items to evaluate in {args.data}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else ckpt.config.seed
    reports = {}
    for condition in CONDITIONS:
        triplets = [
            Triplet(
                question=ex.question,
                ground_truth=ex.answer,
                model_output=decode_answer(model, ex, condition),
                qtype=ex.qtype,
            )
            for ex in items
        ]
        if args.judge == "remote":
            verdicts = remote_judge(triplets, judge_cfg)
        else:
            verdicts = [exact_judge(t) for t in triplets]
        rep = aggregate(triplets, verdicts, judge=args.judge,
                        corpus_id=f"{args.data}:{condition}")
        rep.config_echo = _effective_config("eval", seed, {
            "ckpt": str(args.ckpt),
            "data": str(args.data),
            "judge": args.judge,
            "condition": condition,
        })
        reports[condition] = rep
        stem = out_dir / f"report_{condition}"
        with open(f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(rep.to_dict(), fh, indent=2)
        with open(f"{stem}.txt", "w", encoding="utf-8") as fh:
            fh.write(rep.format_table() + "\n")
        with open(f"{stem}.csv", "w", encoding="utf-8") as fh:
            fh.write("qtype,judged,correct,accuracy\n")
            for qtype, s in sorted(rep.per_qtype.items()):
                fh.write(f"{qtype},{s.count},{s.correct},{s.accuracy!r}\n")
            fh.write(f"overall,{rep.total},{rep.correct},{rep.overall_accuracy!r}\n")
        print(f"[{condition}] overall accuracy "
              f"{rep.overall_accuracy:.4f} ({rep.total} judged, "
              f"{rep.unjudged} unjudged) -> {stem}.json")
    report.plot_accuracy(reports, out_dir / "accuracy.png")
    return 0


# -- infer -----------------------------------------------------------------------


def _load_feature_file(path) -> np.ndarray:
    values = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    values.append(float(line))
                except ValueError as exc:
                    raise UsageError(
                        f"{path} line {lineno}: expected one number, got {line!r}"
                    ) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"feature file not found: {path}") from exc
    if not values:
        raise UsageError(f"feature file {path} holds no values")
    return np.array(values, dtype=np.float64)


def cmd_infer(args) -> int:
    if not args.image_features and not args.point_features:
        raise UsageError("provide at least one of --image-features / --point-features")
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    bundle = ModalityBundle(
        image_features=(_load_feature_file(args.image_features)
                        if args.image_features else None),
        point_features=(_load_feature_file(args.point_features)
                        if args.point_features else None),
    )
    fused = fuse(bundle, model.imf, mode="infer")
    y, _ = model.projector.forward(fused.z.reshape(1, -1))
    h_v = y.reshape(model.config.vision_token_count, model.config.model_dim)
    inp = DecoderInput(h_v=h_v, question_ids=tokenize(args.question, model.vocab))
    answer = model.decoder.greedy_decode(inp)
    print(json.dumps(_effective_config("infer", ckpt.config.seed, {
        "ckpt": str(args.ckpt), "question": args.question,
    })), file=sys.stderr)
    print(answer)
    return 0


# -- selftest ----------------------------------------------------------------------


def cmd_selftest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    print(f"selftest (seed {seed})")
    t0 = time.time()
    results = selftest.run_selftest(seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"  {'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} suites passed "
          f"in {time.time() - t0:.1f}s")
    return 1 if failed else 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cityqa",
        description="Incomplete multimodal fusion QA: data factory, trainer, "
                    "evaluator, and self checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a QA corpus from scene annotations")
    p.add_argument("--scenes", required=True, help="scene annotation JSONL")
    p.add_argument("--out", required=True, help="corpus JSONL to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--paraphrase", action="store_true",
                   help="rewrite question surfaces via the remote client")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a corpus or the synthetic task")
    p.add_argument("--data", required=True,
                   help="corpus JSONL path, or 'synthetic'")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under each modality condition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help="corpus JSONL path, or 'synthetic'")
    p.add_argument("--judge", choices=("exact", "remote"), default="exact")
    p.add_argument("--out", default="eval_report", help="report directory")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="answer one question from feature files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--image-features", default=None,
                   help="text file, one value per line")
    p.add_argument("--point-features", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("selftest", help="run the built-in verification suites")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, JudgeConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SceneFormatError, CheckpointError, NumericError, EmptyBundleError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
