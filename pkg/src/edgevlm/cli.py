"""Command-line entry point. Data goes to stdout or declared paths, diagnostics to stderr."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, checkpoint, costmodel, datasets, lm, training, vision
from .config import CompressionKind, ModelConfig
from .errors import (CheckpointError, ConfigError, DatasetError, DecodeError, EdgeVLMError, InputError)
from .model import init_weights

log = logging.getLogger("edgevlm")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _ratios(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("at least one ratio is required")
    return vals


def _load_config(args) -> ModelConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config must be a JSON object")
    cfg = ModelConfig.from_dict(base)
    if getattr(args, "compress", None) or getattr(args, "ratio", None):
        cfg = cfg.with_strategy(args.compress or cfg.strategy.kind, args.ratio or cfg.strategy.ratio)
    return cfg


def cmd_init(args) -> int:
    cfg = _load_config(args)
    checkpoint.save(init_weights(cfg, args.seed), cfg, args.out)
    print(json.dumps({"checkpoint": str(args.out), "config": cfg.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    weights, cfg = checkpoint.load(args.checkpoint)
    image = vision.read_ppm(args.image)
    params = lm.GenerationParams(max_new=args.max_new, temperature=args.temperature, seed=args.seed,
                                 greedy=args.greedy or args.temperature <= 0)
    res = lm.generate(weights, cfg, image, args.prompt, params)
    sys.stdout.write(res.text + "\n")
    timing = {"ttft_ms": res.ttft * 1000.0, "decode_tps": res.decode_tps}
    if args.verbose:
        timing.update({"image_tokens": res.image_tokens, "prompt_tokens": res.prompt_tokens,
                       "generated_tokens": len(res.token_ids)})
    sys.stderr.write(json.dumps(timing, sort_keys=True) + "\n")
    return EXIT_OK


def _samples(path: str, kind: str) -> list[training.Sample]:
    ds = datasets.read_jsonl_dataset(path, kind)
    images = datasets.load_images(ds)
    return [training.Sample(images[str(ds.image_path(r))], str(r["prompt"]), str(r["response"]))
            for r in ds.records]


def _pairs(path: str) -> list[training.PreferencePair]:
    ds = datasets.read_jsonl_dataset(path, "pairs")
    images = datasets.load_images(ds)
    pairs = []
    for r in ds.records:
        pair = training.PreferencePair.from_record(r)
        pair.image = images[str(ds.image_path(r))]
        pairs.append(pair)
    return pairs


def cmd_train(args) -> int:
    weights, cfg = checkpoint.load(args.checkpoint)
    stage = training.Stage(args.stage)
    tcfg = training.TrainConfig(stage=stage, learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size,
                                momentum=args.momentum, beta=args.beta, seed=args.seed,
                                eval_every=args.eval_every, clip_norm=args.clip_norm or None)
    if stage is training.Stage.DPO:
        train, val = _pairs(args.data), (_pairs(args.val) if args.val else [])
    else:
        kind = "caption" if stage is training.Stage.PRETRAIN else "sft"
        train, val = _samples(args.data, kind), (_samples(args.val, kind) if args.val else [])
    res = training.train_stage(tcfg, cfg, weights, train, val)
    checkpoint.save(res.weights, cfg, args.out)
    if args.metrics:
        training.write_metrics(args.metrics, res)
    else:
        sys.stdout.write(res.metrics_csv())
    return EXIT_OK


def cmd_dpo_pairs(args) -> int:
    ds = datasets.read_jsonl_dataset(args.input, "dpo")
    pairs, rejected = training.build_pairs(ds.records, tau=args.tau, unit=args.unit)
    datasets.write_jsonl(args.out, [p.to_record() for p in pairs])
    for rej in rejected:
        log.info("record %d rejected: %s", rej.index, rej.reason)
    summary = {"admitted": len(pairs), "rejected": len(rejected), "skipped_lines": len(ds.warnings)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    tcfg = training.TrainConfig(stage=training.Stage(args.stage), learning_rate=args.lr, steps=args.steps,
                                batch_size=args.batch_size, eval_every=args.eval_every, seed=args.seed)
    sweep = training.SweepConfig(ratios=tuple(args.ratios), kind=args.compress or cfg.strategy.kind.value,
                                 n_train=args.n_train, n_val=args.n_val, train=tcfg, seed=args.seed)
    res = training.ratio_sweep(cfg, sweep)
    out = Path(args.out)
    out.with_suffix(".csv").write_text(res.to_csv())
    out.with_suffix(".json").write_text(res.to_json() + "\n")
    sys.stdout.write(res.to_csv())
    return EXIT_OK


def cmd_bench(args) -> int:
    weights, cfg = checkpoint.load(args.checkpoint)
    if args.image:
        image = vision.read_ppm(args.image)
    else:
        image = vision.synthetic_caption_dataset(1, cfg.vision.image_size, args.seed)[0][0]
    for r in args.ratios:
        if cfg.vision.seq_len % r:
            raise ConfigError(f"ratio {r} does not divide {cfg.vision.seq_len} vision tokens")
    reports = bench.run_matrix(bench.ratio_sessions(weights, cfg, args.ratios, args.seed), image, args.prompt,
                               runs=args.runs, warmup=args.warmup, n_tokens=args.tokens, out=args.out)
    sys.stdout.write(bench.reports_table(reports) + "\n")
    return EXIT_OK if all(r.error is None for r in reports) else EXIT_RUNTIME


def cmd_cost(args) -> int:
    rep = costmodel.cost_report(args.width, args.height, args.jpt, args.battery_kj * 1000.0)
    out = rep.to_dict()
    out["tokens"] = rep.image_tokens
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(checkpoint.header(args.checkpoint), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    size = _load_config(args).vision.image_size
    if args.kind == "caption":
        path = vision.write_synthetic_dataset(args.out, args.n, size, args.seed, args.prompt)
    else:
        path = datasets.write_synthetic_dpo(args.out, args.n, size, args.seed)
    print(json.dumps({"records": str(path), "count": args.n}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgevlm", description="Toy vision-language runtime with image-token compression.")
    p.add_argument("-v", "--log-level", default="WARNING", help="stderr log level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)
    kinds = [k.value for k in CompressionKind]

    def model_flags(sp, need_config=False):
        sp.add_argument("--config", required=need_config, help="ModelConfig JSON (default: built-in toy dims)")
        sp.add_argument("--compress", choices=kinds, help="override the compression strategy")
        sp.add_argument("--ratio", type=int, help="override the compression ratio")

    sp = sub.add_parser("init", help="write a randomly initialized checkpoint")
    model_flags(sp)
    sp.add_argument("--out", required=True, help="checkpoint path to write")
    sp.add_argument("--seed", type=int, default=0, help="initialization seed (default: 0)")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("generate", help="caption/answer one image")
    sp.add_argument("--checkpoint", required=True, help="checkpoint to load")
    sp.add_argument("--image", required=True, help="binary PPM (P6) image")
    sp.add_argument("--prompt", default="", help="text prompt after the image")
    sp.add_argument("--max-new", type=int, default=32, help="max generated tokens (default: 32)")
    sp.add_argument("--greedy", action="store_true", help="argmax decoding")
    sp.add_argument("--temperature", type=float, default=1.0, help="sampling temperature (default: 1.0)")
    sp.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    sp.add_argument("--verbose", action="store_true", help="add token counts to the stderr JSON")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="run one training stage")
    sp.add_argument("--stage", choices=[s.value for s in training.Stage], required=True, help="pipeline stage")
    sp.add_argument("--checkpoint", required=True, help="input checkpoint")
    sp.add_argument("--data", required=True, help="JSONL training records (pairs file for dpo)")
    sp.add_argument("--val", help="JSONL validation records")
    sp.add_argument("--out", required=True, help="output checkpoint")
    sp.add_argument("--metrics", help="CSV metrics path (default: stdout)")
    sp.add_argument("--steps", type=int, default=500, help="optimizer steps (default: 500)")
    sp.add_argument("--lr", type=float, help="learning rate (default: 0.2 pretrain, 0.05 sft/dpo)")
    sp.add_argument("--batch-size", type=int, default=8, help="minibatch size (default: 8)")
    sp.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    sp.add_argument("--beta", type=float, default=0.1, help="DPO temperature (default: 0.1)")
    sp.add_argument("--clip-norm", type=float, default=5.0, help="global grad-norm clip, 0 disables (default: 5)")
    sp.add_argument("--eval-every", type=int, default=50, help="validation interval in steps (default: 50)")
    sp.add_argument("--seed", type=int, default=0, help="minibatch seed (default: 0)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("dpo-pairs", help="build minimal-edit preference pairs")
    sp.add_argument("--input", required=True, help="JSONL {image, prompt, original, edited}")
    sp.add_argument("--out", required=True, help="pair file to write")
    sp.add_argument("--tau", type=float, default=0.3, help="max normalized edit distance (default: 0.3)")
    sp.add_argument("--unit", choices=["token", "word"], default="token", help="edit unit (default: token)")
    sp.set_defaults(func=cmd_dpo_pairs)

    sp = sub.add_parser("sweep", help="validation-loss curves per compression ratio")
    model_flags(sp)
    sp.add_argument("--ratios", type=_ratios, default=[1, 3, 9, 81], help="comma-separated ratios")
    sp.add_argument("--stage", choices=["pretrain", "sft"], default="pretrain", help="stage to train")
    sp.add_argument("--steps", type=int, default=60, help="steps per ratio (default: 60)")
    sp.add_argument("--lr", type=float, help="learning rate (default: the stage default)")
    sp.add_argument("--batch-size", type=int, default=4, help="minibatch size (default: 4)")
    sp.add_argument("--eval-every", type=int, default=10, help="validation interval (default: 10)")
    sp.add_argument("--n-train", type=int, default=32, help="synthetic training pairs (default: 32)")
    sp.add_argument("--n-val", type=int, default=16, help="synthetic validation pairs (default: 16)")
    sp.add_argument("--seed", type=int, default=0, help="seed shared by every ratio (default: 0)")
    sp.add_argument("--out", required=True, help="output stem; writes .csv and .json")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="TTFT and decode speed across ratios")
    sp.add_argument("--checkpoint", required=True, help="checkpoint supplying encoder and LM weights")
    sp.add_argument("--ratios", type=_ratios, default=[1, 3, 9, 81], help="comma-separated ratios")
    sp.add_argument("--runs", type=int, default=5, help="measured runs per config (default: 5)")
    sp.add_argument("--warmup", type=int, default=2, help="discarded warmup runs (default: 2)")
    sp.add_argument("--tokens", type=int, default=128, help="tokens for decode speed (default: 128)")
    sp.add_argument("--image", help="PPM image (default: a synthetic scene)")
    sp.add_argument("--prompt", default="describe the image.", help="prompt text")
    sp.add_argument("--seed", type=int, default=0, help="seed for synthetic image/projectors (default: 0)")
    sp.add_argument("--out", required=True, help="report JSON path; a .csv sidecar is written next to it")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("cost", help="token and energy bill for one image")
    sp.add_argument("--width", type=int, required=True, help="image width in px")
    sp.add_argument("--height", type=int, required=True, help="image height in px")
    sp.add_argument("--jpt", type=float, default=0.7, help="joules per token (default: 0.7)")
    sp.add_argument("--battery-kj", type=float, default=50.0, help="battery capacity in kJ (default: 50)")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("inspect", help="print checkpoint header and tensor table")
    sp.add_argument("checkpoint", help="checkpoint path")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("synth", help="write a synthetic PPM + JSONL dataset")
    model_flags(sp)
    sp.add_argument("--kind", choices=["caption", "dpo"], default="caption", help="dataset kind")
    sp.add_argument("--n", type=int, default=64, help="number of records (default: 64)")
    sp.add_argument("--seed", type=int, default=0, help="scene seed (default: 0)")
    sp.add_argument("--prompt", default="", help="prompt stored with caption records")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"edgevlm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DatasetError, CheckpointError, DecodeError) as exc:
        print(f"edgevlm: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EdgeVLMError, ValueError, OSError) as exc:
        print(f"edgevlm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
