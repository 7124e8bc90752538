"""Command-line entry point: data-synth | train | sample | match | eval | serve."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import PointfitError


def _add_sampler_flags(p: argparse.ArgumentParser):
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--sampler", choices=["deterministic", "ancestral"],
                   default="deterministic")
    p.add_argument("--guidance", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointfit",
                                 description="Point-steered virtual try-on testbed")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-synth", help="build the synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--bench-per-class", type=int, default=0)

    p = sub.add_parser("train", help="train the dual U-Net")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--codec-steps", type=int, default=3000)
    p.add_argument("--log", default=None, help="line-delimited training log path")

    p = sub.add_parser("sample", help="generate one try-on image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--person", required=True)
    p.add_argument("--garment", required=True)
    p.add_argument("--garment2", default=None)
    p.add_argument("--points", default=None, help="points.json with [{'g':…,'p':…}]")
    p.add_argument("--mask", default=None)
    p.add_argument("--pose", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)

    p = sub.add_parser("match", help="collect point pairs with the feature matcher")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--timesteps", default="50,150,300")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="points_matched",
                   help="filename stem written next to points_gt.json")
    p.add_argument("--report", default=None, help="write per-matcher CSV here")
    p.add_argument("--report-samples", type=int, default=30)

    p = sub.add_parser("eval", help="evaluation harness")
    esub = p.add_subparsers(dest="eval_command", required=True)

    e = esub.add_parser("landmark", help="landmark-distance benchmark")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=["no_points", "latent_noise_injection",
                                      "attention_injection"], required=True)
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--bench-seed", type=int, default=0)
    e.add_argument("--out", required=True)
    _add_sampler_flags(e)

    e = esub.add_parser("ablation", help="strategy-stack ablation report")
    e.add_argument("--ckpts", required=True,
                   help="base=…,zero_init=…,cond_drop=…,point_weight=…")
    e.add_argument("--data", required=True)
    e.add_argument("--seeds", type=int, default=3)
    e.add_argument("--bench-seed", type=int, default=0)
    e.add_argument("--out", required=True)
    _add_sampler_flags(e)

    e = esub.add_parser("relabel", help="id-relabeling stability report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--permutations", type=int, default=4)
    e.add_argument("--items", type=int, default=10)
    e.add_argument("--out", required=True)
    _add_sampler_flags(e)

    p = sub.add_parser("serve", help="run the HTTP generation service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8401)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--queue", type=int, default=16)

    return ap


def _load_points(path):
    if path is None:
        return []
    pts = json.loads(Path(path).read_text())
    if not isinstance(pts, list):
        raise PointfitError("points.json must hold a list of {'g':…, 'p':…}")
    return pts


def cmd_data_synth(args) -> int:
    from .synth import build_dataset
    manifest = build_dataset(args.n, args.seed, Path(args.out),
                             bench_per_class=args.bench_per_class)
    print(json.dumps({"digest": manifest["digest"], "counts": manifest["counts"]}))
    return 0


def cmd_train(args) -> int:
    import torch
    from .codec import LatentCodec, train_codec
    from .diffusion import NoiseSchedule
    from .synth import load_split
    from .train import (DualUNet, load_checkpoint, parse_config_file, train)

    train_cfg, model_cfg, codec_cfg = parse_config_file(args.config)
    dataset = load_split(args.data, "train")
    log_file = open(args.log, "a") if args.log else None

    def log_fn(rec):
        line = json.dumps(rec)
        print(line)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()

    out = Path(args.out)
    if args.resume and out.exists():
        bundle = load_checkpoint(out)
        model, codec = bundle.model, bundle.codec
        schedule = bundle.schedule
        model.train()
        train(model, codec, dataset, schedule, bundle.train_config, out,
              log_fn=log_fn, start_step=bundle.step,
              opt_state=bundle.optimizer_state)
        return 0
    codec = LatentCodec(codec_cfg)
    if codec_cfg.mode == "trained":
        imgs = [s.person for s in dataset[:1200]] + [s.garment for s in dataset[:600]]
        train_codec(codec, torch.as_tensor(np.stack(imgs)), steps=args.codec_steps,
                    seed=train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    model = DualUNet(model_cfg)
    schedule = NoiseSchedule.linear()
    train(model, codec, dataset, schedule, train_cfg, out, log_fn=log_fn)
    return 0


def cmd_sample(args) -> int:
    from .diffusion import SamplerConfig
    from .imgio import load_png, save_png
    from .service import GenerationRequest, generate
    from .train import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    garments = [load_png(args.garment)]
    if args.garment2:
        garments.append(load_png(args.garment2))
    pose = None
    if args.pose:
        pose = np.asarray(json.loads(Path(args.pose).read_text()), dtype=np.float64)
    req = GenerationRequest(
        person=load_png(args.person), garments=garments,
        mask=load_png(args.mask) if args.mask else None,
        pose=pose, points=_load_points(args.points),
        sampler=SamplerConfig(kind=args.sampler, steps=args.steps,
                              guidance_scale=args.guidance),
        seed=args.seed)
    res = generate(req, bundle)
    save_png(args.out, res.image)
    print(json.dumps({"out": args.out, "seed": res.seed,
                      "timing_ms": round(res.timing_ms, 1)}))
    return 0


def cmd_match(args) -> int:
    from .matcher import MatcherConfig, collect_pairs, run_matcher_report
    from .synth import load_split
    from .train import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    cfg = MatcherConfig(timesteps=tuple(int(t) for t in args.timesteps.split(",")),
                        seed=args.seed)
    samples = load_split(args.data, args.split)
    for s in samples:
        pairs = collect_pairs(s, bundle, cfg, args.n)
        out = Path(args.data) / args.split / s.sample_id / f"{args.out}.json"
        out.write_text(json.dumps(pairs))
    if args.report:
        report = run_matcher_report(samples[:args.report_samples], bundle, cfg)
        lines = ["matcher,class,mean_distance"]
        for m, row in report["rows"].items():
            for cls, v in row["per_class"].items():
                lines.append(f"{m},{cls},{v:.4f}")
            lines.append(f"{m},all,{row['mean']:.4f}")
        Path(args.report).write_text("\n".join(lines) + "\n")
        print(json.dumps({r: report["rows"][r]["mean"] for r in report["rows"]}))
    return 0


def _bench_sampler(args):
    from .diffusion import SamplerConfig
    return SamplerConfig(kind=args.sampler, steps=args.steps,
                         guidance_scale=args.guidance)


def cmd_eval(args) -> int:
    from .evalbench import (id_relabel_stability, run_landmark_bench,
                            run_strategy_ablation, save_report)
    from .synth import load_split
    from .train import load_checkpoint

    items = load_split(args.data, "bench")
    if args.eval_command == "landmark":
        bundle = load_checkpoint(args.ckpt)
        rep = run_landmark_bench(bundle, items, args.mode, seeds=args.seeds,
                                 sampler=_bench_sampler(args), bench_seed=args.bench_seed)
        save_report(rep, args.out)
        print(json.dumps({"mode": rep["mode"], "per_class": rep["per_class"]}))
    elif args.eval_command == "ablation":
        bundles = {}
        for part in args.ckpts.split(","):
            name, _, path = part.partition("=")
            bundles[name.strip()] = load_checkpoint(path.strip())
        rep = run_strategy_ablation(bundles, items, seeds=args.seeds,
                                    sampler=_bench_sampler(args),
                                    bench_seed=args.bench_seed)
        save_report(rep, args.out)
        print(json.dumps([{r["row"]: r["per_class"]} for r in rep["rows"]]))
    else:
        bundle = load_checkpoint(args.ckpt)
        rep = id_relabel_stability(bundle, items[:args.items],
                                   permutations=args.permutations,
                                   sampler=_bench_sampler(args))
        save_report(rep, args.out)
        print(json.dumps(rep))
    return 0


def cmd_serve(args) -> int:
    from .service import serve
    from .train import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    host = os.environ.get("POINTFIT_BIND", args.host)
    serve(bundle, host=host, port=args.port, workers=args.workers,
          queue_limit=args.queue)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"data-synth": cmd_data_synth, "train": cmd_train,
                "sample": cmd_sample, "match": cmd_match,
                "eval": cmd_eval, "serve": cmd_serve}
    try:
        return handlers[args.command](args)
    except PointfitError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[not_found]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
