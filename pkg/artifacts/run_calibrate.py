"""Calibration probe: short full-config training run + small bench slice to
measure the controllability signal before committing to the full budget."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from pointfit.codec import CodecConfig, LatentCodec
from pointfit.diffusion import NoiseSchedule, SamplerConfig
from pointfit.evalbench import improvement, run_landmark_bench
from pointfit.synth import load_split
from pointfit.train import DualUNet, load_checkpoint, parse_config_file, train

root = Path(__file__).parent
STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 1200
BENCH_ITEMS = int(sys.argv[2]) if len(sys.argv) > 2 else 30
DDIM = int(sys.argv[3]) if len(sys.argv) > 3 else 20

codec = LatentCodec(CodecConfig())
codec.load_state_dict(torch.load(root / "codec_probe.pt", map_location="cpu"))
codec.mark_ready()
codec.eval()

train_cfg, model_cfg, _ = parse_config_file(root.parent / "configs" / "desk.cfg")
from dataclasses import replace
train_cfg = replace(train_cfg, total_steps=STEPS, save_every=0)
dataset = load_split(root / "data", "train")
torch.manual_seed(train_cfg.seed)
model = DualUNet(model_cfg)
schedule = NoiseSchedule.linear()
t0 = time.time()
train(model, codec, dataset, schedule, train_cfg, root / "calib.ckpt",
      log_fn=lambda r: print(r, flush=True))
print(f"trained {STEPS} steps in {time.time()-t0:.0f}s", flush=True)

bundle = load_checkpoint(root / "calib.ckpt")
bench = load_split(root / "data", "bench")[:BENCH_ITEMS]
sampler = SamplerConfig(steps=DDIM)
for mode in ("no_points", "attention_injection"):
    t0 = time.time()
    rep = run_landmark_bench(bundle, bench, mode, seeds=1, sampler=sampler)
    print(mode, {k: round(v, 2) for k, v in rep["per_class"].items()},
          "overall", round(rep["overall"], 2), f"({time.time()-t0:.0f}s)", flush=True)
    if mode == "no_points":
        base = rep
    else:
        imp = improvement(base, rep)
        print("improvement per class:", {k: round(v, 3) for k, v in imp.items()}, flush=True)
