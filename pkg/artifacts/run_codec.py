import time
import numpy as np
import torch
from pathlib import Path
from pointfit.synth import load_split
from pointfit.codec import LatentCodec, CodecConfig, train_codec
from pointfit.evalbench import locate_fiducials, bench_targets
from pointfit.train import degrade_mask_to_box

root = Path(__file__).parent
ds = load_split(root / "data", "train")
val = load_split(root / "data", "val")
imgs = torch.as_tensor(np.stack([s.person for s in ds] + [s.garment for s in ds[:900]]))
print("pool", imgs.shape, flush=True)
codec = LatentCodec(CodecConfig())
t0 = time.time()
losses = train_codec(codec, imgs, steps=1500, batch_size=24, lr=2e-3, seed=0, log_every=250)
print("codec trained in", round(time.time() - t0, 1), "s final", round(losses[-1], 5), flush=True)
torch.save(codec.state_dict(), root / "codec_probe.pt")

with torch.no_grad():
    pv = torch.as_tensor(np.stack([s.person for s in val]))
    rec = codec.decode(codec.encode(pv))
    mse = ((rec - pv) ** 2).mean(dim=(1, 2, 3))
    psnr = 10 * torch.log10(1.0 / mse)
    print("val person PSNR mean", round(float(psnr.mean()), 2), "min", round(float(psnr.min()), 2))
    print("fraction |err|<=0.1:", round(float((rec - pv).abs().le(0.1).float().mean()), 4))
errs, misses = [], 0
for s in val[:60]:
    with torch.no_grad():
        dec = codec.decode(codec.encode(torch.as_tensor(s.person)[None]))[0].numpy()
    markers = {n: c for n, c, _ in s.markers}
    loc = locate_fiducials(dec, markers, degrade_mask_to_box(s.mask), threshold=0.3)
    t = bench_targets(s)
    for n in t:
        if loc[n]["pos"] is None:
            misses += 1
        else:
            errs.append(np.hypot(loc[n]["pos"][0] - t[n][0], loc[n]["pos"][1] - t[n][1]))
print("decoded-marker err mean", round(float(np.mean(errs)), 2),
      "p95", round(float(np.percentile(errs, 95)), 2), "misses", misses, "of", len(errs) + misses)
