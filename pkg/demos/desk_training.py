"""Train the two-branch model on a synthetic corpus and score it against hidden ground truth.

The desk preset trains on 64x64 images with narrow networks so a full run
fits in about 20 minutes on one CPU core. Pass a smaller epoch count for a
quick look (the numbers will be worse).

    python demos/desk_training.py [epochs]
"""
import sys
import time

import numpy as np
import torch

from tcgan.data import SynthSpec, UnpairedDataset, synthesize_corpus
from tcgan.inference import remove_shadow
from tcgan.metrics import extract_features, fid, masked_rmse, rmse_n_i
from tcgan.tensors import from_uint8
from tcgan.trainer import TrainConfig, TrainState, train, train_msm

torch.backends.mkldnn.enabled = False

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
cfg = TrainConfig.desk(epochs_total=epochs, epochs_constant=max(1, epochs // 2),
                       lambda2_warmup_epochs=min(5, epochs - 1))

corpus = synthesize_corpus(SynthSpec(seed=0))
test = synthesize_corpus(SynthSpec(n_shadow=100, n_nonshadow=100, seed=1))
ds = UnpairedDataset.from_tensors(corpus.shadow_tensors(), corpus.nonshadow_tensors())

# shadow images carry hidden ground truth; the model never sees it
x = torch.stack([from_uint8(t.shadow) for t in test.triplets])
state = TrainState(cfg)


def progress(state, mean):
    with torch.no_grad():
        r1, r2 = state.gens.g1(x[:20]), state.gens.g2(x[:20])
    print(f"epoch {state.epoch:3d}  total {mean.total:.3f}  tc(test) {(r1 - r2).abs().mean():.4f}", flush=True)


start = time.time()
train(cfg, ds, state=state, on_epoch=progress)
print(f"trained {epochs} epochs in {(time.time() - start) / 60:.1f} min")

# the selection classifier picks whichever branch looks more shadow-free
msm = train_msm(cfg, corpus.shadow_tensors(), corpus.nonshadow_tensors())
print(f"selection classifier held-out accuracy: {msm.holdout_accuracy:.3f}")
state.gens.eval()
results = [remove_shadow(state.gens, msm.model, xi) for xi in x]

s_out, s_in, ni = [], [], []
for t, xi, res in zip(test.triplets, x, results):
    gt, m = from_uint8(t.gt), torch.from_numpy(t.mask)[None]
    s_out.append(masked_rmse(res.selected, gt, m, "S", "rgb"))
    s_in.append(masked_rmse(xi, gt, m, "S", "rgb"))
    ni.append(rmse_n_i(res.selected, xi, m, "rgb"))
print(f"shadow-region RMSE: input {np.mean(s_in):.2f} -> output {np.mean(s_out):.2f}")
print(f"change outside the shadow (N-I RMSE): {np.mean(ni):.2f}")

ref = extract_features(test.nonshadow_tensors())
print(f"FID to shadow-free set: input {fid(extract_features(list(x)), ref):.3f}"
      f" -> output {fid(extract_features([r.selected for r in results]), ref):.3f}")
print(f"branch 1 chosen for {sum(r.selected_branch == 1 for r in results)} of {len(results)} images")
