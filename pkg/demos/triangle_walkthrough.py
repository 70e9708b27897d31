#!/usr/bin/env python3
# Short walk through the triangle benchmark: plain CFM versus the GMM-conditioned
# model on a reduced budget.  Numbers are rougher than the acceptance runs.
import time

import numpy as np

from latentcfm import datasets as ds
from latentcfm.metrics import mode_coverage
from latentcfm.pipelines import TrainConfig, evaluate, sample, train
from latentcfm.solvers import SolverConfig

STEPS = 3000

tri = ds.TriangleConfig.preset(2, seed=0)
train_x, test_x = ds.split_half(ds.sample_triangle(tri, 20000), 0)
print("train", train_x.shape, "test", test_x.shape)
print("mode weights:", np.round(tri.mode_weights(), 3))

for method in ("icfm", "latent-cfm-gmm"):
    t0 = time.time()
    cfg = TrainConfig(method=method, steps=STEPS, seed=0)
    bundle, record = train(cfg, train_x)
    score = evaluate(bundle, test_x, 2000, seed=1)
    gen = sample(bundle, 5000, SolverConfig("rk4", steps=50), seed=2)
    cov = mode_coverage(gen, tri)
    print(f"{method:16s} S={score['sinkhorn']:.5f}  missing modes={len(cov['missing'])}  "
          f"smallest mode={cov['fractions'].min():.4f}  ({time.time() - t0:.0f}s)")
    print("  loss over the last 300 steps:", [round(v, 4) for _, v in record.losses[-3:]])
