#!/usr/bin/env python3
# Standard training vs meta adversarial training on the shapes set, then a
# handful of universal patch attacks against both.
#
# Defaults are cut down so this runs in a few minutes; set DEMO_FULL=1 for the
# desk protocol (20 epochs, 12 attack configs x 500 steps, ~9 minutes per seed).

# %%
import os
import time

import numpy as np

from metapatch.attacks import AttackConfig
from metapatch.data import synth_dataset
from metapatch.evaluation import desk_grid, grid_eval
from metapatch.model import Classifier
from metapatch.perturbation import PerturbationSpec
from metapatch.training import TrainConfig, train

FULL = os.environ.get("DEMO_FULL") == "1"
EPOCHS = 20 if FULL else 8
SEED = 0

tr, ev = synth_dataset(125, num_classes=4, seed=SEED).split(SEED)
spec = PerturbationSpec.patch((3, 32, 32), (8, 8), (8, 8))
print(len(tr), "train /", len(ev), "eval")

if FULL:
    grid = desk_grid((8, 8))
else:
    grid = [AttackConfig(init=i, steps=100, step_size=0.1, momentum=0.9, cutoff=c)
            for i, c in (("random", None), ("data", None), ("random", 4.0))]

# %% [markdown]
# MAT keeps P=64 meta-patches, each with its own target class and step size.
# Every batch: worst-of-5 selection, 5 targeted I-FGSM steps, one SGD step,
# and a REPTILE move (sigma=0.25) of each used meta-patch toward its adapted copy.

# %%
models = {}
for method in ("standard", "MAT"):
    t = time.perf_counter()
    params, meta, hist = train(tr, TrainConfig.for_method(method, epochs=EPOCHS, lr=0.1), spec, SEED, eval_data=ev)
    models[method] = Classifier(params)
    print(f"{method:8s} clean {hist[-1]['clean_accuracy']:.2f}  passes/sample/epoch "
          f"{hist[-1]['n_fp'] / len(tr) / EPOCHS:.1f} fwd  {time.perf_counter() - t:.0f}s")
    if meta is not None:
        print("  meta-set targets:", np.bincount(meta.targets), "step sizes in",
              meta.step_sizes.min().round(5), "..", meta.step_sizes.max().round(3))

# %% [markdown]
# Attack both with S-PGD: each step sees a fresh batch and fresh placements.

# %%
for method, model in models.items():
    report, _ = grid_eval(model, tr, ev, spec, grid, seed=SEED)
    fams = "  ".join(f"{k} {v:.2f}" for k, v in report.family_min.items())
    print(f"{method:8s} clean {report.clean_accuracy:.2f}  {fams}  Min {report.overall_min:.2f}")
