#!/usr/bin/env python3
# Threat models and the low-frequency filter, with PPM exports to look at.

# %%
from pathlib import Path

import numpy as np

from metapatch.attacks import low_pass, radial_mask
from metapatch.data import synth_dataset, write_ppm
from metapatch.perturbation import PerturbationSpec, apply_batch, from_datapoint, random_perturbation, sample_offsets

out = Path("demo_out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# %% [markdown]
# Eight images from the synthetic shapes set (disk, square, cross, stripes).

# %%
ds = synth_dataset(2, num_classes=4, seed=0)
print(ds.class_names, ds.images.shape)
grid = np.concatenate(list(ds.images), axis=2)
write_ppm(grid, out / "shapes.ppm")

# %% [markdown]
# An 8x8 patch pasted at random offsets up to 8 px from the center.

# %%
spec = PerturbationSpec.patch((3, 32, 32), (8, 8), (8, 8))
xi = random_perturbation(spec, rng)
offsets = sample_offsets(spec, rng, len(ds))
patched = apply_batch(ds.images, xi, offsets, spec)
print("offsets:\n", offsets)
write_ppm(np.concatenate(list(patched), axis=2), out / "patched.ppm")

# %% [markdown]
# Low-pass filtering keeps frequencies within radius u of DC.
# u=0 leaves per-channel means; a large u is all-pass.

# %%
for u in (0, 1, 2, 4, 6):
    kept = int(radial_mask(8, 8, u).sum())
    smooth = low_pass(xi, u, spec)
    print(f"u={u}: {kept:2d}/64 frequency bins kept, energy {np.square(smooth).sum():.2f} vs {np.square(xi).sum():.2f}")
write_ppm(np.concatenate([low_pass(xi, u, spec) for u in (0, 1, 2, 4, 6)], axis=2), out / "low_pass.ppm")

# %% [markdown]
# Data initialization: a training image shrunk to the patch size.
# For additive perturbations the intensities are rescaled to [-eps, eps] instead.

# %%
print("data-init patch range:", from_datapoint(ds.images[0], spec).min(), from_datapoint(ds.images[0], spec).max())
add = PerturbationSpec.additive((3, 32, 32), 20 / 255)
d = from_datapoint(ds.images[0], add)
print("additive data-init range:", d.min().round(4), d.max().round(4))
print("wrote", sorted(p.name for p in out.iterdir()))
