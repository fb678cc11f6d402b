# %% [markdown]
# Synthetic flakes
# ----------------
# Each material has a substrate reflectance and one contrast per thickness class.
# A flake is a random convex polygon painted with that contrast, with a soft
# illumination gradient on top.

# %%
import numpy as np

from cliff.synth import CLASS_NAMES, default_benchmark, default_profiles, stack_images, labels_of

profiles = default_profiles()
for p in profiles:
    print(p.name, "substrate", p.base_reflectance, "Thick contrast", p.contrast_per_class[2])

# %%
tasks = default_benchmark(0, n_train=30, n_val=9)   # small copy of the default benchmark
profile, split = tasks[1]
x, y = stack_images(split.train), labels_of(split.train)
x.shape, np.bincount(y)   # [30, 3, 32, 32], balanced classes

# %%
# mean colour inside the image, per class: the three classes separate by hue
for k, name in enumerate(CLASS_NAMES):
    print(name, x[y == k].mean(axis=(0, 2, 3)).round(3))

# %%
# ascii view of one Thick flake, green channel
img = x[np.flatnonzero(y == 2)[0], 1]
for row in img[::2]:
    print("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row[::1]))
