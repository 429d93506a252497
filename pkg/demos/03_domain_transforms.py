"""The four simulated domains, applied to rendered digits.

Writes a preview grid to demos/out/domains.png when matplotlib is available;
always prints per-domain statistics.

Run: python demos/03_domain_transforms.py
"""

from pathlib import Path

import numpy as np

from domcond.data import (
    DOMAINS,
    MinibatchSampler,
    synthetic_digits,
    transform_batch,
)

rng = np.random.default_rng(42)
ds = synthetic_digits(512, seed=1)
print(f"dataset: {len(ds)} images, labels {sorted(set(ds.labels.tolist()))}")

print("\n== per-domain statistics on one batch ==")
imgs = ds.images[:256]
for spec in DOMAINS:
    ids = np.full(len(imgs), spec.id)
    out = transform_batch(imgs, ids, rng)
    print(f"{spec.id} {spec.kind:10s} mean={out.mean():.3f} "
          f"(clean {imgs.mean():.3f}) range=[{out.min():.2f}, {out.max():.2f}]")

print("\n== a training minibatch draws a fresh domain per example ==")
sampler = MinibatchSampler(ds, 8, np.random.default_rng(3))
batch = next(sampler.epoch())
print("class labels: ", batch.labels.tolist())
print("domain labels:", batch.domains.tolist(),
      "->", [DOMAINS[d].kind for d in batch.domains])

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("\nmatplotlib not installed; skipping the preview image")
else:
    fig, axes = plt.subplots(5, 8, figsize=(8, 5.5))
    for col in range(8):
        axes[0][col].imshow(ds.images[col, 0], cmap="gray", vmin=0, vmax=1)
        axes[0][col].set_ylabel("clean") if col == 0 else None
        for row, spec in enumerate(DOMAINS, start=1):
            shown = transform_batch(ds.images[col:col + 1], np.array([spec.id]), rng)
            axes[row][col].imshow(shown[0, 0], cmap="gray", vmin=0, vmax=1)
            if col == 0:
                axes[row][col].set_ylabel(spec.kind)
    for ax in fig.axes:
        ax.set_xticks([]), ax.set_yticks([])
    out_path = Path(__file__).parent / "out" / "domains.png"
    out_path.parent.mkdir(exist_ok=True)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    print(f"\nwrote {out_path}")
