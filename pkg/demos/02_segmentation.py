"""Classical threshold versus the small encoder-decoder on synthetic blobs and a print.

Run: python3 demos/02_segmentation.py   (about half a minute)
"""
# %%
import numpy as np

from amprotocol.metrology import porosity
from amprotocol.phantom import DefectModel, ProcessParams, design_d1, simulate_print
from amprotocol.segment import (
    SegNetConfig,
    SegTrainConfig,
    blob_dataset,
    iou,
    otsu_threshold,
    segnet_init,
    segnet_predict_labels,
    segnet_train,
    threshold_volume,
)

# %% Otsu on a noisy print recovers the ground-truth mask voxel for voxel.
grid, truth = simulate_print(design_d1(2.0), ProcessParams(65, 30, 100, 21), DefectModel(), seed=1)
mask = threshold_volume(grid)
print(f"Otsu threshold {otsu_threshold(grid.values):.4f}")
print(f"porosity: truth {porosity(truth).phi:.3f} %, threshold {porosity(mask).phi:.3f} %")
print("voxel agreement", float(np.mean(mask.labels == truth.labels)))

# %% A short training run of the network on the blob set.
images, masks = blob_dataset(200, 32, seed=0)
net = segnet_init(SegNetConfig(depth=2, base_channels=8, input_size=32), seed=0)
net, hist = segnet_train(net, images, masks, SegTrainConfig(epochs=25), progress=lambda e, h: e % 5 or print(f"epoch {e:2d} loss {h.loss[-1]:.4f} acc {h.acc[-1]:.4f}"))

held, held_masks = blob_dataset(10, 32, seed=7)
print("held-out IoU at 0.8:", round(iou(segnet_predict_labels(net, held), held_masks), 3))
