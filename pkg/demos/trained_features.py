"""Where does a trained model's stage-4 feature energy sit relative to the change mask?

Trains briefly, then exports stage-wise feature magnitudes on larger held-out
scenes (the model is fully convolutional) and writes them as PGM images.
Run: python3 demos/trained_features.py [out_dir]
"""
import sys

import numpy as np

from unicd import ChangeModel, ModelConfig
from unicd.analysis import export_stage, feature_magnitude, pair_layout_mask, response_ratio, stage_features
from unicd.data import generate_dataset
from unicd.train import TrainConfig, train

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo_features"
model = ChangeModel(ModelConfig(task="bcd"))
train(model, generate_dataset("bcd", 16, 32, 32, seed=0), TrainConfig(task="bcd", max_iters=500, stage_split=1.0))

scenes = generate_dataset("bcd", 8, 128, 128, seed=7)
ratios = np.zeros((len(scenes), 4))
for i, s in enumerate(scenes):
    for k, level in enumerate(stage_features(model, s)):
        mag = feature_magnitude(level)
        ratios[i, k] = response_ratio(mag, pair_layout_mask(s.labels["change"], mag.shape, "horizontal"))
        if i == 0:
            export_stage(level, out, k + 1)
print("inside/outside magnitude ratio per stage (mean over 8 scenes):", np.round(np.nanmean(ratios, 0), 3))
print(f"feature maps of the first scene written to {out}/")
