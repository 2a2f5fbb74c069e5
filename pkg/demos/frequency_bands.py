"""Split a synthetic scene into low and high frequency bands and look at the prompt.

Run: python3 demos/frequency_bands.py
"""
import numpy as np

from unicd.data import generate_dataset
from unicd.fcpg import FCPG, band_masks, radial_frequency_map
from unicd.tensor import Tensor, ops

scene = generate_dataset("bcd", 1, 32, 32, seed=2)[0]
x = Tensor(scene.post[None].astype(np.float64))

freq = radial_frequency_map(32, 32)
m_low, m_high = band_masks(freq, 0.1, 0.3)
low = ops.spectral_filter(x, m_low).data
high = ops.spectral_filter(x, m_high).data

energy = (x.data ** 2).sum()
print(f"bins kept by the low mask  : {float(m_low.data.sum()):7.1f} of {freq.size}")
print(f"bins kept by the high mask : {float(m_high.data.sum()):7.1f}")
print(f"energy share, low band     : {(low ** 2).sum() / energy:.3f}")
print(f"energy share, high band    : {(high ** 2).sum() / energy:.3f}")

# the soft masks move with the learnable thresholds; the module starts at 0.1 / 0.3
mod = FCPG(3, np.random.default_rng(0), groups=1).astype(np.float64)
lo, hi = mod.thresholds()
print(f"initial thresholds         : low {lo.item():.3f}, high {hi.item():.3f}")
prompt = mod.prompt(x).data
print(f"prompt magnitude           : {np.abs(prompt).mean():.4f}  (added with alpha {mod.alpha.item():.2f})")

mod.alpha.data[...] = 0.0
print("alpha = 0 returns the input unchanged:", mod(x).data.tobytes() == x.data.tobytes())
