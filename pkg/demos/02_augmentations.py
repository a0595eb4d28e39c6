"""The five perturbations used during pre-training, checked by their spectra.

Run: python3 demos/02_augmentations.py
"""
import numpy as np

from ecgpretrain.augment import RlmConfig, baseline_shift, baseline_wander, emg_noise, powerline_noise, random_lead_mask
from ecgpretrain.numerics import Rng
from ecgpretrain.signal import synth_dataset

seg = synth_dataset(1, 1, seed=1)[0].leads[:, :2500]
freqs = np.fft.rfftfreq(2500, 1 / 500)

# random lead masking zeroes whole leads
masked = random_lead_mask(seg, RlmConfig(0.5), Rng(0))
print("leads zeroed by RLM:", int((~masked.any(axis=1)).sum()), "of 12")

# powerline noise is a single 50 Hz tone per lead
delta = powerline_noise(seg, Rng(0)) - seg
power = np.abs(np.fft.rfft(delta, axis=1)) ** 2
print("share of powerline energy at 50 Hz:", round(float(power[:, freqs == 50].sum() / power.sum()), 6))

# EMG noise is white
delta = emg_noise(seg, Rng(0), amplitude=0.3) - seg
print("EMG std per lead:", np.round(delta.std(axis=1)[:4], 3), "...")

# baseline wander lives below 1 Hz (windowed to avoid leakage from the 5 s cut)
delta = baseline_wander(seg, Rng(0)) - seg
power = np.abs(np.fft.rfft(delta * np.hanning(2500), axis=1)) ** 2
print("wander energy above 1 Hz:", f"{power[:, freqs > 1].sum() / power.sum():.2e}")

# baseline shift adds one plateau per lead
delta = baseline_shift(seg, Rng(0)) - seg
print("shifted samples in lead I:", int((delta[0] != 0).sum()))
