"""Synthetic 12-lead records: what the generator produces and how it is cut up.

Run: python3 demos/01_synthetic_ecg.py
"""
import numpy as np

from ecgpretrain.signal import LEAD_NAMES, LeadCombo, crop_windows, pair_array, reduce_leads, synth_dataset

records = synth_dataset(n_patients=3, sessions_per_patient=2, record_seconds=20.0, seed=0)
for r in records:
    print(r.record_id, "labels", r.labels, "shape", r.leads.shape)

# Leads III, aVR, aVL and aVF are computed from I and II, so they match exactly.
r = records[0]
lead = dict(zip(LEAD_NAMES, r.leads))
print("max |III - (II - I)|:", np.abs(lead["III"] - (lead["II"] - lead["I"])).max())

# Each 20 s record gives two 10 s windows; each window is a pair of adjacent 5 s segments.
print("windows:", crop_windows(r).shape)
pairs = pair_array(records)
print("pairs:", pairs.shape)  # (n_pairs, 2, 12, 2500)

# Reduced lead sets keep the 12-row layout and zero the missing leads.
two = reduce_leads(pairs[0, 0], LeadCombo.TWO)
print("non-zero leads at Two:", [name for name, row in zip(LEAD_NAMES, two) if row.any()])

# Same patient, different session: similar morphology, different noise and rate.
a, b = records[0].leads[1, :2500], records[1].leads[1, :2500]
c = records[2].leads[1, :2500]
corr = lambda x, y: float(np.corrcoef(np.abs(np.fft.rfft(x)), np.abs(np.fft.rfft(y)))[0, 1])
print(f"lead II spectrum correlation, same patient {corr(a, b):.3f}, other patient {corr(a, c):.3f}")
