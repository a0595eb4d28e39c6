"""A short pre-training run followed by ArcFace fine-tuning and gallery/probe identification.

This uses few steps so it finishes in about two minutes on one core; the
numbers are illustrative, not converged.

Run: python3 demos/03_pretrain_and_identify.py
"""
from ecgpretrain.numerics import Rng
from ecgpretrain.pipeline import FinetuneConfig, PretrainConfig, finetune_on_records, identification_report, pretrain_on_pairs
from ecgpretrain.signal import pair_array, synth_dataset

records = synth_dataset(n_patients=16, sessions_per_patient=3, seed=5)
train = [r for r in records if r.session_id == 0]
gallery = [r for r in records if r.session_id == 1]
probe = [r for r in records if r.session_id == 2]

cfg = PretrainConfig(steps=40, lr=3e-4, seed=0)
result = pretrain_on_pairs(pair_array(train), cfg, on_step=lambda m: m["step"] % 10 == 0 and print(
    f"step {m['step']:3d}  local {m['l_local']:.3f}  global {m['l_global']:.3f}  top-1 {m['ctr_top1']:.3f}"))

model = result.model
for combo in ("full12", "two"):
    print(f"before fine-tuning, {combo}: top-1", identification_report(model, gallery, probe, combo).value)

ft = finetune_on_records(train, FinetuneConfig(task="identification", lr=3e-4, steps=20), model, n_classes=6)
print("ArcFace loss", round(ft.metrics[0]["loss"], 2), "->", round(ft.metrics[-1]["loss"], 2))
for combo in ("full12", "two"):
    print(f"after fine-tuning, {combo}: top-1", identification_report(model, gallery, probe, combo).value)
