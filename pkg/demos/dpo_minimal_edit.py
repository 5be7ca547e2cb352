"""Build minimal-edit preference pairs and watch the held-out DPO margin grow."""

from edgevlm import datasets, training
from edgevlm.config import ModelConfig
from edgevlm.model import init_weights

cfg = ModelConfig()
recs = datasets.synthetic_dpo_records(24, cfg.vision.image_size, seed=0)
records = [dict(r, image=f"scene_{i}.ppm") for i, (_, r) in enumerate(recs)]
pairs, rejected = training.build_pairs(records, tau=0.3)
for pair, (img, _) in zip(pairs, recs):
    pair.image = img  # keep the rendered image instead of reading it back from disk
print(f"admitted {len(pairs)} pairs, rejected {len(rejected)}")
p = pairs[0]
print(f"example: chosen={p.chosen!r} rejected={p.rejected!r} distance={p.edit_distance} "
      f"({p.normalized_distance:.3f} normalized)")

res = training.train_stage(training.TrainConfig(stage="dpo", steps=60, batch_size=8, eval_every=20),
                           cfg, init_weights(cfg, 0), pairs[:16], pairs[16:])
for m in res.metrics:
    if m.margin is not None:
        print(f"step {m.step:3d}  train loss {m.loss:.4f}  held-out margin {m.margin:.4f}")
