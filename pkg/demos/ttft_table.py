"""TTFT and decoding speed for ratios 1/3/9/81 with identical encoder and LM weights."""

from edgevlm import bench, vision
from edgevlm.config import ModelConfig
from edgevlm.model import init_weights

cfg = ModelConfig()
weights = init_weights(cfg, 0)
image = vision.synthetic_caption_dataset(1, cfg.vision.image_size, 0)[0][0]
reports = bench.run_matrix(bench.ratio_sessions(weights, cfg, [1, 3, 9, 81]), image, runs=5, warmup=1,
                           n_tokens=32)
print(bench.reports_table(reports))
med = {r.ratio: r.ttft_ms["median"] for r in reports}
print(f"\nTTFT speedup r=1 vs r=9: {med[1] / med[9]:.2f}x")
print(f"host: {reports[0].host}")
