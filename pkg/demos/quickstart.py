"""Caption one synthetic scene with a random-init model and show what compression buys."""

from edgevlm import costmodel, lm, vision
from edgevlm.config import ModelConfig
from edgevlm.model import init_weights

cfg = ModelConfig()
weights = init_weights(cfg, seed=0)
image, caption = vision.synthetic_caption_dataset(1, cfg.vision.image_size, seed=0)[0]

res = lm.generate(weights, cfg, image, "describe the image.", lm.GenerationParams(max_new=16))
print(f"reference caption : {caption}")
print(f"untrained output  : {res.text!r}")
print(f"image tokens      : {res.image_tokens} (from {cfg.vision.seq_len} vision tokens)")
print(f"ttft              : {res.ttft * 1000:.1f} ms")

print("\nprefill cost of the image span per compression ratio")
for r in (1, 3, 9, 81):
    n = cfg.vision.seq_len // r
    print(f"  r={r:<3d} {n:4d} tokens  {costmodel.prefill_flops(cfg.lm, n) / 1e6:8.1f} MFLOP")

tiles, tokens = costmodel.openai_token_cost(1024, 1024)
joules, frac = costmodel.energy_estimate(tokens)
print(f"\n1024x1024 image under 512px tiling: {tiles} tiles, {tokens} tokens, {joules:.1f} J ({frac:.2%} of a phone battery)")
