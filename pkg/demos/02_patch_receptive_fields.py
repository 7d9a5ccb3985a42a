"""Which discriminator layers act as the patch head, and how large their patches are.

The patch band is quoted for 256-pixel inputs and scales with resolution,
so a 32-pixel model uses much shallower layers than the 256-pixel one.
"""
import torch

from fewshot_adapt.models import (ModelConfig, build_models, default_patch_layers, receptive_fields,
                                  reference_256_config, trunk_layout)

for cfg in (ModelConfig(image_size=32), ModelConfig(image_size=64), reference_256_config()):
    rfs = receptive_fields(trunk_layout(cfg))
    chosen = default_patch_layers(cfg)
    lo, hi = 22 * cfg.image_size / 256, 61 * cfg.image_size / 256
    print(f"{cfg.image_size}px  band {lo:.1f}..{hi:.1f}  patch layers {chosen}")
    for name, (extent, jump, start) in rfs.items():
        mark = "*" if name in chosen else " "
        print(f"   {mark} {name:3s} extent {extent:3d}  stride {jump:3d}  first pixel {start}")

# the patch maps come out of the same trunk pass as the image logit
_, disc = build_models(ModelConfig(image_size=32))
img_logit, maps = disc(torch.zeros(2, 3, 32, 32))
print("image logits", tuple(img_logit.shape), "patch maps", [tuple(m.shape) for m in maps],
      "trunk passes", disc.trunk_calls)
