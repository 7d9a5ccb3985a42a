"""How the distance-consistency term reacts to a pair of generators.

A frozen copy of a generator gives zero loss. Nudging one block's weights
rearranges the pairwise similarities inside the batch and the loss turns
positive, even though every individual image barely moves.
"""
import numpy as np
import torch

from fewshot_adapt.latent import sample_prior
from fewshot_adapt.losses import distance_consistency_loss, similarity_distribution
from fewshot_adapt.models import ModelConfig, build_models, clone_frozen, generate

torch.set_num_threads(1)

gen, _ = build_models(ModelConfig(image_size=32), seed=0)
source = clone_frozen(gen)
z = sample_prior(gen.latent_spec, 4, np.random.default_rng(0))

# per-sample softmax over cosine similarities to the other batch members
_, acts = generate(source, z, with_taps=True)
for layer in acts:
    p = similarity_distribution(acts, layer, 0).probs
    print(f"{layer:7s} sample 0 vs others: {np.round(p.numpy(), 4)}")

print("loss against an exact copy:", distance_consistency_loss(acts, generate(gen, z, True)[1]).item())

for scale in (1e-3, 1e-2, 1e-1):
    nudged = clone_frozen(gen)
    w = nudged.blocks[1][1].weight
    w.add_(scale * torch.randn(w.shape, generator=torch.Generator().manual_seed(1)))
    loss = distance_consistency_loss(acts, generate(nudged, z, True)[1]).item()
    print(f"block1 conv nudged by {scale:g}: loss = {loss:.3e}")
