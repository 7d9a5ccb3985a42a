"""Intra-cluster diversity, density/coverage and the Frechet distance on toy data."""
import numpy as np

from fewshot_adapt.metrics import (FeatureExtractor, density_coverage, feature_statistics, frechet_distance,
                                   intra_cluster_diversity)

rng = np.random.default_rng(0)
train = rng.uniform(-1, 1, (10, 3, 32, 32))

# a generator that memorises its 10 training images scores exactly zero
memorised = np.repeat(train, 100, axis=0)
print("memorised:", intra_cluster_diversity(memorised, train).score)

# jittered copies keep the clusters but add spread inside each one
for noise in (0.05, 0.2, 0.5):
    jittered = np.clip(memorised + noise * rng.standard_normal(memorised.shape), -1, 1)
    res = intra_cluster_diversity(jittered, train)
    print(f"jitter {noise}: score {res.score:.4f}, excluded clusters {res.assignment.excluded_clusters}")

# collapse onto two training images: most clusters become empty and drop out
collapsed = np.repeat(train[:2], 500, axis=0) + 0.2 * rng.standard_normal((1000, 3, 32, 32))
res = intra_cluster_diversity(collapsed, train)
print(f"collapsed: score {res.score:.4f}, cluster sizes {res.assignment.sizes.tolist()}")

fx = FeatureExtractor()
real = fx(rng.uniform(-1, 1, (200, 3, 32, 32)))
print("density/coverage vs itself:", density_coverage(real, real))
print("density/coverage vs collapse:", density_coverage(real, fx(collapsed[:200])))
print("frechet:", frechet_distance(*feature_statistics(real), *feature_statistics(fx(collapsed[:200]))))
