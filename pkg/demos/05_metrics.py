# # Perceptual metrics
#
# The feature extractor is a small frozen VGG-style network with seeded
# random weights. FID compares Gaussian fits of pooled features; LPIPS is a
# per-image distance of normalized feature maps.

import numpy as np
import torch

from cvton_lab import data as D
from cvton_lab import metrics

fx = metrics.default_extractor(seed=0)
test = D.toy_split(D.ToySpec(n_train=0, n_test=40, seed=5), "test")
real = torch.stack([s.person for s in test.samples])

# ## Closed forms

a = metrics.EmbeddingStats(np.array([0.0]), np.array([[1.0]]))
b = metrics.EmbeddingStats(np.array([1.0]), np.array([[4.0]]))
print("1-D FID, N(0,1) vs N(1,4):", metrics.fid(a, b))
print("LPIPS(x, x):", metrics.lpips(real[:2], real[:2], fx).tolist())

# ## Ranking simple baselines
#
# Blurring keeps the layout and loses detail; a constant image loses
# everything. Both should score worse than the real images themselves.

blurred = torch.nn.functional.avg_pool2d(real, 5, 1, 2, count_include_pad=False)
candidates = {"identity": real, "blurred": blurred, "gray": torch.zeros_like(real)}
batches = lambda imgs: ({"person": real[k:k + 10], "fake": imgs[k:k + 10]} for k in range(0, len(real), 10))
for name, imgs in candidates.items():
    report = metrics.evaluate_testset(lambda b: b["fake"], batches(imgs), "paired", fx)
    print(f"{name:>9}: {report.summary()}")
