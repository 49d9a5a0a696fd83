"""Patch-aligned compatibility on hand-built vectors.

Walks through how a text vector attends over a set of patch embeddings,
what the pooled vision vector looks like, and how the resulting scores
feed the symmetric contrastive loss.
"""
import math

import torch

from pacl.alignment import (
    CompatibilityMatrix,
    info_nce,
    mi_lower_bound,
    pacl_compatibility,
    pacl_matrix,
    patch_similarity,
    pooled_vision,
    token_attention,
)

torch.set_printoptions(precision=4, sci_mode=False)

# Two patches, one pointing along x, one along y; the caption points along x.
pe = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
te = torch.tensor([1.0, 0.0], dtype=torch.float64)

s = patch_similarity(pe, te, "dot")
a = token_attention(s)
v = pooled_vision(pe, a)
print("similarities  ", s)
print("attention     ", a)          # e/(e+1), 1/(e+1)
print("pooled vector ", v, "norm", round(v.norm().item(), 4))
print("compatibility ", round(pacl_compatibility(pe, te).item(), 4))

# A single patch reduces to plain cosine similarity.
one = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
print("\nsingle patch   ", pacl_compatibility(one, te).item(), "= cos", 3 / 5)

# Scores are bounded in [-1, 1] however large the patch norms get.
big = torch.randn(9, 2, dtype=torch.float64) * 1e3
print("huge patches   ", round(pacl_compatibility(big, te).item(), 4))

# Contrastive loss over a batch of k images x k captions.
torch.manual_seed(0)
k = 4
images = torch.randn(k, 9, 8, dtype=torch.float64)
texts = images[:, 0] + 0.1 * torch.randn(k, 8, dtype=torch.float64)  # caption i matches a patch of image i
phi = pacl_matrix(images, texts)
print("\ncompatibility matrix\n", phi)
for scale in (1.0, 1 / 0.07):
    loss = info_nce(CompatibilityMatrix(phi, scale)).item()
    print(f"scale {scale:6.2f}: loss {loss:.4f}  MI bound {mi_lower_bound(loss, k):.4f}  (ln k = {math.log(k):.4f})")

# Constant compatibilities give chance-level loss.
print("constant matrix loss", info_nce(CompatibilityMatrix(torch.zeros(k, k, dtype=torch.float64))).item())
