"""Autograd vs central finite differences on the full PACL contrastive loss."""
from __future__ import annotations

import torch

from .alignment import CompatibilityMatrix, LogitScale, VisionEmbedder, info_nce, pacl_matrix
from .numerics import finite_diff_grad, max_relative_error


def pacl_grad_check(seed: int = 0, k: int = 4, tokens: int = 9, width: int = 8, in_width: int = 8,
                    similarity: str = "dot", eps: float = 1e-5) -> float:
    """Max relative error between analytic and numeric embedder gradients, float64."""
    torch.manual_seed(seed)
    emb = VisionEmbedder(in_width, width).double()
    scale = LogitScale().double()
    patches = torch.randn(k, tokens, in_width, dtype=torch.float64)
    text = torch.randn(k, width, dtype=torch.float64)
    params = list(emb.parameters())

    def loss():
        return info_nce(CompatibilityMatrix(pacl_matrix(emb(patches), text, similarity=similarity), scale()))

    loss().backward()
    analytic = [p.grad.detach().clone() for p in params]
    numeric = finite_diff_grad(loss, params, eps)
    return max_relative_error(analytic, numeric)


def grad_check_report(seed: int, tol: float = 1e-5, **kwargs) -> dict:
    err = pacl_grad_check(seed, **kwargs)
    return {"seed": seed, "max_rel_err": err, "tol": tol, "pass": bool(err <= tol)}
