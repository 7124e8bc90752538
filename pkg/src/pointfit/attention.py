"""Attention math for reference feature fusion and point-pair alignment.

fused_attention concatenates the reference branch's keys/values after the main
branch's own:   softmax(Q_m cat(K_m,K_r)^T / sqrt(d)) cat(V_m,V_r)
point_attention additionally offsets queries/keys by the person/garment point
embeddings:     softmax((Q_m+E_p) cat(K_m+E_p, K_r+E_g)^T / sqrt(d)) cat(V_m,V_r)
Values are never touched by the embeddings, so E_p = E_g = 0 reduces
point_attention to fused_attention exactly.
"""

from __future__ import annotations

import math

import torch

from .errors import ShapeMismatchError


def fused_attention(q: torch.Tensor, k_m: torch.Tensor, v_m: torch.Tensor,
                    k_r: torch.Tensor | None = None, v_r: torch.Tensor | None = None) -> torch.Tensor:
    """Single-head attention over the main tokens plus optional reference
    tokens. Shapes: q (..., Nq, d); k_m/v_m (..., Nm, d); k_r/v_r (..., Nr, d)
    with Nr possibly 0 or the ref pair omitted entirely."""
    d = q.shape[-1]
    if k_m.shape[-1] != d:
        raise ShapeMismatchError(f"key dim {k_m.shape[-1]} != query dim {d}")
    if (k_r is None) != (v_r is None):
        raise ShapeMismatchError("reference keys and values must be given together")
    if k_r is not None and k_r.shape[-2] > 0:
        if k_r.shape[-1] != d:
            raise ShapeMismatchError(f"reference key dim {k_r.shape[-1]} != {d}")
        if k_r.shape[-2] != v_r.shape[-2]:
            raise ShapeMismatchError("reference key/value token counts differ")
        k = torch.cat([k_m, k_r], dim=-2)
        v = torch.cat([v_m, v_r], dim=-2)
    else:
        k, v = k_m, v_m
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    return torch.softmax(scores, dim=-1) @ v


def point_attention(q: torch.Tensor, k_m: torch.Tensor, v_m: torch.Tensor,
                    k_r: torch.Tensor | None, v_r: torch.Tensor | None,
                    e_p: torch.Tensor, e_g: torch.Tensor | None) -> torch.Tensor:
    """fused_attention with the person embedding added to the query and main
    keys and the garment embedding added to the reference keys."""
    if e_p.shape[-2] != k_m.shape[-2] or e_p.shape[-1] != k_m.shape[-1]:
        raise ShapeMismatchError(
            f"person embedding {tuple(e_p.shape[-2:])} does not match main keys {tuple(k_m.shape[-2:])}")
    k_r_shifted = k_r
    if k_r is not None and k_r.shape[-2] > 0:
        if e_g is None or e_g.shape[-2] != k_r.shape[-2]:
            raise ShapeMismatchError("garment embedding token count does not match reference keys")
        k_r_shifted = k_r + e_g
    return fused_attention(q + e_p, k_m + e_p, v_m, k_r_shifted, v_r)
