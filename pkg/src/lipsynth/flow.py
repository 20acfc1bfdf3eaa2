"""Dense optical flow via a Jacobi-iterated Horn-Schunck solver, plus the
inter-frame flow consistency loss. The solver is unrolled for a fixed
iteration count, so the loss is differentiable with respect to the frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ArgumentError

LUMA = (0.299, 0.587, 0.114)

# Horn-Schunck derivative stencils (average over the 2x2x2 cube).
_KX = torch.tensor([[-1.0, 1.0], [-1.0, 1.0]]) * 0.5
_KY = torch.tensor([[-1.0, -1.0], [1.0, 1.0]]) * 0.5
_KT = torch.tensor([[1.0, 1.0], [1.0, 1.0]]) * 0.25
# Weighted neighbour average from the original formulation.
_KAVG = torch.tensor([
    [1 / 12, 1 / 6, 1 / 12],
    [1 / 6, 0.0, 1 / 6],
    [1 / 12, 1 / 6, 1 / 12],
])


@dataclass
class FlowField:
    """Per-pixel displacement between two frames, in pixels per frame."""

    u: np.ndarray  # horizontal
    v_comp: np.ndarray  # vertical

    def magnitude(self):
        return np.sqrt(self.u**2 + self.v_comp**2)


def to_luma(frames):
    """(..., H, W, 3) or (..., 3, H, W) torch tensor -> (..., H, W) luma."""
    if frames.shape[-1] == 3:
        w = torch.tensor(LUMA, dtype=frames.dtype, device=frames.device)
        return (frames * w).sum(dim=-1)
    w = torch.tensor(LUMA, dtype=frames.dtype, device=frames.device)
    return (frames * w.view(3, 1, 1)).sum(dim=-3)


def _conv(img, kernel):
    # img: (B, H, W) -> same-size output with replicate padding for 3x3,
    # zero-extended trailing edge for the 2x2 stencils.
    k = kernel.to(img.dtype).to(img.device)[None, None]
    x = img[:, None]
    if kernel.shape[0] == 2:
        x = F.pad(x, (0, 1, 0, 1), mode="replicate")
        out = F.conv2d(x, k)
    else:
        x = F.pad(x, (1, 1, 1, 1), mode="replicate")
        out = F.conv2d(x, k)
    return out[:, 0]


def hs_flow(gray_a, gray_b, alpha, iterations):
    """Batched Horn-Schunck on luma images (B, H, W). Returns (u, v) tensors."""
    if gray_a.shape != gray_b.shape:
        raise ArgumentError("frames must have equal shapes")
    if not torch.isfinite(gray_a).all() or not torch.isfinite(gray_b).all():
        raise ArgumentError("non-finite values in input frames")
    if alpha <= 0:
        raise ArgumentError("alpha must be positive")
    if iterations < 1:
        raise ArgumentError("iterations must be >= 1")

    ix = 0.5 * (_conv(gray_a, _KX) + _conv(gray_b, _KX))
    iy = 0.5 * (_conv(gray_a, _KY) + _conv(gray_b, _KY))
    it = _conv(gray_b, _KT) - _conv(gray_a, _KT)

    denom = alpha**2 + ix**2 + iy**2
    u = torch.zeros_like(gray_a)
    v = torch.zeros_like(gray_a)
    for _ in range(iterations):
        u_bar = _conv(u, _KAVG)
        v_bar = _conv(v, _KAVG)
        grad = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * grad
        v = v_bar - iy * grad
    return u, v


def hs_residual(gray_a, gray_b, u, v, alpha):
    """Mean squared residual of the Horn-Schunck optimality system."""
    ix = 0.5 * (_conv(gray_a, _KX) + _conv(gray_b, _KX))
    iy = 0.5 * (_conv(gray_a, _KY) + _conv(gray_b, _KY))
    it = _conv(gray_b, _KT) - _conv(gray_a, _KT)
    denom = alpha**2 + ix**2 + iy**2
    u_bar = _conv(u, _KAVG)
    v_bar = _conv(v, _KAVG)
    grad = (ix * u_bar + iy * v_bar + it) / denom
    ru = u - (u_bar - ix * grad)
    rv = v - (v_bar - iy * grad)
    return float((ru**2 + rv**2).mean().sqrt())


def _as_luma_batch(frame):
    t = torch.as_tensor(np.asarray(frame, dtype=np.float64)) if not torch.is_tensor(frame) else frame
    if t.dim() == 2:
        t = t[None]
    elif t.dim() == 3:
        t = to_luma(t)[None]
    else:
        raise ArgumentError(f"unsupported frame shape {tuple(t.shape)}")
    return t


def estimate_flow(frame_a, frame_b, alpha=1.0, iterations=50):
    """Dense flow between two frames (HxW gray or HxWx3 RGB). Deterministic."""
    a = _as_luma_batch(frame_a)
    b = _as_luma_batch(frame_b)
    with torch.no_grad():
        u, v = hs_flow(a, b, alpha, iterations)
    return FlowField(u=u[0].numpy(), v_comp=v[0].numpy())


def flow_consistency_loss(pred_seq, real_seq, alpha=1.0, iterations=50):
    """Mean absolute difference between predicted-sequence and real-sequence
    flows over consecutive frame pairs; differentiable w.r.t. pred_seq.

    Sequences are (N, 3, H, W) or (N, H, W) torch tensors with N >= 2.
    """
    if pred_seq.shape != real_seq.shape:
        raise ArgumentError("sequences must have equal shapes")
    n = pred_seq.shape[0]
    if n < 2:
        raise ArgumentError("flow consistency needs at least two frames")
    pg = to_luma(pred_seq) if pred_seq.dim() == 4 else pred_seq
    rg = to_luma(real_seq) if real_seq.dim() == 4 else real_seq
    pu, pv = hs_flow(pg[1:], pg[:-1], alpha, iterations)
    with torch.no_grad():
        ru, rv = hs_flow(rg[1:], rg[:-1], alpha, iterations)
    diff = 0.5 * (torch.abs(pu - ru) + torch.abs(pv - rv))
    # mean over pixels and both components per pair, then mean over the
    # N-1 pairs: matches the 1/(N-1) sum form.
    return diff.mean()
