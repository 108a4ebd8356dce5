"""Flow-guided motion reference: learned offsets on top of a flow prior,
differentiable backward warping, and gated blending of the propagated
previous-frame feature into the current one.

The blend is h_out = gamma * warp(h_prev, offsets) + alpha * h_next with
gamma initialized to 0 and alpha to 1, and the offset network's final layer
zero-initialized, so a freshly constructed module is exactly the identity on
the current frame. That keeps inflation of the per-frame editing model
non-destructive until fine-tuning moves the gates.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ContractError, InputError


def bilinear_warp(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp `field` (C, H, W) by `flow` (2, H, W):
    out(p) = field(p + flow(p)), bilinear, clamp-to-edge.

    Differentiable with respect to both arguments. Integer flows reproduce
    exact shifts because the interpolation weights collapse to {0, 1}.
    """
    if field.dim() != 3 or flow.dim() != 3 or flow.shape[0] != 2:
        raise InputError(f"expected field (C,H,W) and flow (2,H,W), got {tuple(field.shape)} / {tuple(flow.shape)}")
    if field.shape[-2:] != flow.shape[-2:]:
        raise InputError(f"field spatial dims {tuple(field.shape[-2:])} != flow dims {tuple(flow.shape[-2:])}")
    _, h, w = field.shape
    ys = torch.arange(h, dtype=field.dtype, device=field.device).view(h, 1)
    xs = torch.arange(w, dtype=field.dtype, device=field.device).view(1, w)
    gx = torch.clamp(xs + flow[0], 0.0, w - 1.0)
    gy = torch.clamp(ys + flow[1], 0.0, h - 1.0)
    x0 = gx.floor()
    y0 = gy.floor()
    fx = gx - x0
    fy = gy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    f00 = field[:, y0, x0]
    f01 = field[:, y0, x1]
    f10 = field[:, y1, x0]
    f11 = field[:, y1, x1]
    top = f00 * (1.0 - fx) + f01 * fx
    bot = f10 * (1.0 - fx) + f11 * fx
    return top * (1.0 - fy) + bot * fy


class MotionReference(nn.Module):
    """Per-level motion reference block for feature maps with `channels`
    channels. Offsets are a residual on the supplied flow prior, clamped to
    the grid size."""

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.channels = channels
        self.offset_in = nn.Conv2d(2 * channels + 2, hidden, 3, padding=1)
        self.offset_out = nn.Conv2d(hidden, 2, 3, padding=1)
        nn.init.zeros_(self.offset_out.weight)
        nn.init.zeros_(self.offset_out.bias)
        self.gamma = nn.Parameter(torch.zeros(()))
        self.alpha = nn.Parameter(torch.ones(()))

    def predict_offsets(self, h_prev: torch.Tensor, h_next: torch.Tensor, flow_down: torch.Tensor) -> torch.Tensor:
        """flow prior plus a learned residual; equals the prior exactly while
        the residual network is zero."""
        if h_prev.shape != h_next.shape or h_prev.shape[-2:] != flow_down.shape[-2:]:
            raise InputError(
                f"shape mismatch: h_prev {tuple(h_prev.shape)}, h_next {tuple(h_next.shape)}, "
                f"flow {tuple(flow_down.shape)}"
            )
        feats = torch.cat([h_prev, h_next, flow_down], dim=0).unsqueeze(0)
        residual = self.offset_out(torch.nn.functional.silu(self.offset_in(feats)))[0]
        limit = float(max(h_prev.shape[-2:]))
        return torch.clamp(flow_down + residual, -limit, limit)

    def step(self, h_prev: torch.Tensor, h_next: torch.Tensor, flow_down: torch.Tensor) -> torch.Tensor:
        offsets = self.predict_offsets(h_prev, h_next, flow_down)
        return self.gamma * bilinear_warp(h_prev, offsets) + self.alpha * h_next

    def forward(self, latents: torch.Tensor, flows_down: torch.Tensor) -> torch.Tensor:
        """Enhance a sequence (L, C, H, W) given L-1 flow priors (L-1, 2, H, W).

        The first frame passes through unchanged; every later frame blends in
        a warp of the un-enhanced previous frame, so steps are independent.
        """
        length = latents.shape[0]
        if flows_down.shape[0] != length - 1:
            raise ContractError(
                f"need {length - 1} flow fields for {length} frames, got {flows_down.shape[0]}"
            )
        if length == 1:
            return latents
        out = [latents[0]]
        for i in range(length - 1):
            out.append(self.step(latents[i], latents[i + 1], flows_down[i]))
        return torch.stack(out, dim=0)


def motref_sequence(latents: torch.Tensor, flows_down: torch.Tensor, params: MotionReference) -> torch.Tensor:
    return params(latents, flows_down)
