"""Training losses: masked L1, composition, gradient and Laplacian-pyramid terms.

All functions take ``(N, C, H, W)`` tensors.  ``mask`` is ``(N, 1, H, W)``
(bool or 0/1) marking the trimap's unknown region.  The masked terms are
normalised by the masked pixel count so their scale does not depend on the
crop size.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

SMOOTH_EPS = 1e-6
PYRAMID_LEVELS = 5
LAPLACIAN_WEIGHTS = tuple(2.0 ** (s - 1) for s in range(1, PYRAMID_LEVELS + 1))


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}': {value}")
        self.term = term


# callables notified with every residual passed to smooth_abs (used by the gradient audit)
ABS_OBSERVERS: list = []


def smooth_abs(r: torch.Tensor, eps: float = SMOOTH_EPS) -> torch.Tensor:
    """``r^2 / sqrt(r^2 + eps^2)``: smooth, exactly 0 at ``r = 0`` and within
    ``eps^2 / (2|r|)`` of ``|r|`` elsewhere."""
    for observe in ABS_OBSERVERS:
        observe(r)
    sq = r * r
    return sq / torch.sqrt(sq + eps * eps)


def _mask_count(mask, channels: int = 1):
    mask = mask.to(torch.get_default_dtype() if not torch.is_floating_point(mask) else mask.dtype)
    return mask, mask.sum() * channels


def _masked_mean(values, mask, channels: int = 1):
    mask, count = _mask_count(mask, channels)
    if count.item() == 0:
        warnings.warn("empty unknown-region mask; masked loss defined as 0", RuntimeWarning, stacklevel=3)
        return values.sum() * 0.0
    return (values * mask.to(values.dtype)).sum() / count.to(values.dtype)


def l1_loss(pred, gt, mask):
    return _masked_mean(smooth_abs(pred - gt), mask)


def composition_loss(pred, fg, bg, composite_gt, mask):
    # same association as matting_core.composite, so F == B and the true alpha give exact zeros
    recomposed = torch.where(pred == 1.0, fg, torch.where(pred == 0.0, bg, bg + pred * (fg - bg)))
    return _masked_mean(smooth_abs(composite_gt - recomposed), mask, channels=fg.shape[1])


def forward_diff(x):
    """Horizontal and vertical forward differences, zero on the last column/row."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def gradient_loss(pred, gt, mask):
    pdx, pdy = forward_diff(pred)
    gdx, gdy = forward_diff(gt)
    return _masked_mean(smooth_abs(pdx - gdx) + smooth_abs(pdy - gdy), mask)


# -- Laplacian pyramid ---------------------------------------------------------

def _binomial_kernel(dtype, device, channels):
    k1 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=dtype, device=device) / 16.0
    return torch.outer(k1, k1).expand(channels, 1, 5, 5).contiguous()


def blur(x):
    c = x.shape[1]
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    return F.conv2d(x, _binomial_kernel(x.dtype, x.device, c), groups=c)


def pyr_down(x):
    return blur(x)[..., ::2, ::2]


def pyr_up(x, size):
    # replicate-pad the coarse grid before zero insertion so constants stay constant at the border
    n, c, h, w = x.shape
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    up = x.new_zeros((n, c, 2 * (h + 2), 2 * (w + 2)))
    up[..., ::2, ::2] = x
    out = F.conv2d(up, _binomial_kernel(x.dtype, x.device, c) * 4.0, groups=c)
    return out[..., : size[0], : size[1]]


def pad_to_multiple(x, multiple: int = 2 ** PYRAMID_LEVELS):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def build_pyramid(x, levels: int = PYRAMID_LEVELS):
    """``levels`` band-pass maps (finest first) followed by the low-pass residual."""
    current = pad_to_multiple(x)
    bands = []
    for _ in range(levels):
        down = pyr_down(current)
        bands.append(current - pyr_up(down, current.shape[-2:]))
        current = down
    return bands + [current]


def collapse_pyramid(pyramid):
    current = pyramid[-1]
    for band in reversed(pyramid[:-1]):
        current = band + pyr_up(current, band.shape[-2:])
    return current


def laplacian_loss(pred, gt):
    pp, gp = build_pyramid(pred), build_pyramid(gt)
    loss = pred.new_zeros(())
    for weight, bp, bg in zip(LAPLACIAN_WEIGHTS, pp, gp):
        loss = loss + weight * smooth_abs(bp - bg).mean()
    return loss


# -- total -------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l1: float
    comp: float
    grad: float
    lap: float
    total: float
    comp_skipped: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(l1, comp, grad, lap, comp_skipped: bool = False):
    """Unit-weight sum; returns ``(total_tensor, LossBreakdown)``."""
    parts = {"l1": l1, "comp": comp, "grad": grad, "lap": lap}
    values = {}
    for name, v in parts.items():
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLossError(name, fv)
        values[name] = fv
    total = l1 + comp + grad + lap
    breakdown = LossBreakdown(**values, total=values["l1"] + values["comp"] + values["grad"] + values["lap"],
                              comp_skipped=comp_skipped)
    return total, breakdown


def matting_loss(pred, gt, mask, image=None, fg=None, bg=None):
    """All four terms for a batch.  The composition term is skipped (and
    flagged) when foreground/background are not available."""
    if fg is None or bg is None or image is None:
        comp, skipped = pred.new_zeros(()), True
    else:
        comp, skipped = composition_loss(pred, fg, bg, image, mask), False
    return total_loss(l1_loss(pred, gt, mask), comp, gradient_loss(pred, gt, mask),
                      laplacian_loss(pred, gt), comp_skipped=skipped)
