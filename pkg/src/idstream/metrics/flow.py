"""Luminance, bilinear backward warping and forward-backward flow checks.

Flow fields are ``(H, W, 2)`` with channel 0 the horizontal (column)
displacement and channel 1 the vertical (row) displacement, in pixels.
"""

from __future__ import annotations

import numpy as np

from .aggregation import percentile

BT601 = np.array([0.299, 0.587, 0.114])


def luminance(frames: np.ndarray) -> np.ndarray:
    """Y of a ``(K, H, W, 3)`` RGB stack; a ``(K, H, W)`` stack is already luminance."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        if frames.shape[-1] != 3:
            raise ValueError(f"RGB frames need 3 channels, got {frames.shape[-1]}")
        return frames @ BT601
    if frames.ndim != 3:
        raise ValueError(f"frames must be (K, H, W) or (K, H, W, 3), got {frames.shape}")
    return frames


def sample_positions(flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H, W = flow.shape[:2]
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    return cols + flow[..., 0], rows + flow[..., 1]


def in_bounds(x: np.ndarray, y: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    return (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Four-neighbour interpolation at (x, y); out-of-bounds positions give 0.

    ``image`` may carry trailing channels.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    inside = in_bounds(x, y, (H, W))
    xc = np.where(inside, x, 0.0)
    yc = np.where(inside, y, 0.0)
    x0 = np.floor(xc).astype(int)
    y0 = np.floor(yc).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = (1 - fx) * image[y0, x0] + fx * image[y0, x1]
    bottom = (1 - fx) * image[y1, x0] + fx * image[y1, x1]
    out = (1 - fy) * top + fy * bottom
    mask = inside[..., None] if image.ndim == 3 else inside
    return np.where(mask, out, 0.0)


def warp_backward(image: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` at ``u + flow(u)``; returns (warped, in-bounds mask)."""
    x, y = sample_positions(flow)
    return bilinear_sample(image, x, y), in_bounds(x, y, flow.shape[:2])


def fb_consistent(flow_fwd: np.ndarray, flow_bwd: np.ndarray, eps: float = 1.0) -> np.ndarray:
    """``|F_fwd(u) + F_bwd(u + F_fwd(u))| <= eps``; false where the target leaves the frame."""
    x, y = sample_positions(flow_fwd)
    back = bilinear_sample(flow_bwd, x, y)
    err = np.linalg.norm(flow_fwd + back, axis=-1)
    return in_bounds(x, y, flow_fwd.shape[:2]) & (err <= eps)


def pair_residuals(y_t, y_next, flow_fwd, flow_bwd, eps_fb: float = 1.0, min_valid: float = 0.05):
    """Valid-pixel residuals ``|Y_t - warp(Y_{t+1})| / 255`` and whether the fallback mask was used."""
    warped, inside = warp_backward(y_next, flow_fwd)
    valid = inside & fb_consistent(flow_fwd, flow_bwd, eps_fb)
    fallback = valid.mean() < min_valid
    if fallback:
        valid = inside
    residual = np.abs(np.asarray(y_t, dtype=np.float64) - warped) / 255.0
    return residual[valid], bool(fallback)


def segment_flicker_error(frames, flow_fwd, flow_bwd, rho_pair=90.0, rho_seg=84.0, eps_fb=1.0) -> tuple[float, dict]:
    Y = luminance(frames)
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if len(Y) < 2:
        raise ValueError("temporal flicker needs at least two frames per segment")
    if flow_fwd.shape != (len(Y) - 1, *Y.shape[1:3], 2) or flow_bwd.shape != flow_fwd.shape:
        raise ValueError(f"flows must be {(len(Y) - 1, *Y.shape[1:3], 2)}, got {flow_fwd.shape} / {flow_bwd.shape}")
    pair_errors, fallbacks = [], 0
    for t in range(len(Y) - 1):
        res, fb = pair_residuals(Y[t], Y[t + 1], flow_fwd[t], flow_bwd[t], eps_fb)
        fallbacks += fb
        # no in-bounds pixel at all: count the pair as fully flickering
        pair_errors.append(percentile(res, rho_pair) if res.size else 1.0)
    return percentile(pair_errors, rho_seg), {"pair_errors": pair_errors, "fallback_pairs": fallbacks}
