"""Foreground/background layer estimation from (image, alpha).

Minimizes, per color channel c,

    sum_i [a_i F_i^c + (1-a_i) B_i^c - I_i^c]^2
         + |a_ix| [(F_ix^c)^2 + (B_ix^c)^2]
         + |a_iy| [(F_iy^c)^2 + (B_iy^c)^2]

with forward differences for the x/y subscripts, replicate border (the
difference at the last column/row is zero), and a small Tikhonov term that
pins the layer left unconstrained wherever alpha is identically 0 or 1.

Three routes share this discretization: a sparse conjugate-gradient solve
(the production path), a dense normal-equation factorization (the oracle,
small inputs only), and a fixed-iteration differentiable CG in torch for
use inside the latent optimization loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import sparse
from scipy.sparse.linalg import cg as sparse_cg

from .errors import NumericalError, SolverError


@dataclass
class SolverConfig:
    tol: float = 1e-8           # relative residual for the exact CG solve
    max_iters: int = 2000
    inloop_iters: int = 30      # fixed CG iterations in the differentiable mode
    tikhonov: float = 1e-6
    stop_gradient: bool = False  # treat in-loop (F, B) as constants


@dataclass
class ForegroundBackground:
    F: np.ndarray            # H x W x 3, clamped to [0, 1]
    B: np.ndarray
    raw_F: np.ndarray        # pre-clamp solver output
    raw_B: np.ndarray
    residuals: list          # relative residual per channel


def _forward_diff_weights(alpha: np.ndarray):
    wx = np.abs(alpha[:, 1:] - alpha[:, :-1])   # H x (W-1)
    wy = np.abs(alpha[1:, :] - alpha[:-1, :])   # (H-1) x W
    return wx, wy


def _assemble_sparse(alpha: np.ndarray, tikhonov: float) -> sparse.csr_matrix:
    h, w = alpha.shape
    n = h * w
    a = alpha.ravel().astype(np.float64)
    wx, wy = _forward_diff_weights(alpha.astype(np.float64))

    idx = np.arange(n).reshape(h, w)
    ii = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    jj = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    ww = np.concatenate([wx.ravel(), wy.ravel()])

    m = len(ww)
    rows = np.repeat(np.arange(m), 2)
    cols = np.stack([ii, jj], axis=1).ravel()
    vals = np.tile([-1.0, 1.0], m)
    d = sparse.coo_matrix((vals, (rows, cols)), shape=(m, n))
    smooth = (d.T @ sparse.diags(ww) @ d).tocsr()

    data_ff = sparse.diags(a * a + tikhonov)
    data_bb = sparse.diags((1.0 - a) ** 2 + tikhonov)
    data_fb = sparse.diags(a * (1.0 - a))
    return sparse.bmat(
        [[data_ff + smooth, data_fb], [data_fb, data_bb + smooth]], format="csr")


def _check_inputs(image: np.ndarray, alpha: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got {image.shape}")
    if alpha.shape != image.shape[:2]:
        raise ValueError(f"alpha {alpha.shape} does not match image {image.shape}")
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise ValueError("alpha must lie in [0, 1]")


def estimate_foreground(image: np.ndarray, alpha: np.ndarray,
                        cfg: SolverConfig | None = None) -> ForegroundBackground:
    """Solve the layer-estimation normal equations per channel with CG."""
    cfg = cfg or SolverConfig()
    _check_inputs(image, alpha)
    h, w = alpha.shape
    n = h * w
    a = alpha.ravel().astype(np.float64)
    mat = _assemble_sparse(alpha, cfg.tikhonov)

    raw_f = np.empty((h, w, 3))
    raw_b = np.empty((h, w, 3))
    residuals = []
    for c in range(3):
        i_c = image[..., c].ravel().astype(np.float64)
        b = np.concatenate([a * i_c, (1.0 - a) * i_c])
        x, info = sparse_cg(mat, b, rtol=cfg.tol, atol=0.0, maxiter=cfg.max_iters)
        res = float(np.linalg.norm(mat @ x - b) / max(np.linalg.norm(b), 1e-300))
        if info != 0:
            raise SolverError(res)
        residuals.append(res)
        raw_f[..., c] = x[:n].reshape(h, w)
        raw_b[..., c] = x[n:].reshape(h, w)
    return ForegroundBackground(
        F=np.clip(raw_f, 0.0, 1.0), B=np.clip(raw_b, 0.0, 1.0),
        raw_F=raw_f, raw_B=raw_b, residuals=residuals)


def dense_foreground_oracle(image: np.ndarray, alpha: np.ndarray,
                            tikhonov: float = 1e-6) -> ForegroundBackground:
    """Direct dense factorization of the same normal equations (test oracle)."""
    _check_inputs(image, alpha)
    h, w = alpha.shape
    n = h * w
    if n > 1024:
        raise ValueError(f"dense oracle limited to H*W <= 1024, got {n}")
    a = alpha.ravel().astype(np.float64)
    mat = _assemble_sparse(alpha, tikhonov).toarray()
    raw_f = np.empty((h, w, 3))
    raw_b = np.empty((h, w, 3))
    for c in range(3):
        i_c = image[..., c].ravel().astype(np.float64)
        b = np.concatenate([a * i_c, (1.0 - a) * i_c])
        try:
            x = np.linalg.solve(mat, b)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"singular layer-estimation system: {e}") from None
        raw_f[..., c] = x[:n].reshape(h, w)
        raw_b[..., c] = x[n:].reshape(h, w)
    return ForegroundBackground(
        F=np.clip(raw_f, 0.0, 1.0), B=np.clip(raw_b, 0.0, 1.0),
        raw_F=raw_f, raw_B=raw_b, residuals=[0.0, 0.0, 0.0])


def quadratic_cost(image: np.ndarray, alpha: np.ndarray, f: np.ndarray,
                   b: np.ndarray, tikhonov: float = 1e-6) -> float:
    """The regularized objective the solvers minimize (all channels summed)."""
    a = alpha.astype(np.float64)[..., None]
    wx, wy = _forward_diff_weights(alpha.astype(np.float64))
    data = ((a * f + (1.0 - a) * b - image) ** 2).sum()
    fx = f[:, 1:, :] - f[:, :-1, :]
    bx = b[:, 1:, :] - b[:, :-1, :]
    fy = f[1:, :, :] - f[:-1, :, :]
    by = b[1:, :, :] - b[:-1, :, :]
    smooth = (wx[..., None] * (fx**2 + bx**2)).sum() + (wy[..., None] * (fy**2 + by**2)).sum()
    reg = tikhonov * ((f**2).sum() + (b**2).sum())
    return float(data + smooth + reg)


def composite(fg, bg, alpha):
    """alpha * fg + (1 - alpha) * bg, differentiable when given torch tensors.

    Accepts H x W x 3 numpy arrays with an H x W alpha, or torch tensors in
    channel-first layout (alpha is unsqueezed onto the channel axis).
    """
    if isinstance(alpha, torch.Tensor):
        if alpha.dim() == fg.dim() - 1:
            alpha = alpha.unsqueeze(-3)
        if fg.shape[-2:] != alpha.shape[-2:] or fg.shape != bg.shape:
            raise ValueError("composite inputs must share spatial shape")
        return alpha * fg + (1.0 - alpha) * bg
    if fg.shape != bg.shape or alpha.shape != fg.shape[:2]:
        raise ValueError("composite inputs must share spatial shape")
    a = alpha[..., None]
    return a * fg + (1.0 - a) * bg


def _weighted_laplacian(x, wx, wy):
    # x: (C, H, W); wx: (H, W-1); wy: (H-1, W)
    wtx = wx * (x[..., 1:] - x[..., :-1])
    wty = wy * (x[..., 1:, :] - x[..., :-1, :])
    zx = torch.zeros_like(wtx[..., :1])
    zy = torch.zeros_like(wty[..., :1, :])
    out = torch.cat([zx, wtx], dim=-1) - torch.cat([wtx, zx], dim=-1)
    out = out + torch.cat([zy, wty], dim=-2) - torch.cat([wty, zy], dim=-2)
    return out


def _matvec_torch(f, b, alpha, wx, wy, tikhonov):
    u = alpha * f + (1.0 - alpha) * b
    out_f = alpha * u + tikhonov * f + _weighted_laplacian(f, wx, wy)
    out_b = (1.0 - alpha) * u + tikhonov * b + _weighted_laplacian(b, wx, wy)
    return out_f, out_b


def estimate_foreground_inloop(image: torch.Tensor, alpha: torch.Tensor,
                               cfg: SolverConfig | None = None,
                               abs_smoothing: float = 1e-6):
    """Differentiable layer estimation: a fixed number of CG iterations.

    ``image`` is (3, H, W) and ``alpha`` (H, W). Gradients flow back into
    both through the linear recursion unless cfg.stop_gradient is set. The
    absolute values in the smoothness weights are softened to
    sqrt(d^2 + abs_smoothing^2) so the map stays smooth; the exact solver
    and oracle keep the true absolute value. Returns raw (unclamped) F, B
    of shape (3, H, W); clamping here would zero gradients at saturated
    pixels.
    """
    cfg = cfg or SolverConfig()
    if cfg.stop_gradient:
        with torch.no_grad():
            f, b = _inloop_cg(image, alpha, cfg, abs_smoothing)
        return f.detach(), b.detach()
    return _inloop_cg(image, alpha, cfg, abs_smoothing)


def _inloop_cg(image, alpha, cfg, abs_smoothing):
    eps = torch.finfo(image.dtype).tiny
    dx = alpha[:, 1:] - alpha[:, :-1]
    dy = alpha[1:, :] - alpha[:-1, :]
    wx = torch.sqrt(dx * dx + abs_smoothing**2)
    wy = torch.sqrt(dy * dy + abs_smoothing**2)

    b_f = alpha * image
    b_b = (1.0 - alpha) * image
    x_f = torch.zeros_like(image)
    x_b = torch.zeros_like(image)
    r_f, r_b = b_f, b_b
    p_f, p_b = r_f, r_b
    rs = (r_f * r_f).sum(dim=(1, 2)) + (r_b * r_b).sum(dim=(1, 2))
    for _ in range(cfg.inloop_iters):
        ap_f, ap_b = _matvec_torch(p_f, p_b, alpha, wx, wy, cfg.tikhonov)
        p_ap = (p_f * ap_f).sum(dim=(1, 2)) + (p_b * ap_b).sum(dim=(1, 2))
        step = (rs / (p_ap + eps)).view(-1, 1, 1)
        x_f = x_f + step * p_f
        x_b = x_b + step * p_b
        r_f = r_f - step * ap_f
        r_b = r_b - step * ap_b
        rs_new = (r_f * r_f).sum(dim=(1, 2)) + (r_b * r_b).sum(dim=(1, 2))
        beta = (rs_new / (rs + eps)).view(-1, 1, 1)
        p_f = r_f + beta * p_f
        p_b = r_b + beta * p_b
        rs = rs_new
    return x_f, x_b
