"""Differentiable splat rendering: tiled rasterizer, reference oracle, backward.

Per pixel p, front-to-back alpha compositing over depth-sorted Gaussians:

    C(p) = sum_i c_i * alpha_i * prod_{j<i} (1 - alpha_j)        (color)
    D(p) = sum_i d_i * alpha_i * prod_{j<i} (1 - alpha_j)        (depth, unnormalized)

with alpha_i = opacity_i * exp(-0.5 * Delta^T Sigma'^{-1} Delta). Depth d_i is
the Euclidean camera distance of the Gaussian mean.

Threshold semantics are shared by both render paths through RenderConfig:

  * alpha is clamped below ``alpha_clamp`` (default 0.9999);
  * contributions below ``contribution_floor`` (default 1/255) are dropped —
    implemented as the exact-arithmetic test q > 2*ln(opacity/floor) on the
    Mahalanobis quadform q, so both paths make bit-identical drop decisions;
  * compositing stops once transmittance falls below
    ``early_stop_transmittance`` (default 1e-4).

The tiled path bins each Gaussian into the tiles its footprint can reach; the
conservative footprint radius guarantees everything outside the bins is below
the drop floor, so tiling only skips exact no-ops. The reference path visits
every Gaussian at every pixel.

``render_backward`` is a hand-derived analytic adjoint of the full pipeline
(compositing, Gaussian footprint, projection, covariance construction); it is
validated against central finite differences with thresholds disabled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .geometry import Camera, GaussianPrimitive, ProjectedGaussian

__all__ = [
    "RenderConfig",
    "RenderOutput",
    "RenderCache",
    "check_config",
    "pixel_alpha",
    "alpha_composite",
    "render",
    "render_reference",
    "render_forward",
    "render_backward",
    "render_node",
]

# Floor used for footprint/drop bookkeeping when the configured floor is 0
# ("thresholds disabled"): contributions below this are numerically invisible
# to the 1e-4 finite-difference tolerance.
_MIN_FLOOR = 1e-12


@dataclass(frozen=True)
class RenderConfig:
    """Thresholds shared by the tiled renderer and the reference oracle."""

    tile_size: int = 16
    alpha_clamp: float = 0.9999
    contribution_floor: float = 1.0 / 255.0
    early_stop_transmittance: float = 1e-4


DEFAULT_CONFIG = RenderConfig()


def check_config(base: RenderConfig = DEFAULT_CONFIG) -> RenderConfig:
    """The gradcheck configuration: drop floor and early stop disabled."""
    return replace(base, contribution_floor=0.0, early_stop_transmittance=0.0)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters
    alpha_acc: np.ndarray  # (H, W) accumulated opacity


class RenderCache:
    """Forward-pass state retained for the analytic backward pass."""

    def __init__(self, arrays, camera, config, width, height, P, prep, tiles):
        self.arrays = arrays
        self.camera = camera
        self.config = config
        self.width = width
        self.height = height
        self.P = P  # projection dict from geometry.project_gaussians_batch
        self.prep = prep  # per-Gaussian prepared rasterization data
        self.tiles = tiles  # per-tile index arrays into prep's sorted order
        self.internals = None  # optional per-tile compositing intermediates


# ---------------------------------------------------------------------------
# Shared per-Gaussian pixel math
# ---------------------------------------------------------------------------


def _invert_cov2d(cov2d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse entries (ia, ib, ic) of symmetric 2x2 covariances (K,2,2)."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det


def _quad_cutoff(opacity: np.ndarray, floor: float) -> np.ndarray:
    """Per-Gaussian quadform cutoff: alpha < floor  <=>  q > cutoff."""
    eff = max(floor, _MIN_FLOOR)
    op = np.asarray(opacity, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        cut = 2.0 * (np.log(op) - np.log(eff))
    return np.where(op <= eff, -np.inf, cut)


def pixel_alpha(pg: ProjectedGaussian, pixel: np.ndarray, config: RenderConfig = DEFAULT_CONFIG) -> float:
    """Per-Gaussian contribution alpha at one pixel, with clamp and floor."""
    ia, ib, ic = _invert_cov2d(pg.cov2d[None])
    dx = float(pixel[0]) - pg.mean2d[0]
    dy = float(pixel[1]) - pg.mean2d[1]
    q = dx * (ia[0] * dx + ib[0] * dy) + dy * (ib[0] * dx + ic[0] * dy)
    a = pg.opacity * np.exp(-0.5 * q)
    a = min(a, config.alpha_clamp)
    cut = _quad_cutoff(np.array([pg.opacity]), config.contribution_floor)[0]
    if q > cut:
        return 0.0
    return float(a)


def alpha_composite(
    contributions,
    config: RenderConfig = DEFAULT_CONFIG,
    checked: bool = True,
) -> tuple[np.ndarray, float, float]:
    """Front-to-back compositing of an ordered (alpha, color, distance) list.

    Returns (color (3,), depth, alpha_acc). Stops once transmittance drops
    below the configured early-stop threshold. When ``checked``, rejects
    input whose distances are not non-decreasing.
    """
    items = list(contributions)
    if checked:
        for i in range(1, len(items)):
            if items[i][2] < items[i - 1][2]:
                raise ValueError(
                    f"contributions not sorted front-to-back at position {i}"
                )
    stop = config.early_stop_transmittance
    T = 1.0
    color = np.zeros(3, dtype=np.float64)
    depth = 0.0
    for alpha, c, d in items:
        if T < stop:
            break
        w = T * alpha
        color = color + w * np.asarray(c, dtype=np.float64)
        depth = depth + w * d
        T = T * (1.0 - alpha)
    return color, depth, 1.0 - T


# ---------------------------------------------------------------------------
# Preparation: projection, thresholds, depth sort, tile binning
# ---------------------------------------------------------------------------


def _as_gaussian_arrays(gaussians) -> dict[str, np.ndarray]:
    if isinstance(gaussians, dict):
        return gaussians
    return geo.gaussians_to_arrays(list(gaussians))


def _prepare(arrays: dict[str, np.ndarray], camera: Camera, config: RenderConfig):
    """Project, threshold, and depth-sort; returns (projection, prep dict)."""
    P = geo.project_gaussians_batch(arrays["mu"], arrays["quat"], arrays["scale"], camera)
    opacity = np.asarray(arrays["opacity"], dtype=np.float64)
    qcut = _quad_cutoff(opacity, config.contribution_floor)
    include = P["valid"] & np.isfinite(qcut)
    idx = np.nonzero(include)[0]
    dist = P["cam_distance"][idx]
    order = np.lexsort((idx, dist))
    sel = idx[order]

    ia, ib, ic = _invert_cov2d(P["cov2d"][sel])
    cov2d = P["cov2d"][sel]
    lam_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
        (0.5 * (cov2d[:, 0, 0] - cov2d[:, 1, 1])) ** 2 + cov2d[:, 0, 1] ** 2
    )
    # Conservative pixel-space footprint: outside this radius q > qcut holds,
    # so skipped pixels would contribute exactly zero. The 3-sigma lower
    # bound (q >= 9) keeps every Gaussian in all tiles its 3-sigma ellipse
    # can touch.
    radius = np.sqrt(np.maximum(qcut[sel], 9.0) * lam_max)

    prep = {
        "sel": sel,  # original Gaussian index per sorted slot
        "mx": P["mean2d"][sel, 0],
        "my": P["mean2d"][sel, 1],
        "ia": ia,
        "ib": ib,
        "ic": ic,
        "opacity": opacity[sel],
        "color": np.asarray(arrays["color"], dtype=np.float64)[sel],
        "dist": P["cam_distance"][sel],
        "qcut": qcut[sel],
        "radius": radius,
    }
    return P, prep


def _build_tiles(prep, width: int, height: int, tile_size: int) -> list[np.ndarray]:
    """Per-tile arrays of sorted-slot indices whose footprints reach the tile."""
    ntx = -(-width // tile_size)
    nty = -(-height // tile_size)
    lists: list[list[int]] = [[] for _ in range(ntx * nty)]
    mx, my, r = prep["mx"], prep["my"], prep["radius"]
    tx0 = np.floor((mx - r) / tile_size).astype(np.int64)
    tx1 = np.floor((mx + r) / tile_size).astype(np.int64)
    ty0 = np.floor((my - r) / tile_size).astype(np.int64)
    ty1 = np.floor((my + r) / tile_size).astype(np.int64)
    np.clip(tx0, 0, ntx - 1, out=tx0)
    np.clip(ty0, 0, nty - 1, out=ty0)
    for s in range(mx.shape[0]):
        x1 = min(int(tx1[s]), ntx - 1)
        y1 = min(int(ty1[s]), nty - 1)
        if x1 < tx0[s] or y1 < ty0[s]:
            continue
        for ty in range(int(ty0[s]), y1 + 1):
            base = ty * ntx
            for tx in range(int(tx0[s]), x1 + 1):
                lists[base + tx].append(s)
    return [np.asarray(slot, dtype=np.int64) for slot in lists]


# ---------------------------------------------------------------------------
# Block compositing (shared by tiled and reference forward passes)
# ---------------------------------------------------------------------------


def _composite_block(px, py, prep, slots, config, want_internals=False):
    """Composite the Gaussians at ``slots`` over the pixel block py x px.

    Per pixel this reproduces alpha_composite exactly: the transmittance
    recursion is a sequential cumulative product over the sorted slots.
    """
    h, w = py.shape[0], px.shape[0]
    L = slots.shape[0]
    if L == 0:
        zero = np.zeros((h, w))
        out = (np.zeros((h, w, 3)), zero, zero.copy())
        return (out + (None,)) if want_internals else out

    mx = prep["mx"][slots][:, None, None]
    my = prep["my"][slots][:, None, None]
    ia = prep["ia"][slots][:, None, None]
    ib = prep["ib"][slots][:, None, None]
    ic = prep["ic"][slots][:, None, None]
    op = prep["opacity"][slots][:, None, None]
    qcut = prep["qcut"][slots][:, None, None]
    color = prep["color"][slots]
    dist = prep["dist"][slots]

    dx = px[None, None, :] - mx
    dy = py[None, :, None] - my
    q = dx * (ia * dx + ib * dy) + dy * (ib * dx + ic * dy)
    # Dropped pairs (q > qcut) contribute neither value nor gradient, so
    # skipping their exp changes nothing and saves most of the exp cost.
    kept_q = q <= qcut
    e = np.exp(-0.5 * q, out=np.zeros_like(q), where=kept_q)
    araw = op * e
    # dropped pairs (e = 0) already land at a = 0, no extra mask pass needed
    a = np.minimum(araw, config.alpha_clamp)

    one_minus = 1.0 - a
    T_incl = np.cumprod(one_minus, axis=0)
    T_excl = np.concatenate([np.ones((1, h, w)), T_incl[:-1]], axis=0)
    stop = config.early_stop_transmittance
    active = T_excl >= stop
    wgt = np.where(active, T_excl * a, 0.0)

    wgt_flat = wgt.reshape(L, h * w)
    rgb = (wgt_flat.T @ color).reshape(h, w, 3)
    depth = (dist @ wgt_flat).reshape(h, w)

    # Early stop freezes transmittance at its first sub-threshold value.
    T_ext = np.concatenate([T_excl, T_incl[-1:]], axis=0)
    below = T_ext < stop
    any_below = below.any(axis=0)
    first = below.argmax(axis=0)
    frozen = np.take_along_axis(T_ext, first[None], axis=0)[0]
    T_final = np.where(any_below, frozen, T_incl[-1])
    alpha_acc = 1.0 - T_final

    out = (rgb, depth, alpha_acc)
    if want_internals:
        internals = {
            "dx": dx,
            "dy": dy,
            "q": q,
            "e": e,
            "araw": araw,
            "a": a,
            "T_excl": T_excl,
            "active": active,
            "wgt": wgt,
        }
        return out + (internals,)
    return out


def _validate_size(camera: Camera, image_size) -> tuple[int, int]:
    width, height = image_size if image_size is not None else camera.image_size
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {(width, height)}")
    return int(width), int(height)


def render_reference(
    gaussians,
    camera: Camera,
    config: RenderConfig = DEFAULT_CONFIG,
    image_size=None,
) -> RenderOutput:
    """Brute-force oracle: every Gaussian at every pixel, no tiling."""
    width, height = _validate_size(camera, image_size)
    arrays = _as_gaussian_arrays(gaussians)
    _, prep = _prepare(arrays, camera, config)
    slots = np.arange(prep["mx"].shape[0], dtype=np.int64)

    rgb = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha_acc = np.zeros((height, width))
    px = np.arange(width, dtype=np.float64)
    band = 16  # row-band processing bounds the (L, h, w) temporaries
    for y0 in range(0, height, band):
        y1 = min(y0 + band, height)
        py = np.arange(y0, y1, dtype=np.float64)
        r, d, acc = _composite_block(px, py, prep, slots, config)
        rgb[y0:y1] = r
        depth[y0:y1] = d
        alpha_acc[y0:y1] = acc
    return RenderOutput(rgb=rgb, depth=depth, alpha_acc=alpha_acc)


def render_forward(
    gaussians,
    camera: Camera,
    config: RenderConfig = DEFAULT_CONFIG,
    image_size=None,
    keep_internals=False,
) -> tuple[RenderOutput, RenderCache]:
    """Tile-based forward pass; the returned cache enables render_backward.

    keep_internals=True stores each tile's compositing intermediates in the
    cache so the backward pass skips its recompute. Worth the memory only
    when a backward pass is certain to follow (the training path).
    """
    width, height = _validate_size(camera, image_size)
    arrays = _as_gaussian_arrays(gaussians)
    P, prep = _prepare(arrays, camera, config)
    ts = config.tile_size
    tiles = _build_tiles(prep, width, height, ts)

    rgb = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha_acc = np.zeros((height, width))
    ntx = -(-width // ts)
    px_full = np.arange(width, dtype=np.float64)
    py_full = np.arange(height, dtype=np.float64)
    internals = [] if keep_internals else None
    for t, slots in enumerate(tiles):
        ty, tx = divmod(t, ntx)
        x0, x1 = tx * ts, min((tx + 1) * ts, width)
        y0, y1 = ty * ts, min((ty + 1) * ts, height)
        block = _composite_block(
            px_full[x0:x1], py_full[y0:y1], prep, slots, config,
            want_internals=keep_internals,
        )
        rgb[y0:y1, x0:x1] = block[0]
        depth[y0:y1, x0:x1] = block[1]
        alpha_acc[y0:y1, x0:x1] = block[2]
        if keep_internals:
            internals.append(block[3])
    out = RenderOutput(rgb=rgb, depth=depth, alpha_acc=alpha_acc)
    cache = RenderCache(arrays, camera, config, width, height, P, prep, tiles)
    cache.internals = internals
    return out, cache


def render(
    gaussians,
    camera: Camera,
    config: RenderConfig = DEFAULT_CONFIG,
    image_size=None,
) -> RenderOutput:
    """Tile-based rendering; equal to render_reference within 1e-6."""
    out, _ = render_forward(gaussians, camera, config, image_size)
    return out


# ---------------------------------------------------------------------------
# Analytic backward
# ---------------------------------------------------------------------------


def render_backward(cache: RenderCache, grad_rgb: np.ndarray, grad_depth: np.ndarray):
    """Gradients of sum(grad_rgb * rgb) + sum(grad_depth * depth) w.r.t. the
    five Gaussian parameter classes. Requires the cache from render_forward."""
    if not isinstance(cache, RenderCache):
        raise ValueError("render_backward requires the cache from render_forward")
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    grad_depth = np.asarray(grad_depth, dtype=np.float64)
    H, W = cache.height, cache.width
    if grad_rgb.shape != (H, W, 3) or grad_depth.shape != (H, W):
        raise ValueError(
            f"gradient shapes {grad_rgb.shape}/{grad_depth.shape} do not match render size {(H, W)}"
        )

    prep, config = cache.prep, cache.config
    n_sorted = prep["mx"].shape[0]
    # Per-sorted-slot accumulators (screen-space quantities).
    g_mx = np.zeros(n_sorted)
    g_my = np.zeros(n_sorted)
    g_ia = np.zeros(n_sorted)
    g_ib = np.zeros(n_sorted)
    g_ic = np.zeros(n_sorted)
    g_op = np.zeros(n_sorted)
    g_dist = np.zeros(n_sorted)
    g_color = np.zeros((n_sorted, 3))

    ts = config.tile_size
    ntx = -(-W // ts)
    px_full = np.arange(W, dtype=np.float64)
    py_full = np.arange(H, dtype=np.float64)
    clamp = config.alpha_clamp
    for t, slots in enumerate(cache.tiles):
        if slots.shape[0] == 0:
            continue
        ty, tx = divmod(t, ntx)
        x0, x1 = tx * ts, min((tx + 1) * ts, W)
        y0, y1 = ty * ts, min((ty + 1) * ts, H)
        gC = grad_rgb[y0:y1, x0:x1]
        gD = grad_depth[y0:y1, x0:x1]
        if not (gC.any() or gD.any()):
            continue
        if cache.internals is not None:
            intern = cache.internals[t]
        else:
            _, _, _, intern = _composite_block(
                px_full[x0:x1], py_full[y0:y1], prep, slots, config,
                want_internals=True,
            )
        a, araw, e = intern["a"], intern["araw"], intern["e"]
        dx, dy = intern["dx"], intern["dy"]
        T_excl, active, wgt = intern["T_excl"], intern["active"], intern["wgt"]
        color = prep["color"][slots]
        dist = prep["dist"][slots]
        ia = prep["ia"][slots][:, None, None]
        ib = prep["ib"][slots][:, None, None]
        ic = prep["ic"][slots][:, None, None]

        # dL/dalpha_i = T_i v_i - S_i/(1-alpha_i), S_i the suffix sum of w_k v_k.
        # When alpha_i = 1 the suffix is exactly zero (everything behind is
        # fully occluded), so the quotient is defined as zero; those slots are
        # dropped by the clamp mask anyway.
        bh, bw = gC.shape[0], gC.shape[1]
        v = (color @ gC.reshape(bh * bw, 3).T).reshape(-1, bh, bw)
        v += dist[:, None, None] * gD[None]
        sw = wgt * v
        suffix = np.cumsum(sw[::-1], axis=0)[::-1] - sw
        om = 1.0 - a
        ratio = np.divide(suffix, om, out=np.zeros_like(suffix), where=om > 0.0)
        ga = T_excl * v - ratio
        kept = active & (a > 0.0) & (araw < clamp)
        ga = np.where(kept, ga, 0.0)

        gq = -0.5 * ga * a
        gqdx = gq * dx
        gqdy = gq * dy
        g_mx[slots] += -2.0 * (ia * gqdx + ib * gqdy).sum(axis=(1, 2))
        g_my[slots] += -2.0 * (ib * gqdx + ic * gqdy).sum(axis=(1, 2))
        g_ia[slots] += (gqdx * dx).sum(axis=(1, 2))
        g_ib[slots] += 2.0 * (gqdx * dy).sum(axis=(1, 2))
        g_ic[slots] += (gqdy * dy).sum(axis=(1, 2))
        g_op[slots] += (ga * e).sum(axis=(1, 2))
        g_color[slots] += np.einsum("lhw,hwc->lc", wgt, gC)
        g_dist[slots] += (wgt * gD[None]).sum(axis=(1, 2))

    return _projection_backward(
        cache, g_mx, g_my, g_ia, g_ib, g_ic, g_op, g_dist, g_color
    )


def _projection_backward(cache, g_mx, g_my, g_ia, g_ib, g_ic, g_op, g_dist, g_color):
    """Chain screen-space gradients back to mu/quat/scale/opacity/color."""
    arrays, camera, P, prep = cache.arrays, cache.camera, cache.P, cache.prep
    K = arrays["mu"].shape[0]
    sel = prep["sel"]

    out = {
        "mu": np.zeros((K, 3)),
        "quat": np.zeros((K, 4)),
        "scale": np.zeros((K, 3)),
        "opacity": np.zeros(K),
        "color": np.zeros((K, 3)),
    }
    if sel.shape[0] == 0:
        return out

    out["opacity"][sel] = g_op
    out["color"][sel] = g_color

    # Inverse-covariance entries -> cov2d. P2 = cov2d^{-1}; the quadform used
    # ib once for both off-diagonal slots, so its matrix gradient splits.
    ia, ib, ic = prep["ia"], prep["ib"], prep["ic"]
    P2 = np.empty((sel.shape[0], 2, 2))
    P2[:, 0, 0] = ia
    P2[:, 0, 1] = ib
    P2[:, 1, 0] = ib
    P2[:, 1, 1] = ic
    GP = np.empty_like(P2)
    GP[:, 0, 0] = g_ia
    GP[:, 0, 1] = 0.5 * g_ib
    GP[:, 1, 0] = 0.5 * g_ib
    GP[:, 1, 1] = g_ic
    G2 = -np.einsum("kab,kbc,kcd->kad", P2, GP, P2)

    J = P["J"][sel]
    cov_cam = P["cov_cam"][sel]
    gJ = 2.0 * np.einsum("kab,kbc,kcd->kad", G2, J, cov_cam)
    g_cov_cam = np.einsum("kai,kab,kbj->kij", J, G2, J)

    W4 = camera.world_to_camera()
    Rcw = W4[:3, :3]
    g_cov3d = np.einsum("ai,kab,bj->kij", Rcw, g_cov_cam, Rcw)

    # Camera-frame mean gradients from mean2d, J, and cam_distance.
    t = P["cam_t"][sel]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    dist = prep["dist"]
    gt = np.zeros_like(t)
    gt[:, 0] = g_mx * fx / z + gJ[:, 0, 2] * (-fx / z**2)
    gt[:, 1] = g_my * fy / z + gJ[:, 1, 2] * (-fy / z**2)
    gt[:, 2] = (
        g_mx * (-fx * x / z**2)
        + g_my * (-fy * y / z**2)
        + gJ[:, 0, 0] * (-fx / z**2)
        + gJ[:, 1, 1] * (-fy / z**2)
        + gJ[:, 0, 2] * (2.0 * fx * x / z**3)
        + gJ[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    gt += g_dist[:, None] * t / dist[:, None]
    out["mu"][sel] = gt @ Rcw

    # cov3d = R diag(s^2) R^T.
    Gsym = g_cov3d + np.transpose(g_cov3d, (0, 2, 1))
    R = P["R"][sel]
    scale = np.asarray(arrays["scale"], dtype=np.float64)[sel]
    # dL/ds_a = 2 s_a r_a^T G r_a (columns r_a of R), with the full G + G^T.
    col_quad = np.einsum("kij,kia,kja->ka", g_cov3d, R, R)
    out["scale"][sel] = 2.0 * scale * col_quad
    D = scale**2
    gR = np.einsum("kij,kjc,kc->kic", Gsym, R, D)
    dRdq = geo.rotation_jacobian_batch(np.asarray(arrays["quat"], dtype=np.float64)[sel])
    out["quat"][sel] = np.einsum("kij,kcij->kc", gR, dRdq)
    return out


# ---------------------------------------------------------------------------
# Autodiff bridge
# ---------------------------------------------------------------------------


def render_node(
    mu: ad.Tensor,
    quat: ad.Tensor,
    scale: ad.Tensor,
    opacity: ad.Tensor,
    color: ad.Tensor,
    camera: Camera,
    config: RenderConfig = DEFAULT_CONFIG,
    image_size=None,
) -> tuple[ad.Tensor, RenderOutput]:
    """Differentiable rendering as one engine node with value (H, W, 4).

    Channels 0-2 are RGB; channel 3 is depth. Returns the node and the full
    RenderOutput (for alpha_acc diagnostics, which carry no gradient).
    """
    arrays = {
        "mu": mu.data,
        "quat": quat.data,
        "scale": scale.data,
        "opacity": opacity.data,
        "color": color.data,
    }
    out, cache = render_forward(arrays, camera, config, image_size, keep_internals=True)
    value = np.concatenate([out.rgb, out.depth[..., None]], axis=2)

    def vjp(g):
        grads = render_backward(cache, g[..., 0:3], g[..., 3])
        return (
            grads["mu"],
            grads["quat"],
            grads["scale"],
            grads["opacity"],
            grads["color"],
        )

    node = ad.custom((mu, quat, scale, opacity, color), value, vjp, name="render")
    return node, out
