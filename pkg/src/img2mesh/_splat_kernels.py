"""Compiled per-tile compositing kernels for the splat renderer.

Splats arrive as a flat id list grouped by tile and sorted front to back
within each tile. All arithmetic is float64.
"""

import numba as nb
import numpy as np

MAX_POWER = -8.0  # 4 standard deviations
# the kernel is lowered by its value at the cutoff so the footprint edge is continuous
FLOOR = np.exp(MAX_POWER)


@nb.njit(cache=True)
def composite_forward(res, tile, ranges, ids, means, conic, opacity, colors, t_eps):
    rgb = np.zeros((res, res, 3))
    t_final = np.ones((res, res))
    n_used = np.zeros((res, res), np.int64)
    tiles_x = (res + tile - 1) // tile
    for t in range(ranges.shape[0]):
        start, stop = ranges[t, 0], ranges[t, 1]
        if stop <= start:
            continue
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for y in range(y0, min(y0 + tile, res)):
            for x in range(x0, min(x0 + tile, res)):
                px, py = x + 0.5, y + 0.5
                trans = 1.0
                r, g, b = 0.0, 0.0, 0.0
                used = 0
                for k in range(start, stop):
                    i = ids[k]
                    dx, dy = px - means[i, 0], py - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    used = k - start + 1
                    if power > 0.0 or power < MAX_POWER:
                        continue
                    alpha = opacity[i] * (np.exp(power) - FLOOR)
                    nxt = trans * (1.0 - alpha)
                    if nxt < t_eps:
                        used = k - start
                        break
                    w = alpha * trans
                    r += w * colors[i, 0]
                    g += w * colors[i, 1]
                    b += w * colors[i, 2]
                    trans = nxt
                rgb[y, x, 0], rgb[y, x, 1], rgb[y, x, 2] = r, g, b
                t_final[y, x] = trans
                n_used[y, x] = used
    return rgb, t_final, n_used


@nb.njit(cache=True)
def composite_backward(res, tile, ranges, ids, means, conic, opacity, colors, n_used, grad_rgb, grad_acc):
    n = means.shape[0]
    g_means = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_colors = np.zeros((n, 3))
    tiles_x = (res + tile - 1) // tile
    max_len = 0
    for t in range(ranges.shape[0]):
        max_len = max(max_len, ranges[t, 1] - ranges[t, 0])
    alphas = np.zeros(max_len)
    trans_before = np.zeros(max_len)
    powers = np.zeros(max_len)
    for t in range(ranges.shape[0]):
        start = ranges[t, 0]
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for y in range(y0, min(y0 + tile, res)):
            for x in range(x0, min(x0 + tile, res)):
                m = n_used[y, x]
                if m == 0:
                    continue
                px, py = x + 0.5, y + 0.5
                trans = 1.0
                for j in range(m):
                    i = ids[start + j]
                    dx, dy = px - means[i, 0], py - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    powers[j] = power
                    if power > 0.0 or power < MAX_POWER:
                        alphas[j] = 0.0
                    else:
                        alphas[j] = opacity[i] * (np.exp(power) - FLOOR)
                    trans_before[j] = trans
                    trans *= 1.0 - alphas[j]
                gr, gg, gb = grad_rgb[y, x, 0], grad_rgb[y, x, 1], grad_rgb[y, x, 2]
                ga = grad_acc[y, x]
                # colour / coverage seen behind splat j, renormalized to start at j + 1
                br, bg, bb, bacc = 0.0, 0.0, 0.0, 0.0
                for j in range(m - 1, -1, -1):
                    i = ids[start + j]
                    a = alphas[j]
                    if a > 0.0:
                        tj = trans_before[j]
                        w = a * tj
                        g_colors[i, 0] += w * gr
                        g_colors[i, 1] += w * gg
                        g_colors[i, 2] += w * gb
                        d_alpha = tj * (
                            gr * (colors[i, 0] - br) + gg * (colors[i, 1] - bg) + gb * (colors[i, 2] - bb)
                            + ga * (1.0 - bacc)
                        )
                        e = np.exp(powers[j])
                        g_opacity[i] += d_alpha * (e - FLOOR)
                        d_power = d_alpha * opacity[i] * e
                        dx, dy = px - means[i, 0], py - means[i, 1]
                        g_means[i, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                        g_means[i, 1] += d_power * (conic[i, 2] * dy + conic[i, 1] * dx)
                        g_conic[i, 0] += -0.5 * d_power * dx * dx
                        g_conic[i, 1] += -d_power * dx * dy
                        g_conic[i, 2] += -0.5 * d_power * dy * dy
                    br = a * colors[i, 0] + (1.0 - a) * br
                    bg = a * colors[i, 1] + (1.0 - a) * bg
                    bb = a * colors[i, 2] + (1.0 - a) * bb
                    bacc = a + (1.0 - a) * bacc
    return g_means, g_conic, g_opacity, g_colors


def build_tile_lists(centers, radius, order, res, tile):
    """Flat (tile, depth)-sorted splat ids and per-tile [start, stop) ranges."""
    tiles_x = (res + tile - 1) // tile
    c = centers[order]
    r = radius[order]
    col_lo = np.clip(np.ceil(c[:, 0] - r - 0.5), 0, None)
    col_hi = np.clip(np.floor(c[:, 0] + r - 0.5), None, res - 1)
    row_lo = np.clip(np.ceil(c[:, 1] - r - 0.5), 0, None)
    row_hi = np.clip(np.floor(c[:, 1] + r - 0.5), None, res - 1)
    ok = (col_lo <= col_hi) & (row_lo <= row_hi) & np.isfinite(r)
    order, col_lo, col_hi, row_lo, row_hi = (a[ok] for a in (order, col_lo, col_hi, row_lo, row_hi))
    tx0, tx1 = (col_lo // tile).astype(np.int64), (col_hi // tile).astype(np.int64)
    ty0, ty1 = (row_lo // tile).astype(np.int64), (row_hi // tile).astype(np.int64)
    wx, wy = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = wx * wy
    total = int(counts.sum())
    n_tiles = tiles_x * tiles_x
    if total == 0:
        return np.zeros(0, np.int64), np.zeros((n_tiles, 2), np.int64), order
    owner = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_id = (ty0[owner] + local // wx[owner]) * tiles_x + tx0[owner] + local % wx[owner]
    perm = np.argsort(tile_id, kind="stable")
    ids = order[owner[perm]].astype(np.int64)
    bounds = np.searchsorted(tile_id[perm], np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], 1).astype(np.int64)
    return ids, ranges, order
