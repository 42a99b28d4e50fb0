"""Numba kernels for per-pixel front-to-back compositing of projected 2D Gaussians.

All arrays are float64. Gaussians arrive pre-sorted by depth through ``order``
and are binned into square tiles by their screen-space bounding box.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def bin_tiles(mean2d, radius, order, height, width, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0, x1, y0, y1 = _tile_range(mean2d[g, 0], mean2d[g, 1], radius[g], tiles_x, tiles_y, tile)
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0, x1, y0, y1 = _tile_range(mean2d[g, 0], mean2d[g, 1], radius[g], tiles_x, tiles_y, tile)
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                t = ty * tiles_x + tx
                items[fill[t]] = g
                fill[t] += 1
    return offsets, items


@numba.njit(cache=True)
def _tile_range(mx, my, r, tiles_x, tiles_y, tile):
    # pixel centers sit at integer + 0.5
    x0 = int(np.floor((mx - r - 0.5) / tile))
    x1 = int(np.floor((mx + r - 0.5) / tile)) + 1
    y0 = int(np.floor((my - r - 0.5) / tile))
    y1 = int(np.floor((my + r - 0.5) / tile)) + 1
    return max(x0, 0), min(x1, tiles_x), max(y0, 0), min(y1, tiles_y)


@numba.njit(cache=True)
def _alpha(g, px, py, mean2d, conic, opacity, radius):
    dx = px - mean2d[g, 0]
    dy = py - mean2d[g, 1]
    r = radius[g]
    if abs(dx) > r or abs(dy) > r:
        return 0.0, 0.0, dx, dy
    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
    gauss = np.exp(power)
    return opacity[g] * gauss, gauss, dx, dy


@numba.njit(cache=True)
def forward(offsets, items, mean2d, conic, color, opacity, radius, bg, height, width, tile, cutoff):
    tiles_x = (width + tile - 1) // tile
    image = np.empty((height, width, 3))
    trans = np.empty((height, width))
    wsum = np.empty((height, width))
    ncontrib = np.zeros((height, width), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            t = (y // tile) * tiles_x + (x // tile)
            px = x + 0.5
            py = y + 0.5
            T = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            ws = 0.0
            n = 0
            for k in range(offsets[t], offsets[t + 1]):
                g = items[k]
                n += 1
                a, _, _, _ = _alpha(g, px, py, mean2d, conic, opacity, radius)
                if a == 0.0:
                    continue
                w = a * T
                acc0 += w * color[g, 0]
                acc1 += w * color[g, 1]
                acc2 += w * color[g, 2]
                ws += w
                T *= 1.0 - a
                if T < cutoff:
                    break
            image[y, x, 0] = acc0 + T * bg[0]
            image[y, x, 1] = acc1 + T * bg[1]
            image[y, x, 2] = acc2 + T * bg[2]
            trans[y, x] = T
            wsum[y, x] = ws
            ncontrib[y, x] = n
    return image, trans, wsum, ncontrib


@numba.njit(cache=True)
def backward(offsets, items, mean2d, conic, color, opacity, radius, bg, height, width, tile,
             ncontrib, grad_image):
    n_g = mean2d.shape[0]
    g_mean = np.zeros((n_g, 2))
    g_conic = np.zeros((n_g, 3))
    g_color = np.zeros((n_g, 3))
    g_opac = np.zeros(n_g)
    tiles_x = (width + tile - 1) // tile
    longest = 0
    for t in range(offsets.shape[0] - 1):
        longest = max(longest, offsets[t + 1] - offsets[t])
    alphas = np.empty(longest)
    trans_before = np.empty(longest)
    for y in range(height):
        for x in range(width):
            t = (y // tile) * tiles_x + (x // tile)
            px = x + 0.5
            py = y + 0.5
            start = offsets[t]
            n = ncontrib[y, x]
            T = 1.0
            for j in range(n):
                a, _, _, _ = _alpha(items[start + j], px, py, mean2d, conic, opacity, radius)
                alphas[j] = a
                trans_before[j] = T
                T *= 1.0 - a
            d0 = grad_image[y, x, 0]
            d1 = grad_image[y, x, 1]
            d2 = grad_image[y, x, 2]
            # color composited behind entry j, normalized by the transmittance after j
            b0 = bg[0]
            b1 = bg[1]
            b2 = bg[2]
            for j in range(n - 1, -1, -1):
                a = alphas[j]
                if a == 0.0:
                    continue
                g = items[start + j]
                Tj = trans_before[j]
                w = a * Tj
                g_color[g, 0] += w * d0
                g_color[g, 1] += w * d1
                g_color[g, 2] += w * d2
                d_alpha = Tj * ((color[g, 0] - b0) * d0 + (color[g, 1] - b1) * d1 + (color[g, 2] - b2) * d2)
                _, gauss, dx, dy = _alpha(g, px, py, mean2d, conic, opacity, radius)
                g_opac[g] += d_alpha * gauss
                d_power = d_alpha * a
                g_mean[g, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[g, 1] += d_power * (conic[g, 2] * dy + conic[g, 1] * dx)
                g_conic[g, 0] += -0.5 * dx * dx * d_power
                g_conic[g, 1] += -dx * dy * d_power
                g_conic[g, 2] += -0.5 * dy * dy * d_power
                b0 = color[g, 0] * a + (1.0 - a) * b0
                b1 = color[g, 1] * a + (1.0 - a) * b1
                b2 = color[g, 2] * a + (1.0 - a) * b2
    return g_mean, g_conic, g_color, g_opac


@numba.njit(cache=True)
def zbuffer(u, v, z, height, width):
    """Index of the nearest point per pixel (-1 where none) for integer pixel coords."""
    best = np.full((height, width), np.inf)
    index = np.full((height, width), -1, dtype=np.int64)
    for i in range(u.shape[0]):
        x = u[i]
        y = v[i]
        if 0 <= x < width and 0 <= y < height and z[i] < best[y, x]:
            best[y, x] = z[i]
            index[y, x] = i
    return index
