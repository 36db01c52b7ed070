"""Numba kernels for tiled front-to-back alpha blending.

Splats arrive compacted and depth-sorted; per-tile index lists reference that
compact order, so iterating a tile's list front to back blends correctly.
The backward kernel replays each pixel's blend back to front, recovering the
running transmittance by division (alpha is clamped below 1 so the division
is safe), and accumulates parameter gradients into per-tile buffers. The
buffers are reduced over the tile axis afterwards in a fixed order, which
keeps gradients bit-identical regardless of thread scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def blend_forward(means, conics, colors, alphas, pair_splat, tile_start,
                  tile_size, tiles_x, alpha_max, stop_t,
                  img, t_out, n_contrib):
    height, width = t_out.shape
    num_tiles = tile_start.shape[0] - 1
    for tile in prange(num_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s0 == s1:
            continue
        ty = tile // tiles_x
        tx = tile % tiles_x
        r_end = min((ty + 1) * tile_size, height)
        c_end = min((tx + 1) * tile_size, width)
        for r in range(ty * tile_size, r_end):
            py = r + 0.5
            for c in range(tx * tile_size, c_end):
                px = c + 0.5
                trans = 1.0
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                cnt = 0
                for pi in range(s0, s1):
                    k = pair_splat[pi]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    power = (-0.5 * (conics[k, 0] * dx * dx + conics[k, 2] * dy * dy)
                             - conics[k, 1] * dx * dy)
                    if power > 0.0:
                        power = 0.0
                    a = alphas[k] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    cnt += 1
                    w = a * trans
                    acc0 += colors[k, 0] * w
                    acc1 += colors[k, 1] * w
                    acc2 += colors[k, 2] * w
                    trans *= 1.0 - a
                    if trans < stop_t:
                        break
                img[r, c, 0] = acc0
                img[r, c, 1] = acc1
                img[r, c, 2] = acc2
                t_out[r, c] = trans
                n_contrib[r, c] = cnt


@njit(cache=True, parallel=True)
def blend_backward(means, conics, colors, alphas, pair_splat, tile_start,
                   tile_size, tiles_x, alpha_max, t_out, n_contrib, upstream,
                   g_mean, g_conic, g_color, g_alpha):
    height, width = t_out.shape
    num_tiles = tile_start.shape[0] - 1
    for tile in prange(num_tiles):
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s0 == s1:
            continue
        ty = tile // tiles_x
        tx = tile % tiles_x
        r_end = min((ty + 1) * tile_size, height)
        c_end = min((tx + 1) * tile_size, width)
        for r in range(ty * tile_size, r_end):
            py = r + 0.5
            for c in range(tx * tile_size, c_end):
                px = c + 0.5
                cnt = n_contrib[r, c]
                if cnt == 0:
                    continue
                u0 = upstream[r, c, 0]
                u1 = upstream[r, c, 1]
                u2 = upstream[r, c, 2]
                if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                    continue
                # Suffix color accumulated behind the current splat.
                s_0 = 0.0
                s_1 = 0.0
                s_2 = 0.0
                trans_back = t_out[r, c]
                for pi in range(s0 + cnt - 1, s0 - 1, -1):
                    k = pair_splat[pi]
                    dx = px - means[k, 0]
                    dy = py - means[k, 1]
                    power = (-0.5 * (conics[k, 0] * dx * dx + conics[k, 2] * dy * dy)
                             - conics[k, 1] * dx * dy)
                    if power > 0.0:
                        power = 0.0
                    w = np.exp(power)
                    raw = alphas[k] * w
                    clamped = raw > alpha_max
                    a = alpha_max if clamped else raw
                    one_m = 1.0 - a
                    trans_i = trans_back / one_m  # transmittance before splat i
                    aw = a * trans_i
                    g_color[tile, k, 0] += aw * u0
                    g_color[tile, k, 1] += aw * u1
                    g_color[tile, k, 2] += aw * u2
                    d_alpha = (u0 * (colors[k, 0] * trans_i - s_0 / one_m)
                               + u1 * (colors[k, 1] * trans_i - s_1 / one_m)
                               + u2 * (colors[k, 2] * trans_i - s_2 / one_m))
                    if not clamped:
                        g_alpha[tile, k] += d_alpha * w
                        dp = d_alpha * alphas[k] * w
                        g_mean[tile, k, 0] += dp * (conics[k, 0] * dx + conics[k, 1] * dy)
                        g_mean[tile, k, 1] += dp * (conics[k, 1] * dx + conics[k, 2] * dy)
                        g_conic[tile, k, 0] += dp * (-0.5 * dx * dx)
                        g_conic[tile, k, 1] += dp * (-dx * dy)
                        g_conic[tile, k, 2] += dp * (-0.5 * dy * dy)
                    s_0 += colors[k, 0] * aw
                    s_1 += colors[k, 1] * aw
                    s_2 += colors[k, 2] * aw
                    trans_back = trans_i
