"""Exact sparsity-aware inference for the two detection networks.

Scan crops are binary and mostly empty.  On an all-zero input every layer
of a CNN produces a fixed "background" map (biases propagated through the
stack), so a real crop's activations differ from that baseline only inside
a halo around its occupied pixels: one cell per 3x3 convolution, two per
3-wide pooling window, and so on.  The engines below precompute the
baseline maps once per parameter state and then evaluate only the halo:

* conv over a binary input has at most 2^(k*k) distinct windows, so the
  first 3x3 stage of the proposal network is a 512-entry lookup table;
* deeper stages gather im2col rows solely at halo positions and fall back
  to the baseline elsewhere;
* the hidden dense layer runs on a baseline-filled canvas, so its GEMM
  matches the plain path bit for bit where nothing changed.

Results match the reference forward pass to float32 rounding; the tests
pin that agreement.  Engines are rebuilt automatically when the network
parameters change (detected through a content fingerprint).
"""

from __future__ import annotations

import numpy as np

from . import cnn

_F = np.float32


def _fingerprint(net: cnn.Network) -> tuple:
    """Cheap parameter-state token: version counter plus sampled sums."""
    parts: list[float] = [float(net.version)]
    for p in net.params:
        if p is not None:
            w = p["w"].ravel()
            step = max(1, w.size // 512)
            parts.append(float(w[::step].sum()))
            parts.append(float(p["b"].sum()))
    return tuple(parts)


def _dilate(mask: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Valid-mode window-OR: out[i, j] = any(mask[i-pad : i-pad+k, ...])."""
    n, h, w = mask.shape
    oh = h + 2 * pad - k + 1
    ow = w + 2 * pad - k + 1
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad), dtype=bool)
    padded[:, pad:pad + h, pad:pad + w] = mask
    out = np.zeros((n, oh, ow), dtype=bool)
    for di in range(k):
        for dj in range(k):
            out |= padded[:, di:di + oh, dj:dj + ow]
    return out


def _window_gather(canvas: np.ndarray, ni, ii, jj, k: int, pad: int
                   ) -> np.ndarray:
    """(rows, k, k, c) windows of a batched map at the given positions."""
    n, h, w, c = canvas.shape
    if pad:
        padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=canvas.dtype)
        padded[:, pad:pad + h, pad:pad + w] = canvas
    else:
        padded = canvas
    di = np.arange(k)
    return padded[ni[:, None, None], ii[:, None, None] + di[:, None],
                  jj[:, None, None] + di[None, :]]


def _segment_bounds(sorted_ids: np.ndarray, count: int) -> np.ndarray:
    return np.searchsorted(sorted_ids, np.arange(count + 1))


class ProposalScorer:
    """Halo evaluator for the 32x32 proposal network architecture."""

    LAYOUT = (cnn.Conv, cnn.Relu, cnn.Conv, cnn.Relu, cnn.MaxPool,
              cnn.Dense, cnn.Relu, cnn.Dense, cnn.Softmax)

    @classmethod
    def supports(cls, net: cnn.Network) -> bool:
        if tuple(type(s) for s in net.layers) != cls.LAYOUT:
            return False
        c1, _, c2, _, pool = net.layers[:5]
        return (net.input_shape[2] == 1 and c1.size == 3 and c1.stride == 1
                and c1.padding == 1 and c2.size == 3 and c2.stride == 1
                and c2.padding == 1 and pool.stride == 1)

    def __init__(self, net: cnn.Network):
        net.require_params()
        self.net = net
        self.fingerprint = _fingerprint(net)
        self.side = net.input_shape[0]
        p = net.params
        c1, c2 = net.layers[0], net.layers[2]
        self.f1 = c1.filters
        self.f2 = c2.filters
        self.pool = net.layers[4].size

        # all 2^9 binary 3x3 windows through conv1 + relu
        patterns = ((np.arange(512)[:, None] >> np.arange(9)) & 1)
        w1 = p[0]["w"].reshape(9, self.f1)
        lut = np.maximum(patterns.astype(np.float64) @ w1 + p[0]["b"], 0.0)
        lut_ext = np.vstack([lut, np.zeros((1, self.f1))])
        self.lut_ext = lut_ext.astype(_F)

        # conv2 premultiplied per window cell: cell t with conv1 pattern c
        # contributes lut2[t][c]; index 512 models the zero padding ring
        w2 = p[2]["w"].reshape(9, self.f1, self.f2)
        self.lut2 = np.stack([lut_ext @ w2[t] for t in range(9)]).astype(_F)
        self.b2 = p[2]["b"].astype(_F)

        # background maps for an all-empty crop
        base1 = np.broadcast_to(lut[0], (1, self.side, self.side, self.f1))
        m2, _ = cnn._conv_forward(c2, p[2], np.ascontiguousarray(base1))
        self.m2 = np.maximum(m2[0], 0.0).astype(_F)
        pooled, _ = cnn._pool_forward(net.layers[4], self.m2[None].astype(
            np.float64))
        self.p0 = pooled[0].astype(_F)
        self.pside = self.p0.shape[0]

        self.wfc1 = p[5]["w"].astype(_F)
        self.bfc1 = p[5]["b"].astype(_F)
        self.wfc2 = p[7]["w"].astype(_F)
        self.bfc2 = p[7]["b"].astype(_F)

        # persistent scratch, restored after every chunk: a per-position row
        # map into the value table (background rows first) and the pooled
        # baseline canvas the hidden-layer GEMM runs over
        self._chunk = 512
        cells = self.side * self.side
        self._map = np.tile(np.arange(cells, dtype=np.int32), self._chunk)
        self._canvas3 = np.broadcast_to(
            self.p0, (self._chunk, self.pside, self.pside, self.f2)).copy()
        self._m2_flat = np.ascontiguousarray(self.m2.reshape(cells, self.f2))

    def score(self, patches: np.ndarray, chunk: int | None = None) -> np.ndarray:
        chunk = chunk or self._chunk
        out = np.empty(patches.shape[0])
        for lo in range(0, patches.shape[0], chunk):
            out[lo:lo + chunk] = self._score_chunk(patches[lo:lo + chunk])
        return out

    def _score_chunk(self, occ: np.ndarray) -> np.ndarray:
        n, side = occ.shape[0], self.side
        if n == 0:
            return np.zeros(0)

        # conv1 as a pattern code per position (0 means all-empty window)
        padded = np.zeros((n, side + 2, side + 2), dtype=np.int16)
        padded[:, 1:side + 1, 1:side + 1] = occ
        codes = np.zeros((n, side, side), dtype=np.int16)
        for t in range(9):
            di, dj = divmod(t, 3)
            codes |= padded[:, di:di + side, dj:dj + side] << t

        # sentinel ring (index 512 -> zero vector) models conv2 zero padding
        ext_side = side + 2
        codes_ext = np.full((n, ext_side, ext_side), 512, dtype=np.int16)
        codes_ext[:, 1:side + 1, 1:side + 1] = codes
        codes_flat = codes_ext.reshape(-1)

        halo2 = _dilate(codes > 0, 3, 1)
        n2, i2, j2 = np.nonzero(halo2)
        r2 = n2.size
        cells = side * side

        # conv2 + relu at halo positions: nine premultiplied table gathers
        base = (n2 * ext_side + i2) * ext_side + j2
        vals2 = self.lut2[0][codes_flat[base]]
        for t in range(1, 9):
            di, dj = divmod(t, 3)
            vals2 += self.lut2[t][codes_flat[base + di * ext_side + dj]]
        vals2 += self.b2
        np.maximum(vals2, 0.0, out=vals2)

        scratch = n <= self._chunk
        rowmap = self._map if scratch else \
            np.tile(np.arange(cells, dtype=np.int32), n)
        canvas3 = self._canvas3[:n] if scratch else \
            np.broadcast_to(self.p0, (n, self.pside, self.pside,
                                      self.f2)).copy()
        flat3 = canvas3.reshape(-1, self.f2)
        table = np.concatenate([self._m2_flat, vals2])
        idx2 = (n2 * side + i2) * side + j2
        i3 = j3 = idx3 = np.empty(0, dtype=np.intp)
        try:
            rowmap[idx2] = cells + np.arange(r2, dtype=np.int32)

            # pooled values: running max over the nine window cells,
            # read through the row map (background rows stay baseline)
            halo3 = _dilate(halo2, self.pool, 0)
            n3, i3, j3 = np.nonzero(halo3)
            base3 = (n3 * side + i3) * side + j3
            vals3 = table[rowmap[base3]]
            for t in range(1, self.pool * self.pool):
                di, dj = divmod(t, self.pool)
                np.maximum(vals3, table[rowmap[base3 + di * side + dj]],
                           out=vals3)

            idx3 = (n3 * self.pside + i3) * self.pside + j3
            flat3[idx3] = vals3

            h = canvas3.reshape(n, -1) @ self.wfc1 + self.bfc1
            np.maximum(h, 0.0, out=h)
            logits = h @ self.wfc2 + self.bfc2
        finally:
            if scratch:  # return the scratch to its baseline state
                rowmap[idx2] = idx2.astype(np.int32) % cells
                flat3[idx3] = self.p0.reshape(-1, self.f2)[
                    i3 * self.pside + j3]

        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z, dtype=np.float64)
        return e[:, 1] / e.sum(axis=1)


class MaskedImageScorer:
    """Halo evaluator for the 250x250 ROI classifier architecture."""

    LAYOUT = (cnn.Conv, cnn.Relu, cnn.MaxPool, cnn.Dense, cnn.Softmax)

    @classmethod
    def supports(cls, net: cnn.Network) -> bool:
        if tuple(type(s) for s in net.layers) != cls.LAYOUT:
            return False
        conv = net.layers[0]
        return net.input_shape[2] == 1 and conv.stride == 1

    def __init__(self, net: cnn.Network):
        net.require_params()
        self.net = net
        self.fingerprint = _fingerprint(net)
        p = net.params
        self.conv = net.layers[0]
        self.pool = net.layers[2]
        side = net.input_shape[0]
        self.side = side

        zero = np.zeros((1, side, side, 1))
        m1, _ = cnn._conv_forward(self.conv, p[0], zero)
        np.maximum(m1, 0.0, out=m1)
        pooled, _ = cnn._pool_forward(self.pool, m1)
        self.m1 = m1[0].astype(_F)
        self.p0 = pooled[0].astype(_F)
        self.cside = self.m1.shape[0]
        self.pshape = self.p0.shape[:2]

        self.w1 = p[0]["w"].reshape(-1, self.conv.filters).astype(_F)
        self.b1 = p[0]["b"].astype(_F)
        self.wfc = p[3]["w"].astype(_F)
        self.h0 = (self.p0.reshape(-1).astype(np.float64) @ p[3]["w"]
                   + p[3]["b"])

    def score(self, occ: np.ndarray) -> float:
        """Class-1 probability for one binary masked image."""
        k, pad, stride = self.conv.size, self.conv.padding, self.conv.stride
        rows, cols = np.nonzero(occ)
        if rows.size == 0:
            h = self.h0.copy()
        else:
            # conv positions whose window can see any occupied pixel
            r0 = max(0, rows.min() + pad - k + 1)
            r1 = min(self.cside, rows.max() + pad + 1)
            c0 = max(0, cols.min() + pad - k + 1)
            c1 = min(self.cside, cols.max() + pad + 1)
            ii, jj = np.mgrid[r0:r1, c0:c1]
            ii, jj = ii.ravel(), jj.ravel()
            n0 = np.zeros_like(ii)
            win = _window_gather(occ.astype(_F)[None, :, :, None],
                                 n0, ii, jj, k, pad)
            vals1 = win.reshape(len(ii), -1) @ self.w1 + self.b1
            np.maximum(vals1, 0.0, out=vals1)

            canvas1 = self.m1.copy()
            canvas1[ii, jj] = vals1

            # pool windows of size q stride s that overlap the changed block
            q, s = self.pool.size, self.pool.stride
            pr0 = max(0, (r0 - q) // s + 1)
            pr1 = min(self.pshape[0], r1 // s + 1)
            pc0 = max(0, (c0 - q) // s + 1)
            pc1 = min(self.pshape[1], c1 // s + 1)
            pi, pj = np.mgrid[pr0:pr1, pc0:pc1]
            pi, pj = pi.ravel(), pj.ravel()
            win = canvas1[pi[:, None, None] * s + np.arange(q)[:, None],
                          pj[:, None, None] * s + np.arange(q)[None, :]]
            vals2 = win.max(axis=(1, 2))

            delta = (vals2 - self.p0[pi, pj]).astype(np.float64)
            flat = pi * self.pshape[1] + pj
            w_rows = self.wfc[(flat[:, None] * self.p0.shape[2]
                               + np.arange(self.p0.shape[2])).ravel()]
            h = self.h0 + delta.ravel() @ w_rows
        z = h - h.max()
        e = np.exp(z)
        return float(e[1] / e.sum())
