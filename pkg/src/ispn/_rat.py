"""Layer-wise evaluation for circuits produced by ``build_rat``.

A RAT circuit is a tree of regions. A region's outputs are either ``I``
factorised leaf products or ``S`` sums over the cross product of two child
regions; the root mixes the cross products of every repetition. Each region
layer is evaluated in linear space after subtracting the per-row maximum of
its inputs, which turns the cross product and mixing into one outer product
and one matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LeafRegion:
    rid: int
    leaves: np.ndarray  # (I, k) leaf node ids


@dataclass
class SumRegion:
    rid: int
    left: int
    right: int
    slots: np.ndarray  # (S, a*b) logit slots, product index l * b + r


@dataclass
class RootMix:
    parts: list  # (left rid, right rid) per repetition
    slots: np.ndarray  # all root logit slots, repetitions concatenated


@dataclass
class RatLayout:
    regions: list
    root: RootMix
    n_regions: int


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _contract(u, v, W):
    """``Z[b, s] = sum_{l, r} u[b, l] W[s, l, r] v[b, r]`` without forming
    the ``(B, a, b)`` outer product. Returns ``Z`` and ``T = u @ W``."""
    B, (S, a, b) = u.shape[0], W.shape
    T = (u @ W.transpose(1, 0, 2).reshape(a, S * b)).reshape(B, S, b)
    return np.einsum("bsr,br->bs", T, v), T


def _contract_grad(u, v, W, T, dZ):
    B, (S, a, b) = u.shape[0], W.shape
    Q = (dZ[:, :, None] * v[:, None, :]).reshape(B, S * b)
    du = Q @ W.transpose(0, 2, 1).reshape(S * b, a)
    dv = np.einsum("bs,bsr->br", dZ, T)
    dW = (u.T @ Q).reshape(a, S, b).transpose(1, 0, 2)
    return du, dv, dW


class RatPlan:
    def __init__(self, layout: RatLayout, leaf_pos: np.ndarray):
        self.layout = layout
        self.ops = []
        for reg in layout.regions:
            if isinstance(reg, LeafRegion):
                self.ops.append((reg, leaf_pos[reg.leaves]))
            else:
                self.ops.append((reg, None))

    def _shape(self, out, reg):
        return out[reg.left].shape[1], out[reg.right].shape[1]

    def forward(self, leaf_vals, logits, keep=False):
        out = [None] * self.layout.n_regions
        saved = []
        for reg, cols in self.ops:
            if isinstance(reg, LeafRegion):
                out[reg.rid] = leaf_vals[:, cols].sum(axis=2)
                continue
            u, mu_, v, mv = self._scaled(out[reg.left], out[reg.right])
            a, b = u.shape[1], v.shape[1]
            W = _softmax_rows(logits[reg.slots]).reshape(-1, a, b)
            Z, T = _contract(u, v, W)
            with np.errstate(divide="ignore"):
                out[reg.rid] = np.log(Z) + mu_ + mv
            if keep:
                saved.append((reg, u, v, W, T, Z))
        root = self.layout.root
        w = _softmax_rows(logits[root.slots])
        parts = []
        off = 0
        for lr, rr in root.parts:
            u, mu_, v, mv = self._scaled(out[lr], out[rr])
            a, b = u.shape[1], v.shape[1]
            Wr = w[off : off + a * b].reshape(1, a, b)
            off += a * b
            z, T = _contract(u, v, Wr)
            parts.append((lr, rr, u, v, Wr, T, (mu_ + mv)[:, 0], z[:, 0]))
        M = np.max([p[6] for p in parts], axis=0)
        M = np.where(np.isfinite(M), M, 0.0)
        scale = [np.exp(p[6] - M) for p in parts]
        Z = np.sum([c * p[7] for c, p in zip(scale, parts)], axis=0)
        with np.errstate(divide="ignore"):
            root_val = M + np.log(Z)
        cache = (saved, parts, scale, Z, w) if keep else None
        return root_val, cache

    @staticmethod
    def _scaled(L, R):
        mL = L.max(axis=1, keepdims=True)
        mR = R.max(axis=1, keepdims=True)
        mL = np.where(np.isfinite(mL), mL, 0.0)
        mR = np.where(np.isfinite(mR), mR, 0.0)
        return np.exp(L - mL), mL, np.exp(R - mR), mR

    def backward(self, cache, row_w, n_leaf_cols, n_logits):
        saved, parts, scale, Z, w = cache
        B = Z.shape[0]
        grads = [None] * self.layout.n_regions
        d_logits = np.zeros(n_logits)
        with np.errstate(divide="ignore", invalid="ignore"):
            dZ = np.where(Z > 0, row_w / Z, 0.0)
        dw = np.empty_like(w)
        off = 0
        for (lr, rr, u, v, Wr, T, _, _), c in zip(parts, scale):
            du, dv, dW = _contract_grad(u, v, Wr, T, (dZ * c)[:, None])
            dw[off : off + dW.size] = dW.ravel()
            off += dW.size
            grads[lr] = du * u
            grads[rr] = dv * v
        d_logits[self.layout.root.slots] = w * (dw - (dw * w).sum())
        for reg, u, v, W, T, Zr in reversed(saved):
            with np.errstate(divide="ignore", invalid="ignore"):
                dZr = np.where(Zr > 0, grads[reg.rid] / Zr, 0.0)
            du, dv, dW = _contract_grad(u, v, W, T, dZr)
            dW = dW.reshape(dW.shape[0], -1)
            Wf = W.reshape(W.shape[0], -1)
            d_logits[reg.slots] = Wf * (dW - (dW * Wf).sum(axis=1, keepdims=True))
            grads[reg.left] = du * u
            grads[reg.right] = dv * v
        g_leaf = np.zeros((B, n_leaf_cols))
        for reg, cols in self.ops:
            if isinstance(reg, LeafRegion):
                g_leaf[:, cols] = grads[reg.rid][:, :, None]
        return g_leaf, d_logits
