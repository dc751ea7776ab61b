"""Gumbel-Softmax sampling of per-pixel depth distributions from top-K lists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np
import torch

from .core import ConfigError


class EmptyPixelError(ValueError):
    """All weights of a pixel are zero; the caller has to skip that pixel."""


@dataclass(frozen=True)
class SamplerConfig:
    tau: float = 0.95
    n: int = 4
    seed: int = 0
    deterministic: bool = False
    # optional tau(iteration) hook; constant when unset
    tau_schedule: Optional[Callable[[int], float]] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if int(self.n) < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")

    def tau_at(self, iteration):
        return self.tau if self.tau_schedule is None else float(self.tau_schedule(iteration))


@dataclass
class DepthSamples:
    values: torch.Tensor  # (H, W, n) soft depth samples
    probs: torch.Tensor  # (H, W, n, K) Gumbel-Softmax probabilities
    weights: torch.Tensor  # (H, W, n) per-sample weights, sum to 1 over n on valid pixels
    valid: torch.Tensor  # (H, W) bool, False for empty pixels


# Philox4x32-10 constants
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S16 = np.uint64(16)
_MAX_SLOTS = 1 << 17


@numba.njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 block function on uint64-held 32-bit words."""
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ k0, p1 & _MASK, (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK
    return c0, c1, c2, c3


@numba.njit(cache=True)
def _uniform_pair(pix, sample, block, k0, k1, tag, it):
    """Two uniforms in the open interval (0, 1), for list slots 2*block and 2*block+1."""
    x0, x1, x2, x3 = philox4x32(np.uint64(pix) & _MASK, np.uint64(sample) & _MASK,
                                tag | np.uint64(block), np.uint64(it) & _MASK, k0, k1)
    u0 = ((x0 >> np.uint64(5)) * 67108864.0 + (x1 >> np.uint64(6)) + 0.5) * 2.0 ** -53
    u1 = ((x2 >> np.uint64(5)) * 67108864.0 + (x3 >> np.uint64(6)) + 0.5) * 2.0 ** -53
    return u0, u1


@numba.njit(cache=True)
def _fill_uniforms(out, i, pix, sample, k, k0, k1, tag, it):
    for b in range((k + 1) // 2):
        u0, u1 = _uniform_pair(pix, sample, b, k0, k1, tag, it)
        out[i + 2 * b] = u0
        if 2 * b + 1 < k:
            out[i + 2 * b + 1] = u1


@numba.njit(cache=True)
def _uniform_dense(P, n, K, k0, k1, tag, it):
    u = np.empty(P * n * K)
    for p in range(P):
        for s in range(n):
            _fill_uniforms(u, (p * n + s) * K, p, s, K, k0, k1, tag, it)
    return u.reshape((P, n, K))


@numba.njit(cache=True)
def _uniform_compact(kv, n, start, k0, k1, tag, it):
    u = np.empty(start[-1])
    for p in range(kv.shape[0]):
        for s in range(n):
            _fill_uniforms(u, start[p] + s * kv[p], p, s, kv[p], k0, k1, tag, it)
    return u


def _key(seed, iteration, stream):
    seed = int(seed) % (1 << 64)
    if not 0 <= int(stream) < (1 << 16):
        raise ConfigError(f"stream must be in [0, 65536), got {stream}")
    k0, k1 = np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)
    return k0, k1, np.uint64(int(stream) << 16), int(iteration) % (1 << 32)


def _to_gumbel(u):
    # -log(-log u) in place; u is strictly inside (0, 1)
    np.log(u, out=u)
    np.negative(u, out=u)
    np.log(u, out=u)
    return np.negative(u, out=u)


def gumbel_noise(shape, seed, iteration=0, stream=0):
    """Gumbel(0, 1) draws from a counter-based Philox4x32-10 generator.

    ``shape`` is (..., n, K): leading axes are flattened into a pixel index,
    then sample, then list slot.  Each draw is a pure function of
    (seed, iteration, stream, pixel, sample, slot), so any subset of entries
    can be generated on its own and matches the dense result bit-exactly.
    """
    shape = tuple(int(x) for x in np.atleast_1d(shape))
    K = shape[-1]
    n = shape[-2] if len(shape) > 1 else 1
    if K > _MAX_SLOTS:
        raise ConfigError(f"at most {_MAX_SLOTS} list slots are supported")
    P = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    k0, k1, tag, it = _key(seed, iteration, stream)
    return _to_gumbel(_uniform_dense(P, n, K, k0, k1, tag, it)).reshape(shape)


def gumbel_probs(weights, tau, noise=None):
    """Gumbel-Softmax probabilities of one list of positive weights."""
    w = torch.as_tensor(weights, dtype=torch.float64)
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if w.numel() == 0 or not bool((w > 0).any()):
        raise EmptyPixelError("all weights are zero")
    g = torch.zeros_like(w) if noise is None else torch.as_tensor(noise, dtype=w.dtype)
    logits = torch.where(w > 0, (torch.log(w.clamp(min=1e-300)) + g) / tau,
                         torch.full_like(w, -torch.inf))
    return torch.softmax(logits, dim=-1)


@numba.njit(cache=True)
def _gather_compact(noise, kv, n, start):
    g = np.empty(start[-1])
    for p in range(kv.shape[0]):
        i = start[p]
        for s in range(n):
            for j in range(kv[p]):
                g[i] = noise[p, s, j]
                i += 1
    return g


@numba.njit(cache=True)
def _shift_logits(g, logw, kv, n, start, tau):
    """(log w + g) / tau minus the per-(pixel, sample) max, in place."""
    for p in range(kv.shape[0]):
        k = kv[p]
        i = start[p]
        for s in range(n):
            mx = -np.inf
            for j in range(k):
                x = (logw[p, j] + g[i + j]) / tau
                g[i + j] = x
                if x > mx:
                    mx = x
            for j in range(k):
                g[i + j] -= mx
            i += k


@numba.njit(cache=True)
def _normalize_reduce(e, d, w, kv, n, start, K):
    """Normalize exp-logits in place; return dense probs, sum p d and sum p w."""
    P = kv.shape[0]
    probs = np.zeros((P, n, K))
    values = np.zeros((P, n))
    sw = np.zeros((P, n))
    for p in range(P):
        k = kv[p]
        if k == 0:
            continue
        i = start[p]
        for s in range(n):
            tot = 0.0
            for j in range(k):
                tot += e[i + j]
            inv = 1.0 / tot
            v = 0.0
            a = 0.0
            for j in range(k):
                q = e[i + j] * inv
                e[i + j] = q
                probs[p, s, j] = q
                v += q * d[p, j]
                a += q * w[p, j]
            values[p, s] = v
            sw[p, s] = a
            i += k
    return probs, values, sw


def _valid_prefix(m):
    """Per-pixel count of valid slots; valid slots must form a prefix."""
    kv = m.sum(1)
    if not np.array_equal(m, np.arange(m.shape[1])[None, :] < kv[:, None]):
        raise ConfigError("valid top-K slots must form a prefix of each list")
    return kv.astype(np.int64)


def _soft_fwd(d, w, m, n, tau, noise=None, key=None):
    # exp and log run vectorized in numpy on the packed valid entries; the
    # per-(pixel, sample) max and reductions are fused in numba passes
    P, K = w.shape
    kv = _valid_prefix(m)
    start = np.zeros(P + 1, dtype=np.int64)
    np.cumsum(kv * n, out=start[1:])
    if noise is None:
        g = _to_gumbel(_uniform_compact(kv, n, start, *key))
    else:
        g = _gather_compact(noise, kv, n, start)
    logw = np.log(np.where(m, w, 1.0))
    _shift_logits(g, logw, kv, n, start, tau)
    np.exp(g, out=g)
    probs, values, sw = _normalize_reduce(g, d, w, kv, n, start, K)
    return probs, values, sw, (g, kv, start)


@numba.njit(cache=True)
def _soft_bwd(d, w, q, kv, n, start, values, sw, gv, gs, tau):
    P, K = w.shape
    gd = np.zeros((P, K))
    gw = np.zeros((P, K))
    for p in range(P):
        k = kv[p]
        i = start[p]
        for s in range(n):
            v = values[p, s]
            a = sw[p, s]
            for j in range(k):
                qj = q[i + j]
                glog = qj * ((d[p, j] - v) * gv[p, s] + (w[p, j] - a) * gs[p, s])
                gd[p, j] += qj * gv[p, s]
                gw[p, j] += qj * gs[p, s] + glog / (tau * w[p, j])
            i += k
    return gd, gw


class _GumbelSoft(torch.autograd.Function):
    """Soft samples sum_j p_j d_j and raw sample weights sum_j p_j w_j (fused).

    ``noise`` is either a dense (P, n, K) tensor or None, in which case the
    packed draws are generated from ``key``.
    """

    @staticmethod
    def forward(ctx, d, w, m, noise, tau, n, key):
        dn, wn, mn = d.detach().numpy(), w.detach().numpy(), m.numpy()
        nz = None if noise is None else np.ascontiguousarray(noise.numpy())
        probs, values, sw, packed = _soft_fwd(dn, wn, mn, int(n), float(tau), nz, key)
        ctx.save_for_backward(d, w)
        ctx.packed = packed
        ctx.buffers = (values, sw)
        ctx.tau, ctx.n = float(tau), int(n)
        probs_t = torch.from_numpy(probs)
        ctx.mark_non_differentiable(probs_t)
        return torch.from_numpy(values), torch.from_numpy(sw), probs_t

    @staticmethod
    def backward(ctx, gv, gs, gp):
        d, w = ctx.saved_tensors
        q, kv, start = ctx.packed
        values, sw = ctx.buffers
        gd, gw = _soft_bwd(d.detach().numpy(), w.detach().numpy(), q, kv, ctx.n, start, values, sw,
                           np.ascontiguousarray(gv.numpy()), np.ascontiguousarray(gs.numpy()),
                           ctx.tau)
        return torch.from_numpy(gd), torch.from_numpy(gw), None, None, None, None, None


def _soft_torch(d, w, m, noise, tau):
    """Reference path in plain torch ops."""
    w4 = w[:, None, :]
    m4 = m[:, None, :]
    logw = torch.log(torch.where(m4, w4, torch.ones_like(w4)))
    logits = torch.where(m4, (logw + noise) / tau, torch.full_like(noise, -torch.inf))
    valid = m.any(-1)
    logits = torch.where(valid[:, None, None], logits, torch.zeros_like(logits))
    probs = torch.where(valid[:, None, None], torch.softmax(logits, dim=-1),
                        torch.zeros_like(logits))
    values = (probs * d[:, None, :]).sum(-1)
    sw = (probs * w4).sum(-1)
    return values, sw, probs


def sample_depths(topk_depths, topk_weights, topk_valid, cfg: SamplerConfig, iteration=0,
                  noise=None, stream=0, backend="numba") -> DepthSamples:
    """Draw ``cfg.n`` soft depth samples per pixel.

    ``topk_*`` are (H, W, K) tensors as produced by the renderer.  Each sample
    uses fresh noise; the per-sample weight is the Gumbel-selected blend
    weight sum_j p_j w_j, renormalized over the samples of the pixel.
    """
    H, W, K = topk_weights.shape
    n = int(cfg.n)
    dtype = topk_weights.dtype
    valid = topk_valid.any(-1)
    tau = cfg.tau_at(iteration)
    d2 = topk_depths.reshape(-1, K).contiguous()
    w2 = topk_weights.reshape(-1, K).contiguous()
    m2 = topk_valid.reshape(-1, K).contiguous()
    if noise is None and cfg.deterministic:
        noise = torch.zeros(H, W, n, K, dtype=dtype)
    if noise is not None:
        noise = torch.as_tensor(noise, dtype=dtype).reshape(-1, n, K).contiguous()
    if backend == "numba" and dtype == torch.float64:
        key = None if noise is not None else _key(cfg.seed, iteration, stream)
        values, sw, probs = _GumbelSoft.apply(d2, w2, m2, noise, tau, n, key)
    else:
        if noise is None:
            noise = torch.from_numpy(gumbel_noise((H * W, n, K), cfg.seed, iteration, stream)).to(dtype)
        values, sw, probs = _soft_torch(d2, w2, m2, noise, tau)
    values, sw, probs = values.reshape(H, W, n), sw.reshape(H, W, n), probs.reshape(H, W, n, K)
    sw = sw / sw.sum(-1, keepdim=True).clamp(min=1e-300)
    zero = torch.zeros((), dtype=dtype)
    values = torch.where(valid[..., None], values, zero)
    sw = torch.where(valid[..., None], sw, zero)
    return DepthSamples(values=values, probs=probs, weights=sw, valid=valid)
