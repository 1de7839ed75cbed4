"""Attention-based fusion of per-point color and geometry features.

Two residual update blocks share one set of query/key/value projections:
the within-modality block weights each modality's values by its own
attention map, the cross-modality block swaps the attention maps so each
modality is re-weighted by the other's. Strategies compose the blocks in
parallel or in sequence and concatenate the result per point.

All residual adds carry learnable scalar gains initialized to exactly
zero, so an untrained stack is the identity on its inputs and every
strategy collapses to plain concatenation.
"""

from __future__ import annotations

import numpy as np

from .ops import Linear, Parameter, linear_project, linear_project_backward, row_softmax, row_softmax_backward

STRATEGIES = ("concat", "intra_only", "inter_only", "fuse_v1", "fuse_v2", "fuse_v3")


class FeaturePair:
    """Per-point color features (N, d_rgb) and geometry features (N, d_dep)."""

    __slots__ = ("color", "geom")

    def __init__(self, color, geom):
        color = np.asarray(color, dtype=np.float64)
        geom = np.asarray(geom, dtype=np.float64)
        if color.ndim != 2 or geom.ndim != 2:
            raise ValueError("FeaturePair members must be 2-D")
        if color.shape[0] != geom.shape[0]:
            raise ValueError(
                f"FeaturePair point counts disagree: {color.shape[0]} vs {geom.shape[0]}"
            )
        if color.shape[1] < 1 or geom.shape[1] < 1:
            raise ValueError("FeaturePair widths must be >= 1")
        self.color = color
        self.geom = geom

    @property
    def n(self):
        return self.color.shape[0]


class CorrelationParams:
    """Shared projection set plus residual gains for both update blocks.

    Six per-point affine projections (query/key/value per modality) all map
    into the common width d; the residual add only typechecks when d equals
    the input feature widths, so d = d_rgb = d_dep here. The four gains are
    zero at init, making every block an exact identity before training.
    """

    def __init__(self, d, rng, name="corr"):
        self.d = d
        scale = np.sqrt(1.0 / d)
        self.color_q = Linear(d, d, rng, f"{name}.color_q", scale=scale)
        self.color_k = Linear(d, d, rng, f"{name}.color_k", scale=scale)
        self.color_v = Linear(d, d, rng, f"{name}.color_v", scale=scale)
        self.geom_q = Linear(d, d, rng, f"{name}.geom_q", scale=scale)
        self.geom_k = Linear(d, d, rng, f"{name}.geom_k", scale=scale)
        self.geom_v = Linear(d, d, rng, f"{name}.geom_v", scale=scale)
        # gain_color_self scales the color update driven by color attention;
        # gain_color_cross scales the color update driven by geometry attention.
        self.gain_color_self = Parameter(np.zeros(1), f"{name}.gain_color_self")
        self.gain_geom_self = Parameter(np.zeros(1), f"{name}.gain_geom_self")
        self.gain_color_cross = Parameter(np.zeros(1), f"{name}.gain_color_cross")
        self.gain_geom_cross = Parameter(np.zeros(1), f"{name}.gain_geom_cross")

    def projections(self):
        return [self.color_q, self.color_k, self.color_v, self.geom_q, self.geom_k, self.geom_v]

    def gains(self):
        return [self.gain_color_self, self.gain_geom_self, self.gain_color_cross, self.gain_geom_cross]

    def parameters(self):
        return [p for lin in self.projections() for p in lin.parameters()] + self.gains()

    def clone_shared(self):
        c = CorrelationParams.__new__(CorrelationParams)
        c.d = self.d
        for attr in ("color_q", "color_k", "color_v", "geom_q", "geom_k", "geom_v"):
            setattr(c, attr, getattr(self, attr).clone_shared())
        for attr in ("gain_color_self", "gain_geom_self", "gain_color_cross", "gain_geom_cross"):
            setattr(c, attr, getattr(self, attr).clone_shared())
        return c


def _check_widths(pair, params):
    d = params.d
    if pair.color.shape[1] != d or pair.geom.shape[1] != d:
        raise ValueError(
            f"feature widths {pair.color.shape[1]}/{pair.geom.shape[1]} "
            f"must equal the projection width {d}"
        )


# ---------------------------------------------------------------------------
# one attention block, covering the within-, cross-, and parallel variants


def _block_forward(pair, params, use_self, use_cross):
    """Project, attend, and apply the selected residual updates.

    The parallel strategy uses both update families computed from the same
    original pair, which is why one projection pass serves all variants.
    """
    _check_widths(pair, params)
    c, g = pair.color, pair.geom
    cq = linear_project(c, params.color_q.w, params.color_q.b)
    ck = linear_project(c, params.color_k.w, params.color_k.b)
    cv = linear_project(c, params.color_v.w, params.color_v.b)
    gq = linear_project(g, params.geom_q.w, params.geom_q.b)
    gk = linear_project(g, params.geom_k.w, params.geom_k.b)
    gv = linear_project(g, params.geom_v.w, params.geom_v.b)
    a_c = row_softmax(cq @ ck.T)
    a_g = row_softmax(gq @ gk.T)

    out_c, out_g = c, g
    cache = {
        "pair": pair, "cq": cq, "ck": ck, "cv": cv, "gq": gq, "gk": gk, "gv": gv,
        "a_c": a_c, "a_g": a_g, "use_self": use_self, "use_cross": use_cross,
    }
    if use_self:
        upd_c = a_c @ cv
        upd_g = a_g @ gv
        out_c = out_c + params.gain_color_self.value[0] * upd_c
        out_g = out_g + params.gain_geom_self.value[0] * upd_g
        cache["self_c"] = upd_c
        cache["self_g"] = upd_g
    if use_cross:
        upd_c = a_g @ cv
        upd_g = a_c @ gv
        out_c = out_c + params.gain_color_cross.value[0] * upd_c
        out_g = out_g + params.gain_geom_cross.value[0] * upd_g
        cache["cross_c"] = upd_c
        cache["cross_g"] = upd_g
    return FeaturePair(out_c, out_g), cache


def _block_backward(cache, params, grad_c, grad_g):
    """Backward through one block; returns gradients w.r.t. the input pair."""
    pair = cache["pair"]
    c, g = pair.color, pair.geom
    cq, ck, cv = cache["cq"], cache["ck"], cache["cv"]
    gq, gk, gv = cache["gq"], cache["gk"], cache["gv"]
    a_c, a_g = cache["a_c"], cache["a_g"]

    gc_in = grad_c.copy()  # identity path of the residual add
    gg_in = grad_g.copy()
    da_c = None
    da_g = None
    dcv = None
    dgv = None

    def acc(base, term):
        return term if base is None else base + term

    if cache["use_self"]:
        params.gain_color_self.grad[0] += float((grad_c * cache["self_c"]).sum())
        params.gain_geom_self.grad[0] += float((grad_g * cache["self_g"]).sum())
        gu_c = params.gain_color_self.value[0] * grad_c
        gu_g = params.gain_geom_self.value[0] * grad_g
        da_c = acc(da_c, gu_c @ cv.T)
        dcv = acc(dcv, a_c.T @ gu_c)
        da_g = acc(da_g, gu_g @ gv.T)
        dgv = acc(dgv, a_g.T @ gu_g)
    if cache["use_cross"]:
        params.gain_color_cross.grad[0] += float((grad_c * cache["cross_c"]).sum())
        params.gain_geom_cross.grad[0] += float((grad_g * cache["cross_g"]).sum())
        gu_c = params.gain_color_cross.value[0] * grad_c
        gu_g = params.gain_geom_cross.value[0] * grad_g
        da_g = acc(da_g, gu_c @ cv.T)
        dcv = acc(dcv, a_g.T @ gu_c)
        da_c = acc(da_c, gu_g @ gv.T)
        dgv = acc(dgv, a_c.T @ gu_g)

    if da_c is not None:
        dlog = row_softmax_backward(a_c, da_c)
        gc_in += linear_project_backward(c, params.color_q.w, params.color_q.b, dlog @ ck)
        gc_in += linear_project_backward(c, params.color_k.w, params.color_k.b, dlog.T @ cq)
    if da_g is not None:
        dlog = row_softmax_backward(a_g, da_g)
        gg_in += linear_project_backward(g, params.geom_q.w, params.geom_q.b, dlog @ gk)
        gg_in += linear_project_backward(g, params.geom_k.w, params.geom_k.b, dlog.T @ gq)
    if dcv is not None:
        gc_in += linear_project_backward(c, params.color_v.w, params.color_v.b, dcv)
    if dgv is not None:
        gg_in += linear_project_backward(g, params.geom_v.w, params.geom_v.b, dgv)
    return gc_in, gg_in


# ---------------------------------------------------------------------------
# public surface


def attention_maps(pair, params):
    """Row-stochastic attention maps (color, geometry), each N x N."""
    _check_widths(pair, params)
    cq = linear_project(pair.color, params.color_q.w, params.color_q.b)
    ck = linear_project(pair.color, params.color_k.w, params.color_k.b)
    gq = linear_project(pair.geom, params.geom_q.w, params.geom_q.b)
    gk = linear_project(pair.geom, params.geom_k.w, params.geom_k.b)
    return row_softmax(cq @ ck.T), row_softmax(gq @ gk.T)


def intra_modal_update(pair, params):
    """Residual update of each modality by its own attention map."""
    out, _ = _block_forward(pair, params, use_self=True, use_cross=False)
    return out


def cross_modal_update(pair, params):
    """Residual update of each modality by the other modality's attention map."""
    out, _ = _block_forward(pair, params, use_self=False, use_cross=True)
    return out


_PLANS = {
    "concat": (),
    "intra_only": ((True, False),),
    "inter_only": ((False, True),),
    "fuse_v1": ((True, True),),
    "fuse_v2": ((True, False), (False, True)),
    "fuse_v3": ((False, True), (True, False)),
}


def fuse_forward(pair, params, strategy):
    """Apply a fusion strategy; returns the N x (d_rgb + d_dep) map and a cache."""
    if strategy not in _PLANS:
        raise ValueError(f"unknown fusion strategy {strategy!r}; choose from {STRATEGIES}")
    caches = []
    cur = pair
    for use_self, use_cross in _PLANS[strategy]:
        cur, cache = _block_forward(cur, params, use_self, use_cross)
        caches.append(cache)
    fused = np.concatenate([cur.color, cur.geom], axis=1)
    return fused, (caches, pair.color.shape[1])


def fuse_backward(cache, params, grad_fused):
    """Backward through fuse_forward; returns (dL/dC, dL/dP) for the input pair."""
    caches, d_rgb = cache
    gc = grad_fused[:, :d_rgb]
    gg = grad_fused[:, d_rgb:]
    for block_cache in reversed(caches):
        gc, gg = _block_backward(block_cache, params, gc, gg)
    return gc, gg


def fuse(pair, params, strategy):
    """Fused per-point features, color columns first."""
    fused, _ = fuse_forward(pair, params, strategy)
    return fused
