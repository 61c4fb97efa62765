"""Batched per-query guiding for the renderer.

Leaf mixtures are packed into padded arrays with all query-independent
conditioning blocks precomputed once per iteration (:class:`LeafTable`,
:class:`BsdfGuide`).  Per-bounce queries are processed in leaf-sorted groups
(:class:`GuideQueries`) through compiled per-lane kernels; product-mode
conditionals are materialized per lane as :class:`ConditionalBatch` arrays.
The object-level mixtures in :mod:`sdguide.mixture` implement the same
formulas in plain numpy and serve as the reference for these paths.
"""

from __future__ import annotations

import numpy as np

from . import _kernels, tangent
from .bsdf import BsdfModel
from .mixture import (
    LOG_TWO_PI,
    _gauss2_prepare,
    _logsumexp,
    clamp_spd_2x2,
    directional_product,
    directional_rotate,
    prune_top_k,
)
from .spatial import COMPONENTS_PER_LEAF, SpatialTree

EMPTY_LOG_FLOOR = np.log(1e-300)


def _pack_chol(chol):
    return np.stack([chol[..., 0, 0], chol[..., 1, 0], chol[..., 1, 1]], axis=-1)


def _pack_inv(inv):
    return np.stack([inv[..., 0, 0], inv[..., 0, 1], inv[..., 1, 1]], axis=-1)


class ConditionalBatch:
    """Per-query directional mixtures as struct-of-arrays (lane-major).

    ``log_w`` is normalized per lane (-inf padding allowed); ``valid`` marks
    lanes whose conditional carries any support at all.
    """

    def __init__(self, log_w, anchors, offsets, cov, valid, marginal=None,
                 prepared=None):
        self.log_w = np.ascontiguousarray(log_w)
        self.anchors = np.ascontiguousarray(anchors)
        self.offsets = np.ascontiguousarray(offsets)
        self.cov = cov
        self.valid = valid
        self.marginal = marginal
        if prepared is None:
            safe = np.where(np.isfinite(log_w[..., None, None]), cov, np.eye(2))
            prepared = _gauss2_prepare(clamp_spd_2x2(safe))
        chol, inv, logdet = prepared
        self.chol3 = np.ascontiguousarray(_pack_chol(chol))
        self.inv3 = np.ascontiguousarray(_pack_inv(inv))
        self.logdet = np.ascontiguousarray(
            np.broadcast_to(logdet, self.log_w.shape)
        )

    @property
    def n_queries(self):
        return self.log_w.shape[0]

    def sample(self, u, z):
        """One direction per lane; rejected entries left their chart."""
        n = self.n_queries
        dirs = np.empty((n, 3))
        ok = np.empty(n, dtype=np.bool_)
        _kernels.sample_any(
            self.log_w, self.offsets, self.anchors, self.chol3,
            u, np.ascontiguousarray(z[:, 0]), np.ascontiguousarray(z[:, 1]),
            dirs, ok,
        )
        return dirs, ok & self.valid

    def pdf(self, dirs):
        """Solid-angle density at one direction per lane (0 when invalid)."""
        out = np.empty(self.n_queries)
        _kernels.pdf_any(
            self.log_w, self.offsets, self.anchors, self.inv3, self.logdet,
            np.ascontiguousarray(dirs), out,
        )
        return np.where(self.valid, out, 0.0)

    def rotate(self, rotations):
        """Rotate each lane's mixture by its own 3x3 rotation."""
        _, anchors, offsets, cov = directional_rotate(
            None, self.anchors, self.offsets, self.cov, rotations
        )
        return ConditionalBatch(self.log_w, anchors, offsets, cov, self.valid, self.marginal)

    def prune(self, k=2):
        idx = prune_top_k(self.log_w, k)
        lw = np.take_along_axis(self.log_w, idx, axis=-1)
        lw = lw - _logsumexp(lw, axis=-1)[..., None]
        return ConditionalBatch(
            lw,
            np.take_along_axis(self.anchors, idx[..., None], axis=-2),
            np.take_along_axis(self.offsets, idx[..., None], axis=-2),
            np.take_along_axis(self.cov, idx[..., None, None], axis=-3),
            self.valid,
            self.marginal,
        )


class LeafTable:
    """Padded per-leaf mixture arrays with precomputed conditioning blocks."""

    def __init__(self, tree: SpatialTree):
        self.tree = tree
        L, K = tree.n_leaves, COMPONENTS_PER_LEAF
        self.valid = np.zeros(L, dtype=bool)
        self.log_w = np.full((L, K), -np.inf)
        self.anchors = np.zeros((L, K, 3))
        self.anchors[..., 2] = 1.0
        self.means = np.zeros((L, K, 3))
        self.sxx_logdet = np.zeros((L, K))
        self.cond_cov = np.tile(np.eye(2), (L, K, 1, 1))
        self._ixx = np.zeros((L, K, 6))
        self._ixx[..., :3] = 1.0
        self._gain = np.zeros((L, K, 6))
        for i, leaf in enumerate(tree.leaves):
            if not leaf.initialized:
                continue
            mix = leaf.mixture
            self.valid[i] = True
            self.log_w[i] = mix.log_weights
            self.anchors[i] = mix.anchors[:, 0, :]
            self.means[i] = mix.euclid_means
            sdd = mix.cov[:, :2, :2]
            sdx = mix.cov[:, :2, 2:]
            sxx = mix.cov[:, 2:, 2:]
            sxx_inv = np.linalg.inv(sxx)
            self.sxx_logdet[i] = np.linalg.slogdet(sxx)[1]
            gain = np.einsum("kij,kjl->kil", sdx, sxx_inv)
            self.cond_cov[i] = clamp_spd_2x2(
                sdd - np.einsum("kij,klj->kil", gain, sdx)
            )
            self._ixx[i] = np.stack(
                [sxx_inv[:, 0, 0], sxx_inv[:, 1, 1], sxx_inv[:, 2, 2],
                 sxx_inv[:, 0, 1], sxx_inv[:, 0, 2], sxx_inv[:, 1, 2]], axis=-1,
            )
            self._gain[i] = gain.reshape(K, 6)
        chol, inv, logdet = _gauss2_prepare(self.cond_cov)
        self.cond_logdet = logdet
        self.cond_chol3 = np.ascontiguousarray(_pack_chol(chol))
        self.cond_inv3 = np.ascontiguousarray(_pack_inv(inv))

    def lookup(self, unit_positions):
        return self.tree.lookup(unit_positions)

    def condition(self, leaf_ids, unit_positions) -> ConditionalBatch:
        """Per-query conditional mixtures (gathered form, for tests and small
        batches; the renderer uses :class:`GuideQueries` instead)."""
        q = GuideQueries(self, unit_positions, leaf_ids=np.asarray(leaf_ids))
        lid = np.asarray(leaf_ids)
        return ConditionalBatch(
            q.log_w[q.inverse], self.anchors[lid], q.offsets[q.inverse],
            self.cond_cov[lid], q.valid, marginal=q.marginal,
        )


class GuideQueries:
    """Per-bounce guiding queries, processed in leaf-sorted groups.

    Grouping lets leaf-constant arrays broadcast across each group instead of
    being gathered per query.  Public inputs and outputs use the caller's
    original lane order; ``log_w``/``offsets`` are kept in sorted order
    internally.
    """

    def __init__(self, table: LeafTable, unit_positions, product_ctx=None,
                 leaf_ids=None):
        self.table = table
        n = unit_positions.shape[0]
        if leaf_ids is None:
            leaf_ids = table.lookup(unit_positions)
        order = np.argsort(leaf_ids, kind="stable")
        self.order = order
        self.inverse = np.empty(n, dtype=np.int64)
        self.inverse[order] = np.arange(n)
        self.leaf_ids = leaf_ids
        sorted_ids = leaf_ids[order]
        x = np.ascontiguousarray(unit_positions[order])
        uniq, starts = np.unique(sorted_ids, return_index=True)
        bounds = np.append(starts, n)
        self.groups = [
            (int(uniq[i]), slice(int(bounds[i]), int(bounds[i + 1])))
            for i in range(len(uniq))
        ]

        K = table.log_w.shape[1]
        self.log_w = np.full((n, K), -np.inf)
        self.offsets = np.zeros((n, K, 2))
        self._marginal_sorted = np.zeros(n)
        valid_sorted = np.zeros(n, dtype=bool)
        for leaf, sl in self.groups:
            if not table.valid[leaf]:
                continue
            _kernels.condition_group(
                x[sl], table.means[leaf], table._ixx[leaf], table._gain[leaf],
                table.log_w[leaf], table.sxx_logdet[leaf],
                self.log_w[sl], self.offsets[sl], valid_sorted[sl],
            )
        self._x_sorted = x
        self._valid_sorted = valid_sorted
        self.valid = valid_sorted[self.inverse]

        self.product = None
        if product_ctx is not None:
            self.product = self._build_product(product_ctx)
            self._valid_sorted = self.product.valid
            self.valid = self.product.valid[self.inverse]

    @property
    def marginal(self):
        """Spatial marginal likelihood per lane (lane order); computed lazily
        for diagnostics and tests."""
        out = np.zeros(self.log_w.shape[0])
        table = self.table
        x = self._x_sorted
        for leaf, sl in self.groups:
            if not table.valid[leaf]:
                continue
            nu = x[sl, None, :] - table.means[leaf][None]
            dx, dy, dz = nu[..., 0], nu[..., 1], nu[..., 2]
            ixx = table._ixx[leaf]
            quad = (
                ixx[..., 0] * dx * dx + ixx[..., 1] * dy * dy + ixx[..., 2] * dz * dz
                + 2.0 * (ixx[..., 3] * dx * dy + ixx[..., 4] * dx * dz + ixx[..., 5] * dy * dz)
            )
            lw = table.log_w[leaf][None] - 0.5 * (
                3 * LOG_TWO_PI + table.sxx_logdet[leaf][None] + quad
            )
            out[sl] = np.exp(_logsumexp(lw, axis=-1))
        out[~self._valid_sorted] = 0.0
        return out[self.inverse]

    def _build_product(self, ctx) -> ConditionalBatch:
        """Per-lane product conditionals (sorted order)."""
        wo_local, frames, mat_ids, materials, guides = ctx
        n = self._x_sorted.shape[0]
        wo_s = wo_local[self.order]
        fr_s = frames[self.order]
        mat_s = mat_ids[self.order]
        K = 2
        lw = np.full((n, K), -np.inf)
        anchors = np.zeros((n, K, 3))
        anchors[..., 2] = 1.0
        offsets = np.zeros((n, K, 2))
        cov = np.tile(np.eye(2), (n, K, 1, 1))
        bvalid = np.zeros(n, dtype=bool)
        for mid in np.unique(mat_s):
            sel = mat_s == mid
            guide = guides[mid]
            params = np.broadcast_to(
                materials[mid].params, (int(sel.sum()), guide.n_params)
            )
            c = guide.condition(wo_s[sel], params).prune(K)
            lw[sel] = c.log_w
            anchors[sel] = c.anchors
            offsets[sel] = c.offsets
            cov[sel] = c.cov
            bvalid[sel] = c.valid
        bsdf_world = ConditionalBatch(lw, anchors, offsets, cov, bvalid).rotate(
            np.swapaxes(fr_s, -1, -2)
        )

        Kr = self.log_w.shape[1]
        prod_lw = np.full((n, Kr * K), -np.inf)
        prod_anchor = np.zeros((n, Kr * K, 3))
        prod_anchor[..., 2] = 1.0
        prod_off = np.zeros((n, Kr * K, 2))
        prod_cov = np.tile(np.eye(2), (n, Kr * K, 1, 1))
        table = self.table
        for leaf, sl in self.groups:
            if not table.valid[leaf]:
                continue
            lw_g, an_g, off_g, cov_g = directional_product(
                self.log_w[sl], table.anchors[leaf][None],
                self.offsets[sl], table.cond_cov[leaf][None],
                bsdf_world.log_w[sl], bsdf_world.anchors[sl],
                bsdf_world.offsets[sl], bsdf_world.cov[sl],
            )
            prod_lw[sl] = lw_g
            prod_anchor[sl] = an_g
            prod_off[sl] = off_g
            prod_cov[sl] = cov_g
        norm = _logsumexp(prod_lw, axis=-1)
        pvalid = self._valid_sorted & bsdf_world.valid & np.isfinite(norm)
        prod_lw = prod_lw - np.where(np.isfinite(norm), norm, 0.0)[:, None]
        return ConditionalBatch(prod_lw, prod_anchor, prod_off, prod_cov, pvalid)

    # -- public (original-order) API -----------------------------------------

    def sample(self, u, z):
        """Draw one direction per lane; ``(dirs, accepted)`` in lane order."""
        u_s = np.ascontiguousarray(u[self.order])
        z_s = z[self.order]
        if self.product is not None:
            dirs_s, ok_s = self.product.sample(u_s, z_s)
            return dirs_s[self.inverse], ok_s[self.inverse]
        n = u_s.shape[0]
        z0 = np.ascontiguousarray(z_s[:, 0])
        z1 = np.ascontiguousarray(z_s[:, 1])
        dirs = np.zeros((n, 3))
        dirs[:, 2] = 1.0
        ok = np.zeros(n, dtype=np.bool_)
        table = self.table
        for leaf, sl in self.groups:
            if not table.valid[leaf]:
                continue
            _kernels.sample_group(
                self.log_w[sl], self.offsets[sl], table.anchors[leaf],
                table.cond_chol3[leaf], u_s[sl], z0[sl], z1[sl],
                dirs[sl], ok[sl],
            )
        ok &= self._valid_sorted
        return dirs[self.inverse], ok[self.inverse]

    def pdf(self, dirs):
        """Solid-angle guide pdf at one direction per lane (lane order)."""
        d_s = np.ascontiguousarray(dirs[self.order])
        if self.product is not None:
            return self.product.pdf(d_s)[self.inverse]
        out = np.zeros(d_s.shape[0])
        table = self.table
        for leaf, sl in self.groups:
            if not table.valid[leaf]:
                continue
            _kernels.pdf_group(
                self.log_w[sl], self.offsets[sl], table.anchors[leaf],
                table.cond_inv3[leaf], table.cond_logdet[leaf], d_s[sl],
                out[sl],
            )
        out[~self._valid_sorted] = 0.0
        return out[self.inverse]


class BsdfGuide:
    """Per-query conditioning of a fitted BSDF model (shading frame)."""

    def __init__(self, model: BsdfModel):
        mix = model.mixture
        self.n_params = mix.n_euclid
        self.log_w = mix.log_weights
        self.anchors_in = mix.anchors[:, 0, :]
        self.anchors_out = mix.anchors[:, 1, :]
        self.param_means = mix.euclid_means
        db = 2 + self.n_params
        self.db = db
        saa = mix.cov[:, :2, :2]
        sab = mix.cov[:, :2, 2:]
        sbb = mix.cov[:, 2:, 2:]
        self.sbb_inv = np.linalg.inv(sbb)
        self.sbb_logdet = np.linalg.slogdet(sbb)[1]
        self.gain = np.einsum("kij,kjl->kil", sab, self.sbb_inv)
        self.cond_cov = clamp_spd_2x2(saa - np.einsum("kij,klj->kil", self.gain, sab))
        self.cond_prep = _gauss2_prepare(self.cond_cov)

    def condition(self, wo_local, params) -> ConditionalBatch:
        """Conditional over incident directions, one query per row."""
        n = wo_local.shape[0]
        nu_o, r_o, ok = tangent.log_map_masked(self.anchors_out[None], wo_local[:, None, :])
        if self.n_params:
            nu_b = np.concatenate(
                [nu_o, params[:, None, :] - self.param_means[None]], axis=-1
            )
        else:
            nu_b = nu_o
        quad = np.einsum("nki,kij,nkj->nk", nu_b, self.sbb_inv, nu_b)
        log_like = (
            -0.5 * (self.db * LOG_TWO_PI + self.sbb_logdet[None] + quad)
            - np.log(tangent.sinc(r_o))
        )
        lw = np.where(ok, self.log_w[None] + log_like, -np.inf)
        top = np.max(lw, axis=-1)
        valid = np.isfinite(top) & (top >= EMPTY_LOG_FLOOR)
        norm = _logsumexp(lw, axis=-1)
        lw = lw - np.where(np.isfinite(norm), norm, 0.0)[..., None]
        offsets = np.einsum("kij,nkj->nki", self.gain, nu_b)
        cov = np.broadcast_to(self.cond_cov[None], (n,) + self.cond_cov.shape)
        anchors = np.broadcast_to(self.anchors_in[None], (n, lw.shape[1], 3))
        prepared = tuple(np.broadcast_to(p[None], (n,) + p.shape) for p in self.cond_prep)
        return ConditionalBatch(lw, anchors, offsets, cov, valid, prepared=prepared)
