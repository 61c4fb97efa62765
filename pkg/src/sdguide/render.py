"""Iterated unidirectional path tracer with online-trained guiding.

Rendering proceeds in fixed iterations of 4 spp.  During the first quarter of
the sample budget each iteration deposits its path vertices into the spatial
cache and ends with a refine / train / collapse pass; afterwards the cache is
frozen and only sampled.  Directions are drawn from the BSDF or from the
guiding conditional with a fixed probability and combined with the one-sample
balance heuristic, so the recorded pdf is always the full mixture pdf.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tangent
from .bsdf import BsdfModel
from .em import EmConfig
from .guiding import BsdfGuide, GuideQueries, LeafTable
from .images import mape
from .scene import HUGE, Scene
from .seeding import InitConfig
from .spatial import SpatialTree

MODES = ("off", "radiance", "product")
DEFAULT_BSDF_FRACTION = {"off": 1.0, "radiance": 0.5, "product": 0.3}
SPAWN_EPS = 1e-6
TILE_ROWS = 64
# cap on training-vertex weights: near-zero direction pdfs produce firefly
# estimates that are valid for the image but would dominate the cache's EM
# statistics; clamping training data does not touch the radiance estimator
DEPOSIT_WEIGHT_CAP = 1e6


class RenderError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    spp: int = 64
    mode: str = "radiance"
    seed: int = 0
    bsdf_fraction: float | None = None
    max_vertices: int = 10
    spp_per_iteration: int = 4
    iv_combine: bool = False
    threads: int = 1
    log_samples: int = 0  # keep up to this many guided-sample records

    def __post_init__(self):
        if self.mode not in MODES:
            raise RenderError(f"mode must be one of {MODES}")
        if self.spp <= 0 or self.spp % self.spp_per_iteration != 0:
            raise RenderError("spp must be a positive multiple of the iteration size")
        if self.bsdf_fraction is None:
            self.bsdf_fraction = DEFAULT_BSDF_FRACTION[self.mode]
        if not (0.0 < self.bsdf_fraction <= 1.0):
            raise RenderError("bsdf_fraction must lie in (0, 1]")

    @property
    def n_iterations(self):
        return self.spp // self.spp_per_iteration

    @property
    def train_iterations(self):
        if self.mode == "off":
            return 0
        return self.spp // (4 * self.spp_per_iteration)

    @classmethod
    def from_scene(cls, scene: Scene, **overrides):
        merged = dict(scene.integrator)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)


@dataclass
class IterationStats:
    iteration: int
    spp: int
    mape: float
    variance_median: float
    discard_rate: float
    leaf_count: int
    initialized_leaves: int
    render_time: float
    train_time: float


@dataclass
class RenderResult:
    image: np.ndarray
    stats: list[IterationStats]
    tree: SpatialTree
    cutoff_hash: str
    final_hash: str
    discard_rate: float
    sample_log: dict = field(default_factory=dict)
    variance_image: np.ndarray | None = None


def _luminance(rgb):
    return rgb.mean(axis=-1)


class Renderer:
    def __init__(self, scene: Scene, cfg: RenderConfig,
                 bsdf_models: dict[str, BsdfModel] | None = None,
                 tree: SpatialTree | None = None):
        self.scene = scene
        self.cfg = cfg
        self.materials, self.material_index = scene.material_table()
        self.emissions = np.stack([p.emission for p in scene.primitives])
        self.tree = tree if tree is not None else SpatialTree.build_initial(seed=cfg.seed)
        self.leaf_table = LeafTable(self.tree)
        self.bsdf_guides = None
        if cfg.mode == "product":
            models = bsdf_models or {}
            self.bsdf_guides = []
            for mat in self.materials:
                if mat.kind.name not in models:
                    raise RenderError(
                        f"product guiding needs a fitted model for BSDF kind "
                        f"{mat.kind.name!r}; create one with the fit-bsdf command"
                    )
                self.bsdf_guides.append(BsdfGuide(models[mat.kind.name]))
        self._log = {"positions": [], "directions": [], "pdfs": [], "leaves": []}
        self._logged = 0
        self._log_lock = threading.Lock()
        self.dropped_vertices = 0

    # -- public -------------------------------------------------------------

    def render(self, reference=None) -> RenderResult:
        cfg = self.cfg
        cam = self.scene.camera
        H, W, S = cam.height, cam.width, cfg.spp_per_iteration
        n_iter = cfg.n_iterations
        cutoff = cfg.train_iterations

        post_sum = np.zeros((H, W, 3))
        post_n = 0
        iv_sum = np.zeros((H, W, 3))
        iv_weight = 0.0
        cum_sum = np.zeros((H, W, 3))
        var_sum = np.zeros((H, W))
        stats: list[IterationStats] = []
        discard_total = 0
        lane_total = 0
        cutoff_hash = ""

        tiles = [(r, min(r + TILE_ROWS, H)) for r in range(0, H, TILE_ROWS)]
        pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
        try:
            for it in range(n_iter):
                t0 = time.perf_counter()
                training = it < cutoff
                if training:
                    self.tree.begin_iteration()

                def run_tile(ti):
                    return self._trace_tile(it, ti, tiles[ti], training)

                if pool is not None:
                    results = list(pool.map(run_tile, range(len(tiles))))
                else:
                    results = [run_tile(ti) for ti in range(len(tiles))]

                img = np.zeros((H, W, 3))
                var = np.zeros((H, W))
                lit = np.zeros((H, W), dtype=bool)
                deposits = []
                n_discard = 0
                n_lanes = 0
                for (r0, r1), res in zip(tiles, results):
                    img[r0:r1] = res["image"]
                    var[r0:r1] = res["variance"]
                    lit[r0:r1] = res["lit"]
                    n_discard += res["discards"]
                    n_lanes += res["lanes"]
                    self.dropped_vertices += res["dropped"]
                    if res["deposit"] is not None:
                        deposits.append(res["deposit"])
                render_time = time.perf_counter() - t0

                t1 = time.perf_counter()
                train_time = 0.0
                if training:
                    if deposits:
                        all_dep = np.concatenate(deposits, axis=0)
                        self.tree.deposit(
                            all_dep[:, 0:3], all_dep[:, 3:6], all_dep[:, 6:9],
                            all_dep[:, 9], rng_key=cfg.seed + it,
                        )
                    self.tree.refine()
                    self.tree.train_leaves(EmConfig(), InitConfig(), iteration=it)
                    self.tree.collapse()
                    self.leaf_table = LeafTable(self.tree)
                    train_time = time.perf_counter() - t1
                    if it == cutoff - 1:
                        cutoff_hash = hashlib.sha256(self.tree.checkpoint()).hexdigest()

                cum_sum += img
                var_sum += var
                discard_total += n_discard
                lane_total += n_lanes
                if it >= cutoff:
                    post_sum += img
                    post_n += 1
                w_iv = 1.0 / max(float(np.mean(var)), 1e-12)
                iv_sum += w_iv * img
                iv_weight += w_iv

                err = float("nan")
                if reference is not None:
                    err = mape(cum_sum / (it + 1), reference)
                init_leaves = sum(1 for lf in self.tree.leaves if lf.initialized)
                # median sample variance over pixels that saw any light this
                # iteration (the all-black rest would pin the median to zero
                # on hard scenes)
                var_median = float(np.median(var[lit])) if lit.any() else 0.0
                stats.append(IterationStats(
                    iteration=it,
                    spp=(it + 1) * S,
                    mape=err,
                    variance_median=var_median,
                    discard_rate=n_discard / max(n_lanes, 1),
                    leaf_count=self.tree.n_leaves,
                    initialized_leaves=init_leaves,
                    render_time=render_time,
                    train_time=train_time,
                ))
        finally:
            if pool is not None:
                pool.shutdown()

        if cfg.iv_combine:
            image = iv_sum / max(iv_weight, 1e-300)
        elif post_n > 0:
            image = post_sum / post_n
        else:
            image = cum_sum / n_iter
        final_hash = hashlib.sha256(self.tree.checkpoint()).hexdigest()
        if not cutoff_hash:
            cutoff_hash = final_hash
        sample_log = {k: (np.concatenate(v) if v else np.empty((0,))) for k, v in self._log.items()}
        return RenderResult(
            image=image,
            stats=stats,
            tree=self.tree,
            cutoff_hash=cutoff_hash,
            final_hash=final_hash,
            discard_rate=discard_total / max(lane_total, 1),
            sample_log=sample_log,
            variance_image=var_sum / n_iter,
        )

    # -- tracing --------------------------------------------------------------

    def _trace_tile(self, iteration, tile_index, rows, training):
        cfg = self.cfg
        cam = self.scene.camera
        r0, r1 = rows
        S = cfg.spp_per_iteration
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, iteration, tile_index])
        )
        jitter = rng.random((r1 - r0, cam.width, S, 2))
        o, d = cam.primary_rays(jitter, row0=r0)
        n = o.shape[0]
        B = cfg.max_vertices

        rec_emit = np.zeros((B, n, 3))
        rec_ratio = np.zeros((B, n, 3))
        rec_pdf = np.ones((B, n))
        rec_active = np.zeros((B, n), dtype=bool)
        rec_pos = np.zeros((B, n, 3)) if training else None
        rec_dir = np.zeros((B, n, 3)) if training else None
        rec_norm = np.zeros((B, n, 3)) if training else None

        alive = np.ones(n, dtype=bool)
        discards = 0
        guide_on = cfg.mode != "off"

        for b in range(B):
            if not alive.any():
                break
            t, prim, pos, n_geo = self.scene.intersect(o, d)
            hit = alive & (prim >= 0) & (t < HUGE)
            miss = alive & ~hit

            if self.scene.environment is not None and miss.any():
                rec_emit[b, miss] = self.scene.environment
            if hit.any():
                front = np.einsum("ni,ni->n", d, n_geo) < 0.0
                emitting = hit & front & (self.emissions[np.maximum(prim, 0)].sum(axis=1) > 0)
                rec_emit[b, emitting] = self.emissions[prim[emitting]]

            alive = hit
            if not alive.any():
                break

            # shading frame on the side the ray arrived from
            sign = np.where(np.einsum("ni,ni->n", d, n_geo) < 0.0, 1.0, -1.0)
            n_shade = n_geo * sign[:, None]
            frame = tangent.orthonormal_frame(n_shade)  # rows s, t, n
            wo_local = np.einsum("nij,nj->ni", frame, -d)

            wi_world, pdf_total, f_cos, used_guide, lost = self._sample_directions(
                pos, wo_local, frame, prim, alive, rng, guide_on,
                allow_log=not training,
            )
            discards += int(np.count_nonzero(lost))
            alive = alive & ~lost

            ratio = np.where(pdf_total[:, None] > 0.0, f_cos / np.maximum(pdf_total, 1e-300)[:, None], 0.0)
            live_ratio = _luminance(ratio) > 0.0
            cont = alive & (pdf_total > 0.0)

            rec_active[b] = cont
            rec_pdf[b] = np.where(cont, pdf_total, 1.0)
            rec_ratio[b, cont] = ratio[cont]
            if training:
                rec_pos[b] = pos
                rec_dir[b] = wi_world
                rec_norm[b] = n_shade

            alive = cont & live_ratio
            off_sign = np.sign(np.einsum("ni,ni->n", wi_world, n_geo))
            o = pos + n_geo * (SPAWN_EPS * off_sign)[:, None]
            d = wi_world

        # backward sweep: radiance toward the camera plus per-vertex weights
        L = np.zeros((n, 3))
        ws = np.zeros((B, n))
        for b in reversed(range(B)):
            ws[b] = _luminance(L) / rec_pdf[b]
            L = rec_emit[b] + rec_ratio[b] * L

        deposit = None
        dropped = 0
        if training:
            mask = rec_active & np.isfinite(ws)
            dropped = int(np.count_nonzero(rec_active & ~np.isfinite(ws)))
            if mask.any():
                rows_ = []
                for b in range(B):
                    m = mask[b]
                    if not m.any():
                        continue
                    rows_.append(np.concatenate([
                        self.scene.to_unit(rec_pos[b, m]),
                        rec_dir[b, m],
                        rec_norm[b, m],
                        np.minimum(ws[b, m], DEPOSIT_WEIGHT_CAP)[:, None],
                    ], axis=1))
                deposit = np.concatenate(rows_, axis=0) if rows_ else None

        img = L.reshape(r1 - r0, cam.width, S, 3)
        lum = _luminance(img)
        variance = lum.var(axis=-1, ddof=1) if S > 1 else np.zeros(lum.shape[:-1])
        return {
            "image": img.mean(axis=2),
            "variance": variance,
            "lit": lum.sum(axis=-1) > 0.0,
            "deposit": deposit,
            "discards": discards,
            "dropped": dropped,
            "lanes": n,
        }

    def _sample_directions(self, pos, wo_local, frame, prim, alive, rng, guide_on,
                           allow_log=False):
        """Choose directions for all alive lanes.

        Returns world directions, combined pdf, f*cos (RGB), a mask of lanes
        that used the guide, and a mask of lanes lost to chart discards.
        Sample logging happens only when allowed (post-training iterations,
        where the cache matches the final frozen state).
        """
        cfg = self.cfg
        n = pos.shape[0]
        u_tech = rng.random(n)
        u_mat = rng.random((n, 3))
        mat_ids = self.material_index[np.maximum(prim, 0)]

        wi_local = np.zeros((n, 3))
        wi_local[:, 2] = 1.0
        pdf_bsdf = np.zeros(n)
        for mid in np.unique(mat_ids[alive]):
            sel = alive & (mat_ids == mid)
            wi_s, pdf_s = self.materials[mid].sample(wo_local[sel], u_mat[sel])
            wi_local[sel] = wi_s
            pdf_bsdf[sel] = pdf_s

        lost = np.zeros(n, dtype=bool)
        used_guide = np.zeros(n, dtype=bool)
        if guide_on:
            u_comp = rng.random(n)
            z = rng.standard_normal((n, 2))
            unit = self.scene.to_unit(pos)
            product_ctx = None
            if cfg.mode == "product":
                product_ctx = (wo_local, frame, mat_ids, self.materials, self.bsdf_guides)
            cond = GuideQueries(self.leaf_table, unit, product_ctx=product_ctx)
            want_guide = alive & (u_tech >= cfg.bsdf_fraction) & cond.valid
            dirs_g, accepted = cond.sample(u_comp, z)
            lost = want_guide & ~accepted
            used_guide = want_guide & accepted
            wi_world = np.einsum("nji,nj->ni", frame, wi_local)
            wi_world[used_guide] = dirs_g[used_guide]
            wi_local = np.where(
                used_guide[:, None],
                np.einsum("nij,nj->ni", frame, wi_world),
                wi_local,
            )
            pdf_guide = cond.pdf(wi_world)
            for mid in np.unique(mat_ids[used_guide]):
                sel = used_guide & (mat_ids == mid)
                pdf_bsdf[sel] = self.materials[mid].pdf(wi_local[sel], wo_local[sel])
            pdf_total = np.where(
                cond.valid & alive,
                cfg.bsdf_fraction * pdf_bsdf + (1.0 - cfg.bsdf_fraction) * pdf_guide,
                pdf_bsdf,
            )
            if allow_log:
                self._maybe_log(unit, wi_world, pdf_guide, cond.leaf_ids, used_guide)
        else:
            wi_world = np.einsum("nji,nj->ni", frame, wi_local)
            pdf_total = pdf_bsdf

        f = np.zeros((n, 3))
        for mid in np.unique(mat_ids[alive]):
            sel = alive & (mat_ids == mid)
            f[sel] = self.materials[mid].eval(wi_local[sel], wo_local[sel])
        f_cos = f * np.maximum(wi_local[:, 2], 0.0)[:, None]
        return wi_world, pdf_total, f_cos, used_guide, lost

    def _maybe_log(self, unit, dirs, pdf_guide, leaf_ids, used_guide):
        cap = self.cfg.log_samples
        if cap <= 0 or self._logged >= cap:
            return
        if not used_guide.any():
            return
        with self._log_lock:
            room = cap - self._logged
            if room <= 0:
                return
            idx = np.flatnonzero(used_guide)[:room]
            self._log["positions"].append(unit[idx].copy())
            self._log["directions"].append(dirs[idx].copy())
            self._log["pdfs"].append(pdf_guide[idx].copy())
            self._log["leaves"].append(leaf_ids[idx].copy())
            self._logged += idx.shape[0]


def render_scene(scene: Scene, cfg: RenderConfig,
                 bsdf_models: dict[str, BsdfModel] | None = None,
                 reference=None, tree: SpatialTree | None = None) -> RenderResult:
    """Render a scene; thread count may be overridden by SDGUIDE_THREADS."""
    env_threads = os.environ.get("SDGUIDE_THREADS")
    if env_threads and cfg.threads == 1:
        cfg.threads = max(1, int(env_threads))
    return Renderer(scene, cfg, bsdf_models, tree=tree).render(reference=reference)
