"""Cross-checks between the compiled render-path guiding and the plain-numpy
object-level mixtures, which implement the same formulas independently."""

import numpy as np
import pytest

from sdguide.bsdf import fit_bsdf
from sdguide.em import EmConfig
from sdguide.guiding import BsdfGuide, GuideQueries, LeafTable
from sdguide.mixture import DirectionalMixture
from sdguide.seeding import InitConfig
from sdguide.spatial import SpatialTree
from sdguide import tangent


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def trained_tree():
    tree = SpatialTree.build_initial(seed=1)
    gen = np.random.default_rng(7)
    for it in range(4):
        tree.begin_iteration()
        n = 40_000
        pos = gen.random((n, 3))
        # directions correlated with position so conditionals vary spatially
        dirs = pos - 0.5 + 0.3 * gen.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        w = gen.random(n) + 0.05
        tree.deposit(pos, dirs, normals, w, rng_key=it)
        tree.refine()
        tree.train_leaves(EmConfig(), InitConfig(), iteration=it)
        tree.collapse()
    return tree


@pytest.fixture(scope="module")
def small_bsdf_model():
    return fit_bsdf("lambertian", seed=0, batches=48, batch_size=2048, polish_steps=1)


class TestLeafTableAgainstObjectLayer:
    def test_conditional_pdf_matches(self, trained_tree, rng):
        table = LeafTable(trained_tree)
        n = 400
        x = rng.random((n, 3))
        dirs = unit(rng, n)
        q = GuideQueries(table, x)
        fast = q.pdf(dirs)
        for i in range(0, n, 7):
            leaf = trained_tree.leaves[int(q.leaf_ids[i])]
            if not leaf.initialized:
                assert fast[i] == 0.0
                continue
            cond = leaf.mixture.condition(euclid=x[i])
            slow = cond.density(dirs[i][None])[0]
            assert fast[i] == pytest.approx(slow, rel=1e-9)

    def test_marginal_matches_object_layer(self, trained_tree, rng):
        table = LeafTable(trained_tree)
        n = 100
        x = rng.random((n, 3))
        q = GuideQueries(table, x)
        marg = q.marginal
        for i in range(0, n, 11):
            leaf = trained_tree.leaves[int(q.leaf_ids[i])]
            if not leaf.initialized or not q.valid[i]:
                continue
            cond = leaf.mixture.condition(euclid=x[i])
            assert marg[i] == pytest.approx(cond.marginal, rel=1e-9)

    def test_sampled_directions_have_consistent_pdf(self, trained_tree, rng):
        table = LeafTable(trained_tree)
        n = 4000
        x = rng.random((n, 3))
        q = GuideQueries(table, x)
        u = rng.random(n)
        z = rng.standard_normal((n, 2))
        dirs, ok = q.sample(u, z)
        p = q.pdf(dirs)
        assert np.all(p[ok] > 0)

    def test_condition_batch_equals_queries(self, trained_tree, rng):
        table = LeafTable(trained_tree)
        n = 200
        x = rng.random((n, 3))
        ids = table.lookup(x)
        batch = table.condition(ids, x)
        q = GuideQueries(table, x)
        dirs = unit(rng, n)
        assert np.allclose(batch.pdf(dirs), q.pdf(dirs), rtol=1e-12, atol=1e-300)


class TestBsdfGuideAgainstObjectLayer:
    def test_conditional_density_matches(self, small_bsdf_model, rng):
        guide = BsdfGuide(small_bsdf_model)
        n = 64
        wo = unit(rng, n)
        wo[:, 2] = np.abs(wo[:, 2])
        wo /= np.linalg.norm(wo, axis=1, keepdims=True)
        params = np.zeros((n, 0))
        batch = guide.condition(wo, params)
        dirs = unit(rng, n)
        fast = batch.pdf(dirs)
        for i in range(0, n, 5):
            cond = small_bsdf_model.condition(wo[i])
            assert fast[i] == pytest.approx(cond.density(dirs[i][None])[0], rel=1e-9)

    def test_prune_matches_object_layer(self, small_bsdf_model, rng):
        guide = BsdfGuide(small_bsdf_model)
        wo = np.array([[0.3, 0.1, np.sqrt(1 - 0.1)]])
        batch = guide.condition(wo, np.zeros((1, 0))).prune(2)
        obj = small_bsdf_model.condition(wo[0]).prune_top2()
        dirs = unit(rng, 40)
        fast = batch.pdf(np.broadcast_to(dirs[0], (1, 3)).copy())
        assert fast[0] == pytest.approx(obj.density(dirs[0][None])[0], rel=1e-9)


class TestProductAgainstObjectLayer:
    def test_product_pdf_matches(self, trained_tree, small_bsdf_model, rng):
        table = LeafTable(trained_tree)
        guide = BsdfGuide(small_bsdf_model)
        n = 60
        x = rng.random((n, 3))
        normals = unit(rng, n)
        frames = tangent.orthonormal_frame(normals)
        wo_world = unit(rng, n)
        flip = np.einsum("ni,ni->n", wo_world, normals) < 0
        wo_world[flip] -= 2 * np.einsum("ni,ni->n", wo_world[flip], normals[flip])[:, None] * normals[flip]
        wo_local = np.einsum("nij,nj->ni", frames, wo_world)
        mat_ids = np.zeros(n, dtype=np.int32)

        class FakeMat:
            params = np.zeros(0)

        q = GuideQueries(
            table, x,
            product_ctx=(wo_local, frames, mat_ids, [FakeMat()], [guide]),
        )
        dirs = unit(rng, n)
        fast = q.pdf(dirs)
        checked = 0
        for i in range(n):
            if not q.valid[i]:
                continue
            leaf = trained_tree.leaves[int(q.leaf_ids[i])]
            radiance = leaf.mixture.condition(euclid=x[i])
            bsdf_cond = small_bsdf_model.condition(wo_local[i]).prune_top2()
            world = bsdf_cond.rotate(frames[i].T)
            prod = radiance.product(world)
            assert fast[i] == pytest.approx(prod.density(dirs[i][None])[0], rel=1e-6)
            checked += 1
        assert checked >= 10

    def test_product_component_budget(self, trained_tree, small_bsdf_model, rng):
        leaf = next(l for l in trained_tree.leaves if l.initialized)
        radiance = leaf.mixture.condition(euclid=(leaf.lo + leaf.hi) / 2)
        bsdf_cond = small_bsdf_model.condition(np.array([0.0, 0.0, 1.0])).prune_top2()
        prod = radiance.product(bsdf_cond)
        assert prod.n_components <= 32
