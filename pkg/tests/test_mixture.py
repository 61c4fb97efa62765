import numpy as np
import pytest

from sdguide import tangent
from sdguide.mixture import (
    DirectionalMixture,
    EmptyConditionalError,
    EmptyProductError,
    MixtureError,
    TangentMixture,
    clamp_spd_2x2,
)


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def rotation(rng):
    ax = unit(rng, 1)[0]
    ang = rng.uniform(0.2, np.pi - 0.2)
    K = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K


def random_joint(rng, K=16, euclid_dim=3, dir_scale=0.3):
    anchors = unit(rng, K)[:, None, :]
    euclid = rng.random((K, euclid_dim))
    D = 2 + euclid_dim
    cov = np.zeros((K, D, D))
    for k in range(K):
        A = rng.normal(size=(D, D)) * 0.05
        cov[k] = A @ A.T
        cov[k, :2, :2] += dir_scale * np.eye(2)
        cov[k, 2:, 2:] += 0.02 * np.eye(euclid_dim)
    w = rng.random(K) + 0.1
    return TangentMixture(w / w.sum(), anchors, euclid, cov)


def random_directional(rng, K=4, radius=0.3, with_offsets=False):
    anchors = unit(rng, K)
    cov = np.zeros((K, 2, 2))
    for k in range(K):
        A = rng.normal(size=(2, 2)) * radius * 0.4
        cov[k] = A @ A.T + radius**2 * np.eye(2)
    off = rng.normal(size=(K, 2)) * 0.4 if with_offsets else np.zeros((K, 2))
    w = rng.random(K) + 0.2
    return DirectionalMixture(w / w.sum(), anchors, off, cov)


class TestTangentGaussianDensity:
    def test_standard_normal_at_origin(self):
        m = DirectionalMixture(
            np.array([1.0]), np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 2)),
            np.eye(2)[None],
        )
        # value at the anchor: metric factor is 1 and the Gaussian gives 1/(2 pi)
        assert m.density(np.array([[0.0, 0.0, 1.0]]))[0] == pytest.approx(1 / (2 * np.pi))

    def test_separable_diagonal_case(self):
        cov = np.diag([4.0, 1.0])[None]
        m = DirectionalMixture(
            np.array([1.0]), np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 2)), cov
        )
        # chart coords (2, 0): per-axis product e^{-1/2}/(2 pi * 2), times the
        # solid-angle factor 1/sinc(2)
        w = tangent.exp_map(np.array([0.0, 0.0, 1.0]), np.array([2.0, 0.0]))
        expected = np.exp(-0.5) / (2 * np.pi * 2.0) / tangent.sinc(2.0)
        assert m.density(w[None])[0] == pytest.approx(expected, rel=1e-12)

    def test_tangent_gaussian_integrates_to_one(self, rng):
        # Monte Carlo over the tangent plane, not the sphere
        cov = np.array([[[0.5, 0.1], [0.1, 0.3]]])
        m = DirectionalMixture(
            np.array([1.0]), np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 2)), cov
        )
        # importance sample from a wide uniform square
        half = 4.0
        pts = rng.uniform(-half, half, size=(1_000_000, 2))
        cinv = np.linalg.inv(cov[0])
        vals = np.exp(-0.5 * np.einsum("ni,ij,nj->n", pts, cinv, pts))
        vals /= 2 * np.pi * np.sqrt(np.linalg.det(cov[0]))
        integral = vals.mean() * (2 * half) ** 2
        assert integral == pytest.approx(1.0, rel=0.01)

    def test_non_spd_rejected(self):
        cov = np.array([[[1.0, 2.0], [2.0, 1.0]]])  # indefinite
        with pytest.raises(MixtureError):
            DirectionalMixture(
                np.array([1.0]), np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 2)), cov
            )


class TestSolidAngleDensity:
    def test_single_component_at_mean(self):
        anchors = np.array([[0.0, 0.0, 1.0]])
        cov = 0.2 * np.eye(2)[None]
        m = DirectionalMixture(np.array([1.0]), anchors, np.zeros((1, 2)), cov)
        expected = 1.0 / (2 * np.pi * np.sqrt(np.linalg.det(cov[0])))
        assert m.density(anchors)[0] == pytest.approx(expected, rel=1e-12)

    def test_mixture_mass_matches_chart_mass(self, rng):
        m = random_directional(rng, K=3, radius=0.9)
        dirs = unit(rng, 2_000_000)
        integral = m.density(dirs).mean() * 4 * np.pi
        _, kept = m.sample(500_000, rng)
        assert integral == pytest.approx(kept.mean(), abs=0.01)

    def test_symmetric_mixture_symmetric_density(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([-1.0, 0.0, 0.0])
        cov = np.tile(0.2 * np.eye(2), (2, 1, 1))
        m = DirectionalMixture(np.array([0.5, 0.5]), np.stack([a, b]), np.zeros((2, 2)), cov)
        w = np.array([[0.3, 0.5, np.sqrt(1 - 0.34)]])
        w_ref = w * np.array([-1.0, 1.0, 1.0])
        assert m.density(w)[0] == pytest.approx(m.density(w_ref)[0], rel=1e-9)

    def test_out_of_chart_component_contributes_zero(self):
        a = np.array([0.0, 0.0, 1.0])
        m = DirectionalMixture(
            np.array([0.5, 0.5]), np.stack([a, -a]), np.zeros((2, 2)),
            np.tile(1e-4 * np.eye(2), (2, 1, 1)),
        )
        # exactly antipodal to component 2's anchor: only component 1 counts
        d = m.density(a[None])[0]
        solo = DirectionalMixture(
            np.array([1.0]), a[None], np.zeros((1, 2)), 1e-4 * np.eye(2)[None]
        ).density(a[None])[0]
        assert d == pytest.approx(0.5 * solo, rel=1e-12)


class TestSampling:
    def test_tight_component_never_discards(self, rng):
        m = DirectionalMixture(
            np.array([1.0]), unit(rng, 1), np.zeros((1, 2)), 1e-4 * np.eye(2)[None]
        )
        _, ok = m.sample(1_000_000, rng)
        assert ok.all()

    def test_sampling_density_consistency_histogram(self, rng):
        from scipy import stats as sps

        m = random_directional(rng, K=4, radius=0.5)
        n = 1_000_000
        dirs, ok = m.sample(n, rng)
        dirs = dirs[ok]
        z_edges = np.linspace(-1, 1, 65)
        p_edges = np.linspace(-np.pi, np.pi, 129)
        z = dirs[:, 2]
        ph = np.arctan2(dirs[:, 1], dirs[:, 0])
        hist, _, _ = np.histogram2d(z, ph, bins=[z_edges, p_edges])
        zc = 0.5 * (z_edges[:-1] + z_edges[1:])
        pc = 0.5 * (p_edges[:-1] + p_edges[1:])
        ZC, PC = np.meshgrid(zc, pc, indexing="ij")
        s = np.sqrt(1 - ZC**2)
        grid = np.stack([s * np.cos(PC), s * np.sin(PC), ZC], -1).reshape(-1, 3)
        bin_measure = (z_edges[1] - z_edges[0]) * (p_edges[1] - p_edges[0])
        expected = m.density(grid).reshape(64, 128) * bin_measure * n
        keep = expected > 5
        chi2 = np.sum((hist[keep] - expected[keep]) ** 2 / expected[keep])
        # merge leftover low-expectation mass into one pooled bin
        rest_obs = hist[~keep].sum()
        rest_exp = expected[~keep].sum()
        dof = keep.sum() - 1
        if rest_exp > 5:
            chi2 += (rest_obs - rest_exp) ** 2 / rest_exp
            dof += 1
        p = sps.chi2.sf(chi2, dof)
        assert p > 0.01


class TestConditioning:
    def test_block_diagonal_reduces_to_marginal(self, rng):
        K = 4
        anchors = unit(rng, K)[:, None, :]
        euclid = rng.random((K, 3))
        cov = np.zeros((K, 5, 5))
        cov[:, :2, :2] = 0.2 * np.eye(2)
        cov[:, 2:, 2:] = 0.05 * np.eye(3)
        m = TangentMixture(np.full(K, 0.25), anchors, euclid, cov)
        x = rng.random(3)
        c = m.condition(euclid=x)
        # directional part untouched; weights scaled by spatial likelihood only
        assert np.allclose(c.offsets, 0.0, atol=1e-12)
        assert np.allclose(c.cov, cov[:, :2, :2], atol=1e-12)
        like = np.exp(
            -0.5 * np.sum((x - euclid) ** 2, axis=1) / 0.05
        ) / (2 * np.pi * 0.05) ** 1.5
        expected = like / like.sum()
        assert np.allclose(c.weights, expected, rtol=1e-9)

    def test_bayes_identity(self, rng):
        m = random_joint(rng, K=8)
        for _ in range(5):
            x = rng.random(3)
            c = m.condition(euclid=x)
            dirs = unit(rng, 64)
            joint = m.density(dirs[:, None, :], np.broadcast_to(x, (64, 3)))
            product = c.density(dirs) * c.marginal
            assert np.allclose(product, joint, rtol=1e-6)

    def test_bayes_identity_directional_conditioning(self, rng):
        # two sphere blocks: conditioning on the second includes the metric factor
        K = 6
        anchors = np.stack([unit(rng, K), unit(rng, K)], axis=1)
        cov = np.zeros((K, 4, 4))
        for k in range(K):
            A = rng.normal(size=(4, 4)) * 0.1
            cov[k] = A @ A.T + 0.25 * np.eye(4)
        m = TangentMixture(np.full(K, 1 / K), anchors, np.zeros((K, 0)), cov)
        wo = unit(rng, 1)[0]
        c = m.condition(dirs=wo[None])
        dirs = unit(rng, 64)
        joint = m.density(np.stack([dirs, np.broadcast_to(wo, (64, 3))], axis=1), None)
        # the marginal here is the solid-angle density of wo under the second block
        product = c.density(dirs) * c.marginal
        assert np.allclose(product, joint, rtol=1e-6)

    def test_conditioning_twice_is_identity(self, rng):
        m = random_joint(rng, K=4)
        c = m.condition(euclid=rng.random(3))
        assert c.condition(rng.random(3)) is c

    def test_empty_conditional_raises(self, rng):
        K = 2
        anchors = unit(rng, K)[:, None, :]
        euclid = np.zeros((K, 3))
        cov = np.zeros((K, 5, 5))
        cov[:, :2, :2] = 0.2 * np.eye(2)
        cov[:, 2:, 2:] = 1e-6 * np.eye(3)
        m = TangentMixture(np.full(K, 0.5), anchors, euclid, cov)
        with pytest.raises(EmptyConditionalError):
            m.condition(euclid=np.array([50.0, 50.0, 50.0]))


class TestRotation:
    def test_identity_rotation(self, rng):
        m = random_directional(rng, with_offsets=True)
        r = m.rotate(np.eye(3))
        dirs = unit(rng, 50)
        assert np.allclose(r.density(dirs), m.density(dirs), rtol=1e-12)

    def test_density_invariance(self, rng):
        m = random_directional(rng, K=5, with_offsets=True)
        for _ in range(25):
            R = rotation(rng)
            rm = m.rotate(R)
            dirs = unit(rng, 40)
            assert np.allclose(rm.density(dirs @ R.T), m.density(dirs), rtol=1e-6)

    def test_composition(self, rng):
        m = random_directional(rng, with_offsets=True)
        R1, R2 = rotation(rng), rotation(rng)
        once = m.rotate(R1).rotate(R2)
        combined = m.rotate(R2 @ R1)
        dirs = unit(rng, 60)
        assert np.allclose(once.density(dirs), combined.density(dirs), rtol=1e-6)

    def test_discard_rate_statistically_preserved(self, rng):
        m = random_directional(rng, K=3, radius=1.1, with_offsets=True)
        R = rotation(rng)
        _, ok1 = m.sample(200_000, np.random.default_rng(5))
        _, ok2 = m.rotate(R).sample(200_000, np.random.default_rng(5))
        assert ok1.mean() == pytest.approx(ok2.mean(), abs=0.005)


class TestProduct:
    def test_self_product_of_single_gaussian(self, rng):
        anchor = unit(rng, 1)
        cov = np.array([[[0.09, 0.02], [0.02, 0.05]]])
        m = DirectionalMixture(np.array([1.0]), anchor, np.zeros((1, 2)), cov)
        p = m.product(m)
        assert p.n_components == 1
        assert np.allclose(p.anchors, anchor)
        assert np.allclose(p.cov[0], cov[0] / 2, atol=1e-12)
        assert np.allclose(p.offsets, 0.0, atol=1e-12)

    def test_product_density_proportional_to_pointwise(self, rng):
        for trial in range(4):
            a_anchor = unit(rng, 1)[0]
            step = unit(rng, 1)[0]
            b_anchor = a_anchor + 0.25 * step
            b_anchor /= np.linalg.norm(b_anchor)
            a = DirectionalMixture(
                np.array([1.0]), a_anchor[None], np.zeros((1, 2)),
                np.diag(rng.uniform(0.02, 0.08, 2))[None],
            )
            b = DirectionalMixture(
                np.array([1.0]), b_anchor[None], np.zeros((1, 2)),
                np.diag(rng.uniform(0.02, 0.08, 2))[None],
            )
            p = a.product(b)
            # sample directions near the product mode
            mode = tangent.exp_map_unchecked(p.anchors[0], p.offsets[0])
            pts = mode[None] + rng.normal(size=(150, 3)) * 0.1
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
            ratio = p.density(pts) / (a.density(pts) * b.density(pts))
            spread = ratio.max() / ratio.min()
            assert spread < 1.10

    def test_far_apart_pairs_pruned(self, rng):
        a = DirectionalMixture(
            np.array([1.0]), np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 2)),
            1e-4 * np.eye(2)[None],
        )
        b2 = DirectionalMixture(
            np.array([0.999, 0.001]),
            np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]),
            np.zeros((2, 2)), np.tile(1e-4 * np.eye(2), (2, 1, 1)),
        )
        p = a.product(b2)
        assert p.n_components == 1  # the antipodal pair is dropped

    def test_empty_product_raises(self):
        up = np.array([[0.0, 0.0, 1.0]])
        a = DirectionalMixture(np.array([1.0]), up, np.zeros((1, 2)), 1e-6 * np.eye(2)[None])
        b = DirectionalMixture(np.array([1.0]), -up, np.zeros((1, 2)), 1e-6 * np.eye(2)[None])
        with pytest.raises(EmptyProductError):
            a.product(b)

    def test_wide_second_mixture_keeps_argmax(self, rng):
        a = random_directional(rng, K=4, radius=0.25)
        grid = unit(rng, 200_000)
        mode_a = grid[np.argmax(a.density(grid))]
        # uniform-like second mixture: wide components spread over the sphere
        # so their local density gradients roughly cancel
        tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]]) / np.sqrt(3)
        wide = DirectionalMixture(
            np.full(4, 0.25), tetra, np.zeros((4, 2)),
            np.tile(2.0 * np.eye(2), (4, 1, 1)),
        )
        p = a.product(wide)
        mode_p = grid[np.argmax(p.density(grid))]
        assert np.degrees(np.arccos(np.clip(mode_a @ mode_p, -1, 1))) < 2.0

    def test_normalization_after_product(self, rng):
        a = random_directional(rng, K=4)
        b = random_directional(rng, K=2)
        p = a.product(b)
        assert p.weights.sum() == pytest.approx(1.0, abs=1e-12)


class TestPruneTop2:
    def test_keeps_two_largest(self):
        m = DirectionalMixture(
            np.array([0.5, 0.3, 0.2]),
            np.array([[0, 0, 1.0], [0, 1.0, 0], [1.0, 0, 0]]),
            np.zeros((3, 2)), np.tile(0.1 * np.eye(2), (3, 1, 1)),
        )
        p = m.prune_top2()
        assert p.n_components == 2
        assert np.allclose(p.weights, [0.625, 0.375])
        assert np.allclose(p.anchors, [[0, 0, 1.0], [0, 1.0, 0]])

    def test_single_component_unchanged(self, rng):
        m = random_directional(rng, K=1)
        p = m.prune_top2()
        assert p.n_components == 1
        assert np.allclose(p.weights, [1.0])

    def test_tie_keeps_lower_index(self):
        m = DirectionalMixture(
            np.array([0.5, 0.25, 0.25]),
            np.array([[0, 0, 1.0], [0, 1.0, 0], [1.0, 0, 0]]),
            np.zeros((3, 2)), np.tile(0.1 * np.eye(2), (3, 1, 1)),
        )
        p = m.prune_top2()
        assert np.allclose(p.anchors, [[0, 0, 1.0], [0, 1.0, 0]])


class TestSerialization:
    def test_round_trip(self, rng):
        m = random_joint(rng, K=6)
        blob = m.serialize()
        back = TangentMixture.deserialize(blob)
        assert np.array_equal(back.weights, m.weights)
        assert np.array_equal(back.anchors, m.anchors)
        assert np.array_equal(back.euclid_means, m.euclid_means)
        assert np.array_equal(back.cov, m.cov)
        assert len(blob) == m.serialized_size()

    def test_rejects_garbage(self):
        with pytest.raises(MixtureError):
            TangentMixture.deserialize(b"NOPE" + b"\x00" * 64)


class TestJointMixture:
    def test_joint_sampling_moments(self, rng):
        m = random_joint(rng, K=3, dir_scale=0.05)
        dirs, euclid, keep = m.sample(200_000, rng)
        assert keep.mean() > 0.99
        # euclid mean matches the mixture mean
        expected = np.sum(m.weights[:, None] * m.euclid_means, axis=0)
        assert np.allclose(euclid[keep].mean(axis=0), expected, atol=0.01)

    def test_invariant_checker_catches_bad_weights(self, rng):
        m = random_joint(rng, K=3)
        m.weights = m.weights * 1.5
        with pytest.raises(MixtureError):
            m.check()

    def test_clamp_spd(self):
        bad = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular
        fixed = clamp_spd_2x2(bad[None], floor=1e-6)[0]
        assert np.linalg.eigvalsh(fixed).min() >= 1e-6 - 1e-12
