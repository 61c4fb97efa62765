"""Command-line entry points: render, fit-bsdf, verify.

Exit codes: 0 on success, 1 on usage/input errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from . import bsdf as bsdf_mod
from . import images
from .render import RenderConfig, RenderError, render_scene
from .scene import SceneError, load_scene
from .spatial import SpatialTree

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser():
    parser = _Parser(prog="sdguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("render", help="render a scene file")
    pr.add_argument("--scene", required=True, help="scene YAML file")
    pr.add_argument("--spp", type=int, default=None, help="total samples per pixel")
    pr.add_argument("--mode", choices=("off", "radiance", "product"), default=None)
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--out", required=True, help="output PFM image")
    pr.add_argument("--metrics", default=None, help="per-iteration CSV report")
    pr.add_argument("--reference", default=None, help="reference PFM for MAPE")
    pr.add_argument("--save-cache", default=None, help="write the trained cache")
    pr.add_argument("--load-cache", default=None, help="start from a saved cache")
    pr.add_argument("--threads", type=int, default=1)
    pr.add_argument("--iv-combine", action="store_true",
                    help="combine iterations with inverse-variance weights")
    pr.add_argument("--bsdf-model", action="append", default=[],
                    help="fitted BSDF model file (repeatable; needed for product mode)")

    pf = sub.add_parser("fit-bsdf", help="fit a mixture model to a BSDF kind")
    pf.add_argument("--kind", required=True)
    pf.add_argument("--out", required=True)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--batches", type=int, default=bsdf_mod.DEFAULT_BATCHES)
    pf.add_argument("--batch-size", type=int, default=bsdf_mod.DEFAULT_BATCH_SIZE)

    sub.add_parser("verify", help="run the non-rendering invariant suite")
    return parser


def _cmd_render(args) -> int:
    try:
        scene = load_scene(args.scene)
    except SceneError as exc:
        print(f"sdguide: scene error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = RenderConfig.from_scene(
            scene,
            spp=args.spp,
            mode=args.mode,
            seed=args.seed,
            iv_combine=args.iv_combine or None,
            threads=args.threads if args.threads != 1 else None,
        )
    except (RenderError, TypeError) as exc:
        print(f"sdguide: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    models = {}
    for path in args.bsdf_model:
        try:
            model = bsdf_mod.BsdfModel.load(path)
        except (OSError, ValueError) as exc:
            print(f"sdguide: cannot load BSDF model {path}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        models[model.kind.name] = model

    reference = None
    if args.reference:
        try:
            reference = images.read_pfm(args.reference)
        except (OSError, images.ImageError) as exc:
            print(f"sdguide: cannot read reference image: {exc}", file=sys.stderr)
            return EXIT_USAGE

    tree = None
    if args.load_cache:
        try:
            with open(args.load_cache, "rb") as fh:
                tree = SpatialTree.restore(fh.read(), seed=cfg.seed)
        except (OSError, ValueError) as exc:
            print(f"sdguide: cannot load cache: {exc}", file=sys.stderr)
            return EXIT_USAGE

    try:
        t0 = time.perf_counter()
        result = render_scene(scene, cfg, bsdf_models=models, reference=reference, tree=tree)
        elapsed = time.perf_counter() - t0
        images.write_pfm(result.image.astype(np.float32), args.out)
        if args.save_cache:
            with open(args.save_cache, "wb") as fh:
                fh.write(result.tree.checkpoint())
        if args.metrics:
            with open(args.metrics, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([
                    "iteration", "spp", "mape", "variance_median", "discard_rate",
                    "leaf_count", "initialized_leaves", "render_time_s", "train_time_s",
                ])
                for row in result.stats:
                    writer.writerow([
                        row.iteration, row.spp,
                        "" if np.isnan(row.mape) else f"{row.mape:.6f}",
                        f"{row.variance_median:.6e}", f"{row.discard_rate:.6e}",
                        row.leaf_count, row.initialized_leaves,
                        f"{row.render_time:.4f}", f"{row.train_time:.4f}",
                    ])
    except (RenderError, images.ImageError) as exc:
        print(f"sdguide: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    final_mape = result.stats[-1].mape if result.stats else float("nan")
    note = f", mape {final_mape:.4f}" if reference is not None else ""
    print(
        f"rendered {scene.camera.width}x{scene.camera.height} at {cfg.spp} spp "
        f"({cfg.mode}) in {elapsed:.1f}s, discard rate {result.discard_rate:.3e}{note}"
    )
    return EXIT_OK


def _cmd_fit_bsdf(args) -> int:
    def progress(done, total):
        if done % 32 == 0 or done == total:
            print(f"  batch {done}/{total}", file=sys.stderr)

    try:
        model = bsdf_mod.fit_bsdf(
            args.kind, seed=args.seed, batches=args.batches,
            batch_size=args.batch_size, progress=progress,
        )
    except bsdf_mod.BsdfFitError as exc:
        known = args.kind in bsdf_mod.BSDF_KINDS
        print(f"sdguide: {exc}", file=sys.stderr)
        return EXIT_RUNTIME if known else EXIT_USAGE
    try:
        model.save(args.out)
    except OSError as exc:
        print(f"sdguide: cannot write model: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"fitted {args.kind} model with {model.mixture.n_components} components -> {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    del args
    checks = []
    rng = np.random.default_rng(7)

    from . import tangent

    def unit(n):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    # chart round trips and isometry
    mus, omegas = unit(2000), unit(2000)
    ok = mus[:, None] @ omegas[..., None]
    keep = ok[:, 0, 0] > -1 + 1e-6
    mus, omegas = mus[keep], omegas[keep]
    nu = np.stack([tangent.log_map(m, w) for m, w in zip(mus, omegas)])
    back = np.stack([tangent.exp_map(m, v) for m, v in zip(mus, nu)])
    rt = float(np.max(np.linalg.norm(back - omegas, axis=1)))
    iso = float(np.max(np.abs(
        np.linalg.norm(nu, axis=1)
        - np.arccos(np.clip(np.sum(mus * omegas, axis=1), -1, 1))
    )))
    checks.append(("chart round trip (1e-6)", rt < 1e-6))
    checks.append(("geodesic isometry (1e-7)", iso < 1e-7))

    # Jacobians against central finite differences
    h, worst = 1e-5, 0.0
    for _ in range(200):
        mu = unit(1)[0]
        nuv = rng.normal(size=2) * 0.8
        J = tangent.jacobian_exp(mu, nuv)
        fd = np.stack([
            (tangent.exp_map(mu, nuv + h * e) - tangent.exp_map(mu, nuv - h * e)) / (2 * h)
            for e in np.eye(2)
        ], axis=1)
        worst = max(worst, np.linalg.norm(J - fd) / np.linalg.norm(fd))
    checks.append(("exp-map Jacobian vs FD (1e-4)", worst < 1e-4))

    # chart area element integrates to the sphere area
    n = 1200
    xs = np.linspace(-np.pi, np.pi, n, endpoint=False) + np.pi / n
    X, Y = np.meshgrid(xs, xs)
    r = np.hypot(X, Y)
    area = float(np.sum(tangent.sinc(r[r < np.pi])) * (2 * np.pi / n) ** 2)
    checks.append(("chart area = 4*pi (0.1%)", abs(area - 4 * np.pi) < 0.001 * 4 * np.pi))

    # mixture normalization by Monte Carlo
    from .mixture import DirectionalMixture
    anchors = unit(4)
    cov = np.tile(0.05 * np.eye(2), (4, 1, 1))
    mix = DirectionalMixture(np.full(4, 0.25), anchors, np.zeros((4, 2)), cov)
    dirs = unit(400_000)
    integral = float(mix.density(dirs).mean() * 4 * np.pi)
    checks.append(("density normalization MC (1.5%)", abs(integral - 1.0) < 0.015))

    # small synthetic recovery run
    from .em import EmConfig, SufficientStats, mini_batch_step
    from .mixture import TangentMixture
    truth_anchors = unit(3)
    truth = TangentMixture(
        np.full(3, 1 / 3), truth_anchors[:, None, :], np.zeros((3, 0)),
        np.tile(0.03 * np.eye(2), (3, 1, 1)),
    )
    model = TangentMixture(
        np.full(3, 1 / 3),
        (truth_anchors + 0.4 * unit(3))[:, None, :]
        / np.linalg.norm(truth_anchors + 0.4 * unit(3), axis=1, keepdims=True),
        np.zeros((3, 0)),
        np.tile(0.3 * np.eye(2), (3, 1, 1)),
    )
    stats = SufficientStats.zeros(3, 2)
    gen = np.random.default_rng(3)
    for _ in range(25):
        d, _, keep = truth.sample(3000, gen)
        model, stats = mini_batch_step(
            model, stats, d[keep], None, np.ones(int(keep.sum())), EmConfig()
        )
    cos = np.clip(model.anchors[:, 0, :] @ truth_anchors.T, -1, 1)
    err = np.rad2deg(np.arccos(cos.max(axis=1))).max()
    checks.append(("EM mean recovery (< 3 deg)", err < 3.0))

    failed = 0
    for name, passed in checks:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}")
        failed += 0 if passed else 1
    if failed:
        print(f"{failed} verify check(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    print("all verify checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "render":
        return _cmd_render(args)
    if args.command == "fit-bsdf":
        return _cmd_fit_bsdf(args)
    return _cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
