"""Command-line front end.

Stage commands share a working directory of intermediates (bank and pool
text files, descriptor and projection archives) so the pipeline can be run
step by step; ``train`` assembles the final model file. ``GRFFACE_SEED``
overrides the config seed; ``GRFFACE_WORKERS`` sets the expected worker
count for socket training.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import admm, evalharness, grfbank, lda, patchpool, pipeline, pooling, sffs
from .imgcore import read_pgm, write_pgm
from .modelfile import ModelFile, load_model, save_model


def _load_config(path) -> pipeline.PipelineConfig:
    if path is None:
        config = pipeline.PipelineConfig()
    else:
        with open(path) as fh:
            config = pipeline.config_from_text(fh.read())
    seed_env = os.environ.get("GRFFACE_SEED")
    if seed_env is not None:
        config.seed = int(seed_env)
    return config


def cmd_gen_synthetic(args) -> int:
    cfg = evalharness.SyntheticConfig(
        subjects=args.subjects, images_per_subject=args.images,
        size=args.size, noise_sigma=args.noise, seed=args.seed,
    )
    dataset = evalharness.generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for i in range(len(dataset)):
        name = f"s{dataset.subjects[i]:03d}_i{i:04d}.pgm"
        write_pgm(os.path.join(args.out, name), dataset.images[i])
        paths.append(name)
    pipeline.write_manifest(
        os.path.join(args.out, "manifest.csv"), paths,
        [f"subj{s:03d}" for s in dataset.subjects],
    )
    print(f"wrote {len(paths)} faces and manifest.csv to {args.out}")
    return 0


def cmd_select_channels(args) -> int:
    config = _load_config(args.config)
    manifest = pipeline.read_manifest(args.manifest)
    images = manifest.load_faces(config.face_size)
    rng = np.random.default_rng(config.seed)
    bank, result = pipeline.select_channels(images, manifest.subjects, config, rng)
    os.makedirs(args.workdir, exist_ok=True)
    with open(os.path.join(args.workdir, "bank.txt"), "w") as fh:
        fh.write(grfbank.bank_to_text(bank))
    sffs.write_trace(os.path.join(args.workdir, "channel_trace.log"), result)
    with open(os.path.join(args.workdir, "config.cfg"), "w") as fh:
        fh.write(pipeline.config_to_text(config))
    print(f"activated {bank.P} channels; trace and bank written to {args.workdir}")
    return 0


def cmd_select_patches(args) -> int:
    config = _load_config(args.config)
    manifest = pipeline.read_manifest(args.manifest)
    images = manifest.load_faces(config.face_size)
    with open(os.path.join(args.workdir, "bank.txt")) as fh:
        bank = grfbank.bank_from_text(fh.read())
    rng = np.random.default_rng(config.seed)
    pool, result = pipeline.select_patches(images, manifest.subjects, bank, config, rng)
    with open(os.path.join(args.workdir, "pool.txt"), "w") as fh:
        fh.write(patchpool.pool_to_text(pool))
    sffs.write_trace(os.path.join(args.workdir, "patch_trace.log"), result)
    print(f"activated {pool.Q} patches of a pool of {len(pool.specs)}")
    return 0


def _read_stage_inputs(workdir):
    with open(os.path.join(workdir, "bank.txt")) as fh:
        bank = grfbank.bank_from_text(fh.read())
    with open(os.path.join(workdir, "pool.txt")) as fh:
        pool = patchpool.pool_from_text(fh.read())
    return bank, pool


def cmd_extract(args) -> int:
    config = _load_config(args.config)
    manifest = pipeline.read_manifest(args.manifest)
    images = manifest.load_faces(config.face_size)
    bank, pool = _read_stage_inputs(args.workdir)
    specs = pool.active_specs()
    for kind in config.pooling_kinds:
        descs = pipeline.patch_descriptor_matrices(images, bank, specs, kind, config.clip)
        arrays = {f"q{q:04d}": mat for q, mat in enumerate(descs)}
        arrays["subjects"] = manifest.subjects
        np.savez(os.path.join(args.workdir, f"desc_{kind}.npz"), **arrays)
        # debug dump of the first face's descriptors in the binary format
        pooling.write_descriptor_dump(
            os.path.join(args.workdir, f"desc_{kind}_face0.fdsc"),
            [mat[0] for mat in descs],
        )
        print(f"{kind}: {len(descs)} patches x {descs[0].shape} descriptors")
    return 0


def cmd_fit_lda(args) -> int:
    config = _load_config(args.config)
    rng = np.random.default_rng(config.seed)
    for kind in config.pooling_kinds:
        data = np.load(os.path.join(args.workdir, f"desc_{kind}.npz"))
        subjects = data["subjects"]
        descs = [data[k] for k in sorted(data.files) if k.startswith("q")]
        proj = pipeline.fit_patch_projections(descs, subjects, config, rng)
        arrays = {f"q{q:04d}": e.matrix for q, e in enumerate(proj.entries)}
        np.savez(os.path.join(args.workdir, f"proj_{kind}.npz"), **arrays)
        dims = [e.p for e in proj.entries]
        print(f"{kind}: projected dims min={min(dims)} mean={np.mean(dims):.1f} "
              f"max={max(dims)} total={sum(dims)}")
    return 0


def cmd_train(args) -> int:
    if args.connect:
        # worker role: serve one resident block to a remote coordinator
        host, port = args.connect.rsplit(":", 1)
        blk = np.load(args.block_file)
        rounds = admm.run_worker((host, int(port)), args.block_id,
                                 blk["x"], blk["y"])
        print(f"worker block {args.block_id} served {rounds} rounds")
        return 0
    config = _load_config(args.config)
    if args.blocks:
        config.blocks = args.blocks
    if args.rho:
        config.rho = args.rho
    if args.C:
        config.C = args.C
    if args.rounds:
        config.max_rounds = args.rounds
    if args.seed is not None:
        config.seed = args.seed
    manifest = pipeline.read_manifest(args.manifest)
    images = manifest.load_faces(config.face_size)
    bank, pool = _read_stage_inputs(args.workdir)
    specs = pool.active_specs()
    header = {
        "format": "grfface-model",
        "face_size": str(config.face_size),
        "clip": repr(config.clip),
        "rep_kind": config.rep_kind,
        "p_rep": repr(config.p_rep),
        "decision_fpr": repr(config.decision_fpr),
        "descriptor_paths": "mu:t2-pair;others:single-stat",
        "diagonal_channels": "kernel-rotation-bilinear",
        "seed": str(config.seed),
        "config_hash": pipeline.config_hash(config),
    }
    engines = {}
    engine_scores = {}
    labels = None
    for kind in config.pooling_kinds:
        data = np.load(os.path.join(args.workdir, f"proj_{kind}.npz"))
        matrices = [data[k] for k in sorted(data.files)]
        desc = np.load(os.path.join(args.workdir, f"desc_{kind}.npz"))
        descs = [desc[k] for k in sorted(desc.files) if k.startswith("q")]
        proj = lda.ProjectionModel(
            [lda.ProjectionEntry(m, np.zeros(m.shape[1])) for m in matrices])
        engine, scores, labels, report = pipeline.build_engine(
            kind, descs, proj, manifest.subjects, config)
        engines[kind] = engine
        engine_scores[kind] = scores
        header[f"threshold_{kind}"] = repr(engine.threshold)
        print(f"{kind}: trained in {report.rounds} rounds "
              f"(residuals r={report.history[-1].r:.2e} s={report.history[-1].s:.2e})")
    if len(engines) > 1:
        fused = evalharness.fuse_scores(list(engine_scores.values()))
        header["threshold_fused"] = repr(
            pipeline.threshold_at_fpr(fused, labels, config.decision_fpr))
    model = ModelFile(header, bank, pool, engines)
    model.check_consistent()
    out = args.model or os.path.join(args.workdir, "model.grfm")
    save_model(out, model)
    print(f"model written to {out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    manifest = pipeline.read_manifest(args.manifest)
    result = pipeline.score_manifest(model, manifest, fuse=args.fuse)
    ii, jj, labels = result["pairs"]
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    names = [os.path.basename(p) for p in manifest.paths]
    for kind, scores in result["scores"].items():
        curve = evalharness.roc(scores, labels)
        tpr = evalharness.tpr_at_fpr(curve, args.fpr)
        print(f"{kind}: TPR@FPR={args.fpr:g} -> {tpr:.4f}")
        evalharness.write_scores_csv(
            os.path.join(outdir, f"scores_{kind}.csv"),
            [names[i] for i in ii], [names[j] for j in jj], labels, scores)
        evalharness.write_roc_csv(os.path.join(outdir, f"roc_{kind}.csv"), curve)
    if "fused" in result:
        curve = evalharness.roc(result["fused"], labels)
        print(f"fused: TPR@FPR={args.fpr:g} -> {evalharness.tpr_at_fpr(curve, args.fpr):.4f}")
        evalharness.write_scores_csv(
            os.path.join(outdir, "scores_fused.csv"),
            [names[i] for i in ii], [names[j] for j in jj], labels, result["fused"])
        evalharness.write_roc_csv(os.path.join(outdir, "roc_fused.csv"), curve)
    return 0


def cmd_verify(args) -> int:
    model = load_model(args.model)
    img_a = read_pgm(args.image_a)
    img_b = read_pgm(args.image_b)
    result = pipeline.verify_pair(model, img_a, img_b, fuse=args.fuse)
    for kind, score in result["scores"].items():
        print(f"{kind}: score {score:.6f}")
    if "fused_score" in result:
        print(f"fused: score {result['fused_score']:.6f}")
    print(f"decision: {result['decision']} (threshold {result['threshold']:.6f})")
    return 0


def cmd_estimate_cost(args) -> int:
    report = pipeline.estimate_cost(P=args.P, Q=args.Q, d=args.d, p=args.p,
                                    w=args.w, h=args.h)
    print(f"filter:        {report.filter_flops / 1e6:.2f} MFlops")
    print(f"pooling:       {report.pooling_flops / 1e6:.2f} MFlops")
    print(f"projection:    {report.projection_flops / 1e6:.2f} MFlops")
    print(f"normalization: {report.normalization_flops / 1e6:.2f} MFlops")
    print(f"total:         {report.total_flops / 1e6:.2f} MFlops")
    print(f"feature dim:   {report.feature_dim}")
    print(f"projection memory: {report.projection_bytes_float / 1e6:.2f} MB float32, "
          f"{report.projection_bytes_quantized / 1e6:.2f} MB quantized")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if args.roc:
        import csv as _csv
        with open(args.roc, newline="") as fh:
            rows = list(_csv.reader(fh))[1:]
        fpr = [float(r[1]) for r in rows]
        tpr = [float(r[2]) for r in rows]
        ax.plot([0.0] + fpr, [0.0] + tpr)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xscale("log")
        ax.set_title("ROC")
    elif args.trace:
        steps, js = [], []
        with open(args.trace) as fh:
            for line in fh:
                parts = line.split()
                steps.append(int(parts[1]))
                js.append(float(parts[4]))
        ax.plot(range(1, len(js) + 1), js, marker="o")
        ax.set_xlabel("selection step")
        ax.set_ylabel("objective J")
        ax.set_title("floating search trajectory")
    elif args.scores:
        _, _, labels, scores = evalharness.read_scores_csv(args.scores)
        ax.hist(scores[labels == 1], bins=40, alpha=0.6, label="same")
        ax.hist(scores[labels == -1], bins=40, alpha=0.6, label="different")
        ax.legend()
        ax.set_xlabel("score")
        ax.set_title("pair score distribution")
    else:
        print("nothing to plot: pass --roc, --trace, or --scores", file=sys.stderr)
        return 2
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grfface")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic identity dataset")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    for name, fn in (("select-channels", cmd_select_channels),
                     ("select-patches", cmd_select_patches),
                     ("extract", cmd_extract)):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--config")
        p.add_argument("--workdir", required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("fit-lda")
    p.add_argument("--config")
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=cmd_fit_lda)

    p = sub.add_parser("train")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--workdir")
    p.add_argument("--model")
    p.add_argument("--blocks", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--C", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--listen", help="coordinator listen address host:port")
    p.add_argument("--connect", help="worker: coordinator address host:port")
    p.add_argument("--block-file", help="worker: npz with arrays x, y")
    p.add_argument("--block-id", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fuse", action="store_true")
    p.add_argument("--fpr", type=float, default=0.01)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify")
    p.add_argument("--model", required=True)
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--fuse", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("estimate-cost")
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--Q", type=int, default=240)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--w", type=int, default=128)
    p.add_argument("--h", type=int, default=128)
    p.set_defaults(func=cmd_estimate_cost)

    p = sub.add_parser("plot")
    p.add_argument("--roc")
    p.add_argument("--trace")
    p.add_argument("--scores")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
