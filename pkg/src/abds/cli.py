"""Command-line entry points. Exit codes: 0 ok, 1 usage/config, 2 numeric check failed."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import artifact_io as aio
from .benchmark import child_seed, run_detection, summarize
from .data import TextureParams, gen_gmm_dataset, gen_texture_dataset
from .diffusion import make_schedule
from .gmm import GmmDistribution, GmmScoreModel
from .guidance import GuidanceConfig, SimilarityKernel, guided_sample
from .metrics import auc_pr, f1_star, from_map
from .mlp import MlpEpsModel, TrainConfig, train_mlp
from .oracle import angular_error_grid, ideal_vs_quadrature, terminal_gradient_check
from .pipeline import FeatureExtractor, fit_patch_pca


class UsageError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, args: argparse.Namespace):
    # the output directory is where the config lives, not part of the run
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    resolved["command"] = command
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"bad hidden sizes {text!r}") from exc


def _load_training_matrix(path: str):
    arrays, meta = aio.load_artifact(path)
    if meta.get("kind") == "texture_dataset":
        images = arrays["images"]
        return images.reshape(images.shape[0], -1), meta
    if meta.get("kind") == "point_dataset":
        return arrays["samples"], meta
    raise UsageError(f"{path}: not a dataset artifact")


def _extractor_from_args(args) -> FeatureExtractor:
    if args.extractor == "identity":
        return FeatureExtractor(kind="identity")
    if args.extractor == "patch_stats":
        return FeatureExtractor(kind="patch_stats", radius=args.radius)
    if not args.pca_train:
        raise UsageError("patch_pca requires --pca-train")
    train = aio.load_image_dataset(args.pca_train)
    return fit_patch_pca(list(train.images), args.radius, args.dims, args.seed)


def _guidance_from_args(args) -> GuidanceConfig:
    return GuidanceConfig(
        strategy=args.strategy,
        kernel=SimilarityKernel(args.lam),
        strength=args.strength,
        clip_norm=args.clip_norm,
    )


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _outdir(args.out)
    if args.kind == "texture":
        params = TextureParams(
            height=args.height,
            width=args.width,
            channels=args.channels,
            n_train=args.n_train,
            n_test=args.n_test,
            anomaly_rate=args.anomaly_rate,
        )
        train, test = gen_texture_dataset(params, args.seed)
        aio.save_image_dataset(out / "train.abds", train)
        aio.save_image_dataset(out / "test.abds", test)
    else:
        if not args.gmm:
            raise UsageError("gmm datasets need --gmm spec.json")
        with open(args.gmm, encoding="utf-8") as fh:
            spec = json.load(fh)
        gmm = GmmDistribution(spec["weights"], spec["means"], spec["variances"])
        ds = gen_gmm_dataset(gmm, args.n, args.seed)
        aio.save_point_dataset(out / "points.abds", ds)
    _write_config(out, "gen-data", args)
    return 0


def cmd_train(args) -> int:
    out = _outdir(args.out)
    data, _ = _load_training_matrix(args.data)
    scale = float(data.std()) if args.normalize == "std" else 1.0
    if scale <= 0:
        raise UsageError("degenerate training data: zero variance")
    data = data / scale
    sched = make_schedule(args.schedule, args.T, args.beta_min, args.beta_max)
    model = MlpEpsModel.init(
        dim=data.shape[1],
        hidden=_parse_hidden(args.hidden),
        activation=args.activation,
        seed=args.seed,
    )
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    trained, history = train_mlp(model, data, sched, cfg)
    aio.save_checkpoint(
        out / "model.abds",
        trained,
        sched,
        extra={"train_steps": args.steps, "seed": args.seed, "scale": scale},
    )
    aio.write_csv(
        out / "loss.csv",
        ["step", "train_loss", "val_loss"],
        [[s, repr(tr), repr(vl)] for s, tr, vl in history],
    )
    _write_config(out, "train", args)
    return 0


def cmd_sample(args) -> int:
    out = _outdir(args.out)
    model, sched, extra = aio.load_checkpoint(args.model)
    scale = float(extra.get("scale", 1.0))
    cfg = GuidanceConfig(strategy="none", kernel=SimilarityKernel(1.0), strength=0.0)
    samples = np.empty((args.n, model.dim))
    for i in range(args.n):
        res = guided_sample(
            model,
            sched,
            cfg,
            np.zeros(model.dim),
            seed=child_seed(args.seed, i),
            sampler=args.sampler,
            ddim_steps=args.ddim_steps,
        )
        samples[i] = res.edit.data * scale
    aio.save_artifact(out / "samples.abds", {"samples": samples}, {"kind": "samples"})
    _write_config(out, "sample", args)
    return 0


def cmd_edit(args) -> int:
    out = _outdir(args.out)
    model, sched, extra = aio.load_checkpoint(args.model)
    scale = float(extra.get("scale", 1.0))
    ds = aio.load_image_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"index {args.index} outside dataset of {len(ds)}")
    image = ds.images[args.index]
    if image.size != model.dim:
        raise UsageError(f"image size {image.size} != model dim {model.dim}")
    res = guided_sample(
        model,
        sched,
        _guidance_from_args(args),
        image.ravel() / scale,
        seed=args.seed,
        sampler=args.sampler,
        ddim_steps=args.ddim_steps,
    )
    aio.save_artifact(
        out / "edit.abds",
        {"input": image, "edit": res.edit.data.reshape(image.shape) * scale},
        {"kind": "edit", "steps_used": res.steps_used, "seed": args.seed},
    )
    aio.write_csv(
        out / "trace.csv",
        ["step", "guidance_norm"],
        [[i, repr(float(v))] for i, v in enumerate(res.guidance_norms)],
    )
    _write_config(out, "edit", args)
    return 0


def cmd_detect(args) -> int:
    out = _outdir(args.out)
    model, sched, extra = aio.load_checkpoint(args.model)
    ds = aio.load_image_dataset(args.data)
    fx = _extractor_from_args(args)
    results = run_detection(
        model,
        sched,
        ds,
        fx,
        _guidance_from_args(args),
        seed=args.seed,
        levels=args.levels,
        connectivity=args.connectivity,
        sampler=args.sampler,
        ddim_steps=args.ddim_steps,
        limit=args.limit,
        scale=float(extra.get("scale", 1.0)),
    )
    rows = []
    for r in results:
        aio.save_artifact(
            out / f"image_{r.index:03d}.abds",
            {
                "input": ds.images[r.index],
                "edit": r.edit,
                "raw": r.raw,
                "refined": r.refined,
            },
            {"kind": "detection", "index": r.index},
        )
        aio.write_pgm(out / f"raw_{r.index:03d}.pgm", r.raw)
        aio.write_pgm(out / f"refined_{r.index:03d}.pgm", r.refined)
        rows.append(
            [
                r.index,
                int(r.has_anomaly),
                repr(r.auc_pr) if r.has_anomaly else "",
                repr(r.f1_star) if r.has_anomaly else "",
                repr(r.mean_refined),
                repr(r.max_refined),
                repr(r.edit_distance),
            ]
        )
    aio.write_csv(
        out / "metrics.csv",
        ["index", "has_anomaly", "auc_pr", "f1_star", "mean_refined", "max_refined", "edit_distance"],
        rows,
    )
    summary = summarize(results, ds)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_config(out, "detect", args)
    return 0


def cmd_eval(args) -> int:
    out = _outdir(args.out)
    ds = aio.load_image_dataset(args.data)
    maps = sorted(Path(args.maps).glob("image_*.abds"))
    if not maps:
        raise UsageError(f"no detection artifacts under {args.maps}")
    rows = []
    for path in maps:
        arrays, meta = aio.load_artifact(path)
        idx = int(meta["index"])
        mask = ds.masks[idx]
        if (mask > 0).any():
            ls = from_map(arrays["refined"], mask)
            rows.append([idx, repr(auc_pr(ls)), repr(f1_star(ls))])
    aio.write_csv(out / "eval.csv", ["index", "auc_pr", "f1_star"], rows)
    _write_config(out, "eval", args)
    return 0


def cmd_sweep(args) -> int:
    out = _outdir(args.out)
    model, sched, extra = aio.load_checkpoint(args.model)
    scale = float(extra.get("scale", 1.0))
    ds = aio.load_image_dataset(args.data)
    fx = _extractor_from_args(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("empty sweep grid")
    rows = []
    for value in values:
        strategy, lam, strength = args.strategy, args.lam, args.strength
        if args.param == "strength":
            strength = float(value)
        elif args.param == "lam":
            lam = float(value)
        else:
            strategy = value
        gcfg = GuidanceConfig(
            strategy=strategy,
            kernel=SimilarityKernel(lam),
            strength=strength,
            clip_norm=args.clip_norm,
        )
        results = run_detection(
            model, sched, ds, fx,
            gcfg,
            seed=args.seed,
            levels=args.levels,
            connectivity=args.connectivity,
            sampler=args.sampler,
            ddim_steps=args.ddim_steps,
            limit=args.limit,
            scale=scale,
        )
        s = summarize(results, ds)
        rows.append([value, repr(s["auc_pr"]), repr(s["f1_star"]), repr(s["mean_edit_distance"])])
    aio.write_csv(
        out / "sweep.csv", [args.param, "auc_pr", "f1_star", "mean_edit_distance"], rows
    )
    if args.param in ("strength", "lam"):
        xs = [float(v) for v in values]
        aio.write_line_plot(
            out / "sweep.svg",
            xs,
            {
                "auc_pr": [float(r[1]) for r in rows],
                "f1_star": [float(r[2]) for r in rows],
            },
            title=f"sweep over {args.param}",
            xlabel=args.param,
            ylabel="metric",
        )
    else:
        aio.write_line_plot(
            out / "sweep.svg",
            list(range(len(values))),
            {"auc_pr": [float(r[1]) for r in rows]},
            title="sweep over strategies",
            xlabel="strategy index",
            ylabel="auc_pr",
        )
    _write_config(out, "sweep", args)
    return 0


def cmd_oracle_check(args) -> int:
    out = _outdir(args.out)
    rows = []
    failures = []

    gmm_1d = GmmDistribution([0.4, 0.6], [[-1.2], [1.0]], [[0.4], [0.7]])
    gmm_2d = GmmDistribution(
        [0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [[0.4, 0.5], [0.5, 0.3]]
    )
    sched = make_schedule("linear", 200, 1e-4, 0.05)
    t_values = [20, 60, 100, 140, 180]

    for name, gmm, y in (
        ("gmm_1d", gmm_1d, np.array([1.4])),
        ("gmm_2d", gmm_2d, np.array([1.8, 0.3])),
    ):
        for row in ideal_vs_quadrature(
            gmm, sched, lam=args.lam, y=y, t_values=t_values,
            n_probes=args.probes, seed=args.seed,
        ):
            rows.append([f"quadrature/{name}", row["t"], row["probe"], repr(row["rel_err"]), int(row["ok"])])
            if not row["ok"]:
                failures.append(f"quadrature {name} t={row['t']} probe={row['probe']}")

    # collinearity on a unit-variance single Gaussian
    single = GmmDistribution([1.0], [[0.4, -0.2]], [[1.0, 1.0]])
    model = GmmScoreModel(single)
    kernel = SimilarityKernel(args.lam)
    rng = np.random.default_rng(args.seed)
    from .guidance import guidance_reverse_match, ideal_guidance_gmm

    for t in t_values:
        for j in range(args.probes):
            x = rng.standard_normal(2) * 1.5
            y = rng.standard_normal(2) * 1.5
            gi = ideal_guidance_gmm(x, y, t, single, sched, kernel)
            gr = guidance_reverse_match(x, y, t, model, sched, kernel)
            factor = 1.0 + 2.0 * args.lam * (1.0 - sched.abar(t))
            resid = float(
                np.linalg.norm(gr - factor * gi) / max(np.linalg.norm(gr), 1e-300)
            )
            ok = resid <= 1e-8
            rows.append(["collinearity", t, j, repr(resid), int(ok)])
            if not ok:
                failures.append(f"collinearity t={t} probe={j}")

    # terminal-step property needs a schedule with a tiny terminal signal level
    sched_gt = make_schedule("linear", 400, 1e-4, 0.09, terminal_threshold=1e-8)
    gt_rows = terminal_gradient_check(
        gmm_2d, sched_gt, lam=args.lam, n_probes=max(20, args.probes), seed=args.seed
    )
    n_viol = sum(r["naive_violates"] for r in gt_rows)
    for r in gt_rows:
        ok = r["reverse_ok"] and r["ideal_ok"]
        rows.append(["terminal", sched_gt.T, r["probe"], repr(r["bound"]), int(ok)])
        if not ok:
            failures.append(f"terminal bound probe={r['probe']}")
    if n_viol < 0.95 * len(gt_rows):
        failures.append(f"naive violated terminal bound on only {n_viol}/{len(gt_rows)}")

    ang = angular_error_grid(
        gmm_2d, sched, lam=args.lam, y=np.array([1.8, 0.3]),
        t_values=t_values, n_probes=args.probes, seed=args.seed,
    )
    rows.append(["angular/naive", "", "", repr(ang["naive"]), ""])
    rows.append(["angular/forward_match", "", "", repr(ang["forward_match"]), ""])
    rows.append(["angular/reverse_match", "", "", repr(ang["reverse_match"]), ""])
    if not (
        ang["reverse_match"] < ang["forward_match"]
        and ang["reverse_match"] < ang["naive"]
    ):
        failures.append(f"angular ordering broken: {ang}")

    aio.write_csv(out / "report.csv", ["check", "t", "probe", "value", "ok"], rows)
    _write_config(out, "oracle-check", args)
    if failures:
        raise CheckFailed("; ".join(failures))
    return 0


# --- parser -----------------------------------------------------------------


def _add_guidance_flags(p):
    p.add_argument("--strategy", default="reverse_match")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--clip-norm", type=float, default=None, dest="clip_norm")
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    p.add_argument("--ddim-steps", type=int, default=20, dest="ddim_steps")


def _add_extractor_flags(p):
    p.add_argument(
        "--extractor", choices=("identity", "patch_stats", "patch_pca"), default="patch_stats"
    )
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--pca-train", default=None, dest="pca_train")
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic datasets")
    p.add_argument("--kind", choices=("texture", "gmm"), default="texture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--n-train", type=int, default=400, dest="n_train")
    p.add_argument("--n-test", type=int, default=40, dest="n_test")
    p.add_argument("--anomaly-rate", type=float, default=0.75, dest="anomaly_rate")
    p.add_argument("--gmm", default=None, help="JSON mixture spec for --kind gmm")
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the MLP noise predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="128,128,128")
    p.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear")
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--beta-min", type=float, default=1e-4, dest="beta_min")
    p.add_argument("--beta-max", type=float, default=0.05, dest="beta_max")
    p.add_argument("--val-fraction", type=float, default=0.1, dest="val_fraction")
    p.add_argument("--normalize", choices=("std", "none"), default="std")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw unconditional samples")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    p.add_argument("--ddim-steps", type=int, default=20, dest="ddim_steps")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="similarity-guided edit of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_guidance_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("detect", help="edit + analyze a test set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    _add_guidance_flags(p)
    _add_extractor_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="recompute metrics from detection artifacts")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over strength, lam, or strategies")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", choices=("strength", "lam", "strategy"), required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--limit", type=int, default=None)
    _add_guidance_flags(p)
    _add_extractor_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="verify guidance gradients against oracles")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=0.7)
    p.add_argument("--probes", type=int, default=20)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, aio.ArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
