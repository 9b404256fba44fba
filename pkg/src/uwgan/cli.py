"""Command-line entry point.

Relative output paths resolve against ``$UWGAN_OUTPUT_ROOT`` when it is set.
Failures print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from uwgan.config import ConfigError, ExperimentConfig, load_config

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(path) -> Path:
    p = Path(path)
    root = os.environ.get("UWGAN_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()


def _print(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_simulate(args) -> None:
    from uwgan.phantom import simulate_subject
    from uwgan.volume import save_volume

    cfg = _config(args)
    n = args.n_subjects if args.n_subjects is not None else cfg.data.n_subjects
    seed = args.seed if args.seed is not None else cfg.data.seed
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        save_volume(simulate_subject(cfg.data.subject, seed=seed + i), out / f"sub-{i:03d}.nii")
    _print({"subjects": n, "out": str(out)})


def cmd_corrupt(args) -> None:
    from uwgan.noise import RicianSpec, SnrSpec, add_gaussian_snr, add_rician
    from uwgan.volume import load_volume, save_volume

    vol = load_volume(args.inp)
    if args.snr_db is not None:
        noisy = add_gaussian_snr(vol, SnrSpec(snr_db=args.snr_db, seed=args.seed))
    else:
        noisy = add_rician(vol, RicianSpec(delta=args.delta, seed=args.seed))
    save_volume(noisy, _out(args.out))
    _print({"out": str(_out(args.out))})


def cmd_train(args) -> None:
    from uwgan.pipeline import Run, build_manifest, train_fold
    from uwgan.training import save_checkpoint

    cfg = _config(args)
    if not 0 <= args.fold < cfg.data.folds:
        raise ConfigError(f"fold {args.fold} outside 0..{cfg.data.folds - 1}")
    work = _out(args.data) if args.data else _out(args.out) / "data-work"
    run = Run(cfg, work, build_manifest(cfg))
    if not (work / "data" / "noisy").exists():
        from uwgan.pipeline import _stage_corrupt, _stage_simulate

        _stage_simulate(run)
        _stage_corrupt(run)
    state = train_fold(run, args.fold)
    ckpt = save_checkpoint(state, _out(args.out))
    _print({"checkpoint": str(ckpt), "steps": state.step, "manifest_id": run.manifest_id})


def cmd_denoise(args) -> None:
    from uwgan.patching import ConfigMode
    from uwgan.training import denoise, load_checkpoint
    from uwgan.volume import load_volume, save_volume

    state = load_checkpoint(args.ckpt)
    patch = args.patch_size or state.config.patch_size
    out = denoise(state.generator, load_volume(args.inp), ConfigMode(args.config_mode), patch)
    save_volume(out, _out(args.out))
    _print({"out": str(_out(args.out))})


def cmd_evaluate(args) -> None:
    from uwgan.metrics import evaluate_pairs
    from uwgan.volume import load_volume

    clean_dir, test_dir = Path(args.clean), Path(args.test)
    names = sorted(p.name for p in clean_dir.iterdir() if p.is_file() and not p.name.endswith(".json"))
    if not names:
        raise FileNotFoundError(f"no volumes in {clean_dir}")
    pairs = []
    for name in names:
        if not (test_dir / name).exists():
            raise FileNotFoundError(f"no test volume {test_dir / name}")
        pairs.append((name, load_volume(clean_dir / name), load_volume(test_dir / name)))
    report = evaluate_pairs(pairs, per_frame=args.per_frame, window=args.window)
    report.write_csv(_out(args.out))
    pm, ps = report.psnr_mean_std
    sm, ss = report.ssim_mean_std
    _print({"out": str(_out(args.out)), "psnr_mean": pm, "psnr_std": ps, "ssim_mean": sm, "ssim_std": ss})


def _phantom_spec(args):
    from uwgan.phantom import PhantomSpec

    if getattr(args, "spec", None):
        try:
            spec = PhantomSpec.model_validate_json(Path(args.spec).read_text())
        except ValueError as err:
            raise ConfigError(f"phantom spec {args.spec}: {err}") from None
    else:
        spec = _config(args).phantom
    update = {k: v for k, v in {"snr_db": getattr(args, "snr_db", None), "seed": getattr(args, "seed", None)}.items()
              if v is not None}
    return PhantomSpec.model_validate({**spec.model_dump(), **update})


def cmd_phantom(args) -> None:
    from uwgan.phantom import generate_phantom
    from uwgan.volume import save_volume

    spec = _phantom_spec(args)
    vol, truth = generate_phantom(spec)
    save_volume(vol, _out(args.out))
    if args.truth:
        save_volume(truth.mask, _out(args.truth))
    _print({"out": str(_out(args.out)), "dims": list(vol.dims), "truth_voxels": int(truth.mask.data.sum())})


def cmd_glm(args) -> None:
    from uwgan.glm import analyze_phantom
    from uwgan.phantom import ground_truth
    from uwgan.volume import load_volume, load_volume3d

    spec = _phantom_spec(args)
    alpha = args.alpha if args.alpha is not None else _config(args).glm.alpha
    truth = load_volume3d(args.truth) if args.truth else ground_truth(spec)
    _, report = analyze_phantom(load_volume(args.inp), truth, spec, alpha)
    report.write_json(_out(args.out), extra={"phantom_spec": spec.model_dump(mode="json")})
    _print({"out": str(_out(args.out)), "weighted_deviation": report.weighted_deviation, "dice": report.dice})


def cmd_report(args) -> None:
    from uwgan.pipeline import render_report

    rendered = render_report(_out(args.bundle))
    _print({"summary": str(rendered.summary_path), "panels": len(rendered.panels), "charts": len(rendered.charts)})


def cmd_run(args) -> None:
    from uwgan.pipeline import build_manifest, run_experiment

    cfg = _config(args)
    out = _out(args.out) if args.out else _out(Path("runs") / build_manifest(cfg)["manifest_id"])
    root = run_experiment(cfg, out)
    _print({"run": str(root), "manifest_id": json.loads((root / "manifest.json").read_text())["manifest_id"]})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uwgan", description="3D U-WGAN fMRI denoising pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write synthetic clean subjects")
    s.add_argument("--config")
    s.add_argument("--n-subjects", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("corrupt", help="add Rician (or SNR-calibrated Gaussian) noise")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--delta", type=float, default=0.09)
    s.add_argument("--snr-db", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("train", help="train one cross-validation fold")
    s.add_argument("--config")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--data", help="run directory holding data/clean and data/noisy")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise a 4D volume with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config-mode", choices=["xyz", "xyt"], default="xyt")
    s.add_argument("--patch-size", type=int)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("evaluate", help="PSNR/SSIM of test volumes against clean ones")
    s.add_argument("--clean", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--per-frame", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("phantom", help="write the activation phantom and its ground-truth mask")
    s.add_argument("--spec", help="PhantomSpec JSON (overrides --config)")
    s.add_argument("--config")
    s.add_argument("--snr-db", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("glm", help="GLM activation analysis of a phantom volume")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--design", choices=["auto"], default="auto", help="regressor from the phantom block design")
    s.add_argument("--spec", help="PhantomSpec JSON (overrides --config)")
    s.add_argument("--config")
    s.add_argument("--truth")
    s.add_argument("--alpha", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_glm)

    s = sub.add_parser("report", help="render figures and summary.md for a run directory")
    s.add_argument("--bundle", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="run the configured stage graph end to end")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_run)
    return p


def _fail(kind: str, message: str, code: int, **extra) -> int:
    payload = {"error": kind, "message": " ".join(str(message).split()), **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_ERROR)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        from uwgan.pipeline import StageError

        extra = {"stage": exc.stage} if isinstance(exc, StageError) else {}
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR, **extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
