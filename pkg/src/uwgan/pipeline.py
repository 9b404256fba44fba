"""Stage graph for a full experiment, plus the static report renderer.

A run directory holds ``manifest.json`` (config snapshot, seeds, spec hash,
library versions), ``bundle.json`` (every produced artifact, keyed to the
manifest id), CSV/JSON results and ``run_log.txt``. Wall-clock timestamps only
ever go to the log so that CSV/JSON outputs are byte-identical across reruns.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import uwgan
from uwgan.config import STAGES, ExperimentConfig
from uwgan.glm import analyze_phantom
from uwgan.metrics import QualityReport, evaluate_pairs
from uwgan.models import spec_hash
from uwgan.noise import RNG_ALGORITHM, RicianSpec, add_rician
from uwgan.patching import patchify
from uwgan.phantom import generate_phantom
from uwgan.training import PatchPairs, denoise, load_generator, make_splits, save_checkpoint, train
from uwgan.volume import Volume4D, load_volume, load_volume3d, save_volume

log = logging.getLogger(__name__)

VOLUME_SUFFIX = ".nii"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class MissingArtifact(FileNotFoundError):
    pass


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _versions() -> dict[str, str]:
    import nibabel
    import scipy

    return {"uwgan": uwgan.__version__, "numpy": np.__version__, "torch": torch.__version__,
            "scipy": scipy.__version__, "nibabel": nibabel.__version__, "python": platform.python_version()}


def build_manifest(cfg: ExperimentConfig) -> dict:
    versions = _versions()
    digest = hashlib.sha256((cfg.canonical_json() + json.dumps(versions, sort_keys=True)).encode()).hexdigest()
    return {
        "manifest_id": digest[:16],
        "config": cfg.model_dump(mode="json"),
        "seeds": {"data": cfg.data.seed, "split": cfg.data.split_seed, "noise": cfg.noise.seed,
                  "train": cfg.train.seed, "phantom": cfg.phantom.seed},
        "spec_hash": spec_hash(cfg.model.generator, cfg.model.discriminator),
        "versions": versions,
        "rng_algorithms": {"numpy": RNG_ALGORITHM, "torch": "mt19937"},
        "timestamps": "run_log.txt",
    }


def subject_ids(cfg: ExperimentConfig) -> list[str]:
    return [f"sub-{i:03d}" for i in range(cfg.data.n_subjects)]


@dataclass
class Run:
    cfg: ExperimentConfig
    root: Path
    manifest: dict
    artifacts: dict = field(default_factory=dict)

    @property
    def manifest_id(self) -> str:
        return self.manifest["manifest_id"]

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing upstream artifact {p.relative_to(self.root)}")
        return p

    def record(self, kind: str, key: str, path: Path) -> None:
        path = Path(path)
        rel = path.relative_to(self.root) if path.is_relative_to(self.root) else path
        self.artifacts.setdefault(kind, {})[key] = str(rel)

    def splits(self):
        return make_splits(subject_ids(self.cfg), self.cfg.data.folds, self.cfg.data.split_seed)

    def fold_dir(self, k: int) -> Path:
        return self.root / "folds" / f"fold-{k}"


# --- stages ------------------------------------------------------------------

def _stage_simulate(run: Run) -> None:
    from uwgan.phantom import simulate_subject

    for i, sid in enumerate(subject_ids(run.cfg)):
        vol = simulate_subject(run.cfg.data.subject, seed=run.cfg.data.seed + i)
        save_volume(vol, run.path("data", "clean", sid + VOLUME_SUFFIX))


def _stage_corrupt(run: Run) -> None:
    for i, sid in enumerate(subject_ids(run.cfg)):
        clean = load_volume(run.require("data", "clean", sid + VOLUME_SUFFIX))
        noisy = add_rician(clean, RicianSpec(delta=run.cfg.noise.delta, seed=run.cfg.noise.seed + i))
        save_volume(noisy, run.path("data", "noisy", sid + VOLUME_SUFFIX))


def fold_patch_pairs(run: Run, subjects) -> PatchPairs:
    t = run.cfg.train
    noisy, clean, sigmas = [], [], []
    for sid in subjects:
        c = load_volume(run.require("data", "clean", sid + VOLUME_SUFFIX))
        n = load_volume(run.require("data", "noisy", sid + VOLUME_SUFFIX))
        pc = patchify(c, t.mode, t.patch_size, t.stride).patches
        clean.append(pc)
        noisy.append(patchify(n, t.mode, t.patch_size, t.stride).patches)
        sigmas.append(np.full(len(pc), run.cfg.noise.delta * c.intensity_max))
    return PatchPairs(np.concatenate(noisy), np.concatenate(clean), np.concatenate(sigmas))


def train_fold(run: Run, k: int):
    split = run.splits()[k]
    data = fold_patch_pairs(run, split.train_subjects)
    log.info("fold %d: %d training patches from %d subjects", k, len(data), len(split.train_subjects))
    return train(data, run.cfg.train_config())


def _stage_train(run: Run) -> None:
    for k in run.cfg.folds_to_run:
        state = train_fold(run, k)
        ckpt = save_checkpoint(state, run.fold_dir(k) / "checkpoint")
        run.record("history", f"fold-{k}", ckpt / "history.csv")


def _stage_denoise(run: Run) -> None:
    t = run.cfg.train
    splits = run.splits()
    for k in run.cfg.folds_to_run:
        gen = load_generator(run.require("folds", f"fold-{k}", "checkpoint"), run.cfg.model.generator)
        for sid in splits[k].test_subjects:
            noisy = load_volume(run.require("data", "noisy", sid + VOLUME_SUFFIX))
            out = denoise(gen, noisy, t.mode, t.patch_size)
            save_volume(out, run.path("folds", f"fold-{k}", "denoised", sid + VOLUME_SUFFIX))


def _summary_row(label: str, report: QualityReport) -> dict:
    pm, ps = report.psnr_mean_std
    sm, ss = report.ssim_mean_std
    return {"method": label, "n": len(report.rows), "psnr_mean": pm, "psnr_std": ps, "ssim_mean": sm, "ssim_std": ss}


def _write_summary(run: Run, reports: dict[str, QualityReport]) -> None:
    rows = [_summary_row(label, rep) for label, rep in reports.items()]
    lines = ["method,n,psnr_mean,psnr_std,ssim_mean,ssim_std"]
    lines += [f"{r['method']},{r['n']},{r['psnr_mean']!r},{r['psnr_std']!r},{r['ssim_mean']!r},{r['ssim_std']!r}" for r in rows]
    path = run.path("metrics", "summary.csv")
    path.write_text("\n".join(lines) + "\n")
    run.record("summary", "csv", path)
    jpath = run.path("metrics", "summary.json")
    _write_json(jpath, {"manifest_id": run.manifest_id, "rows": rows, "window": run.cfg.metrics.window,
                        "per_frame": run.cfg.metrics.per_frame})
    run.record("summary", "json", jpath)


def _stage_evaluate(run: Run) -> None:
    m = run.cfg.metrics
    ev = run.cfg.evaluate
    if ev.clean_dir is not None:
        names = sorted(p.name for p in Path(ev.clean_dir).iterdir() if p.is_file() and not p.name.endswith(".json"))
        if not names:
            raise MissingArtifact(f"no volumes in {ev.clean_dir}")
        pairs = []
        for name in names:
            test = Path(ev.test_dir) / name
            if not test.exists():
                raise MissingArtifact(f"no test volume {test} for clean volume {name}")
            pairs.append((name, load_volume(Path(ev.clean_dir) / name), load_volume(test)))
            run.record("subjects", name, Path(ev.clean_dir) / name)
        report = evaluate_pairs(pairs, m.per_frame, m.window)
        path = run.path("metrics", "quality_test.csv")
        report.write_csv(path)
        run.record("quality", "test", path)
        _write_summary(run, {"test": report})
        return

    splits = run.splits()
    by_label: dict[str, list] = {"noisy": [], "denoised": []}
    for k in run.cfg.folds_to_run:
        for sid in splits[k].test_subjects:
            clean = load_volume(run.require("data", "clean", sid + VOLUME_SUFFIX))
            noisy = load_volume(run.require("data", "noisy", sid + VOLUME_SUFFIX))
            den_path = run.require("folds", f"fold-{k}", "denoised", sid + VOLUME_SUFFIX)
            by_label["noisy"].append((sid, clean, noisy))
            by_label["denoised"].append((sid, clean, load_volume(den_path)))
    reports = {}
    for label, pairs in by_label.items():
        pairs.sort(key=lambda p: p[0])
        reports[label] = evaluate_pairs(pairs, m.per_frame, m.window)
        path = run.path("metrics", f"quality_{label}.csv")
        reports[label].write_csv(path)
        run.record("quality", label, path)
    _write_summary(run, reports)


def _stage_phantom(run: Run) -> None:
    vol, truth = generate_phantom(run.cfg.phantom)
    save_volume(vol, run.path("phantom", "phantom" + VOLUME_SUFFIX))
    save_volume(truth.mask, run.path("phantom", "truth" + VOLUME_SUFFIX))
    _write_json(run.path("phantom", "truth.json"), {"manifest_id": run.manifest_id,
                                                     "roi_voxel_counts": truth.roi_voxel_counts})


def _stage_glm(run: Run) -> None:
    from uwgan.phantom import GroundTruth

    spec = run.cfg.phantom
    vol = load_volume(run.require("phantom", "phantom" + VOLUME_SUFFIX))
    mask = load_volume3d(run.require("phantom", "truth" + VOLUME_SUFFIX))
    counts = json.loads(run.require("phantom", "truth.json").read_text())["roi_voxel_counts"]
    truth = GroundTruth(mask, counts)
    inputs = {"noisy": vol}
    if run.cfg.glm.denoise_phantom:
        folds = [k for k in run.cfg.folds_to_run if (run.fold_dir(k) / "checkpoint").exists()]
        if folds:
            gen = load_generator(run.fold_dir(folds[0]) / "checkpoint", run.cfg.model.generator)
            inputs["denoised"] = denoise(gen, vol, run.cfg.train.mode, run.cfg.train.patch_size)
            save_volume(inputs["denoised"], run.path("phantom", "denoised" + VOLUME_SUFFIX))
        else:
            log.info("no trained generator; GLM on the raw phantom only")
    for label, v in inputs.items():
        _, report = analyze_phantom(v, truth, spec, run.cfg.glm.alpha)
        path = run.path("glm", f"glm_{label}.json")
        report.write_json(path, extra={"manifest_id": run.manifest_id})
        run.record("glm", label, path)


def _stage_report(run: Run) -> None:
    write_bundle(run)
    render_report(run.root)


_STAGE_FUNCS = {
    "simulate": _stage_simulate,
    "corrupt": _stage_corrupt,
    "train": _stage_train,
    "denoise": _stage_denoise,
    "evaluate": _stage_evaluate,
    "phantom": _stage_phantom,
    "glm": _stage_glm,
    "report": _stage_report,
}


def _collect_panel_subjects(run: Run) -> list[dict]:
    if run.cfg.evaluate.clean_dir is not None:
        ev = run.cfg.evaluate
        return [{"subject": name, "clean": str(Path(ev.clean_dir) / name), "noisy": None,
                 "denoised": str(Path(ev.test_dir) / name)}
                for name in sorted(run.artifacts.get("subjects", {}))]
    entries = []
    splits = run.splits()
    for k in run.cfg.folds_to_run:
        for sid in splits[k].test_subjects:
            den = run.fold_dir(k) / "denoised" / (sid + VOLUME_SUFFIX)
            if den.exists():
                entries.append({"subject": sid, "clean": f"data/clean/{sid}{VOLUME_SUFFIX}",
                                "noisy": f"data/noisy/{sid}{VOLUME_SUFFIX}", "denoised": str(den.relative_to(run.root))})
    return sorted(entries, key=lambda e: e["subject"])


def write_bundle(run: Run) -> Path:
    payload = {
        "manifest_id": run.manifest_id,
        "panels": _collect_panel_subjects(run),
        "quality": dict(sorted(run.artifacts.get("quality", {}).items())),
        "summary": dict(sorted(run.artifacts.get("summary", {}).items())),
        "glm": dict(sorted(run.artifacts.get("glm", {}).items())),
        "history": dict(sorted(run.artifacts.get("history", {}).items())),
    }
    path = run.root / "bundle.json"
    _write_json(path, payload)
    return path


def _rediscover(run: Run) -> None:
    """Re-register artifacts produced by earlier invocations in the same directory."""
    for label in ("noisy", "denoised", "test"):
        p = run.root / "metrics" / f"quality_{label}.csv"
        if p.exists():
            run.record("quality", label, p)
    for ext in ("csv", "json"):
        p = run.root / "metrics" / f"summary.{ext}"
        if p.exists():
            run.record("summary", ext, p)
    for label in ("noisy", "denoised"):
        p = run.root / "glm" / f"glm_{label}.json"
        if p.exists():
            run.record("glm", label, p)
    for k in run.cfg.folds_to_run:
        p = run.fold_dir(k) / "checkpoint" / "history.csv"
        if p.exists():
            run.record("history", f"fold-{k}", p)


def run_experiment(cfg: ExperimentConfig, out_dir) -> Path:
    """Run ``cfg.stages`` in pipeline order; returns the run directory."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    manifest = build_manifest(cfg)
    run = Run(cfg, root, manifest)
    _write_json(root / "manifest.json", manifest)

    handler = logging.FileHandler(root / "run_log.txt", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("uwgan")
    pkg_log.addHandler(handler)
    old_level = pkg_log.level
    pkg_log.setLevel(logging.INFO)
    try:
        log.info("run %s started in %s", run.manifest_id, root)
        _rediscover(run)
        for stage in STAGES:
            if stage not in cfg.stages:
                continue
            t0 = time.perf_counter()
            try:
                _STAGE_FUNCS[stage](run)
            except StageError:
                raise
            except Exception as exc:
                log.error("stage %s failed: %s", stage, exc)
                raise StageError(stage, str(exc)) from exc
            log.info("stage %s done in %.1f s", stage, time.perf_counter() - t0)
        if "report" not in cfg.stages:
            write_bundle(run)
        log.info("run %s finished", run.manifest_id)
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(old_level)
        handler.close()
    return root


# --- report ------------------------------------------------------------------

class IncompleteBundle(ValueError):
    pass


@dataclass
class Panel:
    subject: str
    images: dict[str, np.ndarray]  # label -> 2D slice
    difference: np.ndarray  # clean minus denoised on the same slice
    path: Path


@dataclass
class BarChart:
    title: str
    groups: list[str]
    series: dict[str, list[float]]
    path: Path


@dataclass
class RenderedReport:
    panels: list[Panel]
    charts: list[BarChart]
    summary_path: Path


def _center_slice(vol: Volume4D) -> np.ndarray:
    x, y, z, t = vol.dims
    return np.asarray(vol.data[:, :, z // 2, t // 2], dtype=np.float64)


def _load_bundle(root: Path) -> dict:
    path = root / "bundle.json"
    if not path.exists():
        raise IncompleteBundle(f"{root} has no bundle.json")
    bundle = json.loads(path.read_text())
    for key in ("manifest_id", "panels", "quality", "glm"):
        if key not in bundle:
            raise IncompleteBundle(f"bundle.json lacks '{key}'")
    return bundle


def _resolve(root: Path, rel) -> Path:
    p = Path(rel)
    p = p if p.is_absolute() else root / p
    if not p.exists():
        raise IncompleteBundle(f"bundle references missing file {rel}")
    return p


def _render_panel(panel: Panel) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    items = list(panel.images.items()) + [("clean - denoised", panel.difference)]
    fig, axes = plt.subplots(1, len(items), figsize=(3 * len(items), 3.2))
    lo = min(float(img.min()) for _, img in panel.images.items())
    hi = max(float(img.max()) for _, img in panel.images.items())
    for ax, (label, img) in zip(np.atleast_1d(axes), items):
        if label.startswith("clean -"):
            lim = max(float(np.abs(img).max()), 1e-12)
            ax.imshow(img.T, cmap="coolwarm", vmin=-lim, vmax=lim, origin="lower")
        else:
            ax.imshow(img.T, cmap="gray", vmin=lo, vmax=hi, origin="lower")
        ax.set_title(label)
        ax.axis("off")
    fig.suptitle(panel.subject)
    fig.tight_layout()
    fig.savefig(panel.path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _render_bars(chart: BarChart) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(chart.groups)), 3.5))
    width = 0.8 / max(len(chart.series), 1)
    x = np.arange(len(chart.groups))
    for i, (label, values) in enumerate(chart.series.items()):
        ax.bar(x + i * width, values, width, label=label)
    ax.set_xticks(x + width * (len(chart.series) - 1) / 2, chart.groups, rotation=30, ha="right")
    ax.axhline(0, color="black", lw=0.6)
    ax.set_ylabel("detected % - truth %")
    ax.set_title(chart.title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(chart.path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _fmt(mean: float, std: float, digits: int) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def render_report(bundle_dir) -> RenderedReport:
    """Comparison panels, ROI deviation bars and ``summary.md`` from a run directory."""
    root = Path(bundle_dir)
    bundle = _load_bundle(root)
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)

    panels = []
    for entry in bundle["panels"]:
        images = {"clean": _center_slice(load_volume(_resolve(root, entry["clean"])))}
        if entry.get("noisy"):
            images["noisy"] = _center_slice(load_volume(_resolve(root, entry["noisy"])))
        images["denoised"] = _center_slice(load_volume(_resolve(root, entry["denoised"])))
        panel = Panel(entry["subject"], images, images["clean"] - images["denoised"],
                      out / f"panel_{entry['subject']}.png")
        _render_panel(panel)
        panels.append(panel)

    charts = []
    glm = {label: json.loads(_resolve(root, rel).read_text()) for label, rel in bundle["glm"].items()}
    if glm:
        first = next(iter(glm.values()))
        groups = [r["name"] for r in first["rois"]]
        series = {}
        for label, rep in glm.items():
            by_name = {r["name"]: r["deviation"] for r in rep["rois"]}
            series[label] = [by_name[g] for g in groups]
        chart = BarChart("ROI detection deviation", groups, series, out / "glm_deviation.png")
        _render_bars(chart)
        charts.append(chart)

    lines = ["# Run summary", "", f"manifest: `{bundle['manifest_id']}`", ""]
    summary_rel = bundle.get("summary", {}).get("json")
    if summary_rel:
        summary = json.loads(_resolve(root, summary_rel).read_text())
        lines += ["| method | n | PSNR (dB) | SSIM |", "|---|---|---|---|"]
        for r in summary["rows"]:
            lines.append(f"| {r['method']} | {r['n']} | {_fmt(r['psnr_mean'], r['psnr_std'], 2)} | "
                         f"{_fmt(r['ssim_mean'], r['ssim_std'], 3)} |")
        lines.append("")
    for label, rep in glm.items():
        lines += [f"## GLM on {label} phantom", "",
                  f"threshold t > {rep['threshold']:.3f} (alpha {rep['alpha']}, dof {rep['dof']}); "
                  f"weighted deviation {rep['weighted_deviation']:.2f}%; Dice {rep['dice']:.3f}", "",
                  "| ROI | voxels | significant % | truth % | deviation |", "|---|---|---|---|---|"]
        for r in rep["rois"]:
            lines.append(f"| {r['name']} | {r['voxels']} | {r['pct_significant']:.1f} | "
                         f"{r['pct_ground_truth']:.1f} | {r['deviation']:+.1f} |")
        lines.append("")
    if panels:
        lines += ["## Slices", ""] + [f"![{p.subject}]({p.path.name})" for p in panels] + [""]
    if charts:
        lines += [f"![{c.title}]({c.path.name})" for c in charts] + [""]
    summary_path = out / "summary.md"
    summary_path.write_text("\n".join(lines))
    return RenderedReport(panels, charts, summary_path)
