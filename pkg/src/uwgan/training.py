"""Adversarial training loop, cross-validation splits, checkpoints and inference."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from uwgan.losses import (
    FeatureExtractor,
    LossWeights,
    adversarial_loss,
    discriminator_loss,
    gradient_penalty,
    mse_loss,
    perceptual_loss,
)
from uwgan.models import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, spec_hash
from uwgan.noise import RNG_ALGORITHM, RicianSpec, add_rician, make_rng, rician_magnitude
from uwgan.patching import ConfigMode, patchify, unpatchify
from uwgan.volume import Volume4D

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "L_MSE", "L_Per", "L_adv", "L_D", "GP")


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(1e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(1, ge=1)
    d_steps_per_g_step: int = Field(1, ge=1)
    seed: int = 0
    weights: LossWeights = LossWeights()
    mode: ConfigMode = ConfigMode.TIME_BASED
    patch_size: int = Field(32, ge=1)
    betas: tuple[float, float] = (0.5, 0.9)
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    renoise_per_epoch: bool = False
    perceptual_seed: int = 0

    @property
    def adversarial(self) -> bool:
        return self.weights.lambda_d > 0


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class CvSplit:
    fold_id: int
    train_subjects: list
    test_subjects: list


def make_splits(subject_ids, k: int, seed: int = 0) -> list[CvSplit]:
    """k folds over a seeded permutation; test sets differ in size by at most one."""
    ids = list(subject_ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} subjects")
    order = make_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, k)
    splits = []
    for fold, test_idx in enumerate(chunks):
        test = set(test_idx.tolist())
        splits.append(CvSplit(
            fold,
            [ids[i] for i in range(len(ids)) if i not in test],
            [ids[i] for i in sorted(test)],
        ))
    return splits


@dataclass
class PatchPairs:
    """Paired (noisy, clean) patches, each (N, s, s, s) float32.

    ``sigmas`` holds the per-patch Rician std used to re-draw the noise when
    training with per-epoch re-noising.
    """

    noisy: np.ndarray
    clean: np.ndarray
    sigmas: np.ndarray | None = None

    def __post_init__(self):
        if self.noisy.shape != self.clean.shape or self.noisy.ndim != 4:
            raise ValueError(f"noisy/clean patch arrays mismatch: {self.noisy.shape} vs {self.clean.shape}")
        if len(self.noisy) == 0:
            raise ValueError("empty patch dataset")

    def __len__(self) -> int:
        return len(self.noisy)

    def subset(self, idx) -> PatchPairs:
        return PatchPairs(self.noisy[idx], self.clean[idx], None if self.sigmas is None else self.sigmas[idx])


def build_patch_pairs(clean_volumes, delta: float, seed: int, mode: ConfigMode, patch_size: int, stride=None) -> PatchPairs:
    """Rician-corrupt each whole volume once, then tile clean and noisy copies identically."""
    noisy, clean, sigmas = [], [], []
    for i, vol in enumerate(clean_volumes):
        corrupted = add_rician(vol, RicianSpec(delta=delta, seed=seed + i))
        pc = patchify(vol, mode, patch_size, stride).patches
        pn = patchify(corrupted, mode, patch_size, stride).patches
        clean.append(pc)
        noisy.append(pn)
        sigmas.append(np.full(len(pc), delta * vol.intensity_max, dtype=np.float64))
    return PatchPairs(np.concatenate(noisy), np.concatenate(clean), np.concatenate(sigmas))


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    config: TrainConfig
    generator: Generator
    discriminator: Discriminator | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer | None
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    g = Generator(cfg.generator)
    d = None
    if cfg.adversarial:
        d = Discriminator(cfg.discriminator.model_copy(update={"patch_size": cfg.patch_size}))
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, betas=cfg.betas) if d is not None else None
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg, g, d, opt_g, opt_d, rng)


def _as_batch(arr: np.ndarray, idx) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr[idx])).unsqueeze(1)


def _check_finite(step: int, **values) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite {name} ({v}) at step {step}")


def _check_params(step: int, module: torch.nn.Module, label: str) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDiverged(f"non-finite parameter {label}.{name} after step {step}")


def train(data: PatchPairs, cfg: TrainConfig, state: TrainState | None = None, extractor=None, on_epoch=None) -> TrainState:
    """Run (or continue) training up to ``cfg.epochs`` epochs.

    Each batch updates the critic once; every ``d_steps_per_g_step``-th batch
    also updates the generator, reusing that batch's generated patches.
    """
    state = state or init_state(cfg)
    g, d = state.generator, state.discriminator
    w = cfg.weights
    extractor = extractor if extractor is not None else FeatureExtractor.random(seed=cfg.perceptual_seed)
    n = len(data)
    g.train()
    if d is not None:
        d.train()

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        noisy_src = data.noisy
        if cfg.renoise_per_epoch and data.sigmas is not None:
            rng = make_rng(cfg.seed * 100_003 + epoch)
            noisy_src = np.stack([rician_magnitude(c, s, rng) for c, s in zip(data.clean, data.sigmas)]).astype(np.float32)
        order = torch.randperm(n, generator=state.rng).numpy()
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for b, idx in enumerate(batches):
            noisy = _as_batch(noisy_src, idx)
            clean = _as_batch(data.clean, idx)
            fake = g(noisy)

            d_loss_v = gp_v = 0.0
            if d is not None:
                gp = gradient_penalty(d, clean, fake, generator=state.rng)
                d_loss = discriminator_loss(d(clean), d(fake.detach()), gp, w)
                d_loss_v, gp_v = d_loss.item(), gp.item()
                _check_finite(state.step, L_D=d_loss_v, GP=gp_v)
                state.opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                state.opt_d.step()
                _check_params(state.step, d, "discriminator")

            if (b + 1) % cfg.d_steps_per_g_step and b + 1 < len(batches):
                continue

            mse = mse_loss(fake, clean)
            per = perceptual_loss(extractor, fake, clean)
            total = w.lambda_mse * mse + w.lambda_per * per
            adv_v = 0.0
            if d is not None:
                adv = adversarial_loss(d(fake))
                total = total + w.lambda_d * adv
                adv_v = adv.item()
            row = {"step": state.step, "epoch": epoch, "L_MSE": mse.item(), "L_Per": per.item(),
                   "L_adv": adv_v, "L_D": d_loss_v, "GP": gp_v}
            _check_finite(state.step, L_MSE=row["L_MSE"], L_Per=row["L_Per"], L_adv=adv_v)
            state.opt_g.zero_grad(set_to_none=True)
            total.backward()
            state.opt_g.step()
            _check_params(state.step, g, "generator")
            state.history.append(row)
            state.step += 1
        state.epoch += 1
        log.info("epoch %d done, step %d, last L_MSE %.5g", state.epoch, state.step, state.history[-1]["L_MSE"])
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_history_csv(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row[c] if c in ("step", "epoch") else repr(float(row[c])) for c in HISTORY_COLUMNS])


# --- checkpoints -----------------------------------------------------------

def _module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{prefix}/{i}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, arrays: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        _, i, k = key.split("/")
        state.setdefault(int(i), {})[k] = torch.from_numpy(np.array(arr))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, directory) -> Path:
    """Write ``arrays.npz`` (all tensors) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _module_arrays(state.generator, "G")
    arrays.update(_optimizer_arrays(state.opt_g, "optG"))
    if state.discriminator is not None:
        arrays.update(_module_arrays(state.discriminator, "D"))
        arrays.update(_optimizer_arrays(state.opt_d, "optD"))
    arrays["rng"] = state.rng.get_state().numpy()
    np.savez(directory / "arrays.npz", **arrays)
    manifest = {
        "spec_hash": spec_hash(state.config.generator, state.config.discriminator),
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.config.seed,
        "rng_algorithms": {"torch": "mt19937", "numpy": RNG_ALGORITHM},
        "config": state.config.model_dump(mode="json"),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_history_csv(state.history, directory / "history.csv")
    return directory


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = TrainConfig.model_validate(manifest["config"])
    if spec_hash(cfg.generator, cfg.discriminator) != manifest["spec_hash"]:
        raise ValueError(f"checkpoint {directory} spec hash does not match its config")
    state = init_state(cfg)
    with np.load(directory / "arrays.npz") as npz:
        arrays = {k: npz[k] for k in npz.files}

    def module_state(prefix):
        return {k.split("/", 1)[1]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix + "/")}

    state.generator.load_state_dict(module_state("G"))
    _load_optimizer(state.opt_g, arrays, "optG")
    if state.discriminator is not None:
        state.discriminator.load_state_dict(module_state("D"))
        _load_optimizer(state.opt_d, arrays, "optD")
    state.rng.set_state(torch.from_numpy(arrays["rng"]))
    state.step = manifest["step"]
    state.epoch = manifest["epoch"]
    hist = directory / "history.csv"
    if hist.exists():
        with hist.open() as fh:
            state.history = [
                {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]
    return state


def load_generator(path, expected_spec: GeneratorSpec | None = None) -> Generator:
    state = load_checkpoint(path)
    if expected_spec is not None and state.generator.spec != expected_spec:
        raise ValueError(f"checkpoint generator spec {state.generator.spec} != expected {expected_spec}")
    return state.generator


# --- inference ---------------------------------------------------------------

@torch.no_grad()
def denoise(generator, vol: Volume4D, mode: ConfigMode, patch_size: int = 32, batch_size: int = 8) -> Volume4D:
    """merge -> patches -> generator (inference mode) -> reassemble -> unmerge."""
    if isinstance(generator, torch.nn.Module):
        generator.eval()
    patches = patchify(vol, mode, patch_size)
    arr = patches.patches
    out = np.empty_like(arr)
    for i in range(0, len(arr), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(arr[i:i + batch_size])).unsqueeze(1)
        if isinstance(generator, torch.nn.Module):
            x = x.to(next(generator.parameters()).dtype)
        out[i:i + batch_size] = generator(x)[:, 0].float().numpy()
    return unpatchify(patches.replace(out), vol.voxel_size_mm, vol.tr_seconds)
