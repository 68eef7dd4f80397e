"""Progressive WGAN-GP training loop with auxiliary label/embedding heads.

A *step* is one optimizer update. Steps cycle through ``n_critic`` trunk
updates followed by one generator update, so with ``n_critic=5`` every
sixth step updates the generator. Fade-in progress is measured in real
images shown to the discriminator.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import discriminator_loss, generator_loss
from .models import GanConfig, ProgressiveGAN, StageState, grow, sample_noise
from .ontology import Ontology
from .synthdata import ManifestDataset
from .textemb import WordVectorTable, embed_text_average

log = logging.getLogger(__name__)

__all__ = [
    "TrainSchedule",
    "TrainResult",
    "NumericalAbort",
    "TrainError",
    "make_gan_config",
    "train",
    "train_baseline",
    "load_gan",
    "variant_name",
    "alpha_for",
    "real_at_stage",
    "LOG_NAME",
    "META_NAME",
]

LOG_NAME = "train_log.jsonl"
META_NAME = "train_meta.json"
TIMING_NAME = "timing.jsonl"
CKPT_DIR = "ckpt"


class TrainError(RuntimeError):
    pass


class NumericalAbort(TrainError):
    """A loss became non-finite; ``checkpoint`` holds the diagnostic state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainSchedule:
    images_per_stage: int = 60_000
    images_per_fade: int = 30_000
    n_critic: int = 5
    batch_size: int = 32
    batch_size_by_resolution: dict = field(default_factory=lambda: {32: 16})
    lr: float = 1e-3
    betas: tuple = (0.0, 0.99)
    num_stages: int | None = None  # defaults to every stage up to max_resolution
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 0  # steps; stage ends are always checkpointed
    metrics_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.batch_size_by_resolution = {int(k): int(v) for k, v in self.batch_size_by_resolution.items()}
        if self.images_per_fade > self.images_per_stage:
            raise TrainError("images_per_fade must not exceed images_per_stage")
        if self.n_critic < 1:
            raise TrainError("n_critic must be >= 1")
        if self.batch_size < 1 or any(v < 1 for v in self.batch_size_by_resolution.values()):
            raise TrainError("batch sizes must be positive")
        if self.images_per_stage <= 0:
            raise TrainError("images_per_stage must be positive")

    def batch_for(self, resolution: int) -> int:
        return self.batch_size_by_resolution.get(resolution, self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["batch_size_by_resolution"] = {str(k): v for k, v in self.batch_size_by_resolution.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    stage: int


def variant_name(use_ontology: bool) -> str:
    return "ogan" if use_ontology else "baseline-category-only"


def make_gan_config(ontology: Ontology, use_ontology: bool = True, **overrides) -> GanConfig:
    return GanConfig(num_labels=ontology.num_labels(use_ontology), use_ontology=use_ontology,
                     **overrides)


def alpha_for(stage: int, images_in_stage: int, images_per_fade: int) -> float:
    if stage == 0 or images_per_fade <= 0:
        return 1.0
    return min(1.0, images_in_stage / images_per_fade)


def real_at_stage(images: torch.Tensor, stage: StageState) -> torch.Tensor:
    """Area-downsample real images to the stage resolution and apply the fade blur.

    During a fade the discriminator sees ``alpha*x + (1-alpha)*up(down(x))`` so
    reals carry the same low-frequency mix as the blended generator output.
    """
    r = stage.resolution
    if images.shape[-1] != r:
        images = F.adaptive_avg_pool2d(images, r)
    if stage.stage > 0 and stage.alpha < 1.0:
        coarse = F.interpolate(F.avg_pool2d(images, 2), scale_factor=2, mode="nearest")
        images = stage.alpha * images + (1.0 - stage.alpha) * coarse
    return images


def _finite(x) -> bool:
    return math.isfinite(float(x))


def _stream(seed: int, k: int) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), k]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s))


def _r(x):
    return None if x is None else float(x)


class _Loop:
    def __init__(self, config: GanConfig, schedule: TrainSchedule, dataset: ManifestDataset,
                 table: WordVectorTable, out_dir: Path, ontology: Ontology,
                 metrics_hook: Callable | None):
        self.cfg = config
        self.sch = schedule
        self.ds = dataset
        self.table = table
        self.out = out_dir
        self.ont = ontology
        self.metrics_hook = metrics_hook
        self.num_stages = schedule.num_stages or config.num_stages
        if self.num_stages > config.num_stages:
            raise TrainError(f"schedule has {self.num_stages} stages but config allows {config.num_stages}")
        final_res = GanConfig.resolution(self.num_stages - 1)
        if dataset.resolution < final_res:
            raise TrainError(
                f"dataset resolution {dataset.resolution} is below the final training "
                f"resolution {final_res}"
            )
        if table.dim != config.d_e:
            raise TrainError(f"word vectors have dim {table.dim}, config expects d_e={config.d_e}")
        self.labels = torch.as_tensor(dataset.sub if config.use_ontology else dataset.main)
        if int(self.labels.max()) >= config.num_labels:
            raise TrainError("dataset labels exceed the configured label count")
        self.embeds = torch.as_tensor(
            np.stack([embed_text_average(table, t).vector for t in dataset.texts])
        )
        self.reals = torch.as_tensor(dataset.float_images(np.arange(len(dataset)))).permute(0, 3, 1, 2).contiguous()

        self.gan = ProgressiveGAN(config)
        self.step = 0
        self.images_in_stage = 0
        self.images_total = 0
        self.epoch = 0
        self.cursor = 0
        self.noise_gen = _stream(schedule.seed, 0)
        self.eps_gen = _stream(schedule.seed, 1)
        self.cond_gen = _stream(schedule.seed, 2)
        self._perm = None
        self._make_optimizers()

    # -- state

    def _make_optimizers(self):
        kw = dict(lr=self.sch.lr, betas=self.sch.betas, eps=1e-8)
        self.opt_g = torch.optim.Adam(self.gan.G.parameters(), **kw)
        self.opt_d = torch.optim.Adam(self.gan.D.parameters(), **kw)

    @property
    def stage(self) -> int:
        return self.gan.G.built_stage

    def stage_state(self) -> StageState:
        return StageState(self.stage, alpha_for(self.stage, self.images_in_stage, self.sch.images_per_fade))

    def state_dict(self) -> dict:
        return {
            "G": self.gan.G.state_dict(),
            "D": self.gan.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "stage": self.stage,
            "alpha": self.stage_state().alpha,
            "step": self.step,
            "images_in_stage": self.images_in_stage,
            "images_total": self.images_total,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "rng": {
                "noise": self.noise_gen.get_state(),
                "eps": self.eps_gen.get_state(),
                "cond": self.cond_gen.get_state(),
            },
        }

    def load_state(self, st: dict):
        self.gan.grow_to(st["stage"])
        self.gan.G.load_state_dict(st["G"])
        self.gan.D.load_state_dict(st["D"])
        self._make_optimizers()
        self.opt_g.load_state_dict(st["opt_g"])
        self.opt_d.load_state_dict(st["opt_d"])
        for k in ("step", "images_in_stage", "images_total", "epoch", "cursor"):
            setattr(self, k, int(st[k]))
        self.noise_gen.set_state(st["rng"]["noise"])
        self.eps_gen.set_state(st["rng"]["eps"])
        self.cond_gen.set_state(st["rng"]["cond"])
        self._perm = None
        self.gan.stage = self.stage_state()

    def save(self, name: str, **extra) -> Path:
        self.gan.stage = self.stage_state()
        return save_checkpoint(
            self.out / CKPT_DIR / name, "gan", self.cfg.to_dict(), self.state_dict(),
            schedule=self.sch.to_dict(), ontology=self.ont.to_dict(),
            word_vectors=self.table.describe(), variant=variant_name(self.cfg.use_ontology),
            **extra,
        )

    # -- data

    def _next_indices(self, batch: int) -> torch.Tensor:
        out = []
        while len(out) < batch:
            if self._perm is None:
                self._perm = self.ds.permutation(self.sch.seed, self.epoch)
            take = self._perm[self.cursor:self.cursor + batch - len(out)]
            out.extend(take.tolist())
            self.cursor += len(take)
            if self.cursor >= len(self._perm):
                self.epoch += 1
                self.cursor = 0
                self._perm = None
        return torch.as_tensor(out, dtype=torch.long)

    def _conditioning(self, idx: torch.Tensor):
        b = len(idx)
        z = sample_noise(self.cfg.d_z, b, generator=self.noise_gen)
        y = self.labels[idx]
        e = self.embeds[idx]
        cond = torch.cat([z, e, F.one_hot(y, self.cfg.num_labels).float()], dim=1)
        return cond, y, e

    # -- steps

    def critic_step(self, st: StageState) -> dict:
        b = self.sch.batch_for(st.resolution)
        idx = self._next_indices(b)
        cond, y, e = self._conditioning(idx)
        with torch.no_grad():
            fake = self.gan.G(cond, st)
        real = real_at_stage(self.reals[idx], st)
        D = self.gan.D
        loss = discriminator_loss(
            lambda x: D(x, st), real, fake, y, e, gp_lambda=self.cfg.gp_lambda,
            head_weights=self.cfg.head_weights, drift=self.cfg.drift, generator=self.eps_gen,
        )
        self.opt_d.zero_grad(set_to_none=True)
        loss.total.backward()
        vals = loss.as_floats()
        if not all(map(_finite, vals.values())):
            raise self._abort(vals)
        self.opt_d.step()
        self.images_in_stage += b
        self.images_total += b
        return {"adv": vals["adv"], "gp": vals["gp"], "cls_real": vals["cls"],
                "reg_real": vals["reg"], "d_total": vals["total"]}

    def generator_step(self, st: StageState) -> dict:
        b = self.sch.batch_for(st.resolution)
        idx = torch.randint(len(self.ds), (b,), generator=self.cond_gen)
        cond, y, e = self._conditioning(idx)
        D = self.gan.D
        for p in D.parameters():
            p.requires_grad_(False)
        try:
            fake = self.gan.G(cond, st)
            loss = generator_loss(lambda x: D(x, st), fake, y, e, self.cfg.head_weights)
            self.opt_g.zero_grad(set_to_none=True)
            loss.total.backward()
        finally:
            for p in D.parameters():
                p.requires_grad_(True)
        vals = loss.as_floats()
        if not all(map(_finite, vals.values())):
            raise self._abort(vals)
        self.opt_g.step()
        return {"g_total": vals["total"], "g_adv": vals["adv"], "cond_ce": vals["cls"],
                "cond_l2": vals["reg"]}

    def _abort(self, vals) -> NumericalAbort:
        path = self.save(f"nan_step{self.step:07d}.pt", losses=vals)
        return NumericalAbort(f"non-finite loss at step {self.step}: {vals}", path)


def _record(loop: _Loop, kind: str, st: StageState, vals: dict) -> dict:
    ce_key = "cond_ce_sub" if loop.cfg.use_ontology else "cond_ce_main"
    cls_key = "cls_real_sub" if loop.cfg.use_ontology else "cls_real_main"
    return {
        "step": loop.step,
        "kind": kind,
        "stage": st.stage,
        "resolution": st.resolution,
        "alpha": st.alpha,
        "epoch": loop.images_total // len(loop.ds),
        "images": loop.images_total,
        "adv": _r(vals.get("adv")),
        "gp": _r(vals.get("gp")),
        cls_key: _r(vals.get("cls_real")),
        "reg_real": _r(vals.get("reg_real")),
        "d_total": _r(vals.get("d_total")),
        "g_total": _r(vals.get("g_total")),
        ce_key: _r(vals.get("cond_ce")),
        "cond_l2": _r(vals.get("cond_l2")),
    }


def _stage_boundary(loop: _Loop) -> bool:
    """Grow at the end of a finished stage; True when the last stage is done."""
    if loop.images_in_stage < loop.sch.images_per_stage:
        return False
    if loop.stage + 1 >= loop.num_stages:
        return True
    grow(loop.gan, loop.stage + 1)
    loop.images_in_stage = 0
    loop._make_optimizers()
    r = loop.stage_state().resolution
    log.info("grew to %dx%d at step %d", r, r, loop.step)
    return False


def _latest_checkpoint(out_dir: Path) -> Path | None:
    best, best_step = None, -1
    for p in sorted((out_dir / CKPT_DIR).glob("*.pt")):
        if p.name.startswith("nan_"):
            continue
        step = int(load_checkpoint(p, "gan")["state"]["step"])
        if step > best_step:
            best, best_step = p, step
    return best


def _truncate_log(path: Path, step: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip() and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")


def train(config: GanConfig, schedule: TrainSchedule, dataset: ManifestDataset,
          table: WordVectorTable, out_dir, ontology: Ontology | None = None,
          resume: bool = False, metrics_hook: Callable | None = None) -> TrainResult:
    """Run (or resume) progressive training and write checkpoints and logs to ``out_dir``.

    ``metrics_hook(gan, stage_state, step)`` is called every
    ``schedule.metrics_every`` steps when both are set; its returned dict
    is appended to ``metrics.jsonl``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ontology = ontology or dataset.ontology
    if ontology is None:
        raise TrainError("an ontology is required (none given and none stored with the dataset)")
    torch.use_deterministic_algorithms(True)
    loop = _Loop(config, schedule, dataset, table, out, ontology, metrics_hook)

    log_path = out / LOG_NAME
    timing_path = out / TIMING_NAME
    if resume:
        ck = _latest_checkpoint(out)
        if ck is None:
            raise TrainError(f"--resume given but no checkpoint under {out / CKPT_DIR}")
        payload = load_checkpoint(ck, "gan")
        loop.load_state(payload["state"])
        _truncate_log(log_path, loop.step)
        _truncate_log(timing_path, loop.step)
        _truncate_log(out / "metrics.jsonl", loop.step + 1)
        log.info("resumed from %s at step %d", ck, loop.step)
    else:
        for p in (log_path, timing_path, out / "metrics.jsonl"):
            p.unlink(missing_ok=True)

    meta = {
        "variant": variant_name(config.use_ontology),
        "label_layer": "sub" if config.use_ontology else "main",
        "num_labels": config.num_labels,
        "dataset_size": len(dataset),
        "config": config.to_dict(),
        "schedule": schedule.to_dict(),
        "word_vectors": table.describe(),
        "ontology": ontology.to_dict(),
    }
    (out / META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    cycle = schedule.n_critic + 1
    t0 = time.perf_counter()
    done = False
    if resume and loop.step % cycle == 0:
        # the checkpoint may sit exactly on a stage boundary that was not yet acted on
        done = _stage_boundary(loop)
    with log_path.open("a", encoding="utf-8") as flog, timing_path.open("a", encoding="utf-8") as ftime:
        while not done:
            if schedule.max_steps is not None and loop.step >= schedule.max_steps:
                break
            st = loop.stage_state()
            loop.gan.stage = st
            if loop.step % cycle < schedule.n_critic:
                kind, vals = "critic", loop.critic_step(st)
            else:
                kind, vals = "generator", loop.generator_step(st)
            flog.write(json.dumps(_record(loop, kind, st, vals)) + "\n")
            ftime.write(json.dumps({"step": loop.step, "wall": round(time.perf_counter() - t0, 4)}) + "\n")
            loop.step += 1

            if schedule.metrics_every and metrics_hook and loop.step % schedule.metrics_every == 0:
                m = metrics_hook(loop.gan, loop.stage_state(), loop.step)
                with (out / "metrics.jsonl").open("a", encoding="utf-8") as fm:
                    fm.write(json.dumps({"step": loop.step, **m}) + "\n")

            if schedule.checkpoint_every and loop.step % schedule.checkpoint_every == 0:
                flog.flush()
                loop.save(f"step{loop.step:07d}.pt")

            if kind == "generator" and loop.images_in_stage >= schedule.images_per_stage:
                flog.flush()
                loop.save(f"stage{loop.stage}.pt")
                done = _stage_boundary(loop)

    final = loop.save("final.pt")
    return TrainResult(final, log_path, loop.step, loop.stage)


def train_baseline(config: GanConfig, schedule: TrainSchedule, dataset: ManifestDataset,
                   table: WordVectorTable, out_dir, ontology: Ontology | None = None,
                   resume: bool = False, metrics_hook: Callable | None = None) -> TrainResult:
    """Category-only control: same loop, conditioned on main categories only."""
    ontology = ontology or dataset.ontology
    if config.use_ontology or (ontology is not None and config.num_labels != ontology.num_main):
        d = config.to_dict()
        d.update(use_ontology=False, num_labels=ontology.num_main)
        config = GanConfig.from_dict(d)
    return train(config, schedule, dataset, table, out_dir, ontology, resume, metrics_hook)


def load_gan(path) -> tuple[ProgressiveGAN, dict]:
    """Rebuild a trained model from a checkpoint; returns ``(gan, payload)``."""
    payload = load_checkpoint(path, "gan")
    cfg = GanConfig.from_dict(payload["config"])
    gan = ProgressiveGAN(cfg)
    st = payload["state"]
    gan.grow_to(st["stage"])
    gan.G.load_state_dict(st["G"])
    gan.D.load_state_dict(st["D"])
    gan.stage = StageState(st["stage"], float(st["alpha"]))
    gan.eval()
    return gan, payload
