"""Alternating critic/generator training with batch chunking, checkpoints and a step log."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from axialinterp.checkpoint import save_checkpoint
from axialinterp.critic import Critic, gradient_penalty
from axialinterp.flownet import STUDENT_WIDTHS, TEACHER_WIDTH, SliceGenerator
from axialinterp.objectives import LossReport, LossWeights, critic_loss, generator_loss
from axialinterp.triplets import TripletSample, augment
from axialinterp.volio import MODEL_SIZE

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; the last written checkpoint is the last good one."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "fixed"
    critic_steps_per_gen: int = 1
    seed: int = 0
    device_count: int = 1
    device: str = "cpu"
    augment: bool = True
    frame_size: int = MODEL_SIZE
    widths: tuple[int, int, int] = STUDENT_WIDTHS
    teacher_width: int = TEACHER_WIDTH
    teacher_grad_to_student: bool = True
    max_steps: int | None = None
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        self.widths = tuple(self.widths)
        if self.device_count < 1 or self.batch_size % self.device_count:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by device_count {self.device_count}")
        if self.mode not in ("fixed", "plus"):
            raise ValueError(f"mode must be 'fixed' or 'plus', got {self.mode!r}")
        if self.critic_steps_per_gen < 1:
            raise ValueError("critic_steps_per_gen must be >= 1")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        return d

    def config_hash(self) -> str:
        d = self.as_dict()
        for k in ("checkpoint_dir", "log_path"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)


@dataclass
class Batch:
    i0: torch.Tensor
    ig: torch.Tensor
    i1: torch.Tensor
    z: torch.Tensor

    def __len__(self) -> int:
        return self.i0.shape[0]

    def slice(self, lo: int, hi: int) -> "Batch":
        return Batch(self.i0[lo:hi], self.ig[lo:hi], self.i1[lo:hi], self.z[lo:hi])

    def dpm(self, mode: str) -> torch.Tensor | None:
        if mode != "plus":
            return None
        return self.z.view(-1, 1, 1, 1).expand_as(self.i0).contiguous()


def collate(samples: list[TripletSample], device="cpu") -> Batch:
    def stack(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples]).astype(np.float32))[:, None].to(device)

    z = torch.tensor([s.z for s in samples], dtype=torch.float32, device=device)
    return Batch(stack("i0"), stack("ig"), stack("i1"), z)


def chunk_bounds(n: int, chunks: int) -> list[tuple[int, int]]:
    """Contiguous split of ``n`` samples into ``chunks`` parts along the batch dimension."""
    edges = np.linspace(0, n, chunks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def check_dataset(samples: list[TripletSample], mode: str) -> None:
    if not samples:
        raise ValueError("training set is empty")
    if mode == "fixed":
        off = [s.source for s in samples if s.z != 0.5]
        if off:
            raise ValueError(f"fixed-mode training needs midpoint triplets; {len(off)} have z != 0.5 (e.g. {off[0]})")


class Trainer:
    """Owns the generator, the critic and their optimizers."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.generator = SliceGenerator(cfg.mode, cfg.widths, cfg.teacher_width, cfg.teacher_grad_to_student).to(cfg.device)
        self.adversarial = cfg.weights.adv > 0
        self.critic = Critic(cfg.frame_size).to(cfg.device) if self.adversarial else None
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=cfg.betas) if self.critic is not None else None
        self.step = 0
        self.critic_updates = 0
        self.generator_updates = 0
        self.train_seconds = 0.0
        self._fit_started: float | None = None

    # -- gradient accumulation over batch chunks -----------------------------

    def accumulate_generator_grads(self, batch: Batch, chunks: int | None = None) -> LossReport:
        """Zero, then fill generator grads with the batch-mean loss, one chunk at a time."""
        chunks = chunks or self.cfg.device_count
        self.opt_g.zero_grad(set_to_none=True)
        if self.critic is not None:
            self.critic.requires_grad_(False)
        n = len(batch)
        total = LossReport()
        try:
            for lo, hi in chunk_bounds(n, chunks):
                part = batch.slice(lo, hi)
                frac = (hi - lo) / n
                out = self.generator(part.i0, part.i1, part.dpm(self.cfg.mode), ig=part.ig)
                scores = self.critic(out.student) if self.critic is not None else None
                loss, rep = generator_loss(out, part.ig, self.cfg.weights, scores)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite generator loss at step {self.step}")
                (loss * frac).backward()
                _accumulate(total, rep, frac)
        finally:
            if self.critic is not None:
                self.critic.requires_grad_(True)
        return total

    def accumulate_critic_grads(self, batch: Batch, chunks: int | None = None) -> LossReport:
        chunks = chunks or self.cfg.device_count
        self.opt_d.zero_grad(set_to_none=True)
        n = len(batch)
        gen = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + self.step)
        alpha = torch.rand(n, generator=gen).to(batch.i0.device)
        total = LossReport()
        for lo, hi in chunk_bounds(n, chunks):
            part = batch.slice(lo, hi)
            frac = (hi - lo) / n
            with torch.no_grad():
                fake = self.generator.student_forward(part.i0, part.i1, part.dpm(self.cfg.mode)).student
            real_s = self.critic(part.ig)
            fake_s = self.critic(fake)
            gp = gradient_penalty(self.critic, part.ig, fake, alpha=alpha[lo:hi])
            loss = critic_loss(real_s, fake_s, gp, self.cfg.weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite critic loss at step {self.step}")
            (loss * frac).backward()
            _accumulate(total, LossReport(critic_wass=(fake_s.mean() - real_s.mean()).item(), critic_gp=gp.item(), total_D=loss.item()), frac)
        return total

    # -- optimization steps --------------------------------------------------

    def train_step(self, batch: Batch) -> LossReport:
        report = LossReport()
        if self.adversarial:
            for _ in range(self.cfg.critic_steps_per_gen):
                rep_d = self.accumulate_critic_grads(batch)
                self.opt_d.step()
                self.critic_updates += 1
            report.critic_wass, report.critic_gp, report.total_D = rep_d.critic_wass, rep_d.critic_gp, rep_d.total_D
        rep_g = self.accumulate_generator_grads(batch)
        self.opt_g.step()
        self.generator_updates += 1
        self.step += 1
        for k in ("rec_student", "rec_teacher", "distill", "adv_gen", "total_G"):
            setattr(report, k, getattr(rep_g, k))
        return report

    def batches(self, samples: list[TripletSample], epoch: int):
        rng = np.random.default_rng([self.cfg.seed, epoch])
        order = rng.permutation(len(samples))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            chosen = [samples[i] for i in idx]
            if self.cfg.augment:
                chosen = [augment(s, np.random.default_rng([self.cfg.seed, epoch, int(i)])) for s, i in zip(chosen, idx)]
            yield collate(chosen, self.cfg.device)

    def fit(self, samples: list[TripletSample], on_epoch=None) -> list[dict]:
        """Run the configured epochs; returns the per-step log records."""
        check_dataset(samples, self.cfg.mode)
        self.generator.train()
        records = []
        log_file = None
        if self.cfg.log_path:
            Path(self.cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(self.cfg.log_path, "a")
        self._fit_started = time.perf_counter()
        try:
            for epoch in range(self.cfg.epochs):
                for batch in self.batches(samples, epoch):
                    if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                        break
                    rep = self.train_step(batch)
                    rec = {"step": self.step, "epoch": epoch, "batch": len(batch), **rep.as_dict()}
                    records.append(rec)
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
                if self.cfg.checkpoint_dir:
                    self.save(Path(self.cfg.checkpoint_dir) / f"epoch_{epoch + 1:04d}.pt", epoch + 1)
                if on_epoch:
                    on_epoch(epoch, records)
                if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
                    break
        finally:
            self.train_seconds += time.perf_counter() - self._fit_started
            self._fit_started = None
            if log_file:
                log_file.close()
        return records

    def elapsed(self) -> float:
        running = time.perf_counter() - self._fit_started if self._fit_started is not None else 0.0
        return self.train_seconds + running

    def save(self, path, epoch: int | None = None) -> Path:
        extra = {"config_hash": self.cfg.config_hash(), "epoch": epoch, "step": self.step, "train_seconds": self.elapsed()}
        return save_checkpoint(path, self.generator, self.critic, extra)


def _accumulate(total: LossReport, rep: LossReport, frac: float) -> None:
    for k, v in rep.as_dict().items():
        setattr(total, k, getattr(total, k) + frac * v)


def train(cfg: TrainConfig, samples: list[TripletSample]) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(cfg)
    return trainer, trainer.fit(samples)


def epoch_means(records: list[dict], key: str = "rec_student") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def overfit_probe(cfg: TrainConfig, stacks: dict, steps: int = 300, max_triplets: int = 32) -> dict:
    """Train briefly on the midpoint triplets of ``stacks`` and score the student against cubic z-interpolation.

    Both predictors are scored by SSIM on the held-out middle slices of the
    training triplets, in the 8-bit domain. The cubic baseline for a triplet
    sees every second slice of its stack (same parity as the triplet's ends).
    """
    from axialinterp.evalkit import interpolate_z, ssim
    from axialinterp.triplets import extract_fixed_triplets
    from axialinterp.volio import normalize_stack
    from axialinterp.zaugment import predict_frames

    if steps > 500:
        raise ValueError("the probe is limited to 500 steps")
    samples = []
    for sid, st in stacks.items():
        samples += extract_fixed_triplets(st, stack_id=sid, policy="resize", size=cfg.frame_size)
    samples = samples[:max_triplets]
    cfg = replace(cfg, max_steps=steps, epochs=max(1, math.ceil(steps * cfg.batch_size / len(samples)) + 1))
    trainer = Trainer(cfg)
    records = trainer.fit(samples) if steps > 0 else []

    pred = predict_frames(trainer.generator, np.stack([s.i0 for s in samples]), np.stack([s.i1 for s in samples]), 0.5)
    baseline = []
    cubic_cache: dict = {}
    for s in samples:
        sid, a, b, c = s.source
        parity = a % 2
        if (sid, parity) not in cubic_cache:
            vol = normalize_stack(stacks[sid]).voxels[parity::2]
            cubic_cache[sid, parity] = np.clip(interpolate_z(vol, 2), 0, 1) if len(vol) >= 2 else None
        cub = cubic_cache[sid, parity]
        baseline.append(cub[(b - parity)])
    to8 = lambda x: np.rint(np.clip(x, 0, 1) * 255)
    final = float(np.mean([ssim(to8(p), to8(s.ig)) for p, s in zip(pred, samples)]))
    cubic = float(np.mean([ssim(to8(p), to8(s.ig)) for p, s in zip(baseline, samples)]))
    return {
        "final_ssim": final,
        "bicubic_ssim": cubic,
        "steps": trainer.step,
        "triplets": len(samples),
        "epoch_rec_student": epoch_means(records, "rec_student") if records else [],
        "epoch_rec_total": epoch_means([{**r, "rec": r["rec_student"] + r["rec_teacher"]} for r in records], "rec") if records else [],
    }
