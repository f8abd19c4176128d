"""Two-branch adversarial training with a 5:1 critic/generator schedule."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as D
from .config import TrainConfig
from .evaluation import EvalReport, evaluate
from .losses import (LossBreakdown, adversarial_g, critic_mean, gradient_penalty, loss_feat, loss_id,
                     loss_os, loss_perc, loss_sfr, total_generator_loss)
from .masking import compute_shadow_mask, invert_mask
from .networks import (Backbones, Critic, Generator, build_backbones, compose_output, deshadow,
                       generator_forward)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "unishadow-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = not enabled
        torch.backends.cudnn.deterministic = enabled


def _finite(value: torch.Tensor | None) -> bool:
    return value is None or bool(torch.isfinite(value).all())


def _item(value: torch.Tensor | None) -> float | None:
    return None if value is None else float(value.detach())


class Trainer:
    """Owns all parameter, optimiser and sampler state for one run.

    ``manifest`` must contain the training scenes only; hold-out happens in :func:`train`.
    """

    def __init__(self, config: TrainConfig, manifest: D.DatasetManifest, output_dir: str | Path | None = None,
                 backbones: Backbones | None = None):
        self.config = cfg = config
        self.manifest = manifest
        self.output_dir = Path(output_dir) if output_dir is not None else None
        if cfg.deterministic:
            set_deterministic(True)
        torch.manual_seed(cfg.seed)
        self.generator = Generator(cfg.generator_config())
        self.critic = Critic(cfg.critic_config())
        self.weights = cfg.loss_weights
        if backbones is None:
            backbones = build_backbones(cfg.backbone_vgg19, cfg.backbone_vgg16,
                                        cfg.checksum_vgg19 or None, cfg.checksum_vgg16 or None,
                                        need_perceptual=self.weights.perc > 0,
                                        need_invariant=self.weights.feat > 0)
        self.backbones = backbones

        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=betas)
        self.sched_g = torch.optim.lr_scheduler.StepLR(self.opt_g, cfg.lr_step, cfg.lr_gamma)
        self.sched_d = torch.optim.lr_scheduler.StepLR(self.opt_d, cfg.lr_step, cfg.lr_gamma)

        self.pairs = D.build_training_pairs(manifest, cfg.seed)
        if cfg.reference_dir:
            self.pool = D.reference_pool_from_dir(cfg.reference_dir)
        else:
            self.pool = D.reference_pool(manifest)
        self.store = D.ImageStore(cfg.image_size)
        log.info("%d training pairs from %d scenes; reference pool of %d images",
                 len(self.pairs), len(manifest.scenes()), len(self.pool))

        self.data_rng = np.random.default_rng([cfg.seed, 1])
        self.eps_rng = torch.Generator().manual_seed(cfg.seed)
        self.epoch = 0
        self.cursor = 0
        self.g_steps = 0
        self.d_steps = 0
        self.running: dict[str, list[float]] = {}
        self.steps_per_epoch = cfg.steps_per_epoch or max(1, len(self.pairs) // cfg.batch_size)
        # called as probe(stage, generator) around the two branch passes of a generator step
        self.branch_probe: Callable[[str, Generator], None] | None = None
        self.on_record: Callable[[dict], None] | None = None

    # --- data -------------------------------------------------------------------

    def _pair_tensors(self, pairs: Sequence[D.ScenePair]) -> tuple[torch.Tensor, torch.Tensor]:
        a = self.store.batch([p.a.shadow_path for p in pairs])
        b = self.store.batch([p.b.shadow_path for p in pairs])
        return a, b

    def sample_critic_batch(self) -> tuple[list[D.ScenePair], list[D.ReferenceImage]]:
        n = self.config.batch_size
        idx = self.data_rng.integers(len(self.pairs), size=n)
        # one reference per generated image, so the penalty sees both branches
        refs = [D.sample_reference(self.pool, self.data_rng) for _ in range(2 * n)]
        return [self.pairs[int(i)] for i in idx], refs

    def generator_batch(self) -> tuple[list[D.ScenePair], list[D.IdentityInput]]:
        n = self.config.batch_size
        order = D.epoch_order(len(self.pairs), self.config.seed, self.epoch)
        start = self.cursor * n
        pairs = [self.pairs[int(order[(start + j) % len(order)])] for j in range(n)]
        ids = [D.sample_identity_input(self.manifest, p.scene_id, self.data_rng) for p in pairs]
        for p, i in zip(pairs, ids):
            assert p.scene_id != i.scene_id, "identity input shares the pair's scene"
        return pairs, ids

    # --- steps ------------------------------------------------------------------

    def _guard(self, kind: str, tensors: dict, batch: dict) -> None:
        bad = [k for k, v in tensors.items() if not _finite(v)]
        if not bad:
            return
        where = ""
        if self.output_dir is not None:
            dump = self.output_dir / f"nonfinite_{kind}_step{self.g_steps:06d}.pt"
            torch.save({k: v.detach() for k, v in batch.items()}, dump)
            where = f"; batch dumped to {dump}"
        raise NonFiniteLossError(f"non-finite {', '.join(bad)} in {kind} step (epoch {self.epoch}, "
                                 f"generator step {self.g_steps}){where}")

    def train_step_d(self, pairs: Sequence[D.ScenePair], refs: Sequence[D.ReferenceImage]) -> LossBreakdown:
        a, b = self._pair_tensors(pairs)
        real = self.store.batch([r.path for r in refs])
        with torch.no_grad():
            fake = deshadow(self.generator, torch.cat([a, b]))
        d_fake = critic_mean(self.critic, fake)
        d_real = critic_mean(self.critic, real)
        gp = gradient_penalty(self.critic, real, fake, self.eps_rng)
        w = d_fake.double() - d_real.double()
        l_d = w + self.weights.gp * gp.double()
        self._guard("critic", {"l_d": l_d, "gp": gp}, {"a": a, "b": b, "real": real})
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()
        self.d_steps += 1
        return LossBreakdown(l_d=_item(l_d), wasserstein=_item(w), gp=_item(gp),
                             d_fake=_item(d_fake), d_real=_item(d_real))

    def branch_forward(self, a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Both branches through the one generator, one after the other."""
        probe = self.branch_probe
        act = self.generator.config.compose_activation
        if probe:
            probe("before_a", self.generator)
        out_a = compose_output(a, generator_forward(self.generator, a), act)
        if probe:
            probe("between", self.generator)
        out_b = compose_output(b, generator_forward(self.generator, b), act)
        if probe:
            probe("after_b", self.generator)
        return out_a, out_b

    def train_step_g(self, pairs: Sequence[D.ScenePair], identities: Sequence[D.IdentityInput]) -> LossBreakdown:
        w = self.weights
        a, b = self._pair_tensors(pairs)
        for p in self.critic.parameters():
            p.requires_grad_(False)
        try:
            out_a, out_b = self.branch_forward(a, b)
            l_g = adversarial_g(self.critic, out_a, out_b)
            terms: dict[str, torch.Tensor | None] = dict.fromkeys(("os", "perc", "sfr", "feat", "id"))
            if w.os > 0:
                terms["os"] = loss_os(out_a, out_b)
            if w.perc > 0:
                terms["perc"] = loss_perc(out_a, out_b, self.backbones.perceptual)
            if w.sfr > 0:
                keep_a = invert_mask(compute_shadow_mask(a, out_a))
                keep_b = invert_mask(compute_shadow_mask(b, out_b))
                terms["sfr"] = loss_sfr(a, out_a, keep_a, b, out_b, keep_b)
            if w.feat > 0:
                terms["feat"] = loss_feat(a, out_a, b, out_b, self.backbones.invariant)
            sf = None
            if w.id > 0:
                sf = self.store.batch([i.path for i in identities])
                terms["id"] = loss_id(sf, deshadow(self.generator, sf))
            total = total_generator_loss(l_g.double(), {k: v.double() if v is not None else None
                                                        for k, v in terms.items()}, w)
            batch = {"a": a, "b": b} if sf is None else {"a": a, "b": b, "identity": sf}
            self._guard("generator", {"total": total, "l_g": l_g, **terms}, batch)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            for p in self.critic.parameters():
                p.requires_grad_(True)
        self.g_steps += 1
        return LossBreakdown(l_g=_item(l_g), l_os=_item(terms["os"]), l_perc=_item(terms["perc"]),
                             l_sfr=_item(terms["sfr"]), l_feat=_item(terms["feat"]), l_id=_item(terms["id"]),
                             total=_item(total))

    # --- loop -------------------------------------------------------------------

    @property
    def metrics_path(self) -> Path | None:
        return self.output_dir / "metrics.jsonl" if self.output_dir is not None else None

    def _record(self, kind: str, losses: LossBreakdown) -> dict:
        rec = {"step": self.g_steps + self.d_steps, "kind": kind, "epoch": self.epoch, "g_step": self.g_steps,
               "lr": self.opt_g.param_groups[0]["lr"]}
        rec.update(losses.as_dict())
        for k, v in losses.as_dict().items():
            if v is not None:
                self.running.setdefault(f"{kind}:{k}", []).append(v)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if self.on_record:
            self.on_record(rec)
        return rec

    def _end_epoch(self) -> None:
        summary = {"epoch": self.epoch, "g_steps": self.g_steps,
                   **{k: float(np.mean(v)) for k, v in sorted(self.running.items())}}
        log.info("epoch %d done: %s", self.epoch, summary)
        if self.output_dir is not None:
            with open(self.output_dir / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(summary) + "\n")
        self.running = {}
        self.sched_g.step()
        self.sched_d.step()
        self.epoch += 1
        self.cursor = 0

    def fit(self) -> list[Path]:
        """Run (or resume) training; returns the checkpoints written, in order."""
        cfg = self.config
        written: list[Path] = []
        if self.output_dir is not None:
            (self.output_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        stop = False
        while self.epoch < cfg.epochs and not stop:
            while self.cursor < self.steps_per_epoch:
                if cfg.max_steps and self.g_steps >= cfg.max_steps:
                    stop = True
                    break
                for _ in range(cfg.d_steps_per_g):
                    self._record("d", self.train_step_d(*self.sample_critic_batch()))
                self._record("g", self.train_step_g(*self.generator_batch()))
                self.cursor += 1
                if cfg.checkpoint_every and self.g_steps % cfg.checkpoint_every == 0:
                    written.append(self._checkpoint(f"step_{self.g_steps:06d}.ckpt"))
            if not stop:
                finished = self.epoch
                self._end_epoch()
                written.append(self._checkpoint(f"epoch_{finished:03d}.ckpt"))
        if self.output_dir is not None:
            written.append(self._checkpoint("last.ckpt"))
        return [p for p in written if p is not None]

    # --- checkpoints --------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "generator": self.generator.state_dict(),
            "critic": self.critic.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "sched_g": self.sched_g.state_dict(),
            "sched_d": self.sched_d.state_dict(),
            "epoch": self.epoch,
            "cursor": self.cursor,
            "g_steps": self.g_steps,
            "d_steps": self.d_steps,
            "rng": {
                "data": self.data_rng.bit_generator.state,
                "eps": self.eps_rng.get_state(),
                "torch": torch.get_rng_state(),
            },
            "running": self.running,
        }

    def load_state_dict(self, state: dict) -> None:
        check_header(state)
        self.generator.load_state_dict(state["generator"])
        self.critic.load_state_dict(state["critic"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.sched_g.load_state_dict(state["sched_g"])
        self.sched_d.load_state_dict(state["sched_d"])
        self.epoch, self.cursor = state["epoch"], state["cursor"]
        self.g_steps, self.d_steps = state["g_steps"], state["d_steps"]
        self.data_rng.bit_generator.state = state["rng"]["data"]
        self.eps_rng.set_state(state["rng"]["eps"])
        torch.set_rng_state(state["rng"]["torch"])
        self.running = {k: list(v) for k, v in state["running"].items()}

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)
        return path

    def _checkpoint(self, name: str) -> Path | None:
        if self.output_dir is None:
            return None
        return self.save_checkpoint(self.output_dir / "checkpoints" / name)

    @classmethod
    def from_checkpoint(cls, path: str | Path, manifest: D.DatasetManifest, output_dir=None,
                        backbones: Backbones | None = None) -> "Trainer":
        state = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(state["config"]), manifest, output_dir, backbones)
        trainer.load_state_dict(state)
        return trainer


def check_header(state: dict) -> None:
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a unishadow checkpoint")
    if state.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {state['version']} is newer than supported {CHECKPOINT_VERSION}")


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    check_header(state)
    return state


def load_generator(path: str | Path) -> Generator:
    state = load_checkpoint(path)
    gen = Generator(TrainConfig.from_dict(state["config"]).generator_config())
    gen.load_state_dict(state["generator"])
    gen.eval()
    return gen


def infer(generator: Generator, image: torch.Tensor) -> torch.Tensor:
    """Single-branch de-shadowing of one image (3, H, W) or a batch."""
    with torch.no_grad():
        return deshadow(generator, image)


def make_predictor(generator: Generator) -> Callable[[np.ndarray], np.ndarray]:
    def predict(rgb: np.ndarray) -> np.ndarray:
        return D.denormalize(infer(generator, D.normalize(rgb)))
    return predict


def evaluate_generator(generator: Generator, manifest: D.DatasetManifest,
                       size: tuple[int, int] | None = None) -> EvalReport:
    return evaluate(manifest, predict=make_predictor(generator), size=size)


def select_best_checkpoint(checkpoints: Sequence[str | Path], val_manifest: D.DatasetManifest,
                           size: tuple[int, int] | None = None) -> tuple[Path, dict[Path, float]]:
    """Checkpoint with the lowest RMSE(A) on ``val_manifest``; ties go to the earliest."""
    if not checkpoints:
        raise ValueError("no checkpoints to choose from")
    scores: dict[Path, float] = {}
    ranked = []
    for order, path in enumerate(checkpoints):
        path = Path(path)
        state = load_checkpoint(path)
        gen = Generator(TrainConfig.from_dict(state["config"]).generator_config())
        gen.load_state_dict(state["generator"])
        gen.eval()
        score = evaluate_generator(gen, val_manifest, size).rmse_all
        scores[path] = score
        ranked.append((score, state["g_steps"], order, path))
    best = min(ranked, key=lambda r: (r[0], r[1], r[2]))
    return best[3], scores


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoints: list[Path]
    best: Path | None = None
    val_scores: dict = field(default_factory=dict)


def train(config: TrainConfig, manifest: D.DatasetManifest, output_dir: str | Path | None = None,
          backbones: Backbones | None = None, resume: str | Path | None = None) -> TrainResult:
    """Hold out validation scenes, train, and pick the best epoch checkpoint."""
    val = None
    if config.val_fraction > 0:
        manifest, val = D.split_validation(manifest, config.val_fraction)
    log.info("pair count: %d (from %d training records)", D.count_pairs(manifest), len(manifest))
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, manifest, output_dir, backbones)
    else:
        trainer = Trainer(config, manifest, output_dir, backbones)
    checkpoints = trainer.fit()
    result = TrainResult(trainer, checkpoints)
    epoch_ckpts = [p for p in checkpoints if p.name.startswith("epoch_")]
    if config.select_best and val is not None and epoch_ckpts:
        if all(r.mask_path and r.free_path for r in val.records):
            result.best, result.val_scores = select_best_checkpoint(epoch_ckpts, val, config.image_size)
            log.info("best checkpoint: %s", result.best)
        else:
            log.warning("validation scenes lack masks or shadow-free images; skipping checkpoint selection")
    return result


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def is_finite_record(rec: dict) -> bool:
    return all(v is None or not isinstance(v, float) or math.isfinite(v) for v in rec.values())
