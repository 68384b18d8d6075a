"""Pretraining loop with bulk-synchronous workers, warmup-cosine schedule and resumable checkpoints.

Every random choice in a step (which region a sample slot reads, the
timestep-dropout draw, the mask) is keyed by ``(seed, step, slot)``, never by
which worker handles the slot.  Worker count therefore only changes how the
effective batch is partitioned, and the averaged gradient is the same as the
single-worker gradient over the whole batch.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .encoding import time_indices
from .masking import SCHEMES, make_mask
from .model import Batch, EarthMAE, ModelConfig
from .region_store import Region, SourceTensor
from .synthgen import keyed_rng
from .tokenizer import BandStats, BandStatsAccumulator, resize_bilinear

log = logging.getLogger(__name__)

REFERENCE_BATCH = 256


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup from 0 to ``lr_max``, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads if g is not None))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float) -> Tuple[Sequence[torch.Tensor], float]:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before_clipping)``.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g.mul_(scale)
        # low-precision rounding can leave the norm a hair above the cap
        while global_norm(grads) > max_norm:
            for g in grads:
                if g is not None:
                    g.mul_(1.0 - float(torch.finfo(g.dtype).eps))
    return grads, norm


@dataclass(frozen=True)
class Task:
    task_id: int
    sources: Tuple[str, ...]


def make_tasks(sources: Sequence[str], tasks: Optional[Sequence[Sequence[str]]] = None) -> List[Task]:
    """Default: one task per source plus one task with every source."""
    sources = list(sources)
    if not sources:
        raise ValueError("empty source catalog")
    if tasks is None:
        groups = [[s] for s in sources]
        if len(sources) > 1:
            groups.append(sources)
    else:
        groups = [list(t) for t in tasks]
        for g in groups:
            if not g:
                raise ValueError("tasks must be nonempty")
            unknown = set(g) - set(sources)
            if unknown:
                raise ValueError(f"task uses unknown sources {sorted(unknown)}")
        covered = {s for g in groups for s in g}
        missing = [s for s in sources if s not in covered]
        if missing:
            raise ValueError(f"uncovered source(s): {missing}")
    return [Task(i, tuple(g)) for i, g in enumerate(groups)]


@dataclass
class TrainConfig:
    effective_batch: int = 2048
    base_lr: float = 1.32e-4
    epochs: int = 100
    warmup_epochs: int = 10
    weight_decay: float = 0.0457
    clip_norm: float = 1.0
    mask_scheme: str = "tube"
    mask_ratio: float = 0.9
    rand_ratio: float = 0.25
    seed: int = 0
    workers: int = 1
    tasks: Optional[List[List[str]]] = None
    timestep_dropout: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.95)
    # desk-scale overrides of the epoch-based schedule
    steps: Optional[int] = None
    warmup_steps: Optional[int] = None
    max_timesteps: Optional[int] = None
    high_precision: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    @property
    def lr_max(self) -> float:
        return self.base_lr * self.effective_batch / REFERENCE_BATCH

    def validate(self):
        if self.effective_batch < 1 or self.workers < 1:
            raise ValueError("effective_batch and workers must be >= 1")
        if self.effective_batch % self.workers:
            raise ValueError("effective_batch must be divisible by workers")
        if self.steps is None and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.mask_scheme not in SCHEMES:
            raise ValueError(f"mask_scheme must be one of {SCHEMES}")
        if not 0.0 <= self.mask_ratio <= 1.0 or not 0.0 <= self.timestep_dropout <= 1.0:
            raise ValueError("ratios and probabilities must lie in [0, 1]")

    def schedule(self, n_regions: int) -> Tuple[int, int]:
        """``(total_steps, warmup_steps)`` for a dataset of ``n_regions``."""
        per_epoch = max(1, math.ceil(n_regions / self.effective_batch))
        total = self.steps if self.steps is not None else self.epochs * per_epoch
        warmup = self.warmup_steps if self.warmup_steps is not None else self.warmup_epochs * per_epoch
        if warmup >= total:
            raise ValueError(f"warmup ({warmup} steps) must be shorter than training ({total} steps)")
        return total, warmup

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["betas"] = tuple(d["betas"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def hash(self) -> str:
        # worker count is a partitioning detail, not a property of the run
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict

    @property
    def step(self) -> int:
        return int(self.meta["step"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def save(self, path) -> int:
        return ckpt_io.save(path, self.tensors, self.meta)

    def to_bytes(self) -> bytes:
        return ckpt_io.encode(self.tensors, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = ckpt_io.load(path)
        return cls(tensors, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        tensors, meta = ckpt_io.decode(blob)
        return cls(tensors, meta)

    def stats(self) -> Dict[str, BandStats]:
        out = {}
        for name in self.meta["sources"]:
            out[name] = BandStats(self.tensors[f"stats.{name}.mean"], self.tensors[f"stats.{name}.std"],
                                  self.meta["stats_epsilon"])
        return out

    def build_model(self) -> EarthMAE:
        cfg = self.config
        model = EarthMAE(cfg.model, self.meta["sources"])
        if cfg.high_precision:
            model.double()
        state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                 if k.startswith("model.")}
        model.load_state_dict(state)
        return model


class Trainer:
    """Holds model, optimizer and data cache; :meth:`step` runs one synchronous update."""

    def __init__(self, config: TrainConfig, dataset: Sequence[Region], checkpoint: Optional[Checkpoint] = None,
                 log_path=None):
        config.validate()
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        self.config = config
        self.dataset = dataset
        self.dtype = torch.float64 if config.high_precision else torch.float32
        self.total_steps, self.warmup_steps = config.schedule(len(dataset))
        self.log_path = log_path
        self._cache: Dict[Tuple[int, str], Tuple[torch.Tensor, torch.Tensor]] = {}

        first = dataset[0]
        self.source_bands = {n: s.profile.bands for n, s in first.sources.items()}
        self.tasks = make_tasks(list(self.source_bands), config.tasks)

        if checkpoint is not None:
            if checkpoint.meta["config_hash"] != config.hash():
                raise ValueError("checkpoint was written with a different training config")
            self.stats = checkpoint.stats()
            self.model = checkpoint.build_model()
            self.step_index = checkpoint.step
        else:
            self.stats = self._compute_stats()
            with torch.random.fork_rng():
                torch.manual_seed(config.seed)
                self.model = EarthMAE(config.model, self.source_bands)
            self.model.to(self.dtype)
            self.step_index = 0

        decay = [p for p in self.model.parameters() if p.ndim >= 2]
        no_decay = [p for p in self.model.parameters() if p.ndim < 2]
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": config.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=0.0, betas=tuple(config.betas),
        )
        if checkpoint is not None:
            self._restore_optimizer(checkpoint)

    # -- data --------------------------------------------------------------------------------
    def _truncate(self, src: SourceTensor) -> SourceTensor:
        k = self.config.max_timesteps
        if k is None or src.t <= k:
            return src
        return SourceTensor(src.profile, src.data[:k], src.timestamps[:k])

    def _compute_stats(self) -> Dict[str, BandStats]:
        # one generation pass: stats from the raw data, resized images cached on the way
        acc = {n: BandStatsAccumulator() for n in self.source_bands}
        for i in range(len(self.dataset)):
            region = self.dataset[i]
            for name in self.source_bands:
                src = self._truncate(region.sources[name])
                acc[name].update(src.data)
                self._cache_source(i, name, src)
        return {n: a.result() for n, a in acc.items()}

    def _cache_source(self, index: int, name: str, src: SourceTensor):
        raw = torch.from_numpy(np.ascontiguousarray(src.data, dtype=np.float64))
        image = resize_bilinear(raw, self.config.model.image_size).to(torch.float32)
        self._cache[(index, name)] = (image, time_indices(src.timestamps))

    def _source(self, index: int, name: str):
        if (index, name) not in self._cache:
            region = self.dataset[index]
            for n in self.source_bands:
                if (index, n) not in self._cache and n in region.sources:
                    self._cache_source(index, n, self._truncate(region.sources[n]))
            if (index, name) not in self._cache:
                raise KeyError(f"region {region.region_id} has no source {name!r}")
        raw_image, stamps = self._cache[(index, name)]
        # standardizing after the resize equals resizing the standardized
        # image: bilinear weights sum to one
        st = self.stats[name]
        mean = torch.as_tensor(st.mean, dtype=torch.float64).view(-1, 1, 1)
        scale = torch.as_tensor(st.std + st.epsilon, dtype=torch.float64).view(-1, 1, 1)
        image = ((raw_image.to(torch.float64) - mean) / scale).to(self.dtype)
        return image, stamps

    def region_for(self, step: int, slot: int) -> int:
        B, n = self.config.effective_batch, len(self.dataset)
        pos = step * B + slot
        epoch, offset = divmod(pos, n)
        return int(keyed_rng(self.config.seed, "epoch", epoch).permutation(n)[offset])

    def task_for(self, step: int, slot: int) -> Task:
        # the batch is cut into len(tasks) contiguous chunks; chunk j runs task (step + j) mod n
        n_tasks, B = len(self.tasks), self.config.effective_batch
        chunk = slot * n_tasks // B
        return self.tasks[(step + chunk) % n_tasks]

    def _assemble(self, step: int, slots: Sequence[int], task: Task):
        images = {n: [] for n in task.sources}
        stamps = {n: [] for n in task.sources}
        masks = []
        cfg = self.config
        p = cfg.model.num_patches
        entries = []
        for slot in slots:
            idx = self.region_for(step, slot)
            per = {n: self._source(idx, n) for n in task.sources}
            entries.append((slot, per))
        t = min(img.shape[0] for _, per in entries for img, _ in per.values())
        for slot, per in entries:
            rng = keyed_rng(cfg.seed, "sample", step, slot)
            drop = rng.random() < cfg.timestep_dropout
            for n in task.sources:
                img, ts = per[n]
                images[n].append(img[:t])
                stamps[n].append(torch.zeros_like(ts[:t]) if drop else ts[:t])
            m = make_mask(cfg.mask_scheme, t, len(task.sources), p, cfg.mask_ratio, rng, cfg.rand_ratio)
            masks.append(m.to_tensor())
        batch = Batch({n: torch.stack(v) for n, v in images.items()}, {n: torch.stack(v) for n, v in stamps.items()})
        return batch, torch.stack(masks)

    def _groups(self, step: int, slots: Sequence[int]):
        """Consecutive slots sharing a task and timestep count, batched together."""
        groups: List[Tuple[Task, List[int]]] = []
        for slot in slots:
            task = self.task_for(step, slot)
            idx = self.region_for(step, slot)
            t = min(self._source(idx, n)[0].shape[0] for n in task.sources)
            key = (task, t)
            if groups and groups[-1][0] == key:
                groups[-1][1].append(slot)
            else:
                groups.append((key, [slot]))
        return [(key[0], s) for key, s in groups]

    # -- optimisation ------------------------------------------------------------------------
    def step(self) -> dict:
        cfg = self.config
        k = self.step_index
        if k >= self.total_steps:
            raise RuntimeError("training already finished")
        B, W = cfg.effective_batch, cfg.workers
        m = B // W
        lr = lr_at(k, self.total_steps, self.warmup_steps, cfg.lr_max)
        for g in self.optimizer.param_groups:
            g["lr"] = lr

        first_epoch, last_epoch = (k * B) // len(self.dataset), (k * B + B - 1) // len(self.dataset)
        if last_epoch != first_epoch:
            log.info("step %d: data exhausted, wrapping to epoch %d", k, last_epoch)

        params = list(self.model.parameters())
        summed = [torch.zeros_like(p) for p in params]
        task_losses: Dict[int, List[float]] = {}
        step_loss = 0.0
        for w in range(W):
            slots = list(range(w * m, (w + 1) * m))
            self.model.zero_grad(set_to_none=True)
            total = None
            for task, group in self._groups(k, slots):
                batch, masks = self._assemble(k, group, task)
                losses, _ = self.model.sample_losses(batch, masks)
                total = losses.sum() if total is None else total + losses.sum()
                task_losses.setdefault(task.task_id, []).extend(losses.detach().tolist())
            worker_loss = total / m
            step_loss += worker_loss.item() / W
            if not math.isfinite(worker_loss.item()):
                self._abort(k)
            worker_loss.backward()
            for acc, p in zip(summed, params):
                if p.grad is not None:
                    acc.add_(p.grad)
        for p, acc in zip(params, summed):
            p.grad = acc / W
        grads = [p.grad for p in params]
        _, norm = clip_gradients(grads, cfg.clip_norm)
        self.optimizer.step()
        self.step_index += 1

        record = {
            "step": k,
            "task_id": sorted(task_losses),
            "loss": step_loss,
            "lr": lr,
            "grad_norm": norm,
            "task_loss": {str(t): float(np.mean(v)) for t, v in sorted(task_losses.items())},
        }
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def run(self, until: Optional[int] = None) -> List[dict]:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        out = []
        while self.step_index < stop:
            out.append(self.step())
        return out

    def _abort(self, step: int):
        if self.log_path is not None:
            path = os.path.join(os.path.dirname(os.fspath(self.log_path)) or ".", f"abort-step{step}.emck")
            self.checkpoint().save(path)
            log.error("non-finite loss at step %d; state dumped to %s", step, path)
        raise FloatingPointError(f"non-finite loss at step {step}")

    # -- checkpointing -----------------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors: Dict[str, np.ndarray] = {}
        for name, p in self.model.state_dict().items():
            tensors[f"model.{name}"] = p.detach().cpu().numpy().copy()
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p, state in self.optimizer.state.items():
            n = names[id(p)]
            for key, value in state.items():
                tensors[f"optim.{n}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
        for name, st in self.stats.items():
            tensors[f"stats.{name}.mean"] = st.mean.copy()
            tensors[f"stats.{name}.std"] = st.std.copy()
        # all randomness is keyed by (seed, step, slot): the counter is the RNG state
        tensors["rng.seed"] = np.array(self.config.seed, dtype=np.int64)
        tensors["rng.step"] = np.array(self.step_index, dtype=np.int64)
        meta = {
            "step": self.step_index,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "sources": self.source_bands,
            "stats_epsilon": next(iter(self.stats.values())).epsilon,
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
        }
        return Checkpoint(tensors, meta)

    def _restore_optimizer(self, checkpoint: Checkpoint):
        params = dict(self.model.named_parameters())
        for n, p in params.items():
            prefix = f"optim.{n}."
            state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in checkpoint.tensors.items()
                     if k.startswith(prefix)}
            if state:
                self.optimizer.state[p] = state


def train(config: TrainConfig, dataset: Sequence[Region], out_dir=None, resume: Optional[Checkpoint] = None,
          until: Optional[int] = None):
    """Run (or resume) pretraining. Returns ``(checkpoint, metrics)``.

    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` and the
    final state is written to ``checkpoint.emck`` there.
    """
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.jsonl")
    trainer = Trainer(config, dataset, checkpoint=resume, log_path=log_path)
    metrics = trainer.run(until)
    ck = trainer.checkpoint()
    if out_dir is not None:
        ck.save(os.path.join(out_dir, "checkpoint.emck"))
    return ck, metrics
