"""Two-stage training.

Stage 1 fits adapters, CFE, SKE and the logit scale so the patch grounding map
matches the pooled ground-truth mask. Stage 2 freezes all of that and fits
only the decoder against the full-resolution mask.

The loop is deterministic given the seed: the sample order for each epoch and
the augmentation draws for each slot are derived from ``(seed, stage, epoch)``,
so a run can be resumed from nothing but the step counter and the optimizer
moments.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import TokenBatch, Vocabulary, tokenize
from .config import LossConfig, RunConfig, TrainConfig
from .data.augment import augment
from .data.manifest import LoadedSamples, resize_mask
from .errors import NumericalError, ValidationError
from .model import RISCLIP
from .objectives import MetricAccumulator, combined_loss, downsample_gt, pixel_loss

log = logging.getLogger(__name__)


def lr_schedule(step: int, total: int, lr_init: float, power: float = 0.9) -> float:
    """Polynomial decay from ``lr_init`` at step 0 to 0 at ``total``."""
    if total <= 0:
        raise ValidationError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValidationError(f"step {step} outside [0, {total}]")
    return lr_init * (1 - step / total) ** power


def parameter_checksum(params: Iterable[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for name, p in sorted(params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _no_decay(name: str, p: Tensor) -> bool:
    # LN gains/biases, linear biases, per-channel scalers and the logit scale
    return p.ndim < 2


def build_optimizer(named: list[tuple[str, nn.Parameter]], cfg: TrainConfig, lr: float) -> torch.optim.AdamW:
    decay = [p for n, p in named if not _no_decay(n, p)]
    keep = [p for n, p in named if _no_decay(n, p)]
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": keep, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=(cfg.beta1, cfg.beta2))


def tokenize_all(expressions: list[str], vocab: Vocabulary, context_length: int) -> TokenBatch:
    return TokenBatch.from_sequences([tokenize(e, vocab, context_length) for e in expressions])


def _slice_tokens(tokens: TokenBatch, idx: np.ndarray) -> TokenBatch:
    ix = torch.as_tensor(idx, dtype=torch.long)
    return TokenBatch(tokens.ids[ix], tokens.eos_index[ix], tokens.valid_mask[ix])


@dataclass
class TrainState:
    stage: int
    step: int = 0
    total_steps: int = 0
    seed: int = 0
    best_metric: Optional[float] = None

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "step": self.step,
            "total_steps": self.total_steps,
            "rng": {"scheme": "numpy.default_rng([seed, stage, epoch])", "seed": self.seed},
            "best_metric": self.best_metric,
        }


class StageTrainer:
    """Runs one training stage; can stop early and be resumed later."""

    def __init__(
        self,
        model: RISCLIP,
        samples: LoadedSamples,
        vocab: Vocabulary,
        cfg: RunConfig,
        stage: int,
        history_path: Optional[str | Path] = None,
    ):
        if stage not in (1, 2):
            raise ValidationError("stage must be 1 or 2")
        if len(samples) == 0:
            raise ValidationError("training set is empty")
        if stage == 2 and model.decoder is None:
            raise ValidationError("stage 2 needs a decoder; backbone has fewer than 4 image layers")
        self.model = model
        self.samples = samples
        self.cfg = cfg
        self.stage = stage
        self.history_path = Path(history_path) if history_path else None
        self.history: list[dict] = []
        tc = cfg.train
        bb = model.cfg.backbone
        self.tokens = tokenize_all([r.expression for r in samples.records], vocab, bb.context_length)

        self.named = list(model.adaptation_parameters() if stage == 1 else model.decoder_parameters())
        for _, p in model.adaptation_parameters():
            p.requires_grad_(stage == 1)
        for _, p in model.decoder_parameters():
            p.requires_grad_(stage == 2)

        epochs = tc.stage1_epochs if stage == 1 else tc.stage2_epochs
        cap = tc.stage1_max_steps if stage == 1 else tc.stage2_max_steps
        self.steps_per_epoch = math.ceil(len(samples) / tc.batch_size)
        total = epochs * self.steps_per_epoch
        if cap is not None:
            total = min(total, cap)
        self.lr_init = tc.lr_init if stage == 1 or tc.lr_init_stage2 is None else tc.lr_init_stage2
        self.state = TrainState(stage=stage, total_steps=total, seed=tc.seed)
        self.optimizer = build_optimizer(self.named, tc, self.lr_init)

    # -- data ---------------------------------------------------------------

    def _order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.train.seed, self.stage, epoch])
        return rng.permutation(len(self.samples))

    def batch(self, step: int) -> tuple[np.ndarray, Tensor, TokenBatch, np.ndarray]:
        tc = self.cfg.train
        epoch, b = divmod(step, self.steps_per_epoch)
        idx = self._order(epoch)[b * tc.batch_size : (b + 1) * tc.batch_size]
        images = self.samples.images[idx]
        masks = self.samples.masks[idx]
        if tc.augment.enabled:
            images, masks = images.copy(), masks.copy()
            for j in range(len(idx)):
                rng = np.random.default_rng([tc.seed, self.stage, epoch, b, j])
                images[j], masks[j] = augment(images[j], masks[j], rng, tc.augment)
        return idx, torch.from_numpy(np.ascontiguousarray(images)), _slice_tokens(self.tokens, idx), masks

    # -- loop ---------------------------------------------------------------

    def _loss(self, images: Tensor, tokens: TokenBatch, masks: np.ndarray) -> Tensor:
        loss_cfg = self.cfg.loss
        dtype = self.model.logit_scale.dtype
        if self.stage == 1:
            self.model.train()
            out = self.model(images.to(dtype), tokens)
            target = torch.from_numpy(downsample_gt(masks, self.model.cfg.backbone.grid_size)).to(dtype)
            return combined_loss(out.grounding.patch_probs, target, loss_cfg, batched=True)
        self.model.eval()
        with torch.no_grad():
            out = self.model(images.to(dtype), tokens)
        self.model.decoder.train()
        pred = self.model.decoder(out.early, out.grounding.patch_probs)
        return pixel_loss(pred.probs, torch.from_numpy(masks).to(dtype), loss_cfg)

    def train_step(self) -> dict:
        st = self.state
        lr = lr_schedule(st.step, st.total_steps, self.lr_init, self.cfg.train.lr_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        idx, images, tokens, masks = self.batch(st.step)
        self.optimizer.zero_grad(set_to_none=True)
        loss = self._loss(images, tokens, masks)
        if not torch.isfinite(loss):
            ids = [self.samples.records[i].sample_id for i in idx]
            raise NumericalError(f"non-finite loss at stage {self.stage} step {st.step}; samples {ids}")
        loss.backward()
        if self.cfg.train.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_([p for _, p in self.named], self.cfg.train.grad_clip)
        self.optimizer.step()
        record = {"step": st.step, "stage": self.stage, "loss": float(loss.item()), "lr": lr}
        st.step += 1
        self.history.append(record)
        if self.history_path is not None:
            self.history_path.parent.mkdir(parents=True, exist_ok=True)
            with self.history_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def run(self, max_steps: Optional[int] = None) -> list[dict]:
        """Train until the stage's step budget (or ``max_steps`` more steps) is used up."""
        stop = self.state.total_steps
        if max_steps is not None:
            stop = min(stop, self.state.step + max_steps)
        start = len(self.history)
        while self.state.step < stop:
            rec = self.train_step()
            if rec["step"] % 50 == 0:
                log.info("stage %d step %d loss %.4f lr %.3g", self.stage, rec["step"], rec["loss"], rec["lr"])
        return self.history[start:]

    @property
    def done(self) -> bool:
        return self.state.step >= self.state.total_steps

    # -- resumption ---------------------------------------------------------

    def optimizer_tensors(self) -> dict[str, Tensor]:
        """Optimizer moments keyed by parameter name."""
        out = {}
        for name, p in self.named:
            s = self.optimizer.state.get(p)
            if s:
                out[f"optim.{name}.exp_avg"] = s["exp_avg"]
                out[f"optim.{name}.exp_avg_sq"] = s["exp_avg_sq"]
        return out

    def optimizer_steps(self) -> dict[str, float]:
        return {name: float(self.optimizer.state[p]["step"]) for name, p in self.named if self.optimizer.state.get(p)}

    def restore(self, state: TrainState, tensors: dict[str, Tensor], steps: dict[str, float]) -> None:
        if state.stage != self.stage:
            raise ValidationError(f"cannot resume stage {self.stage} from stage {state.stage} state")
        self.state = TrainState(self.stage, state.step, self.state.total_steps, self.cfg.train.seed, state.best_metric)
        for name, p in self.named:
            if name in steps:
                self.optimizer.state[p] = {
                    "step": torch.tensor(steps[name], dtype=torch.float32),
                    "exp_avg": tensors[f"optim.{name}.exp_avg"].clone().to(p.dtype),
                    "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].clone().to(p.dtype),
                }


@dataclass
class StageResult:
    trainer: StageTrainer
    history: list[dict] = field(default_factory=list)


def train_stage1(model: RISCLIP, samples: LoadedSamples, vocab: Vocabulary, cfg: RunConfig,
                 max_steps: Optional[int] = None, history_path: Optional[str | Path] = None) -> StageResult:
    tr = StageTrainer(model, samples, vocab, cfg, 1, history_path)
    return StageResult(tr, tr.run(max_steps))


def train_stage2(model: RISCLIP, samples: LoadedSamples, vocab: Vocabulary, cfg: RunConfig,
                 max_steps: Optional[int] = None, history_path: Optional[str | Path] = None) -> StageResult:
    tr = StageTrainer(model, samples, vocab, cfg, 2, history_path)
    return StageResult(tr, tr.run(max_steps))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def evaluate_patch(model: RISCLIP, samples: LoadedSamples, vocab: Vocabulary, batch_size: int = 16) -> MetricAccumulator:
    """Patch-level IoU of the thresholded grounding map against the pooled mask."""
    model.eval()
    bb = model.cfg.backbone
    tokens = tokenize_all([r.expression for r in samples.records], vocab, bb.context_length)
    targets = downsample_gt(samples.masks, bb.grid_size)
    acc = MetricAccumulator()
    dtype = model.logit_scale.dtype
    for s in range(0, len(samples), batch_size):
        idx = np.arange(s, min(s + batch_size, len(samples)))
        out = model(torch.from_numpy(samples.images[idx]).to(dtype), _slice_tokens(tokens, idx))
        pred = (out.grounding.patch_probs > 0.5).cpu().numpy()
        for p, g in zip(pred, targets[idx]):
            acc.add(p, g)
    return acc


@torch.no_grad()
def predict_masks(model: RISCLIP, samples: LoadedSamples, vocab: Vocabulary, batch_size: int = 16) -> list[np.ndarray]:
    """Pixel masks at each record's native resolution."""
    model.eval()
    bb = model.cfg.backbone
    tokens = tokenize_all([r.expression for r in samples.records], vocab, bb.context_length)
    dtype = model.logit_scale.dtype
    masks = []
    for s in range(0, len(samples), batch_size):
        idx = np.arange(s, min(s + batch_size, len(samples)))
        _, pred = model.predict(torch.from_numpy(samples.images[idx]).to(dtype), _slice_tokens(tokens, idx))
        for i, m in zip(idx, pred.mask.cpu().numpy()):
            h, w = samples.records[i].image_size
            masks.append(resize_mask(m, h, w))
    return masks


def evaluate_pixel(model: RISCLIP, samples: LoadedSamples, vocab: Vocabulary, batch_size: int = 16) -> MetricAccumulator:
    acc = MetricAccumulator()
    for rec, m in zip(samples.records, predict_masks(model, samples, vocab, batch_size)):
        acc.add(m, rec.decode_mask())
    return acc
