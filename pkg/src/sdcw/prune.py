"""Unstructured magnitude pruning with a single global threshold.

A binary mask keeps weight (i, j) iff |W_ij| >= t. Exactly k = round(p * N)
weights are zeroed for target sparsity p, with ties at the threshold broken
by (tensor name, flat index) order; t is reported as the smallest kept
magnitude. The prunable scope is every attention and feed-forward weight
matrix; embeddings, biases, layer norms, and the classifier head are kept
dense.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .model import EncoderModel, TrainSpec, finetune

# Prunable-parameter total behind the published sparsity sweep bookkeeping
# (~70.8M of the ~126M-parameter large model). Not derivable from any
# (hidden, ffn) pair under the scope above, so it is kept as a constant for
# the arithmetic checks.
REFERENCE_PRUNABLE_TOTAL = 70_785_790

SPARSITY_SWEEP = (0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95)

_PRUNABLE_SUFFIXES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def pruned_count(p: float, total: int) -> int:
    """Exact-count semantics: number of weights zeroed at sparsity p."""
    return round_half_up(p * total)


def sparsity_sweep_counts(total: int = REFERENCE_PRUNABLE_TOTAL,
                          sparsities=SPARSITY_SWEEP) -> dict[float, int]:
    return {p: pruned_count(p, total) for p in sparsities}


@dataclass
class PruneMask:
    """Per-tensor {0,1} masks plus the global threshold that produced them."""

    masks: dict[str, np.ndarray]
    threshold: float
    target_sparsity: float

    def zeros(self) -> int:
        return int(sum(int(m.size - m.sum()) for m in self.masks.values()))

    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))


@dataclass
class PruneSchedule:
    """One of the three pruning arms: before, after, or during fine-tuning."""

    kind: str  # "before" | "after" | "during"
    start_epoch: int = 0
    end_epoch: int = 0
    steps: int = 1

    def validate(self) -> None:
        if self.kind not in ("before", "after", "during"):
            raise ParameterError(f"unknown schedule kind '{self.kind}'")
        if self.kind == "during":
            if self.start_epoch >= self.end_epoch:
                raise ParameterError(
                    f"during-schedule needs start < end, got {self.start_epoch} >= {self.end_epoch}"
                )
            if self.steps < 1:
                raise ParameterError(f"during-schedule needs steps >= 1, got {self.steps}")


def prunable_names(model: EncoderModel) -> list[str]:
    return [n for n in model.params if n.endswith(_PRUNABLE_SUFFIXES)]


def compute_mask(model: EncoderModel, p: float, scope: list[str] | None = None) -> PruneMask:
    """Global-threshold mask zeroing exactly round(p * N) in-scope weights."""
    if not 0.0 <= p <= 0.99:
        raise ParameterError(f"sparsity must be in [0, 0.99], got {p}")
    names = scope if scope is not None else prunable_names(model)
    if not names:
        raise ParameterError("prunable scope is empty")
    mags = np.concatenate([np.abs(model.param(n).data.reshape(-1)) for n in names])
    k = pruned_count(p, mags.size)
    keep_flat = np.ones(mags.size, dtype=np.uint8)
    if k > 0:
        order = np.argsort(mags, kind="stable")
        keep_flat[order[:k]] = 0
        # smallest kept magnitude, so |w| >= t holds for every kept weight
        # and fails for every pruned one except ties resolved by index order
        threshold = float(mags[order[k]]) if k < mags.size else float(mags[order[-1]])
    else:
        threshold = 0.0
    masks: dict[str, np.ndarray] = {}
    offset = 0
    for n in names:
        size = model.param(n).size
        masks[n] = keep_flat[offset : offset + size].reshape(model.param(n).shape)
        offset += size
    return PruneMask(masks, threshold, float(p))


def apply_mask(model: EncoderModel, mask: PruneMask) -> EncoderModel:
    """W <- W * M, in place. Idempotent."""
    for name, m in mask.masks.items():
        w = model.param(name)
        if m.shape != w.data.shape:
            raise ShapeError(f"mask shape {m.shape} != weight shape {w.data.shape} for '{name}'")
        w.data *= m
    return model


def measure_sparsity(model: EncoderModel, scope: list[str] | None = None) -> float:
    names = scope if scope is not None else prunable_names(model)
    if not names:
        raise ParameterError("scope is empty")
    total = sum(model.param(n).size for n in names)
    zeros = sum(int(np.count_nonzero(model.param(n).data == 0.0)) for n in names)
    return zeros / total


def masked_finetune(model, mask: PruneMask, sentences, vocab, spec: TrainSpec, seed: int,
                    entity_types=None) -> list[float]:
    """Fine-tune with the mask re-applied after every optimizer step."""
    apply_mask(model, mask)
    return finetune(
        model, sentences, vocab, spec, seed, entity_types=entity_types,
        post_step=lambda step: apply_mask(model, mask),
    )


def cubic_ramp(p_final: float, tau: float) -> float:
    """Gradual-magnitude sparsity schedule p(tau) = p_final * (1 - (1 - tau)^3)."""
    tau = min(max(tau, 0.0), 1.0)
    return p_final * (1.0 - (1.0 - tau) ** 3)


def gradual_prune_finetune(model, p_final: float, schedule: PruneSchedule, sentences, vocab,
                           spec: TrainSpec, seed: int, entity_types=None,
                           sparsity_log: list[float] | None = None) -> tuple[PruneMask, list[float]]:
    """The "during" arm: cubic sparsity ramp with the mask recomputed at each
    ramp step and enforced thereafter. Returns the final mask and loss trace."""
    schedule.validate()
    if schedule.kind != "during":
        raise ParameterError(f"gradual_prune_finetune needs a during-schedule, got '{schedule.kind}'")
    if not 0.0 <= p_final <= 0.99:
        raise ParameterError(f"sparsity must be in [0, 0.99], got {p_final}")
    steps_per_epoch = max(1, int(np.ceil(len(sentences) / spec.batch_size)))
    window_start = schedule.start_epoch * steps_per_epoch
    window_len = (schedule.end_epoch - schedule.start_epoch) * steps_per_epoch
    ramp_at = {
        window_start + int(np.floor(j * window_len / schedule.steps)): (j + 1) / schedule.steps
        for j in range(schedule.steps)
    }
    current: dict[str, PruneMask | None] = {"mask": None}

    def pre_step(step: int) -> None:
        tau = ramp_at.get(step)
        if tau is not None:
            current["mask"] = compute_mask(model, cubic_ramp(p_final, tau))
            apply_mask(model, current["mask"])
            if sparsity_log is not None:
                sparsity_log.append(measure_sparsity(model))

    def post_step(step: int) -> None:
        if current["mask"] is not None:
            apply_mask(model, current["mask"])

    trace = finetune(model, sentences, vocab, spec, seed, entity_types=entity_types,
                     pre_step=pre_step, post_step=post_step)
    if current["mask"] is None or current["mask"].target_sparsity != p_final:
        # training window shorter than the schedule: finish the ramp
        current["mask"] = compute_mask(model, p_final)
        apply_mask(model, current["mask"])
    return current["mask"], trace


def run_schedule(model, p: float, schedule: PruneSchedule, sentences, vocab, spec: TrainSpec,
                 seed: int, entity_types=None) -> tuple[EncoderModel, PruneMask, list[float]]:
    """Compose the three arms:

    before: compute mask on the incoming model -> masked fine-tune.
    after:  fine-tune dense -> compute mask -> apply (no retraining).
    during: gradual ramp while fine-tuning.
    """
    schedule.validate()
    if schedule.kind == "before":
        mask = compute_mask(model, p)
        trace = masked_finetune(model, mask, sentences, vocab, spec, seed, entity_types)
    elif schedule.kind == "after":
        trace = finetune(model, sentences, vocab, spec, seed, entity_types=entity_types)
        mask = compute_mask(model, p)
        apply_mask(model, mask)
    else:
        mask, trace = gradual_prune_finetune(
            model, p, schedule, sentences, vocab, spec, seed, entity_types
        )
    return model, mask, trace


def mask_from_zeros(model: EncoderModel, target_sparsity: float = 0.0) -> PruneMask:
    """Recover a mask from the zero pattern of the in-scope weights."""
    masks = {
        n: (model.param(n).data != 0.0).astype(np.uint8) for n in prunable_names(model)
    }
    return PruneMask(masks, 0.0, target_sparsity)
