"""Conditioned generation: scene completion, re-arrangement, text-to-scene.

Completion freezes the first M rows of the tensor to the encoded observed
objects; during sampling those entries follow their own forward-noising
trajectory (exact values at the final step), while the remaining rows are
denoised normally. Re-arrangement freezes the size/class/shape-code columns
of every row to their clean encoded values at every step and denoises only
locations and orientations. Text conditioning feeds token embeddings into
the denoiser's cross-attention and otherwise samples unconditionally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import ConditionSpec, DenoiserModel
from .diffusion import NoiseSchedule, ancestral_sample
from .errors import DataError
from .scene import (NormalizationSpec, SceneSet, decode_scene, encode_scene,
                    pad_scene, v_slice_indices)
from .text import PromptSpec


@dataclass
class PartialScene:
    """M (< N) observed objects to keep verbatim during completion."""

    observed: list

    @property
    def m(self) -> int:
        return len(self.observed)

    @classmethod
    def from_scene(cls, scene: SceneSet) -> "PartialScene":
        return cls([o for o in scene.real_objects if o.frozen])


@dataclass
class ArrangementInput:
    """Sizes, classes, and shape codes for all slots; placements are free."""

    records: list  # ObjectRecord list (location/theta ignored), length <= N

    @classmethod
    def from_scene(cls, scene: SceneSet) -> "ArrangementInput":
        return cls([o.copy() for o in scene.real_objects])


def completion_condition(partial: PartialScene, spec: NormalizationSpec,
                         n_slots: int) -> ConditionSpec:
    if partial.m >= n_slots:
        raise DataError(
            f"completion needs M < N, got M={partial.m}, N={n_slots}")
    padded = pad_scene(partial.observed, n_slots, spec.code_dim)
    observed = encode_scene(padded, spec)
    mask = np.zeros((n_slots, spec.row_dim), dtype=bool)
    mask[:partial.m, :] = True
    return ConditionSpec("completion", mask, observed)


def complete_scene(model: DenoiserModel, schedule: NoiseSchedule,
                   partial: PartialScene, spec: NormalizationSpec, rng,
                   room_type: str = "toy_bedroom"):
    """Returns (scene, tensor); tensor rows 0..M-1 equal the encoded
    observation bit-exactly."""
    n = model.config.num_slots
    cond = completion_condition(partial, spec, n)
    x = ancestral_sample(model, schedule, (n, spec.row_dim), rng, cond)
    return decode_scene(x, spec, room_type), x


def arrangement_condition(arr: ArrangementInput, spec: NormalizationSpec,
                          n_slots: int) -> ConditionSpec:
    neutral = []
    for rec in arr.records:
        o = rec.copy()
        o.location = np.zeros(3)
        o.theta = 0.0
        neutral.append(o)
    padded = pad_scene(neutral, n_slots, spec.code_dim)
    observed = encode_scene(padded, spec)
    mask = np.zeros((n_slots, spec.row_dim), dtype=bool)
    mask[:, v_slice_indices(spec)] = True
    return ConditionSpec("rearrangement", mask, observed)


def rearrange_scene(model: DenoiserModel, schedule: NoiseSchedule,
                    arr: ArrangementInput, spec: NormalizationSpec, rng,
                    room_type: str = "toy_bedroom"):
    """Returns (scene, tensor); size/class/code columns are preserved
    bit-exactly for every slot, empties included."""
    n = model.config.num_slots
    cond = arrangement_condition(arr, spec, n)
    x = ancestral_sample(model, schedule, (n, spec.row_dim), rng, cond)
    return decode_scene(x, spec, room_type), x


def text_to_scene(model: DenoiserModel, schedule: NoiseSchedule,
                  prompt, spec: NormalizationSpec, rng,
                  room_type: str = "toy_bedroom"):
    """Sample conditioned on a PromptSpec (or raw token ids); an empty
    prompt degrades gracefully to unconditional sampling."""
    tokens = prompt.token_ids if isinstance(prompt, PromptSpec) else prompt
    tokens = np.asarray(tokens, dtype=np.int64)
    cond = None
    if tokens.size > 0:
        cond = ConditionSpec("text", tokens=tokens)
    n = model.config.num_slots
    x = ancestral_sample(model, schedule, (n, spec.row_dim), rng, cond)
    return decode_scene(x, spec, room_type), x
