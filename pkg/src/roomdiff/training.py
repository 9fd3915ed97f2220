"""Minibatch trainer: noise-prediction plus overlap penalty, Adam updates,
stepped learning-rate decay, JSONL logging, and resumable state.

Each step draws an independent diffusion step t per scene, corrupts the
batch with fresh Gaussian noise, runs the denoiser, and applies one Adam
update of the summed objective. All randomness flows through the generator
stored in TrainState, so a (seed, config, data) triple fixes the whole loss
trajectory, and save/load of (model, state) resumes it exactly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .denoiser import (ConditionSpec, DenoiserModel, backward_params,
                       forward_params, pack_grads)
from .diffusion import NoiseSchedule
from .errors import CheckpointError, DivergenceError
from .losses import (DEFAULT_SHARPNESS, LossBreakdown, loss_iou_grad,
                     loss_sce, loss_sce_grad)
from .optim import AdamState, adam_update
from .scene import NormalizationSpec

TRAINSTATE_FORMAT = "roomdiff-trainstate"
TRAINSTATE_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 20000
    lr_init: float = 2e-4
    lr_decay: float = 0.5
    lr_decay_interval: int = 3000
    seed: int = 0
    lambda_iou: float = 1.0
    iou_sharpness: float = DEFAULT_SHARPNESS
    eval_interval: int = 1000
    checkpoint_interval: int = 5000
    threads: int = 1

    def __post_init__(self):
        for name in ("batch_size", "total_steps", "lr_init",
                     "lr_decay_interval", "eval_interval",
                     "checkpoint_interval", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass
class TrainState:
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    lr: float = 0.0
    running: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, param_count: int, seed: int) -> "TrainState":
        return cls(AdamState.zeros(param_count),
                   np.random.default_rng(seed))


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Deterministic step function: decay at every interval boundary."""
    return cfg.lr_init * cfg.lr_decay ** (step // cfg.lr_decay_interval)


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def train_step(model: DenoiserModel, state: TrainState, batch,
               schedule: NoiseSchedule, cfg: TrainConfig,
               norm_spec: NormalizationSpec, tokens=None) -> LossBreakdown:
    """One optimization step over a batch of clean scene tensors."""
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    b = x0.shape[0]
    t = state.rng.integers(1, schedule.T + 1, size=b)
    eps = state.rng.standard_normal(x0.shape)
    abar = schedule.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps

    cond = None
    if tokens is not None:
        cond = ConditionSpec(mode="text", tokens=np.asarray(tokens))
    views = model.views()
    mcfg = model.config

    slices = _chunks(b, cfg.threads)

    def _fwd(sl):
        sub = cond
        if cond is not None and cond.tokens.ndim == 2:
            sub = ConditionSpec(mode="text", tokens=cond.tokens[sl])
        return forward_params(views, mcfg, x_t[sl], t[sl], sub,
                              want_cache=True)

    if len(slices) == 1:
        results = [_fwd(slices[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            results = list(pool.map(_fwd, slices))
    eps_hat = np.concatenate([r[0] for r in results]).astype(np.float64)

    lc, fdim = mcfg.num_classes, mcfg.code_dim
    l_bbox, l_class, l_code = loss_sce(eps, eps_hat, lc, fdim)
    g_out = loss_sce_grad(eps, eps_hat, lc, fdim)

    l_iou = 0.0
    if cfg.lambda_iou != 0.0:
        for i in range(b):
            ti = int(t[i])
            ab = schedule.alpha_bar_at(ti)
            x0_est = (x_t[i] - np.sqrt(1.0 - ab) * eps_hat[i]) / np.sqrt(ab)
            v, g_x0 = loss_iou_grad(x0_est, ti, norm_spec, schedule,
                                    cfg.iou_sharpness)
            l_iou += v / b
            # d x0_est / d eps_hat = -sqrt(1 - abar) / sqrt(abar)
            g_out[i] += (cfg.lambda_iou / b) * g_x0 * (
                -np.sqrt(1.0 - ab) / np.sqrt(ab))

    total = l_bbox + l_class + l_code + cfg.lambda_iou * l_iou
    if not np.isfinite(total):
        raise DivergenceError(
            f"non-finite loss at step {state.step}: t={t.tolist()} "
            f"bbox={l_bbox} class={l_class} code={l_code} iou={l_iou}")

    def _bwd(arg):
        (_, cache), sl = arg
        grads, _ = backward_params(cache, g_out[sl])
        return pack_grads(grads, model.manifest, np.float32)

    if len(slices) == 1:
        flat = _bwd((results[0], slices[0]))
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            parts = list(pool.map(_bwd, zip(results, slices)))
        flat = parts[0]
        for p in parts[1:]:  # fixed chunk order keeps runs reproducible
            flat = flat + p

    lr = lr_at(cfg, state.step)
    adam_update(model.params, flat, state.adam, lr)
    state.step += 1
    state.lr = lr
    breakdown = LossBreakdown(l_bbox, l_class, l_code, l_iou,
                              cfg.lambda_iou, t)
    for key, val in (("bbox", l_bbox), ("class", l_class),
                     ("code", l_code), ("iou", l_iou)):
        prev = state.running.get(key, val)
        state.running[key] = prev + 0.01 * (val - prev)
    return breakdown


def run_training(model, state, data, schedule, cfg, norm_spec,
                 tokens=None, steps=None, log_path=None,
                 checkpoint_paths=None, on_step=None):
    """Run `steps` (default: up to cfg.total_steps) training steps.

    data: (S, N, D) clean tensors; tokens: optional (S, T_max) prompt ids.
    checkpoint_paths: (model_path, state_path) written every
    cfg.checkpoint_interval steps and at the end.
    """
    from .denoiser import save_model

    total = cfg.total_steps if steps is None else state.step + steps
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < total:
            idx = state.rng.integers(0, data.shape[0], size=cfg.batch_size)
            batch_tokens = tokens[idx] if tokens is not None else None
            parts = train_step(model, state, data[idx], schedule, cfg,
                               norm_spec, batch_tokens)
            if log_fh is not None:
                rec = {"step": state.step, "lr": state.lr,
                       "l_bbox": parts.l_bbox, "l_class": parts.l_class,
                       "l_code": parts.l_code, "l_iou": parts.l_iou,
                       "total": parts.total}
                log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(state.step, parts)
            if checkpoint_paths and (state.step % cfg.checkpoint_interval == 0
                                     or state.step == total):
                save_model(model, checkpoint_paths[0])
                save_train_state(state, checkpoint_paths[1])
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# --- gradient audit --------------------------------------------------------

@dataclass
class AuditReport:
    max_rel_err: float
    checked: int
    threshold: float
    worst: list  # (name, index, analytic, numeric, rel) tuples
    passed: bool


def gradient_audit(model: DenoiserModel, schedule: NoiseSchedule, rng,
                   num_coords: int = 200, dtype=np.float64,
                   threshold=None, fd_step: float = 1e-5) -> AuditReport:
    """Central-difference check of `backward` on random parameter coords.

    Runs the model in the requested precision; default thresholds are 1e-4
    in float64 and 1e-3 in float32.
    """
    if threshold is None:
        threshold = 1e-4 if dtype == np.float64 else 1e-3
    cfg = model.config
    # finite differences always run in float64; the analytic side runs at
    # the audited precision
    params_fd = {k: v.astype(np.float64) for k, v in model.views().items()}
    x = rng.standard_normal((2, cfg.num_slots, cfg.row_dim))
    t = rng.integers(1, schedule.T + 1, size=2)
    probe = rng.standard_normal(x.shape)

    def scalar():
        out = forward_params(params_fd, cfg, x, t, None)
        return float((out * probe).sum())

    if dtype == np.float64:
        params_ana = params_fd
    else:
        params_ana = {k: v.astype(dtype) for k, v in params_fd.items()}
    _, cache = forward_params(params_ana, cfg, x, t, None, want_cache=True)
    grads, _ = backward_params(cache, probe.astype(dtype))

    names = sorted(params_fd)
    records = []
    for _ in range(num_coords):
        name = names[rng.integers(len(names))]
        arr = params_fd[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + fd_step
        f_plus = scalar()
        arr[idx] = orig - fd_step
        f_minus = scalar()
        arr[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * fd_step)
        analytic = float(grads[name][idx]) if name in grads else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        records.append((name, idx, analytic, numeric, rel))
    records.sort(key=lambda r: -r[4])
    max_rel = records[0][4] if records else 0.0
    return AuditReport(max_rel, len(records), threshold, records[:5],
                       max_rel < threshold)


# --- trainer state persistence ---------------------------------------------

def save_train_state(state: TrainState, path) -> None:
    header = {
        "format": TRAINSTATE_FORMAT,
        "version": TRAINSTATE_VERSION,
        "step": state.step,
        "lr": state.lr,
        "running": state.running,
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps},
        "rng_state": state.rng.bit_generator.state,
        "param_count": len(state.adam.m),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(state.adam.m.astype("<f4").tobytes())
        fh.write(state.adam.v.astype("<f4").tobytes())


def load_train_state(path) -> TrainState:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable trainer state: {exc}") from exc
    if header.get("format") != TRAINSTATE_FORMAT:
        raise CheckpointError(f"not a trainer state file: {path}")
    if header.get("version") != TRAINSTATE_VERSION:
        raise CheckpointError("unsupported trainer state version")
    count = header["param_count"]
    if len(payload) != 8 * count:
        raise CheckpointError("truncated trainer state payload")
    m = np.frombuffer(payload[:4 * count], dtype="<f4").astype(np.float32)
    v = np.frombuffer(payload[4 * count:], dtype="<f4").astype(np.float32)
    adam = AdamState(m, v, step=header["adam"]["step"],
                     beta1=header["adam"]["beta1"],
                     beta2=header["adam"]["beta2"],
                     eps=header["adam"]["eps"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(adam, rng, step=header["step"], lr=header["lr"],
                      running=dict(header["running"]))
