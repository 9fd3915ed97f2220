"""Noise-prediction network over object sets.

Architecture: three per-attribute encoding heads (bounding box, class,
shape code) feed a shared width-W trunk of `depth` blocks, each block being
[time-embedding injection -> 1D convolution (kernel 3) along the object
axis -> SiLU -> layer norm -> multi-head self-attention -> residual adds],
with additive skip connections pairing block i with block depth-1-i. Three
zero-initialized output heads emit the per-attribute noise estimates, so a
fresh model predicts exactly zero. In text mode every block appends a
cross-attention layer from object features to learned token embeddings.

Parameters live in one flat array addressed through an ordered manifest of
(name, shape, offset); `forward`/`backward` are pure functions of it, and
`backward` returns exact reverse-mode gradients for the flat array and the
input tensor.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import CheckpointError, ConfigError

CHECKPOINT_FORMAT = "roomdiff-denoiser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    num_slots: int = 8
    num_classes: int = 8
    code_dim: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    time_dim: int = 128
    kernel: int = 3         # object-axis convolution; 1 = attention-only mixing
    text_dim: int = 0       # 0 disables text conditioning
    vocab_size: int = 0
    max_tokens: int = 48

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if self.width % 2 != 0 or self.time_dim % 2 != 0:
            raise ConfigError("width and time_dim must be even")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd and positive")
        if self.text_dim > 0 and self.vocab_size <= 0:
            raise ConfigError("text mode needs a positive vocab_size")

    @property
    def row_dim(self) -> int:
        return 8 + self.num_classes + self.code_dim

    @property
    def has_text(self) -> bool:
        return self.text_dim > 0


def build_manifest(cfg: DenoiserConfig):
    """Ordered (name, shape, offset) entries tiling the flat parameter array."""
    hw = cfg.width // 2
    w = cfg.width
    shapes = [
        ("enc_bbox.w", (8, hw)), ("enc_bbox.b", (hw,)),
        ("enc_class.w", (cfg.num_classes, hw)), ("enc_class.b", (hw,)),
    ]
    n_enc = 2
    if cfg.code_dim > 0:
        shapes += [("enc_code.w", (cfg.code_dim, hw)), ("enc_code.b", (hw,))]
        n_enc = 3
    shapes += [
        ("in_proj.w", (n_enc * hw, w)), ("in_proj.b", (w,)),
        ("time1.w", (cfg.time_dim, cfg.time_dim)), ("time1.b", (cfg.time_dim,)),
        ("time2.w", (cfg.time_dim, w)), ("time2.b", (w,)),
    ]
    if cfg.has_text:
        shapes += [
            ("tok_emb", (cfg.vocab_size, cfg.text_dim)),
            ("pos_emb", (cfg.max_tokens, cfg.text_dim)),
        ]
    for k in range(cfg.depth):
        p = f"block{k}."
        shapes += [
            (p + "tproj.w", (w, w)), (p + "tproj.b", (w,)),
            (p + "conv.w", (cfg.kernel, w, w)), (p + "conv.b", (w,)),
            (p + "ln1.g", (w,)), (p + "ln1.b", (w,)),
            (p + "attn.wqkv", (w, 3 * w)), (p + "attn.bqkv", (3 * w,)),
            (p + "attn.wo", (w, w)), (p + "attn.bo", (w,)),
        ]
        if cfg.has_text:
            shapes += [
                (p + "xln.g", (w,)), (p + "xln.b", (w,)),
                (p + "xattn.wq", (w, w)), (p + "xattn.bq", (w,)),
                (p + "xattn.wk", (cfg.text_dim, w)), (p + "xattn.bk", (w,)),
                (p + "xattn.wv", (cfg.text_dim, w)), (p + "xattn.bv", (w,)),
                (p + "xattn.wo", (w, w)), (p + "xattn.bo", (w,)),
            ]
    shapes += [
        ("out_ln.g", (w,)), ("out_ln.b", (w,)),
        ("head_bbox.w", (w, 8)), ("head_bbox.b", (8,)),
        ("head_class.w", (w, cfg.num_classes)), ("head_class.b", (cfg.num_classes,)),
    ]
    if cfg.code_dim > 0:
        shapes += [("head_code.w", (w, cfg.code_dim)), ("head_code.b", (cfg.code_dim,))]
    manifest = []
    offset = 0
    for name, shape in shapes:
        manifest.append((name, shape, offset))
        offset += int(np.prod(shape))
    return manifest, offset


def param_views(flat: np.ndarray, manifest) -> dict:
    """Name -> ndarray views sharing memory with the flat array."""
    views = {}
    for name, shape, offset in manifest:
        size = int(np.prod(shape))
        views[name] = flat[offset:offset + size].reshape(shape)
    return views


@dataclass
class ConditionSpec:
    """Conditioning inputs for sampling and the text-aware forward pass."""

    mode: str = "none"           # none | completion | rearrangement | text
    mask: np.ndarray = None      # (N, D) bool, True = entry is observed
    observed: np.ndarray = None  # (N, D) clean normalized values
    tokens: np.ndarray = None    # token ids, (S,) or (B, S); 0 = padding


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    params: np.ndarray  # flat float32
    manifest: list

    def views(self) -> dict:
        return param_views(self.params, self.manifest)

    def __call__(self, x, t, cond=None):
        return forward(self, x, t, cond)

    @property
    def param_count(self) -> int:
        return len(self.params)


def _fan_in(shape) -> int:
    # conv weights are (K, C_in, C_out); linear weights are (in, out)
    return int(shape[0] * shape[1]) if len(shape) == 3 else int(shape[0])


def init_model(cfg: DenoiserConfig, rng) -> DenoiserModel:
    """Fan-in-scaled uniform init; prediction heads start at exactly zero."""
    manifest, total = build_manifest(cfg)
    flat = np.zeros(total, dtype=np.float32)
    views = param_views(flat, manifest)
    shapes = {name: shape for name, shape, _ in manifest}
    for name, shape, _ in manifest:
        last = name.split(".")[-1]
        if name in ("tok_emb", "pos_emb"):
            bound = 1.0 / np.sqrt(shape[1])
        elif last.startswith("w"):
            bound = 1.0 / np.sqrt(_fan_in(shape))
        elif last.startswith("g"):
            views[name][...] = 1.0
            continue
        elif last.startswith("b"):
            sibling = name[: -len(last)] + "w" + last[1:]
            if sibling not in shapes:
                continue  # layer-norm bias stays zero
            bound = 1.0 / np.sqrt(_fan_in(shapes[sibling]))
        else:
            continue
        views[name][...] = rng.uniform(-bound, bound, size=shape)
    for head in ("head_bbox", "head_class", "head_code"):
        for suffix in (".w", ".b"):
            if head + suffix in views:
                views[head + suffix][...] = 0.0
    return DenoiserModel(cfg, flat, manifest)


def _prepare_tokens(cfg, cond, batch, dtype, params):
    """Returns (memory, valid mask) or (None, None) when text is inactive."""
    if cond is None or cond.tokens is None:
        return None, None
    tokens = np.asarray(cond.tokens)
    if tokens.size == 0:
        return None, None
    if not cfg.has_text:
        raise ConfigError("tokens passed to a text-disabled model")
    if tokens.ndim == 1:
        tokens = np.broadcast_to(tokens, (batch, tokens.shape[0]))
    if tokens.shape[1] > cfg.max_tokens:
        raise ConfigError(
            f"token sequence length {tokens.shape[1]} exceeds {cfg.max_tokens}")
    emb, emb_cache = L.embedding_forward(tokens, params["tok_emb"])
    mem = emb + params["pos_emb"][:tokens.shape[1]]
    valid = tokens != 0
    return (mem.astype(dtype), valid), (emb_cache, tokens.shape[1])


def forward_params(params: dict, cfg: DenoiserConfig, x, t, cond=None,
                   want_cache=False):
    """Functional forward pass over a parameter dict.

    x: (N, D) or (B, N, D); t: int or (B,) ints. Returns the noise estimate
    with the input's shape, plus a cache when requested.
    """
    dtype = params["in_proj.w"].dtype
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    x = x.astype(dtype, copy=False)
    b, n, d = x.shape
    if d != cfg.row_dim:
        raise ConfigError(f"row dim {d} != configured {cfg.row_dim}")
    lcls = cfg.num_classes

    xb = x[..., :8]
    xc = x[..., 8:8 + lcls]
    e_b, c_eb = L.linear_forward(xb, params["enc_bbox.w"], params["enc_bbox.b"])
    e_c, c_ec = L.linear_forward(xc, params["enc_class.w"], params["enc_class.b"])
    parts = [e_b, e_c]
    c_ef = None
    if cfg.code_dim > 0:
        xf = x[..., 8 + lcls:]
        e_f, c_ef = L.linear_forward(xf, params["enc_code.w"], params["enc_code.b"])
        parts.append(e_f)
    enc = np.concatenate(parts, axis=-1)
    h, c_in = L.linear_forward(enc, params["in_proj.w"], params["in_proj.b"])

    t_arr = np.broadcast_to(np.atleast_1d(t), (b,))
    se = L.sinusoidal_embedding(t_arr, cfg.time_dim, dtype)
    th, c_t1 = L.linear_forward(se, params["time1.w"], params["time1.b"])
    ta, c_ts = L.silu_forward(th)
    temb, c_t2 = L.linear_forward(ta, params["time2.w"], params["time2.b"])

    text, text_cache = _prepare_tokens(cfg, cond, b, dtype, params)
    mem, valid = text if text is not None else (None, None)

    half = (cfg.depth + 1) // 2
    saved = [h]
    block_caches = []
    for k in range(cfg.depth):
        p = f"block{k}."
        skip_from = cfg.depth - 1 - k if k >= half else None
        if skip_from is not None:
            h = h + saved[skip_from]
        tp, c_tp = L.linear_forward(temb, params[p + "tproj.w"], params[p + "tproj.b"])
        u = h + tp[:, None, :]
        cv, c_cv = L.conv1d_forward(u, params[p + "conv.w"], params[p + "conv.b"])
        gs, c_gs = L.silu_forward(cv)
        v = u + gs
        n1, c_n1 = L.layer_norm_forward(v, params[p + "ln1.g"], params[p + "ln1.b"])
        s, c_sa = L.self_attention_forward(
            n1, params[p + "attn.wqkv"], params[p + "attn.bqkv"],
            params[p + "attn.wo"], params[p + "attn.bo"], cfg.heads)
        h = v + s
        c_xa = c_n2 = None
        if mem is not None:
            n2, c_n2 = L.layer_norm_forward(
                h, params[p + "xln.g"], params[p + "xln.b"])
            xa, c_xa = L.cross_attention_forward(
                n2, mem, valid,
                params[p + "xattn.wq"], params[p + "xattn.bq"],
                params[p + "xattn.wk"], params[p + "xattn.bk"],
                params[p + "xattn.wv"], params[p + "xattn.bv"],
                params[p + "xattn.wo"], params[p + "xattn.bo"], cfg.heads)
            h = h + xa
        saved.append(h)
        block_caches.append((skip_from, c_tp, c_cv, c_gs, c_n1, c_sa, c_n2, c_xa))

    hf, c_out_ln = L.layer_norm_forward(h, params["out_ln.g"], params["out_ln.b"])
    ob, c_hb = L.linear_forward(hf, params["head_bbox.w"], params["head_bbox.b"])
    oc, c_hc = L.linear_forward(hf, params["head_class.w"], params["head_class.b"])
    outs = [ob, oc]
    c_hf = None
    if cfg.code_dim > 0:
        of, c_hf = L.linear_forward(hf, params["head_code.w"], params["head_code.b"])
        outs.append(of)
    out = np.concatenate(outs, axis=-1)
    if squeeze:
        out = out[0]
    if not want_cache:
        return out
    cache = dict(
        cfg=cfg, squeeze=squeeze, b=b,
        c_eb=c_eb, c_ec=c_ec, c_ef=c_ef, c_in=c_in,
        c_t1=c_t1, c_ts=c_ts, c_t2=c_t2,
        text_cache=text_cache, has_mem=mem is not None,
        block_caches=block_caches,
        c_out_ln=c_out_ln, c_hb=c_hb, c_hc=c_hc, c_hf=c_hf,
    )
    return out, cache


def backward_params(cache, grad_out):
    """Exact gradients of forward_params; returns (param grads dict, dx)."""
    cfg = cache["cfg"]
    g = np.asarray(grad_out)
    if cache["squeeze"]:
        g = g[None]
    dtype = cache["c_in"][1].dtype
    g = g.astype(dtype, copy=False)
    grads = {}
    lcls = cfg.num_classes

    gb = g[..., :8]
    gc = g[..., 8:8 + lcls]
    ghf, grads["head_bbox.w"], grads["head_bbox.b"] = L.linear_backward(gb, cache["c_hb"])
    gh2, grads["head_class.w"], grads["head_class.b"] = L.linear_backward(gc, cache["c_hc"])
    ghf = ghf + gh2
    if cfg.code_dim > 0:
        gf = g[..., 8 + lcls:]
        gh3, grads["head_code.w"], grads["head_code.b"] = L.linear_backward(gf, cache["c_hf"])
        ghf = ghf + gh3
    gh, grads["out_ln.g"], grads["out_ln.b"] = L.layer_norm_backward(ghf, cache["c_out_ln"])

    gtemb = None
    gmem = None
    gsaved = [None] * (cfg.depth + 1)
    for k in range(cfg.depth - 1, -1, -1):
        p = f"block{k}."
        skip_from, c_tp, c_cv, c_gs, c_n1, c_sa, c_n2, c_xa = cache["block_caches"][k]
        if gsaved[k + 1] is not None:
            gh = gh + gsaved[k + 1]
            gsaved[k + 1] = None
        if cache["has_mem"]:
            (gn2, gmem_k, grads[p + "xattn.wq"], grads[p + "xattn.bq"],
             grads[p + "xattn.wk"], grads[p + "xattn.bk"],
             grads[p + "xattn.wv"], grads[p + "xattn.bv"],
             grads[p + "xattn.wo"], grads[p + "xattn.bo"]) = \
                L.cross_attention_backward(gh, c_xa)
            gmem = gmem_k if gmem is None else gmem + gmem_k
            gln2, grads[p + "xln.g"], grads[p + "xln.b"] = \
                L.layer_norm_backward(gn2, c_n2)
            gh = gh + gln2
        (gn1, grads[p + "attn.wqkv"], grads[p + "attn.bqkv"],
         grads[p + "attn.wo"], grads[p + "attn.bo"]) = \
            L.self_attention_backward(gh, c_sa)
        gln1, grads[p + "ln1.g"], grads[p + "ln1.b"] = \
            L.layer_norm_backward(gn1, c_n1)
        gv = gh + gln1
        gcv = L.silu_backward(gv, c_gs)
        gu_conv, grads[p + "conv.w"], grads[p + "conv.b"] = \
            L.conv1d_backward(gcv, c_cv)
        gu = gv + gu_conv
        gtp = gu.sum(axis=1)
        gt_k, grads[p + "tproj.w"], grads[p + "tproj.b"] = \
            L.linear_backward(gtp, c_tp)
        gtemb = gt_k if gtemb is None else gtemb + gt_k
        gh = gu
        if skip_from is not None:
            prev = gsaved[skip_from]
            gsaved[skip_from] = gh.copy() if prev is None else prev + gh
    if gsaved[0] is not None:
        gh = gh + gsaved[0]

    gta, grads["time2.w"], grads["time2.b"] = L.linear_backward(gtemb, cache["c_t2"])
    gth = L.silu_backward(gta, cache["c_ts"])
    _, grads["time1.w"], grads["time1.b"] = L.linear_backward(gth, cache["c_t1"])

    if cache["has_mem"]:
        emb_cache, seq_len = cache["text_cache"]
        grads["tok_emb"] = L.embedding_backward(gmem, emb_cache)
        gpos = np.zeros(
            (cfg.max_tokens, cfg.text_dim), dtype=gmem.dtype)
        gpos[:seq_len] = gmem.sum(axis=0)
        grads["pos_emb"] = gpos

    genc, grads["in_proj.w"], grads["in_proj.b"] = L.linear_backward(gh, cache["c_in"])
    hw = cfg.width // 2
    gxb, grads["enc_bbox.w"], grads["enc_bbox.b"] = \
        L.linear_backward(genc[..., :hw], cache["c_eb"])
    gxc, grads["enc_class.w"], grads["enc_class.b"] = \
        L.linear_backward(genc[..., hw:2 * hw], cache["c_ec"])
    parts = [gxb, gxc]
    if cfg.code_dim > 0:
        gxf, grads["enc_code.w"], grads["enc_code.b"] = \
            L.linear_backward(genc[..., 2 * hw:], cache["c_ef"])
        parts.append(gxf)
    gx = np.concatenate(parts, axis=-1)
    if cache["squeeze"]:
        gx = gx[0]
    return grads, gx


def pack_grads(grads: dict, manifest, dtype=np.float32) -> np.ndarray:
    flat = np.zeros(manifest[-1][2] + int(np.prod(manifest[-1][1])), dtype=dtype)
    views = param_views(flat, manifest)
    for name, _, _ in manifest:
        if name in grads:
            views[name][...] = grads[name]
    return flat


def forward(model: DenoiserModel, x, t, cond=None, dtype=None):
    params = model.views()
    if dtype is not None and dtype != model.params.dtype:
        params = {k: v.astype(dtype) for k, v in params.items()}
    return forward_params(params, model.config, x, t, cond)


def backward(model: DenoiserModel, x, t, cond, grad_out, dtype=None):
    """Reverse-mode gradients w.r.t. the flat parameters and the input."""
    params = model.views()
    if dtype is not None and dtype != model.params.dtype:
        params = {k: v.astype(dtype) for k, v in params.items()}
    _, cache = forward_params(params, model.config, x, t, cond, want_cache=True)
    grads, gx = backward_params(cache, grad_out)
    out_dtype = dtype if dtype is not None else model.params.dtype
    return pack_grads(grads, model.manifest, out_dtype), gx


# --- checkpoint format ----------------------------------------------------
# line 1: JSON header {format, version, config, manifest, manifest_sha256,
#                      param_count}
# rest:   little-endian float32 payload of the flat parameter array.

def _manifest_digest(manifest) -> str:
    canon = json.dumps([[n, list(s)] for n, s, _ in manifest])
    return hashlib.sha256(canon.encode()).hexdigest()


def save_model(model: DenoiserModel, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "manifest": [[n, list(s)] for n, s, _ in model.manifest],
        "manifest_sha256": _manifest_digest(model.manifest),
        "param_count": model.param_count,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(model.params.astype("<f4").tobytes())


def load_model(path) -> DenoiserModel:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a denoiser checkpoint: {path}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version "
                              f"{header.get('version')}")
    try:
        cfg = DenoiserConfig(**header["config"])
        stored_manifest = header["manifest"]
        stored_hash = header["manifest_sha256"]
        stored_count = header["param_count"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    manifest, total = build_manifest(cfg)
    stored = [[n, list(s)] for n, s, _ in manifest]
    if stored_manifest != stored:
        raise CheckpointError("checkpoint manifest does not match its config")
    if stored_hash != _manifest_digest(manifest):
        raise CheckpointError("checkpoint manifest hash mismatch")
    if stored_count != total or len(payload) != 4 * total:
        raise CheckpointError(
            f"truncated checkpoint payload: {len(payload)} bytes for "
            f"{total} parameters")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return DenoiserModel(cfg, flat, manifest)
