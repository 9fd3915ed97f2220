"""Footprint shape space: parametric 2D outlines, a small variational
autoencoder over them, latent-code scaling, and class-constrained retrieval.

Footprints are 64-point outlines in a canonical frame (centroid at the
origin, max absolute coordinate 1). The codec encodes an outline with a
per-point MLP + max pool into mean/log-variance heads over an F-dim latent,
and decodes by folding a fixed 8x8 grid through an MLP conditioned on the
latent. Training minimizes Chamfer distance plus 0.001 * KL to the unit
Gaussian, with the usual reparameterized draw z = mu + sigma * eps.

Prototype codes use the posterior mean and are affinely rescaled per
dimension to [-1, 1] over the library; retrieval is nearest neighbor in
that scaled space, restricted to the query class.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError
from .layers import linear_backward, linear_forward, silu_backward, silu_forward

LIBRARY_FORMAT = "roomdiff-shapes"
LIBRARY_VERSION = 1
NUM_POINTS = 64
OMEGA_KL = 0.001


# --- footprint families -----------------------------------------------------

def _resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline at n equally spaced arc-length stations."""
    pts = np.asarray(points, dtype=float)
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    stations = np.linspace(0.0, total, n, endpoint=False)
    idx = np.searchsorted(cum, stations, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    frac = (stations - cum[idx]) / np.maximum(seg[idx], 1e-12)
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def canonicalize(points: np.ndarray) -> np.ndarray:
    """Centroid to origin, max |coordinate| scaled to exactly 1."""
    pts = np.asarray(points, dtype=float)
    pts = pts - pts.mean(axis=0)
    scale = np.abs(pts).max()
    if scale <= 0:
        raise DataError("degenerate footprint")
    return pts / scale


def ellipse_footprint(aspect: float, n: int = NUM_POINTS) -> np.ndarray:
    ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return canonicalize(np.stack([np.cos(ang), aspect * np.sin(ang)], axis=1))


def rounded_rect_footprint(aspect: float, radius: float,
                           n: int = NUM_POINTS) -> np.ndarray:
    hx, hy = 1.0, aspect
    r = radius * min(hx, hy)
    dense = []
    arcs = {  # corner center -> arc start angle
        (hx - r, hy - r): 0.0, (-(hx - r), hy - r): 0.5 * np.pi,
        (-(hx - r), -(hy - r)): np.pi, (hx - r, -(hy - r)): 1.5 * np.pi,
    }
    for (cx, cy), start in arcs.items():
        for a in np.linspace(start, start + 0.5 * np.pi, 16, endpoint=False):
            dense.append([cx + r * np.cos(a), cy + r * np.sin(a)])
    return canonicalize(_resample_closed(np.array(dense), n))


def l_shape_footprint(aspect: float, cut_x: float, cut_y: float,
                      n: int = NUM_POINTS) -> np.ndarray:
    hy = aspect
    cx = 2.0 * cut_x
    cy = 2.0 * hy * cut_y
    verts = np.array([
        [-1.0, -hy], [1.0, -hy], [1.0, hy - cy],
        [1.0 - cx, hy - cy], [1.0 - cx, hy], [-1.0, hy],
    ])
    return canonicalize(_resample_closed(verts, n))


# family name -> (builder, parameter ranges)
FOOTPRINT_FAMILIES = {
    "rounded_rect": (rounded_rect_footprint,
                     {"aspect": (0.35, 1.0), "radius": (0.02, 0.45)}),
    "ellipse": (ellipse_footprint, {"aspect": (0.55, 1.0)}),
    "l_shape": (l_shape_footprint,
                {"aspect": (0.5, 0.8), "cut_x": (0.2, 0.45),
                 "cut_y": (0.2, 0.45)}),
}

CLASS_FAMILIES = {
    "bed": ("rounded_rect", {"aspect": (0.70, 0.85), "radius": (0.08, 0.3)}),
    "nightstand": ("rounded_rect", {"aspect": (0.85, 1.0), "radius": (0.05, 0.25)}),
    "wardrobe": ("rounded_rect", {"aspect": (0.35, 0.5), "radius": (0.02, 0.1)}),
    "lamp": ("ellipse", {"aspect": (0.85, 1.0)}),
    "desk": ("l_shape", {"aspect": (0.5, 0.7), "cut_x": (0.2, 0.45),
                         "cut_y": (0.2, 0.45)}),
    "chair": ("rounded_rect", {"aspect": (0.9, 1.0), "radius": (0.2, 0.45)}),
    "table": ("ellipse", {"aspect": (0.55, 0.8)}),
}
_FALLBACK_FAMILIES = list(FOOTPRINT_FAMILIES)


def family_for_class(name: str):
    if name in CLASS_FAMILIES:
        return CLASS_FAMILIES[name]
    # unseen stress-test classes get a deterministic family assignment
    fam = _FALLBACK_FAMILIES[sum(map(ord, name)) % len(_FALLBACK_FAMILIES)]
    return fam, FOOTPRINT_FAMILIES[fam][1]


def sample_footprint(class_name: str, rng):
    """Draw (footprint, family, params) from the class's parametric family."""
    family, ranges = family_for_class(class_name)
    builder = FOOTPRINT_FAMILIES[family][0]
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}
    return builder(**params), family, params


# --- chamfer distance --------------------------------------------------------

def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances, both ways."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer needs nonempty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _chamfer_grad_rec(pts_in: np.ndarray, rec: np.ndarray):
    """(value, d value / d rec) for CD(pts_in, rec)."""
    d2 = ((pts_in[:, None, :] - rec[None, :, :]) ** 2).sum(axis=-1)
    j_star = d2.argmin(axis=1)   # nearest rec point per input point
    i_star = d2.argmin(axis=0)   # nearest input point per rec point
    n_in, n_rec = len(pts_in), len(rec)
    value = d2[np.arange(n_in), j_star].mean() + \
        d2[i_star, np.arange(n_rec)].mean()
    grad = 2.0 * (rec - pts_in[i_star]) / n_rec
    np.add.at(grad, j_star, 2.0 * (rec[j_star] - pts_in) / n_in)
    return float(value), grad


# --- codec -------------------------------------------------------------------

CODEC_HIDDEN1 = 32
CODEC_HIDDEN2 = 64


def _fold_grid(n: int = NUM_POINTS) -> np.ndarray:
    side = int(round(np.sqrt(n)))
    u = np.linspace(-1.0, 1.0, side)
    uu, vv = np.meshgrid(u, u)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass
class ShapeCodec:
    latent_dim: int
    params: dict = field(default_factory=dict)
    grid: np.ndarray = field(default_factory=_fold_grid)
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, latent_dim: int, rng) -> "ShapeCodec":
        def u(fan_in, *shape):
            return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
        h1, h2 = CODEC_HIDDEN1, CODEC_HIDDEN2
        p = {
            "e1.w": u(2, 2, h1), "e1.b": u(2, h1),
            "e2.w": u(h1, h1, h2), "e2.b": u(h1, h2),
            "mu.w": u(h2, h2, latent_dim), "mu.b": u(h2, latent_dim),
            "lv.w": u(h2, h2, latent_dim), "lv.b": u(h2, latent_dim),
            "d1.w": u(latent_dim + 2, latent_dim + 2, h1), "d1.b": u(latent_dim + 2, h1),
            "d2.w": u(h1, h1, h2), "d2.b": u(h1, h2),
            "d3.w": u(h2, h2, 2), "d3.b": u(h2, 2),
        }
        return cls(latent_dim, p)

    def param_names(self):
        return sorted(self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for k in self.param_names():
            size = self.params[k].size
            self.params[k] = flat[i:i + size].reshape(self.params[k].shape)
            i += size


def codec_encode(codec: ShapeCodec, pts, want_cache=False):
    """mu, logvar of the latent posterior; pts is (P, 2) or (B, P, 2)."""
    p = codec.params
    h1, c1 = linear_forward(np.asarray(pts, dtype=float), p["e1.w"], p["e1.b"])
    a1, cs1 = silu_forward(h1)
    h2, c2 = linear_forward(a1, p["e2.w"], p["e2.b"])
    a2, cs2 = silu_forward(h2)
    arg = a2.argmax(axis=-2)
    g = np.take_along_axis(a2, arg[..., None, :], axis=-2).squeeze(-2)
    mu, cm = linear_forward(g, p["mu.w"], p["mu.b"])
    lv, cv = linear_forward(g, p["lv.w"], p["lv.b"])
    if want_cache:
        return mu, lv, (c1, cs1, c2, cs2, arg, a2.shape, cm, cv)
    return mu, lv


def codec_decode(codec: ShapeCodec, z, want_cache=False):
    """Fold the fixed grid through the latent-conditioned MLP."""
    p = codec.params
    z = np.asarray(z, dtype=float)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    b = z.shape[0]
    npts = codec.grid.shape[0]
    inp = np.concatenate([
        np.repeat(z[:, None, :], npts, axis=1),
        np.broadcast_to(codec.grid, (b, npts, 2)),
    ], axis=-1)
    h1, c1 = linear_forward(inp, p["d1.w"], p["d1.b"])
    a1, cs1 = silu_forward(h1)
    h2, c2 = linear_forward(a1, p["d2.w"], p["d2.b"])
    a2, cs2 = silu_forward(h2)
    rec, c3 = linear_forward(a2, p["d3.w"], p["d3.b"])
    if squeeze:
        rec = rec[0]
    if want_cache:
        return rec, (c1, cs1, c2, cs2, c3, squeeze)
    return rec


def codec_loss(codec: ShapeCodec, batch, noise, omega_kl=OMEGA_KL):
    """CD + omega_kl * KL averaged over the batch, with parameter grads.

    noise: (B, F) fixed reparameterization draws, so the loss is a
    deterministic differentiable function for gradient checking.
    """
    batch = np.asarray(batch, dtype=float)
    b = batch.shape[0]
    mu, lv, enc_cache = codec_encode(codec, batch, want_cache=True)
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * noise
    rec, dec_cache = codec_decode(codec, z, want_cache=True)

    cd_total = 0.0
    g_rec = np.zeros_like(rec)
    for i in range(b):
        val, grad = _chamfer_grad_rec(batch[i], rec[i])
        cd_total += val / b
        g_rec[i] = grad / b
    kl = 0.5 * (np.exp(lv) + mu ** 2 - 1.0 - lv)
    kl_total = float(kl.sum(axis=-1).mean())
    loss = cd_total + omega_kl * kl_total

    grads = {}
    c1, cs1, c2, cs2, c3, _ = dec_cache
    ga2, grads["d3.w"], grads["d3.b"] = linear_backward(g_rec, c3)
    gh2 = silu_backward(ga2, cs2)
    ga1, grads["d2.w"], grads["d2.b"] = linear_backward(gh2, c2)
    gh1 = silu_backward(ga1, cs1)
    ginp, grads["d1.w"], grads["d1.b"] = linear_backward(gh1, c1)
    gz = ginp[..., :codec.latent_dim].sum(axis=1)

    gmu = gz + omega_kl * mu / b
    glv = gz * 0.5 * sigma * noise + omega_kl * 0.5 * (np.exp(lv) - 1.0) / b

    ec1, ecs1, ec2, ecs2, arg, a2shape, cm, cv = enc_cache
    gg1, grads["mu.w"], grads["mu.b"] = linear_backward(gmu, cm)
    gg2, grads["lv.w"], grads["lv.b"] = linear_backward(glv, cv)
    gg = gg1 + gg2
    ga2e = np.zeros(a2shape)
    np.put_along_axis(ga2e, arg[..., None, :], gg[..., None, :], axis=-2)
    gh2e = silu_backward(ga2e, ecs2)
    ga1e, grads["e2.w"], grads["e2.b"] = linear_backward(gh2e, ec2)
    gh1e = silu_backward(ga1e, ecs1)
    _, grads["e1.w"], grads["e1.b"] = linear_backward(gh1e, ec1)
    return loss, cd_total, kl_total, grads


def train_codec(footprints, epochs: int, rng, latent_dim: int = 8,
                omega_kl: float = OMEGA_KL, lr: float = 3e-3,
                log=None) -> ShapeCodec:
    """Full-batch Adam on CD + omega_kl * KL; returns the trained codec."""
    from .optim import AdamState, adam_update

    batch = np.asarray(footprints, dtype=float)
    if batch.ndim != 3 or batch.shape[0] < 2:
        raise DataError("train_codec needs at least 2 footprints")
    codec = ShapeCodec.init(latent_dim, rng)
    flat = codec.flat()
    codec.set_flat(flat)  # params now view the working flat array
    adam = AdamState.zeros(flat.size, dtype=np.float64)
    history = []
    for epoch in range(epochs):
        noise = rng.standard_normal((batch.shape[0], latent_dim))
        loss, cd, kl, grads = codec_loss(codec, batch, noise, omega_kl)
        if not np.isfinite(loss):
            raise DivergenceError(f"codec loss diverged at epoch {epoch}")
        gflat = np.concatenate([grads[k].ravel() for k in codec.param_names()])
        adam_update(flat, gflat, adam, lr)
        history.append((epoch, loss, cd, kl))
        if log is not None:
            log(epoch, loss, cd, kl)
    codec.history = history
    return codec


def encode_shape(codec: ShapeCodec, footprint) -> np.ndarray:
    """Deterministic prototype code: the posterior mean."""
    mu, _ = codec_encode(codec, np.asarray(footprint, dtype=float))
    return mu


def scale_codes(codes: np.ndarray):
    """Affine per-dimension map of raw codes onto [-1, 1].

    Returns (scaled, bounds) with bounds = (min, max) rows. Dimensions with
    min == max are pinned to 0 and flagged with a warning.
    """
    codes = np.asarray(codes, dtype=float)
    lo = codes.min(axis=0)
    hi = codes.max(axis=0)
    span = hi - lo
    degenerate = span <= 0
    if degenerate.any():
        warnings.warn(f"degenerate code dimensions pinned to 0: "
                      f"{np.nonzero(degenerate)[0].tolist()}", stacklevel=2)
    safe = np.where(degenerate, 1.0, span)
    scaled = 2.0 * (codes - lo) / safe - 1.0
    scaled[:, degenerate] = 0.0
    return scaled, np.stack([lo, hi])


def apply_code_bounds(code: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo, hi = bounds
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    scaled = 2.0 * (np.asarray(code, dtype=float) - lo) / safe - 1.0
    scaled[..., degenerate] = 0.0
    return scaled


def unscale_codes(scaled: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo, hi = bounds
    span = hi - lo
    raw = (np.asarray(scaled, dtype=float) + 1.0) / 2.0 * span + lo
    raw[..., span <= 0] = lo[span <= 0]
    return raw


# --- prototype library -------------------------------------------------------

@dataclass
class ShapePrototype:
    proto_id: int
    class_name: str
    family: str
    params: dict
    footprint: np.ndarray
    raw_code: np.ndarray
    scaled_code: np.ndarray

    @property
    def aspect(self) -> float:
        return float(self.params.get("aspect", 1.0))


@dataclass
class ShapeLibrary:
    latent_dim: int
    prototypes: list
    bounds: np.ndarray
    codec: ShapeCodec

    def classes(self):
        return sorted({p.class_name for p in self.prototypes})


def build_library(class_names, per_class: int, rng, epochs: int = 400,
                  latent_dim: int = 8, log=None) -> ShapeLibrary:
    """Sample footprints per class, train the codec, encode and scale."""
    entries = []
    for name in class_names:
        if name == "empty":
            continue
        for _ in range(per_class):
            fp, family, params = sample_footprint(name, rng)
            entries.append((name, family, params, fp))
    codec = train_codec([e[3] for e in entries], epochs, rng,
                        latent_dim=latent_dim, log=log)
    raw = np.stack([encode_shape(codec, e[3]) for e in entries])
    scaled, bounds = scale_codes(raw)
    protos = [
        ShapePrototype(i, name, family, params, fp, raw[i], scaled[i])
        for i, (name, family, params, fp) in enumerate(entries)
    ]
    return ShapeLibrary(latent_dim, protos, bounds, codec)


def retrieve(library: ShapeLibrary, class_name: str,
             code: np.ndarray) -> ShapePrototype:
    """Nearest same-class prototype by Euclidean distance over scaled codes;
    ties resolve to the lowest prototype id."""
    candidates = sorted(
        (p for p in library.prototypes if p.class_name == class_name),
        key=lambda p: p.proto_id)
    if not candidates:
        raise DataError(f"no prototypes for class '{class_name}'")
    code = np.asarray(code, dtype=float)
    best = None
    best_d = np.inf
    for p in candidates:
        d = float(np.sum((p.scaled_code - code) ** 2))
        if d < best_d:  # strict: ties keep the lowest id
            best, best_d = p, d
    return best


def save_library(library: ShapeLibrary, path) -> None:
    data = {
        "format": LIBRARY_FORMAT,
        "version": LIBRARY_VERSION,
        "latent_dim": library.latent_dim,
        "bounds": library.bounds.tolist(),
        "codec": {k: v.tolist() for k, v in library.codec.params.items()},
        "prototypes": [
            {
                "id": p.proto_id, "class": p.class_name, "family": p.family,
                "params": p.params, "footprint": p.footprint.tolist(),
                "raw_code": p.raw_code.tolist(),
                "scaled_code": p.scaled_code.tolist(),
            }
            for p in library.prototypes
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True)
        fh.write("\n")


def load_library(path) -> ShapeLibrary:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"shape library not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable shape library: {exc}") from exc
    if data.get("format") != LIBRARY_FORMAT:
        raise DataError(f"not a shape library file: {path}")
    codec = ShapeCodec(data["latent_dim"],
                       {k: np.array(v) for k, v in data["codec"].items()})
    protos = [
        ShapePrototype(e["id"], e["class"], e["family"], e["params"],
                       np.array(e["footprint"]), np.array(e["raw_code"]),
                       np.array(e["scaled_code"]))
        for e in data["prototypes"]
    ]
    return ShapeLibrary(data["latent_dim"], protos,
                        np.array(data["bounds"]), codec)
