"""Top-down semantic rasterization and corpus-level generation metrics.

Scenes render to 256x256 semantic maps by orthographic projection onto a
6x6 m canvas; each object's oriented footprint fills with its class color
(hue = class index times the golden-ratio conjugate, full saturation and
value), painted in descending footprint-area order so small objects stay
visible. Corpus metrics:

  ckl        KL(reference || generated) over non-empty class frequencies
  obj        mean object count per scene
  sym        mean count of mirror-symmetric same-class pairs
  piou       mean exact oriented pairwise IoU (polygon clipping)
  sca        held-out accuracy of a logistic probe separating generated
             from reference rasters (0.5 = indistinguishable)
  rfid/rkid  Frechet / unbiased-MMD distances over fixed random-projection
             raster features

rfid/rkid substitute a seeded random projection for a pretrained feature
network, so their absolute values are only comparable within this package.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .geometry import oriented_box_iou
from .scene import SceneSet

RASTER_SIZE = 256
ROOM_EXTENT = 6.0  # meters, canvas width and height
BACKGROUND = (128, 128, 128)
GOLDEN_CONJ = 0.6180339887498949


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (t, p, v), (v, p, q), (v, q, p)][i]
    return tuple(int(round(255 * c)) for c in rgb)


def class_palette(num_classes: int) -> np.ndarray:
    """Distinct full-saturation colors per class; index 0 is never drawn."""
    colors = np.zeros((num_classes, 3), dtype=np.uint8)
    for k in range(num_classes):
        colors[k] = _hsv_to_rgb((k * GOLDEN_CONJ) % 1.0, 1.0, 1.0)
    return colors


_PIXEL_CENTERS = (np.arange(RASTER_SIZE) + 0.5) * ROOM_EXTENT / RASTER_SIZE \
    - ROOM_EXTENT / 2.0


def render_topdown(scene: SceneSet, palette: np.ndarray) -> np.ndarray:
    """(256, 256, 3) uint8 semantic map; row 0 is +y, column 0 is -x."""
    img = np.empty((RASTER_SIZE, RASTER_SIZE, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    xs = _PIXEL_CENTERS[None, :]
    ys = -_PIXEL_CENTERS[:, None]
    order = sorted(scene.real_objects,
                   key=lambda o: -(o.size[0] * o.size[1]))
    for obj in order:
        c, s = math.cos(obj.theta), math.sin(obj.theta)
        dx = xs - obj.location[0]
        dy = ys - obj.location[1]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (np.abs(u) <= obj.size[0]) & (np.abs(v) <= obj.size[1])
        img[inside] = palette[obj.class_index]
    return img


def write_ppm(path, raster: np.ndarray) -> None:
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(raster.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise DataError(f"not a P6 raster: {path}")
        dims = fh.readline().split()
        fh.readline()
        w, h = int(dims[0]), int(dims[1])
        data = fh.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


# --- per-scene metrics -------------------------------------------------------

@dataclass(frozen=True)
class SymSpec:
    """Frozen geometric definition of a mirror-symmetric pair."""

    size_tol: float = 0.10        # per-axis relative size agreement
    offaxis_tol: float = 0.15     # meters, error parallel to the plane
    height_tol: float = 0.05      # meters
    angle_tol_deg: float = 15.0


def _angdiff(a: float, b: float) -> float:
    return abs(math.atan2(math.sin(a - b), math.cos(a - b)))


def metric_sym(scene: SceneSet, spec: SymSpec = SymSpec()) -> int:
    """Count same-class pairs mirrored across the axis-aligned vertical
    plane through their midpoint, perpendicular to the dominant horizontal
    axis between them."""
    objs = scene.real_objects
    count = 0
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if a.class_index != b.class_index:
                continue
            ref = np.maximum(a.size, b.size)
            if np.any(np.abs(a.size - b.size) > spec.size_tol * ref):
                continue
            d = b.location - a.location
            axis = 0 if abs(d[0]) >= abs(d[1]) else 1
            off = 1 - axis
            if abs(d[off]) >= spec.offaxis_tol:
                continue
            if abs(d[2]) >= spec.height_tol:
                continue
            mirrored = math.pi - a.theta if axis == 0 else -a.theta
            if _angdiff(b.theta, mirrored) >= math.radians(spec.angle_tol_deg):
                continue
            count += 1
    return count


def metric_piou(scene: SceneSet) -> float:
    """Mean exact oriented IoU over unordered non-empty object pairs."""
    objs = [o for o in scene.real_objects]
    vals = []
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            if np.prod(a.size) <= 0 or np.prod(b.size) <= 0:
                warnings.warn("zero-volume box excluded from PIoU",
                              stacklevel=2)
                continue
            vals.append(oriented_box_iou(a.location, a.size, a.theta,
                                         b.location, b.size, b.theta))
    return float(np.mean(vals)) if vals else 0.0


def metric_obj(scene: SceneSet) -> int:
    return len(scene.real_objects)


# --- corpus metrics ----------------------------------------------------------

def class_distribution(scenes, num_classes: int, smoothing: float = 1e-6):
    counts = np.zeros(num_classes - 1, dtype=float)  # real classes only
    for scene in scenes:
        for obj in scene.real_objects:
            counts[obj.class_index - 1] += 1
    return (counts + smoothing) / (counts.sum() + smoothing * len(counts))


def metric_ckl(gen_scenes, ref_scenes, num_classes: int) -> float:
    """KL(reference || generated) over smoothed class frequencies."""
    if not gen_scenes or not ref_scenes:
        raise DataError("ckl needs nonempty corpora")
    p_ref = class_distribution(ref_scenes, num_classes)
    p_gen = class_distribution(gen_scenes, num_classes)
    return float(np.sum(p_ref * np.log(p_ref / p_gen)))


@dataclass
class FeatureExtractor:
    """Seeded projection of 8x-downsampled rasters to `dim` features.

    The raster deviation from the background color feeds a fixed random
    projection (dim - 1 columns); the last feature is the mean absolute
    deviation, i.e. the colored mass of the image, which anchors degenerate
    near-empty rasters away from populated ones.
    """

    seed: int = 7
    dim: int = 64

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.block = RASTER_SIZE // 32
        flat_dim = 32 * 32 * 3
        self.proj = rng.standard_normal((flat_dim, self.dim - 1)) \
            / np.sqrt(flat_dim)

    def extract(self, raster: np.ndarray) -> np.ndarray:
        b = self.block
        small = raster.astype(np.float64).reshape(
            32, b, 32, b, 3).mean(axis=(1, 3))
        dev = small.reshape(-1) / 255.0 - BACKGROUND[0] / 255.0
        return np.concatenate([dev @ self.proj,
                               [np.abs(dev).mean() * 8.0]])

    def extract_scenes(self, scenes, palette) -> np.ndarray:
        return np.stack([
            self.extract(render_topdown(s, palette)) for s in scenes])


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     jitter: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) with the matrix
    square root taken through symmetric eigendecompositions (negative
    eigenvalues clamped to zero); covariances get a diagonal jitter."""
    mu_a = feats_a.mean(axis=0)
    mu_b = feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False) + jitter * np.eye(feats_a.shape[1])
    cov_b = np.cov(feats_b, rowvar=False) + jitter * np.eye(feats_b.shape[1])

    def sqrtm_sym(mat):
        vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T

    root_a = sqrtm_sym(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                  - 2.0 * tr_sqrt)
    return max(0.0, value)  # rounding can leave a tiny negative residue


def kernel_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased MMD^2 with the polynomial kernel (x.y / dim + 1)^3."""
    d = feats_a.shape[1]

    def gram(x, y):
        return (x @ y.T / d + 1.0) ** 3

    m = feats_a.shape[0]
    n = feats_b.shape[0]
    k_aa = gram(feats_a, feats_a)
    k_bb = gram(feats_b, feats_b)
    k_ab = gram(feats_a, feats_b)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * k_ab.mean())


def _split_groups(gen_feats, ref_feats):
    """Indices grouped so that bit-identical gen/ref rows stay together.

    A point whose exact duplicate sits on the other side of the label
    boundary says nothing about distribution separation; splitting such a
    pair across train/test only measures classifier memorization. For
    corpora without duplicates this degrades to one group per scene.
    """
    unmatched = {}
    for j, row in enumerate(ref_feats):
        unmatched.setdefault(row.tobytes(), []).append(j)
    n_gen = len(gen_feats)
    groups = []
    paired = set()
    for i, row in enumerate(gen_feats):
        partners = unmatched.get(row.tobytes())
        if partners:
            j = partners.pop()
            paired.add(j)
            groups.append([i, n_gen + j])
        else:
            groups.append([i])
    groups.extend([n_gen + j] for j in range(len(ref_feats))
                  if j not in paired)
    return groups


def metric_sca(gen_feats: np.ndarray, ref_feats: np.ndarray, rng,
               epochs: int = 200, reshuffles: int = 5,
               lr: float = 0.1) -> float:
    """Held-out accuracy of a logistic probe, averaged over reshuffles."""
    if len(gen_feats) < 50 or len(ref_feats) < 50:
        raise DataError("sca needs at least 50 scenes per corpus")
    x = np.vstack([gen_feats, ref_feats])
    y = np.concatenate([np.ones(len(gen_feats)), np.zeros(len(ref_feats))])
    groups = _split_groups(gen_feats, ref_feats)
    accs = []
    for _ in range(reshuffles):
        order = rng.permutation(len(groups))
        flat = [i for g in order for i in groups[g]]
        split = int(0.8 * len(x))
        tr = np.array(flat[:split])
        te = np.array(flat[split:])
        mu = x[tr].mean(axis=0)
        sd = x[tr].std(axis=0) + 1e-9
        xtr = np.hstack([(x[tr] - mu) / sd, np.ones((len(tr), 1))])
        xte = np.hstack([(x[te] - mu) / sd, np.ones((len(te), 1))])
        w = np.zeros(xtr.shape[1])
        for _ in range(epochs):
            p = 1.0 / (1.0 + np.exp(-xtr @ w))
            w -= lr * xtr.T @ (p - y[tr]) / len(tr)
        pred = (xte @ w) > 0.0
        accs.append(float(np.mean(pred == y[te])))
    return float(np.mean(accs))


# --- report ------------------------------------------------------------------

@dataclass
class MetricsReport:
    ckl: float
    obj_mean: float
    sym_mean: float
    piou_mean: float
    sca: float
    rfid: float
    rkid: float
    obj_ref: float
    sym_ref: float
    piou_ref: float
    gen_count: int
    ref_count: int

    def to_text(self) -> str:
        lines = [f"{key}: {value}" for key, value in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def write(self, text_path, json_path) -> None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def evaluate_corpora(gen_scenes, ref_scenes, num_classes: int, rng,
                     extractor: FeatureExtractor = None,
                     sym_spec: SymSpec = SymSpec(),
                     sca_epochs: int = 200,
                     sca_reshuffles: int = 5) -> MetricsReport:
    """Full metric suite for a generated corpus against a reference."""
    if extractor is None:
        extractor = FeatureExtractor()
    palette = class_palette(num_classes)
    gen_feats = extractor.extract_scenes(gen_scenes, palette)
    ref_feats = extractor.extract_scenes(ref_scenes, palette)
    return MetricsReport(
        ckl=metric_ckl(gen_scenes, ref_scenes, num_classes),
        obj_mean=float(np.mean([metric_obj(s) for s in gen_scenes])),
        sym_mean=float(np.mean([metric_sym(s, sym_spec) for s in gen_scenes])),
        piou_mean=float(np.mean([metric_piou(s) for s in gen_scenes])),
        sca=metric_sca(gen_feats, ref_feats, rng,
                       epochs=sca_epochs, reshuffles=sca_reshuffles),
        rfid=frechet_distance(gen_feats, ref_feats),
        rkid=kernel_distance(gen_feats, ref_feats),
        obj_ref=float(np.mean([metric_obj(s) for s in ref_scenes])),
        sym_ref=float(np.mean([metric_sym(s, sym_spec) for s in ref_scenes])),
        piou_ref=float(np.mean([metric_piou(s) for s in ref_scenes])),
        gen_count=len(gen_scenes),
        ref_count=len(ref_scenes),
    )
