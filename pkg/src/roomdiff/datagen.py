"""Procedural toy-bedroom corpus with known ground-truth statistics.

Every scene gets exactly one bed against a wall. With probability
`symmetry_prob` a mirrored nightstand pair flanks the bed head (sharing one
shape prototype and exact sizes, so the pair satisfies the symmetric-pair
metric by construction); otherwise a single nightstand may appear. A
wardrobe, a ceiling lamp (elevated, so it never collides with floor
furniture), a desk with a correlated chair, and a table follow per-class
occurrence probabilities. Free placements are rejection-sampled until every
oriented pairwise IoU stays below `rejection_iou`; scenes violating the
validity filters (6x6 m footprint, height under 4 m, object count bounds)
are discarded and regenerated.

Object shape codes are the scaled latent codes of their sampled prototype,
and footprint aspect ratios derive from the same prototype, so the code
columns genuinely describe geometry.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError
from .evaluation import metric_obj, metric_piou, metric_sym
from .geometry import oriented_box_iou
from .scene import (DEFAULT_CLASSES, NormalizationSpec, ObjectRecord,
                    SceneSet, load_scene, save_scene)
from .shapes import ShapeLibrary

MANIFEST_FORMAT = "roomdiff-corpus"
MANIFEST_VERSION = 1

ROOM_HALF = 3.0
MARGIN_RANGE = (0.03, 0.15)   # wall gap of bed/wardrobe/desk placements
ANGLE_JITTER = 0.07           # radians (~4 deg) around the nominal facing
DEFAULT_SLOTS = {"toy_bedroom": 13, "toy_dining": 21, "toy_living": 21}


@dataclass
class GeneratorConfig:
    room_type: str = "toy_bedroom"
    scene_count: int = 512
    seed: int = 0
    num_slots: int = 0  # 0 = room-type default (13 bedrooms, 21 otherwise)
    classes: tuple = DEFAULT_CLASSES
    symmetry_prob: float = 0.7
    nightstand_solo_prob: float = 0.5
    wardrobe_prob: float = 0.8
    lamp_prob: float = 0.9
    desk_prob: float = 0.5
    chair_given_desk: float = 0.9
    chair_given_no_desk: float = 0.1
    table_prob: float = 0.3
    rejection_iou: float = 0.01
    min_objects: int = 3
    max_objects: int = 13
    max_place_attempts: int = 200
    max_scene_attempts: int = 50

    def __post_init__(self):
        for name in ("symmetry_prob", "nightstand_solo_prob", "wardrobe_prob",
                     "lamp_prob", "desk_prob", "chair_given_desk",
                     "chair_given_no_desk", "table_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must be a probability, got {p}")
        if self.num_slots == 0:
            self.num_slots = DEFAULT_SLOTS.get(self.room_type, 13)
        self.max_objects = min(self.max_objects, self.num_slots)


# (outward wall normal, inward facing angle) per wall
_WALLS = (
    (np.array([1.0, 0.0]), np.pi),         # +x wall, faces -x
    (np.array([-1.0, 0.0]), 0.0),          # -x wall, faces +x
    (np.array([0.0, 1.0]), -np.pi / 2.0),  # +y wall, faces -y
    (np.array([0.0, -1.0]), np.pi / 2.0),  # -y wall, faces +y
)


def _proto_for(rng, library: ShapeLibrary, class_name: str):
    protos = [p for p in library.prototypes if p.class_name == class_name]
    if not protos:
        raise DataError(f"shape library lacks class '{class_name}'")
    return protos[int(rng.integers(len(protos)))]


def _record(cls_idx, proto, loc, scale, height, theta) -> ObjectRecord:
    size = np.array([scale, scale * proto.aspect, height])
    return ObjectRecord(np.asarray(loc, dtype=float), size, float(theta),
                        cls_idx, proto.scaled_code.copy())


def _aabb_ext(sx: float, sy: float, theta: float) -> np.ndarray:
    """Axis-aligned half-extents of a rotated rectangle."""
    c, s = abs(np.cos(theta)), abs(np.sin(theta))
    return np.array([sx * c + sy * s, sx * s + sy * c])


def _fits_room(obj: ObjectRecord) -> bool:
    ext = _aabb_ext(obj.size[0], obj.size[1], obj.theta)
    if np.any(np.abs(obj.location[:2]) + ext > ROOM_HALF):
        return False
    return obj.location[2] + obj.size[2] < 4.0 and \
        obj.location[2] - obj.size[2] >= -1e-9


def _collides(obj: ObjectRecord, placed, threshold: float) -> bool:
    for other in placed:
        iou = oriented_box_iou(obj.location, obj.size, obj.theta,
                               other.location, other.size, other.theta)
        if iou >= threshold:
            return True
    return False


def _place_free(rng, placed, make_obj, cfg) -> ObjectRecord:
    """Rejection-sample a placement from `make_obj(rng)` until collision-free."""
    for _ in range(cfg.max_place_attempts):
        obj = make_obj(rng)
        if not _fits_room(obj):
            continue
        if not _collides(obj, placed, cfg.rejection_iou):
            return obj
    raise DataError("placement budget exceeded")


def _build_scene(rng, cfg: GeneratorConfig, library: ShapeLibrary) -> SceneSet:
    classes = list(cfg.classes)
    idx = {name: classes.index(name) for name in classes}
    objects = []

    # bed against a wall, facing inward with a small orientation jitter
    # (<= 4 degrees keeps constructed nightstand pairs mirror-consistent)
    outward, theta_wall = _WALLS[int(rng.integers(4))]
    theta_bed = theta_wall + rng.uniform(-ANGLE_JITTER, ANGLE_JITTER)
    proto_bed = _proto_for(rng, library, "bed")
    bed_scale = rng.uniform(0.85, 1.05)
    bed_h = rng.uniform(0.2, 0.3)
    bed_sx = bed_scale
    bed_sy = bed_scale * proto_bed.aspect
    lateral = np.array([-outward[1], outward[0]])
    bed_ext = _aabb_ext(bed_sx, bed_sy, theta_bed)
    margin = rng.uniform(*MARGIN_RANGE)
    wall_pos = outward * (ROOM_HALF - margin - abs(bed_ext @ outward))
    lat_pos = lateral * rng.uniform(-1.2, 1.2)
    bed_c = wall_pos + lat_pos
    bed = _record(idx["bed"], proto_bed,
                  [bed_c[0], bed_c[1], bed_h], bed_scale, bed_h, theta_bed)
    objects.append(bed)

    # nightstands: mirrored pair (shared prototype) or a lone one
    ns_mode = "pair" if rng.uniform() < cfg.symmetry_prob else (
        "solo" if rng.uniform() < cfg.nightstand_solo_prob else "none")
    if ns_mode != "none":
        proto_ns = _proto_for(rng, library, "nightstand")
        ns_scale = rng.uniform(0.2, 0.3)
        ns_h = rng.uniform(0.2, 0.3)
        ns_sy = ns_scale * proto_ns.aspect
        gap = rng.uniform(0.03, 0.12)
        offset = bed_sy + ns_sy + gap
        head_shift = outward * (bed_sx - ns_scale)
        sides = (-1.0, 1.0) if ns_mode == "pair" else \
            ((-1.0,) if rng.uniform() < 0.5 else (1.0,))
        for side in sides:
            c = bed_c + head_shift + side * offset * lateral
            objects.append(_record(idx["nightstand"], proto_ns,
                                   [c[0], c[1], ns_h], ns_scale, ns_h,
                                   theta_bed))

    # wardrobe against one of the other walls
    if rng.uniform() < cfg.wardrobe_prob:
        proto = _proto_for(rng, library, "wardrobe")
        scale = rng.uniform(0.8, 1.1)
        h = rng.uniform(0.9, 1.1)

        def make_wardrobe(r):
            walls = [w for w in range(4)
                     if not np.allclose(_WALLS[w][0], outward)]
            w_out, w_theta = _WALLS[walls[int(r.integers(3))]]
            # wardrobe faces the room: local +x (long side) along the wall
            theta = w_theta + np.pi / 2.0 \
                + r.uniform(-ANGLE_JITTER, ANGLE_JITTER)
            ext = _aabb_ext(scale, scale * proto.aspect, theta)
            lat = np.array([-w_out[1], w_out[0]])
            c = w_out * (ROOM_HALF - r.uniform(*MARGIN_RANGE)
                         - abs(ext @ w_out)) + lat * r.uniform(-1.8, 1.8)
            return _record(idx["wardrobe"], proto, [c[0], c[1], h],
                           scale, h, theta)

        objects.append(_place_free(rng, objects, make_wardrobe, cfg))

    # pendant lamp, elevated
    if rng.uniform() < cfg.lamp_prob:
        proto = _proto_for(rng, library, "lamp")
        scale = rng.uniform(0.12, 0.22)
        h = rng.uniform(0.15, 0.25)
        z = rng.uniform(1.6, 1.9)  # keeps the normalized center inside [-1, 1]
        c = rng.uniform(-1.2, 1.2, size=2)
        objects.append(_record(idx["lamp"], proto, [c[0], c[1], z],
                               scale, h, rng.uniform(-np.pi, np.pi)))

    # desk (free wall-adjacent) and a chair that usually comes with it
    desk = None
    if rng.uniform() < cfg.desk_prob:
        proto = _proto_for(rng, library, "desk")
        scale = rng.uniform(0.5, 0.65)
        h = rng.uniform(0.35, 0.4)

        def make_desk(r):
            w_out, w_theta = _WALLS[int(r.integers(4))]
            theta = w_theta + r.uniform(-ANGLE_JITTER, ANGLE_JITTER)
            ext = _aabb_ext(scale, scale * proto.aspect, theta)
            lat = np.array([-w_out[1], w_out[0]])
            c = w_out * (ROOM_HALF - r.uniform(*MARGIN_RANGE)
                         - abs(ext @ w_out)) + lat * r.uniform(-2.0, 2.0)
            return _record(idx["desk"], proto, [c[0], c[1], h], scale, h,
                           theta)

        desk = _place_free(rng, objects, make_desk, cfg)
        objects.append(desk)

    chair_p = cfg.chair_given_desk if desk is not None \
        else cfg.chair_given_no_desk
    if rng.uniform() < chair_p:
        proto = _proto_for(rng, library, "chair")
        scale = rng.uniform(0.22, 0.28)
        h = rng.uniform(0.4, 0.5)

        def make_chair(r):
            if desk is not None:
                facing = np.array([np.cos(desk.theta), np.sin(desk.theta)])
                dist = desk.size[0] + scale + r.uniform(0.05, 0.3)
                c = desk.location[:2] + facing * dist \
                    + r.uniform(-0.2, 0.2) * np.array([-facing[1], facing[0]])
                theta = desk.theta + np.pi + r.uniform(-0.3, 0.3)
            else:
                c = r.uniform(-2.2, 2.2, size=2)
                theta = r.uniform(-np.pi, np.pi)
            return _record(idx["chair"], proto, [c[0], c[1], h], scale, h,
                           theta)

        objects.append(_place_free(rng, objects, make_chair, cfg))

    if rng.uniform() < cfg.table_prob:
        proto = _proto_for(rng, library, "table")
        scale = rng.uniform(0.4, 0.55)
        h = rng.uniform(0.35, 0.45)

        def make_table(r):
            c = r.uniform(-1.8, 1.8, size=2)
            return _record(idx["table"], proto, [c[0], c[1], h], scale, h,
                           r.uniform(-np.pi, np.pi))

        objects.append(_place_free(rng, objects, make_table, cfg))

    return SceneSet(objects, cfg.room_type)


def validate_scene(scene: SceneSet, cfg: GeneratorConfig):
    """Report-only validity filters: footprint size, height, object count,
    and class-table membership. Returns (passed, list of violations)."""
    reasons = []
    objs = scene.real_objects
    if objs:
        lo = np.min([o.location - o.size for o in objs], axis=0)
        hi = np.max([o.location + o.size for o in objs], axis=0)
        if hi[0] - lo[0] > 6.0 or hi[1] - lo[1] > 6.0:
            reasons.append("size")
        if hi[2] >= 4.0:
            reasons.append("height")
    if not cfg.min_objects <= len(objs) <= cfg.max_objects:
        reasons.append("count")
    for o in objs:
        if not 0 < o.class_index < len(cfg.classes):
            reasons.append("class")
            break
    return (not reasons), reasons


def generate_scenes(cfg: GeneratorConfig, library: ShapeLibrary):
    """Deterministic list of validated scenes (per-scene derived rng)."""
    scenes = []
    for index in range(cfg.scene_count):
        scene = None
        for attempt in range(cfg.max_scene_attempts):
            rng = np.random.default_rng((cfg.seed, index, attempt))
            try:
                candidate = _build_scene(rng, cfg, library)
            except DataError:
                continue
            ok, _ = validate_scene(candidate, cfg)
            if ok:
                scene = candidate
                break
        if scene is None:
            raise DataError(f"generation budget exceeded for scene {index}")
        scenes.append(scene)
    return scenes


@dataclass
class CorpusManifest:
    config: dict
    scene_files: list
    stats: dict = field(default_factory=dict)


def corpus_stats(scenes, num_classes: int) -> dict:
    counts = np.zeros(num_classes, dtype=int)
    for s in scenes:
        for o in s.real_objects:
            counts[o.class_index] += 1
    return {
        "class_counts": counts.tolist(),
        "obj_mean": float(np.mean([metric_obj(s) for s in scenes])),
        "sym_mean": float(np.mean([metric_sym(s) for s in scenes])),
        "piou_mean": float(np.mean([metric_piou(s) for s in scenes])),
    }


def write_corpus(scenes, cfg: GeneratorConfig, spec: NormalizationSpec,
                 out_dir) -> CorpusManifest:
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.json"
        save_scene(os.path.join(out_dir, name), scene, spec)
        files.append(name)
    manifest = CorpusManifest(asdict(cfg), files,
                              corpus_stats(scenes, len(cfg.classes)))
    payload = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "config": manifest.config,
        "scenes": manifest.scene_files,
        "stats": manifest.stats,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_corpus(corpus_dir, spec: NormalizationSpec):
    """Returns (scenes, manifest dict)."""
    path = os.path.join(corpus_dir, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"missing corpus manifest: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable corpus manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"not a corpus manifest: {path}")
    scenes = [load_scene(os.path.join(corpus_dir, name), spec)
              for name in manifest["scenes"]]
    return scenes, manifest
