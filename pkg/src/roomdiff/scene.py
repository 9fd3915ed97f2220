"""Object-set scene representation and its flat tensor encoding.

A scene is a fixed-size set of N object records. Each record encodes to one
row of an N x D tensor with D = 3 + 3 + 2 + L + F:

    [location / loc_scale, size / size_scale, cos(theta), sin(theta),
     2 * onehot(class) - 1, shape_code]

Class index 0 is reserved for the 'empty' padding record, whose canonical
row is location = size = 0, orientation (1, 0), class slot 0 at +1 (others
-1), and zero shape code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

EMPTY_CLASS = 0
BBOX_DIM = 8  # location (3) + size (3) + cos/sin (2)

DEFAULT_CLASSES = (
    "empty", "bed", "nightstand", "wardrobe", "lamp", "desk", "chair", "table",
)


@dataclass
class ObjectRecord:
    """One object: oriented box, class index, and latent shape code."""

    location: np.ndarray  # (3,) meters, room center origin
    size: np.ndarray      # (3,) half-extents, meters, > 0 unless empty
    theta: float          # yaw around z, radians
    class_index: int
    shape_code: np.ndarray  # (F,) in [-1, 1]
    frozen: bool = True     # conditioning flag used by scene-schema files

    @property
    def is_empty(self) -> bool:
        return self.class_index == EMPTY_CLASS

    def copy(self) -> "ObjectRecord":
        return ObjectRecord(self.location.copy(), self.size.copy(),
                            self.theta, self.class_index,
                            self.shape_code.copy(), self.frozen)


def empty_record(code_dim: int) -> ObjectRecord:
    return ObjectRecord(np.zeros(3), np.zeros(3), 0.0, EMPTY_CLASS,
                        np.zeros(code_dim))


@dataclass
class SceneSet:
    """Exactly N object records (padding included) plus a room-type tag."""

    objects: list
    room_type: str = "toy_bedroom"

    @property
    def num_slots(self) -> int:
        return len(self.objects)

    @property
    def real_objects(self) -> list:
        return [o for o in self.objects if not o.is_empty]


@dataclass
class NormalizationSpec:
    """Affine maps between metric attributes and the ~[-1, 1] tensor range.

    Location divides by the room half-extents, size by a fixed scale, the
    one-hot class maps to {-1, +1}, and shape codes pass through but are
    validated against per-dimension bounds.
    """

    classes: tuple = DEFAULT_CLASSES
    code_dim: int = 8
    location_scale: np.ndarray = field(
        default_factory=lambda: np.array([3.0, 3.0, 2.0]))
    size_scale: np.ndarray = field(
        default_factory=lambda: np.array([1.5, 1.5, 1.5]))
    class_low: float = -1.0
    class_high: float = 1.0
    code_low: float = -1.0
    code_high: float = 1.0

    def __post_init__(self):
        self.location_scale = np.asarray(self.location_scale, dtype=float)
        self.size_scale = np.asarray(self.size_scale, dtype=float)
        if np.any(self.location_scale <= 0) or np.any(self.size_scale <= 0):
            raise DataError("normalization scales must be strictly positive")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def row_dim(self) -> int:
        return BBOX_DIM + self.num_classes + self.code_dim

    def class_slice(self) -> slice:
        return slice(BBOX_DIM, BBOX_DIM + self.num_classes)

    def code_slice(self) -> slice:
        return slice(BBOX_DIM + self.num_classes, self.row_dim)


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    w = math.atan2(math.sin(theta), math.cos(theta))
    return w


def pad_scene(objects, n_slots: int, code_dim=None, room_type="toy_bedroom") -> SceneSet:
    """Pad an object list with canonical empty records up to exactly N slots."""
    objects = list(objects)
    if len(objects) > n_slots:
        raise DataError(
            f"cannot pad {len(objects)} objects into {n_slots} slots")
    if code_dim is None:
        code_dim = len(objects[0].shape_code) if objects else 0
    padded = [o.copy() for o in objects]
    padded += [empty_record(code_dim) for _ in range(n_slots - len(objects))]
    return SceneSet(padded, room_type)


def _check_range(name, value, low, high):
    value = np.asarray(value, dtype=float)
    if np.any(value < low) or np.any(value > high):
        raise DataError(f"attribute '{name}' out of range "
                        f"[{np.min(low)}, {np.max(high)}]: {value}")


def encode_scene(scene: SceneSet, spec: NormalizationSpec) -> np.ndarray:
    """Encode a padded scene into its (N, D) tensor."""
    n = scene.num_slots
    x = np.zeros((n, spec.row_dim))
    for i, obj in enumerate(scene.objects):
        x[i] = encode_record(obj, spec)
    return x


def encode_record(obj: ObjectRecord, spec: NormalizationSpec) -> np.ndarray:
    row = np.zeros(spec.row_dim)
    if obj.is_empty:
        row[6] = 1.0  # orientation (1, 0)
        row[spec.class_slice()] = spec.class_low
        row[BBOX_DIM] = spec.class_high
        return row
    _check_range("location", obj.location, -spec.location_scale,
                 spec.location_scale)
    if np.any(obj.size <= 0):
        raise DataError(f"attribute 'size' must be positive: {obj.size}")
    _check_range("size", obj.size, 0.0, spec.size_scale)
    if not 0 < obj.class_index < spec.num_classes:
        raise DataError(f"attribute 'class' out of range: {obj.class_index}")
    _check_range("shape_code", obj.shape_code, spec.code_low, spec.code_high)
    row[0:3] = obj.location / spec.location_scale
    row[3:6] = obj.size / spec.size_scale
    row[6] = math.cos(obj.theta)
    row[7] = math.sin(obj.theta)
    row[spec.class_slice()] = spec.class_low
    row[BBOX_DIM + obj.class_index] = spec.class_high
    row[spec.code_slice()] = obj.shape_code
    return row


def decode_scene(x: np.ndarray, spec: NormalizationSpec,
                 room_type="toy_bedroom") -> SceneSet:
    """Decode an (N, D) tensor back into a scene.

    Class is the argmax over class slots (ties broken toward the lowest
    index); rows decoding to 'empty' become canonical padding records.
    Orientation is renormalized before the atan2 readout and noisy sizes
    are clamped to a small positive floor.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("scene tensor contains non-finite entries")
    objects = []
    cs = spec.class_slice()
    for row in x:
        cls = int(np.argmax(row[cs]))
        if cls == EMPTY_CLASS:
            objects.append(empty_record(spec.code_dim))
            continue
        loc = row[0:3] * spec.location_scale
        size = np.maximum(row[3:6] * spec.size_scale, 1e-6)
        cos_t, sin_t = row[6], row[7]
        norm = math.hypot(cos_t, sin_t)
        if norm < 1e-12:
            cos_t, sin_t = 1.0, 0.0
        theta = math.atan2(sin_t, cos_t)
        code = np.clip(row[spec.code_slice()], spec.code_low, spec.code_high)
        objects.append(ObjectRecord(loc, size, theta, cls, code))
    return SceneSet(objects, room_type)


# --- attribute slice helpers (shared by losses, tasks, and the denoiser) ---

def bbox_slice() -> slice:
    return slice(0, BBOX_DIM)


def u_slice_indices(spec: NormalizationSpec) -> np.ndarray:
    """Columns denoised during re-arrangement: location and orientation."""
    return np.array([0, 1, 2, 6, 7])


def v_slice_indices(spec: NormalizationSpec) -> np.ndarray:
    """Columns held fixed during re-arrangement: size, class, shape code."""
    u = set(u_slice_indices(spec).tolist())
    return np.array([d for d in range(spec.row_dim) if d not in u])


# --- scene file schema ---------------------------------------------------
# {"room_type": str, "objects": [{"class": str, "location": [3],
#   "size": [3], "theta": float, "shape_code": [F], "frozen": bool}]}

def scene_to_dict(scene: SceneSet, spec: NormalizationSpec) -> dict:
    objs = []
    for o in scene.real_objects:
        objs.append({
            "class": spec.classes[o.class_index],
            "location": [float(v) for v in o.location],
            "size": [float(v) for v in o.size],
            "theta": float(o.theta),
            "shape_code": [float(v) for v in o.shape_code],
            "frozen": bool(o.frozen),
        })
    return {"room_type": scene.room_type, "objects": objs}


def scene_from_dict(data: dict, spec: NormalizationSpec) -> SceneSet:
    try:
        room_type = data["room_type"]
        raw_objects = data["objects"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"scene file missing field: {exc}") from exc
    objects = []
    for entry in raw_objects:
        name = entry.get("class")
        if name not in spec.classes:
            raise DataError(f"unknown class '{name}' in scene file")
        cls = spec.classes.index(name)
        if cls == EMPTY_CLASS:
            continue
        code = np.asarray(entry.get("shape_code", [0.0] * spec.code_dim),
                          dtype=float)
        if code.shape != (spec.code_dim,):
            raise DataError(
                f"shape_code length {code.shape} != {spec.code_dim}")
        objects.append(ObjectRecord(
            np.asarray(entry["location"], dtype=float),
            np.asarray(entry["size"], dtype=float),
            float(entry["theta"]),
            cls,
            code,
            bool(entry.get("frozen", True)),
        ))
    return SceneSet(objects, room_type)


def save_scene(path, scene: SceneSet, spec: NormalizationSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene, spec), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path, spec: NormalizationSpec) -> SceneSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"scene file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable scene file {path}: {exc}") from exc
    return scene_from_dict(data, spec)
