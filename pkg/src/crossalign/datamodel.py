"""Scenes, instances, modalities, availability masks and the feature archive.

The archive is the boundary where frozen pretrained encoders would sit: a
directory holding ``manifest.json`` (scene/instance graph, categories,
temporal groups, per-modality dims, row ranges into blobs) and ``*.bin``
blobs in the CROSSFA1 layout::

    magic "CROSSFA1" | version u32 | dim u32 | count u64 | count*dim f32   (little-endian)

All arrays in memory are float64; values pass through float32 on disk, so a
dataset round-trips bit-exactly once its values are float32-representable
(see :func:`round_to_f32`).
"""

from __future__ import annotations

import enum
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SchemaError


class Modality(str, enum.Enum):
    IMAGE = "I"
    POINTCLOUD = "P"
    MESH = "M"
    REFERRAL = "R"
    FLOORPLAN = "F"

    @property
    def dimensionality(self) -> str:
        return _DIMENSIONALITY[self]

    def __str__(self):
        return self.value


_DIMENSIONALITY = {
    Modality.REFERRAL: "1D",
    Modality.IMAGE: "2D",
    Modality.FLOORPLAN: "2D",
    Modality.POINTCLOUD: "3D",
    Modality.MESH: "3D",
}

# floorplans exist only at scene level
INSTANCE_MODALITIES = (Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL)
SCENE_MODALITIES = (Modality.REFERRAL, Modality.IMAGE, Modality.FLOORPLAN, Modality.POINTCLOUD)
INSTANCE_PAIRS = tuple(itertools.combinations(INSTANCE_MODALITIES, 2))


def modality(x) -> Modality:
    return x if isinstance(x, Modality) else Modality(str(x))


def round_to_f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class Location:
    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(3)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.extent])

    def __eq__(self, other):
        return (isinstance(other, Location) and np.array_equal(self.center, other.center)
                and np.array_equal(self.extent, other.extent))


@dataclass
class InstanceRecord:
    """One object.  ``feats`` maps modality to a 1-D vector, or a k x d array for referrals."""

    instance_id: str
    category: str
    location: Location
    feats: dict[Modality, np.ndarray] = field(default_factory=dict)

    def has(self, m) -> bool:
        return modality(m) in self.feats

    def __eq__(self, other):
        return (isinstance(other, InstanceRecord)
                and (self.instance_id, self.category) == (other.instance_id, other.category)
                and self.location == other.location
                and _feats_equal(self.feats, other.feats))


@dataclass
class FrameSet:
    """Per-frame class-token and aggregated-patch vectors with 7-tuple poses (qw qx qy qz tx ty tz)."""

    cls: np.ndarray
    patch: np.ndarray
    poses: np.ndarray

    def __len__(self):
        return self.cls.shape[0]

    def features(self) -> np.ndarray:
        return np.concatenate([self.cls, self.patch], axis=1)

    def __eq__(self, other):
        return (isinstance(other, FrameSet) and np.array_equal(self.cls, other.cls)
                and np.array_equal(self.patch, other.patch) and np.array_equal(self.poses, other.poses))


@dataclass
class SceneRecord:
    scene_id: str
    category: str
    temporal_group: str
    instances: list[InstanceRecord]
    frames: FrameSet | None = None
    referrals: np.ndarray | None = None      # r x d_R
    points: np.ndarray | None = None         # n x 3
    floorplan: np.ndarray | None = None      # concatenated (cls, patch), 2*d_frame

    def instance(self, instance_id: str) -> InstanceRecord:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def has_scene_modality(self, m) -> bool:
        m = modality(m)
        if m is Modality.REFERRAL:
            return self.referrals is not None and len(self.referrals) > 0
        if m is Modality.IMAGE:
            return self.frames is not None and len(self.frames) > 0
        if m is Modality.FLOORPLAN:
            return self.floorplan is not None
        if m is Modality.POINTCLOUD:
            return self.points is not None and len(self.points) > 0
        return False

    def __eq__(self, other):
        return (isinstance(other, SceneRecord)
                and (self.scene_id, self.category, self.temporal_group)
                == (other.scene_id, other.category, other.temporal_group)
                and self.instances == other.instances
                and self.frames == other.frames
                and _opt_equal(self.referrals, other.referrals)
                and _opt_equal(self.points, other.points)
                and _opt_equal(self.floorplan, other.floorplan))


@dataclass
class Dataset:
    scenes: list[SceneRecord]
    splits: dict[str, str]
    dims: dict[str, int]

    def __post_init__(self):
        self._by_id = {s.scene_id: s for s in self.scenes}

    def scene(self, scene_id: str) -> SceneRecord:
        return self._by_id[scene_id]

    def split(self, name: str) -> list[SceneRecord]:
        return [s for s in self.scenes if self.splits.get(s.scene_id) == name]

    def subset(self, scene_ids) -> "Dataset":
        keep = set(scene_ids)
        scenes = [s for s in self.scenes if s.scene_id in keep]
        return Dataset(scenes, {s.scene_id: self.splits[s.scene_id] for s in scenes}, dict(self.dims))

    def validate(self) -> None:
        _validate(self)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.scenes == other.scenes
                and self.splits == other.splits and self.dims == other.dims)


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


def _feats_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(_opt_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _validate(ds: Dataset) -> None:
    if not ds.scenes:
        raise SchemaError("dataset has no scenes")
    seen = set()
    group_category: dict[str, str] = {}
    for s in ds.scenes:
        if s.scene_id in seen:
            raise SchemaError(f"duplicate scene id {s.scene_id!r}")
        seen.add(s.scene_id)
        if s.scene_id not in ds.splits:
            raise SchemaError(f"scene {s.scene_id!r} has no split label")
        if not s.instances:
            raise SchemaError(f"scene {s.scene_id!r} has no instances")
        cat = group_category.setdefault(s.temporal_group, s.category)
        if cat != s.category:
            raise SchemaError(
                f"scene {s.scene_id!r}: temporal group {s.temporal_group!r} spans categories {cat!r}/{s.category!r}")
        ids = set()
        for inst in s.instances:
            where = f"{s.scene_id}/{inst.instance_id}"
            if inst.instance_id in ids:
                raise SchemaError(f"duplicate instance id {where}")
            ids.add(inst.instance_id)
            if not inst.feats:
                raise SchemaError(f"instance {where} has no modality features")
            if np.any(inst.location.extent < 0):
                raise SchemaError(f"instance {where} has negative extent")
            for m, f in inst.feats.items():
                if m is Modality.FLOORPLAN:
                    raise SchemaError(f"instance {where} carries a floorplan feature")
                if m is Modality.REFERRAL:
                    if f.ndim != 2 or f.shape[0] < 1:
                        raise SchemaError(f"instance {where}: referrals must be a non-empty k x d array")
                    d = f.shape[1]
                else:
                    if f.ndim != 1:
                        raise SchemaError(f"instance {where}: {m.value} feature must be a vector")
                    d = f.shape[0]
                if d != ds.dims.get(m.value):
                    raise SchemaError(f"instance {where}: {m.value} dim {d} != declared {ds.dims.get(m.value)}")
                if not np.all(np.isfinite(f)):
                    raise SchemaError(f"instance {where}: non-finite {m.value} feature")
        _validate_scene_inputs(s, ds.dims)


def _validate_scene_inputs(s: SceneRecord, dims: dict[str, int]) -> None:
    if s.frames is not None:
        d = dims.get("frame")
        if s.frames.cls.shape[1] != d or s.frames.patch.shape != s.frames.cls.shape:
            raise SchemaError(f"scene {s.scene_id}: frame feature dims do not match declared {d}")
        if s.frames.poses.shape != (len(s.frames), 7):
            raise SchemaError(f"scene {s.scene_id}: poses must be n x 7")
        qn = np.linalg.norm(s.frames.poses[:, :4], axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise SchemaError(f"scene {s.scene_id}: non-unit camera quaternion")
    if s.referrals is not None and s.referrals.shape[1:] != (dims.get("R"),):
        raise SchemaError(f"scene {s.scene_id}: referral dim mismatch")
    if s.points is not None:
        if s.points.ndim != 2 or s.points.shape[1] != 3:
            raise SchemaError(f"scene {s.scene_id}: points must be n x 3")
        if not np.all(np.isfinite(s.points)):
            raise SchemaError(f"scene {s.scene_id}: non-finite points")
    if s.floorplan is not None and s.floorplan.shape != (2 * dims.get("frame", -1),):
        raise SchemaError(f"scene {s.scene_id}: floorplan dim mismatch")


# ---------------------------------------------------------------------------
# availability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AvailabilityMask:
    """``pairs[(scene_id, instance_id)][(a, b)]`` is True iff both modalities are present."""

    pairs: dict

    def available(self, key, a, b) -> bool:
        a, b = modality(a), modality(b)
        entry = self.pairs[key]
        return entry.get((a, b), entry.get((b, a), False))


def availability(ds: Dataset) -> AvailabilityMask:
    out = {}
    for s in ds.scenes:
        for inst in s.instances:
            out[(s.scene_id, inst.instance_id)] = {
                (a, b): (a in inst.feats and b in inst.feats) for a, b in INSTANCE_PAIRS}
    return AvailabilityMask(out)


# ---------------------------------------------------------------------------
# archive I/O
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"CROSSFA1"
BLOB_VERSION = 1
BLOB_HEADER_BYTES = 24
MANIFEST_VERSION = 1


def write_blob(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise FormatError(f"blob payload must be 2-D, got shape {rows.shape}")
    head = BLOB_MAGIC + struct.pack("<IIQ", BLOB_VERSION, rows.shape[1], rows.shape[0])
    Path(path).write_bytes(head + np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_blob(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < BLOB_HEADER_BYTES or buf[:8] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad blob magic")
    version, dim, count = struct.unpack_from("<IIQ", buf, 8)
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    if len(buf) != BLOB_HEADER_BYTES + 4 * dim * count:
        raise FormatError(f"{path}: payload size does not match header ({count} x {dim})")
    data = np.frombuffer(buf, dtype="<f4", offset=BLOB_HEADER_BYTES, count=dim * count)
    return data.reshape(count, dim).astype(np.float64)


class _BlobWriter:
    def __init__(self):
        self.rows: dict[str, list[np.ndarray]] = {}
        self.sizes: dict[str, int] = {}

    def put(self, key: str, arr: np.ndarray) -> list[int]:
        arr = np.atleast_2d(arr)
        start = self.sizes.get(key, 0)
        self.rows.setdefault(key, []).append(arr)
        self.sizes[key] = start + arr.shape[0]
        return [start, arr.shape[0]]


_BLOB_DIMS = {
    "inst_I": "I", "inst_P": "P", "inst_M": "M", "inst_R": "R",
    "frame_cls": "frame", "frame_patch": "frame", "scene_R": "R",
}


def save_feature_archive(ds: Dataset, path) -> None:
    """Write ``ds`` as a manifest + blob directory; bytes are deterministic."""
    if not ds.scenes:
        raise FormatError("refusing to write an archive with no scenes")
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    bw = _BlobWriter()
    scenes_json = []
    for s in ds.scenes:
        insts = []
        for inst in s.instances:
            entry = {
                "instance_id": inst.instance_id,
                "category": inst.category,
                "center": [float(x) for x in inst.location.center],
                "extent": [float(x) for x in inst.location.extent],
            }
            for m in INSTANCE_MODALITIES:
                if m in inst.feats:
                    entry[m.value] = bw.put(f"inst_{m.value}", inst.feats[m])
            insts.append(entry)
        sj = {
            "scene_id": s.scene_id,
            "category": s.category,
            "temporal_group": s.temporal_group,
            "split": ds.splits[s.scene_id],
            "instances": insts,
        }
        if s.frames is not None:
            sj["frames"] = bw.put("frame_cls", s.frames.cls)
            bw.put("frame_patch", s.frames.patch)
            bw.put("frame_pose", s.frames.poses)
        if s.referrals is not None:
            sj["referrals"] = bw.put("scene_R", s.referrals)
        if s.points is not None:
            sj["points"] = bw.put("scene_points", s.points)
        if s.floorplan is not None:
            sj["floorplan"] = bw.put("floorplan", s.floorplan)
        scenes_json.append(sj)
    blob_dims = {"frame_pose": 7, "scene_points": 3, "floorplan": 2 * ds.dims.get("frame", 0)}
    blob_dims.update({k: ds.dims.get(v, 0) for k, v in _BLOB_DIMS.items()})
    blobs = {}
    for key in sorted(bw.rows):
        fname = f"{key}.bin"
        write_blob(root / fname, np.concatenate(bw.rows[key], axis=0).reshape(-1, blob_dims[key]))
        blobs[key] = fname
    manifest = {
        "format": "crossalign-feature-archive",
        "version": MANIFEST_VERSION,
        "dims": dict(sorted(ds.dims.items())),
        "blobs": blobs,
        "scenes": scenes_json,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_feature_archive(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("format") != "crossalign-feature-archive":
        raise FormatError(f"{mpath}: not a crossalign feature archive")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{mpath}: unsupported manifest version {manifest.get('version')}")
    blobs = {k: read_blob(root / v) for k, v in manifest["blobs"].items()}
    dims = {k: int(v) for k, v in manifest["dims"].items()}

    def rows(key, span, where):
        start, count = span
        arr = blobs.get(key)
        if arr is None or start + count > arr.shape[0]:
            raise SchemaError(f"{where}: row range {span} outside blob {key}")
        return arr[start:start + count]

    scenes, splits = [], {}
    for sj in manifest["scenes"]:
        sid = sj["scene_id"]
        insts = []
        for ij in sj["instances"]:
            where = f"{sid}/{ij['instance_id']}"
            feats = {}
            for m in INSTANCE_MODALITIES:
                if m.value in ij:
                    r = rows(f"inst_{m.value}", ij[m.value], where)
                    feats[m] = r if m is Modality.REFERRAL else r[0]
            insts.append(InstanceRecord(ij["instance_id"], ij["category"],
                                        Location(ij["center"], ij["extent"]), feats))
        frames = None
        if "frames" in sj:
            frames = FrameSet(rows("frame_cls", sj["frames"], sid),
                              rows("frame_patch", sj["frames"], sid),
                              rows("frame_pose", sj["frames"], sid))
        scene = SceneRecord(
            sid, sj["category"], sj["temporal_group"], insts, frames,
            referrals=rows("scene_R", sj["referrals"], sid) if "referrals" in sj else None,
            points=rows("scene_points", sj["points"], sid) if "points" in sj else None,
            floorplan=rows("floorplan", sj["floorplan"], sid)[0] if "floorplan" in sj else None,
        )
        scenes.append(scene)
        splits[sid] = sj["split"]
    ds = Dataset(scenes, splits, dims)
    ds.validate()
    return ds
