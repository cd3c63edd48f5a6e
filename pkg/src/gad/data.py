"""Point-cloud containers, file formats and synthetic labeled shapes.

Formats
-------
* XYZ text: one point per line, ``x y z [part_label]``; ``#`` starts a comment.
* GADB binary: ``b"GADB"``, u32 version, u32 count, then per cloud u32 N,
  u8 flags (bit 0 class label, bit 1 part labels), N*3 little-endian f32
  coordinates, optional u32 class label, optional N u32 part labels.
* Manifest: ``key=value`` header lines followed by ``file=`` lines.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GADB_MAGIC = b"GADB"
GADB_VERSION = 1
HAS_CLASS = 1
HAS_PARTS = 2

SHAPE_KINDS = ("sphere", "cube", "torus", "plane_pair", "cylinder")
SHAPE_PARTS = {"sphere": 2, "cube": 6, "torus": 4, "plane_pair": 2, "cylinder": 2}
CYLINDER_RADIUS = 0.5
CYLINDER_HEIGHT = 1.5
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4


class DataFormatError(ValueError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    point_labels: np.ndarray | None = None
    class_label: int | None = None
    category_onehot: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise DataFormatError(f"coords must be (N>=1, 3), got {self.coords.shape}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (len(self.coords),):
                raise DataFormatError(f"{len(self.point_labels)} part labels for {len(self.coords)} points")

    @property
    def n(self) -> int:
        return len(self.coords)

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        return PointCloud(coords, self.point_labels, self.class_label, self.category_onehot)


def check_labels(cloud: PointCloud, num_classes: int | None = None, num_parts: int | None = None, where: str = "") -> None:
    if num_classes is not None and cloud.class_label is not None and not 0 <= cloud.class_label < num_classes:
        raise LabelRangeError(f"{where}class label {cloud.class_label} outside [0, {num_classes})")
    if num_parts is not None and cloud.point_labels is not None and len(cloud.point_labels):
        lo, hi = int(cloud.point_labels.min()), int(cloud.point_labels.max())
        if lo < 0 or hi >= num_parts:
            bad = hi if hi >= num_parts else lo
            raise LabelRangeError(f"{where}part label {bad} outside [0, {num_parts})")


def onehot(index: int, width: int) -> np.ndarray:
    v = np.zeros(width)
    v[index] = 1.0
    return v


# ---------------------------------------------------------------------------
# XYZ text


def load_xyz_text(path, num_parts: int | None = None) -> PointCloud:
    rows, labels = [], []
    ncols = None
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].split()
        if not body:
            continue
        if len(body) not in (3, 4):
            raise DataFormatError(f"{path}:{no}: expected 3 or 4 columns, got {len(body)}")
        if ncols is None:
            ncols = len(body)
        elif len(body) != ncols:
            raise DataFormatError(f"{path}:{no}: inconsistent column count ({len(body)} vs {ncols})")
        try:
            xyz = [float(v) for v in body[:3]]
            label = int(body[3]) if ncols == 4 else None
        except ValueError:
            raise DataFormatError(f"{path}:{no}: cannot parse {line.strip()!r}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise DataFormatError(f"{path}:{no}: non-finite coordinate")
        rows.append(xyz)
        if label is not None:
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no points")
    cloud = PointCloud(np.array(rows), np.array(labels) if ncols == 4 else None)
    check_labels(cloud, num_parts=num_parts, where=f"{path}: ")
    return cloud


def save_xyz_text(cloud: PointCloud, path) -> None:
    lines = []
    for i, (x, y, z) in enumerate(cloud.coords):
        parts = [repr(float(x)), repr(float(y)), repr(float(z))]
        if cloud.point_labels is not None:
            parts.append(str(int(cloud.point_labels[i])))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# GADB binary


def save_batch_binary(clouds: list[PointCloud], path) -> None:
    out = [GADB_MAGIC, struct.pack("<II", GADB_VERSION, len(clouds))]
    for c in clouds:
        flags = (HAS_CLASS if c.class_label is not None else 0) | (HAS_PARTS if c.point_labels is not None else 0)
        out.append(struct.pack("<IB", c.n, flags))
        out.append(np.ascontiguousarray(c.coords, dtype="<f4").tobytes())
        if c.class_label is not None:
            out.append(struct.pack("<I", int(c.class_label)))
        if c.point_labels is not None:
            out.append(np.ascontiguousarray(c.point_labels, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_batch_binary(path, num_classes: int | None = None, num_parts: int | None = None) -> list[PointCloud]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataFormatError(f"{path}: truncated {what} at byte offset {pos} (need {n}, have {len(buf) - pos})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != GADB_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a GADB file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != GADB_VERSION:
        raise DataFormatError(f"{path}: unsupported GADB version {version}")
    clouds = []
    for i in range(count):
        n, flags = struct.unpack("<IB", take(5, f"cloud {i} header"))
        coords = np.frombuffer(take(12 * n, f"cloud {i} coordinates"), dtype="<f4").reshape(n, 3).astype(np.float64)
        label = struct.unpack("<I", take(4, f"cloud {i} class label"))[0] if flags & HAS_CLASS else None
        parts = None
        if flags & HAS_PARTS:
            parts = np.frombuffer(take(4 * n, f"cloud {i} part labels"), dtype="<u4").astype(np.int64)
        cloud = PointCloud(coords, parts, label)
        check_labels(cloud, num_classes, num_parts, where=f"{path}: cloud {i}: ")
        clouds.append(cloud)
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} clouds")
    return clouds


# ---------------------------------------------------------------------------
# datasets and manifests


@dataclass
class Dataset:
    clouds: list[PointCloud]
    task: str = "classification"
    num_classes: int = 0
    num_parts: int = 0
    category_count: int = 0
    category_parts: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clouds)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.clouds[i] for i in indices], self.task, self.num_classes, self.num_parts,
                       self.category_count, self.category_parts)


@dataclass
class ManifestEntry:
    path: str
    split: str
    count: int


@dataclass
class DatasetManifest:
    task: str
    num_classes: int
    num_parts: int
    category_count: int
    points_per_cloud: int
    files: list[ManifestEntry]
    category_parts: dict[int, list[int]] = field(default_factory=dict)

    def write(self, path) -> None:
        lines = [
            "# GAD dataset manifest",
            f"task={self.task}",
            f"num_classes={self.num_classes}",
            f"num_parts={self.num_parts}",
            f"category_count={self.category_count}",
            f"points_per_cloud={self.points_per_cloud}",
            "category_parts=" + ";".join(f"{c}:{','.join(map(str, p))}" for c, p in sorted(self.category_parts.items())),
        ]
        lines += [f"file={e.path} split={e.split} count={e.count}" for e in self.files]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        header, files = {}, []
        for no, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("file="):
                fields = dict(tok.split("=", 1) for tok in line.split())
                try:
                    files.append(ManifestEntry(fields["file"], fields["split"], int(fields["count"])))
                except (KeyError, ValueError):
                    raise DataFormatError(f"{path}:{no}: malformed file line") from None
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{no}: expected key=value")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
        try:
            cats = {}
            for item in filter(None, header.get("category_parts", "").split(";")):
                c, plist = item.split(":")
                cats[int(c)] = [int(p) for p in plist.split(",") if p]
            return cls(
                header["task"],
                int(header["num_classes"]),
                int(header["num_parts"]),
                int(header["category_count"]),
                int(header["points_per_cloud"]),
                files,
                cats,
            )
        except (KeyError, ValueError) as exc:
            raise DataFormatError(f"{path}: bad manifest header ({exc})") from None

    def load_split(self, split: str, root) -> Dataset:
        clouds = []
        for e in self.files:
            if e.split != split:
                continue
            fpath = Path(root) / e.path
            if not fpath.exists():
                raise DataFormatError(f"manifest references missing file {fpath}")
            batch = load_batch_binary(
                fpath,
                self.num_classes if self.task == "classification" else max(self.category_count, 1),
                self.num_parts if self.task != "classification" else None,
            )
            if len(batch) != e.count:
                raise DataFormatError(f"{fpath}: manifest says {e.count} clouds, file has {len(batch)}")
            for c in batch:
                if c.n != self.points_per_cloud:
                    raise DataFormatError(f"{fpath}: cloud with {c.n} points, manifest says {self.points_per_cloud}")
            clouds += batch
        return Dataset(clouds, self.task, self.num_classes, self.num_parts, self.category_count, self.category_parts)


def load_manifest(path) -> tuple[DatasetManifest, dict[str, Dataset]]:
    manifest = DatasetManifest.read(path)
    root = Path(path).parent
    splits = {e.split for e in manifest.files}
    return manifest, {s: manifest.load_split(s, root) for s in sorted(splits)}


# ---------------------------------------------------------------------------
# synthetic shapes


def unit_normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    centered = cloud.coords - cloud.coords.mean(axis=0)
    r = np.sqrt((centered**2).sum(axis=1)).max()
    if r > 0:
        centered = centered / r
    return cloud.with_coords(centered)


def _sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        return pts
    if kind == "torus":
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
            u, v = u[keep], v[keep]
            ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)])
        return out[:n]
    if kind == "cylinder":
        r, h = CYLINDER_RADIUS, CYLINDER_HEIGHT
        cap_area = 2 * np.pi * r * r
        is_cap = rng.uniform(0, 1, n) < cap_area / (cap_area + 2 * np.pi * r * h)
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(is_cap, r * np.sqrt(rng.uniform(0, 1, n)), r)
        z = np.where(is_cap, np.where(rng.uniform(0, 1, n) < 0.5, -h / 2, h / 2), rng.uniform(-h / 2, h / 2, n))
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        pts[is_cap, 2] = np.sign(pts[is_cap, 2]) * (h / 2)
        return pts
    if kind == "plane_pair":
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        pts[:, 2] = np.where(rng.uniform(0, 1, n) < 0.5, -0.5, 0.5)
        return pts
    raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")


def _part_labels(kind: str, pts: np.ndarray) -> np.ndarray:
    if kind == "sphere":
        return (pts[:, 2] < 0).astype(np.int64)
    if kind == "cube":
        axis = np.abs(pts).argmax(axis=1)
        return 2 * axis + (pts[np.arange(len(pts)), axis] > 0)
    if kind == "torus":
        u = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
        return np.minimum((u // (np.pi / 2)).astype(np.int64), 3)
    if kind == "cylinder":
        # 0 = cap, 1 = barrel
        return (np.abs(pts[:, 2]) < CYLINDER_HEIGHT / 2).astype(np.int64)
    return (pts[:, 2] > 0).astype(np.int64)


def synth_generate(kind: str, n_points: int, noise_std: float, rng: np.random.Generator) -> PointCloud:
    """Uniform surface sample of a primitive with geometric part labels.

    Points come in antipodal pairs (all primitives are centrally symmetric),
    so the centroid is exactly the origin for even ``n_points``. The cloud
    is scaled to max radius 1, then each point receives Gaussian noise whose
    norm is truncated at 3 * ``noise_std``.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if n_points < 16:
        raise ValueError(f"n_points must be >= 16, got {n_points}")
    half = _sample_surface(kind, (n_points + 1) // 2, rng)
    pts = np.empty((n_points, 3))
    pts[0::2] = half
    pts[1::2] = -half[: n_points // 2]
    labels = _part_labels(kind, pts)
    cloud = unit_normalize(PointCloud(pts, labels))
    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=(n_points, 3))
        norm = np.linalg.norm(noise, axis=1, keepdims=True)
        limit = 3.0 * noise_std
        noise = np.where(norm > limit, noise * (limit / np.maximum(norm, 1e-300)), noise)
        cloud = cloud.with_coords(cloud.coords + noise)
    return cloud


SYNTH_SETS = {
    "cls4": dict(task="classification", kinds=("sphere", "cube", "torus", "cylinder"), train=200, test=50, points=256),
    "cls2": dict(task="classification", kinds=("sphere", "cube"), train=32, test=16, points=64),
    "seg2": dict(task="part_seg", kinds=("torus", "cylinder"), train=100, test=25, points=256),
}
SYNTH_ALIASES = {"4class": "cls4"}
SYNTH_NOISE = 0.01


def synth_dataset(name: str, seed: int = 0, points: int | None = None) -> dict[str, Dataset]:
    """Named desk-scale dataset -> {"train": ..., "test": ...}; deterministic in ``seed``."""
    name = SYNTH_ALIASES.get(name, name)
    if name not in SYNTH_SETS:
        raise ValueError(f"unknown synthetic dataset {name!r}; choose from {sorted(SYNTH_SETS)}")
    recipe = SYNTH_SETS[name]
    n = points or recipe["points"]
    rng = np.random.default_rng(seed)
    kinds = recipe["kinds"]
    offsets = np.cumsum([0] + [SHAPE_PARTS[k] for k in kinds])
    category_parts = {i: list(range(offsets[i], offsets[i + 1])) for i in range(len(kinds))}
    out = {}
    for split in ("train", "test"):
        clouds = []
        for label, kind in enumerate(kinds):
            for _ in range(recipe[split]):
                c = synth_generate(kind, n, SYNTH_NOISE, rng)
                if recipe["task"] == "classification":
                    clouds.append(PointCloud(c.coords, None, label))
                else:
                    clouds.append(PointCloud(c.coords, c.point_labels + offsets[label], label, onehot(label, len(kinds))))
        if recipe["task"] == "classification":
            out[split] = Dataset(clouds, "classification", num_classes=len(kinds))
        else:
            out[split] = Dataset(clouds, recipe["task"], 0, int(offsets[-1]), len(kinds), category_parts)
    return out


def write_synth(name: str, out_dir, seed: int = 0) -> Path:
    """Materialize a synthetic set as GADB files plus ``manifest.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sets = synth_dataset(name, seed)
    entries = []
    for split, ds in sets.items():
        fname = f"{split}.gadb"
        save_batch_binary(ds.clouds, out_dir / fname)
        entries.append(ManifestEntry(fname, split, len(ds)))
    ref = sets["train"]
    manifest = DatasetManifest(
        ref.task, ref.num_classes, ref.num_parts, ref.category_count, ref.clouds[0].n, entries, ref.category_parts
    )
    path = out_dir / "manifest.txt"
    manifest.write(path)
    return path
