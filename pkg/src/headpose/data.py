"""Depth/annotation file formats, Siamese pair sampling, and the synthetic head renderer."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headpose import preprocess as pp
from headpose.frames import Annotation, CameraIntrinsics, DepthFrame

BACKGROUND_MM = 3000
PAIR_THRESHOLD_DEG = 30.0
ANNOTATION_COLUMNS = ("frame_id", "xc", "yc", "Z_mm", "pitch_deg", "roll_deg", "yaw_deg")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# 16-bit PGM
# --------------------------------------------------------------------------

def write_pgm16(frame: DepthFrame, path) -> None:
    depth = np.asarray(frame.depth)
    if depth.min(initial=0) < 0 or depth.max(initial=0) > 65535:
        raise ValueError("depth values must fit in 16 bits")
    header = (f"P5\n# depth_mm fx={frame.intrinsics.fx!r} fy={frame.intrinsics.fy!r}\n"
              f"{frame.width} {frame.height}\n65535\n")
    Path(path).write_bytes(header.encode("ascii") + depth.astype(">u2").tobytes())


_INTRINSICS_RE = re.compile(rb"depth_mm\s+fx=(\S+)\s+fy=(\S+)")


def read_pgm16(path, intrinsics: CameraIntrinsics | None = None, frame_id: str | None = None) -> DepthFrame:
    """Read a binary 16-bit PGM depth map.

    Intrinsics come from the ``# depth_mm fx=.. fy=..`` comment line, or from
    the ``intrinsics`` argument when the file has none.
    """
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic == b"P2":
        raise FormatError("binary PGM required (got ASCII P2)")
    if magic != b"P5":
        raise FormatError(f"not a PGM file (magic {magic!r})")

    pos, tokens, found = 2, [], intrinsics
    while len(tokens) < 3:
        if pos >= len(buf):
            raise FormatError(f"truncated PGM header at byte {pos}")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            end = len(buf) if end < 0 else end
            m = _INTRINSICS_RE.search(buf[pos:end])
            if m and intrinsics is None:
                found = CameraIntrinsics(float(m.group(1)), float(m.group(2)))
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            try:
                tokens.append(int(buf[start:pos]))
            except ValueError:
                raise FormatError(f"bad PGM header token {buf[start:pos]!r} at byte {start}") from None
    width, height, maxval = tokens
    if maxval != 65535:
        raise FormatError(f"maxval must be 65535 for 16-bit depth, got {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"truncated PGM header at byte {pos}")
    pos += 1
    need = width * height * 2
    if len(buf) - pos < need:
        raise FormatError(f"truncated PGM data at byte {len(buf)}: expected {need} bytes from byte {pos}")
    if found is None:
        raise FormatError("no camera intrinsics in file and none supplied")
    depth = np.frombuffer(buf, dtype=">u2", count=width * height, offset=pos).reshape(height, width)
    return DepthFrame(depth.astype(np.uint16), found, frame_id if frame_id is not None else Path(path).stem)


# --------------------------------------------------------------------------
# annotations
# --------------------------------------------------------------------------

def read_annotations(path) -> list[Annotation]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ANNOTATION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        out = []
        for row in reader:
            line = reader.line_num
            try:
                vals = [float(row[c]) for c in ANNOTATION_COLUMNS[1:]]
            except (TypeError, ValueError):
                raise FormatError(f"{path}: non-numeric field on line {line}") from None
            out.append(Annotation(row["frame_id"], vals[0], vals[1], vals[2], tuple(vals[3:])))
    return out


def write_annotations(annotations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            w.writerow([a.frame_id, repr(a.xc), repr(a.yc), repr(a.z_mm), *(repr(float(v)) for v in a.angles)])


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

class Dataset:
    """Annotated depth frames, either on disk (``root/frames/*.pgm`` +
    ``root/annotations.csv``) or held in memory."""

    def __init__(self, annotations, frames: dict | None = None, root=None):
        self.annotations: list[Annotation] = list(annotations)
        self.root = Path(root) if root is not None else None
        self._frames: dict[str, DepthFrame] = dict(frames or {})

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        return cls(read_annotations(root / "annotations.csv"), root=root)

    def __len__(self):
        return len(self.annotations)

    def frame(self, frame_id: str) -> DepthFrame:
        if frame_id not in self._frames:
            if self.root is None:
                raise KeyError(frame_id)
            self._frames[frame_id] = read_pgm16(self.root / "frames" / f"{frame_id}.pgm", frame_id=frame_id)
        return self._frames[frame_id]

    def items(self):
        for ann in self.annotations:
            yield self.frame(ann.frame_id), ann

    def angles(self) -> np.ndarray:
        return np.array([a.angles for a in self.annotations], dtype=np.float64).reshape(-1, 3)

    def subjects(self) -> list[str]:
        return sorted({a.subject for a in self.annotations})

    def subset(self, subjects) -> "Dataset":
        keep = set(subjects)
        anns = [a for a in self.annotations if a.subject in keep]
        frames = {a.frame_id: self._frames[a.frame_id] for a in anns if a.frame_id in self._frames}
        return Dataset(anns, frames, self.root)

    def holdout_split(self, fraction: float = 0.1) -> tuple["Dataset", "Dataset"]:
        """Subject-disjoint (train, validation) split; the last ceil(fraction * n) subjects are held out."""
        subs = self.subjects()
        k = int(np.ceil(fraction * len(subs))) if fraction > 0 else 0
        if k >= len(subs) and k > 0:
            raise ValueError(f"cannot hold out {k} of {len(subs)} subjects")
        return self.subset(subs[:len(subs) - k]), self.subset(subs[len(subs) - k:])

    def save(self, root) -> None:
        root = Path(root)
        (root / "frames").mkdir(parents=True, exist_ok=True)
        for frame, ann in self.items():
            write_pgm16(frame, root / "frames" / f"{ann.frame_id}.pgm")
        write_annotations(self.annotations, root / "annotations.csv")


# --------------------------------------------------------------------------
# Siamese pairs
# --------------------------------------------------------------------------

PAIR_RULES = ("any_angle", "all_angles", "sum")


def pair_eligible(a, b, rule: str = "any_angle", threshold: float = PAIR_THRESHOLD_DEG) -> bool:
    """Whether two (pitch, roll, yaw) triples in degrees differ enough to form a pair.

    ``any_angle``: some angle differs by >= threshold. ``all_angles``: every
    angle does. ``sum``: the absolute differences add up to >= threshold.
    """
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if rule == "any_angle":
        return bool(d.max() >= threshold)
    if rule == "all_angles":
        return bool(d.min() >= threshold)
    if rule == "sum":
        return bool(d.sum() >= threshold)
    raise ValueError(f"unknown pair rule {rule!r}; expected one of {PAIR_RULES}")


def eligible_pairs(angles_deg, rule: str = "any_angle", threshold: float = PAIR_THRESHOLD_DEG) -> np.ndarray:
    """All index pairs (i < j) satisfying :func:`pair_eligible`, as an (M, 2) array."""
    ang = np.asarray(angles_deg, dtype=np.float64)
    i, j = np.triu_indices(len(ang), k=1)
    d = np.abs(ang[i] - ang[j])
    if rule == "any_angle":
        ok = d.max(axis=1) >= threshold
    elif rule == "all_angles":
        ok = d.min(axis=1) >= threshold
    elif rule == "sum":
        ok = d.sum(axis=1) >= threshold
    else:
        raise ValueError(f"unknown pair rule {rule!r}; expected one of {PAIR_RULES}")
    return np.stack([i[ok], j[ok]], axis=1)


def sample_pair_indices(pool: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    if len(pool) == 0:
        raise ValueError("pair pool empty under 30° rule")
    return pool[rng.integers(len(pool), size=count)]


@dataclass
class SamplePair:
    frame_ids: tuple[str, str]
    patches: tuple[np.ndarray, np.ndarray]
    angles: tuple[np.ndarray, np.ndarray]  # normalised


def pair_sampler(dataset: Dataset, count: int, seed, rule: str = "any_angle",
                 threshold: float = PAIR_THRESHOLD_DEG,
                 angle_range: pp.AngleRange = pp.AngleRange()) -> list[SamplePair]:
    """``count`` pairs drawn uniformly, with replacement, from the eligible pool."""
    rng = np.random.default_rng(seed)
    pool = eligible_pairs(dataset.angles(), rule, threshold)
    if len(pool) == 0:
        raise ValueError(f"pair pool empty under {threshold:g}° rule")
    out = []
    for i, j in sample_pair_indices(pool, count, rng):
        anns = dataset.annotations[i], dataset.annotations[j]
        out.append(SamplePair(
            (anns[0].frame_id, anns[1].frame_id),
            tuple(pp.preprocess(dataset.frame(a.frame_id), a) for a in anns),
            tuple(pp.normalize_angles(a.angles, angle_range) for a in anns),
        ))
    return out


# --------------------------------------------------------------------------
# synthetic heads
# --------------------------------------------------------------------------

def rotation_matrix(pitch: float, roll: float, yaw: float) -> np.ndarray:
    """Head-to-camera rotation for angles in degrees.

    Camera frame: x right, y down, z along the optical axis. Intrinsic
    rotations in the order yaw (about y), pitch (about x), roll (about z):
    R = Ry(yaw) @ Rx(pitch) @ Rz(roll).
    """
    p, r, y = np.radians([pitch, roll, yaw])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return ry @ rx @ rz


@dataclass
class SyntheticHeadSpec:
    """Ellipsoid head with a conical nose.

    In the head frame the face looks along -z (towards the camera at zero
    pose); the nose apex sits at (0, 0, -(az + nose_length)).
    """

    semi_axes: tuple[float, float, float] = (78.0, 105.0, 95.0)
    nose_length: float = 25.0
    nose_radius: float = 15.0
    position: tuple[float, float, float] = (0.0, 0.0, 1000.0)
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)  # pitch, roll, yaw degrees

    def __post_init__(self):
        if min(self.semi_axes) <= 0 or self.nose_length <= 0 or self.nose_radius <= 0:
            raise ValueError("head dimensions must be positive")
        if self.position[2] <= max(self.semi_axes) + self.nose_length:
            raise ValueError("head must lie fully in front of the camera")


def _pixel_rays(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([(u - cx) / intrinsics.fx, (v - cy) / intrinsics.fy, np.ones_like(u)], axis=-1)


def _first_hit(a, b, c, valid_fn):
    """Smallest positive root of a t^2 + b t + c = 0 accepted by ``valid_fn``; inf if none."""
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (np.abs(a) > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    r1, r2 = (-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    best = np.full(a.shape, np.inf)
    for t in (hi, lo):  # lo last so it wins when both are valid
        good = ok & (t > 0) & valid_fn(t)
        best = np.where(good, t, best)
    return best


def render_depth(spec: SyntheticHeadSpec, intrinsics: CameraIntrinsics, width: int, height: int,
                 background: float = BACKGROUND_MM) -> np.ndarray:
    """Ray-cast depth (z distance, float mm) of the head; background where rays miss."""
    rot = rotation_matrix(*spec.pose)
    t_cam = np.asarray(spec.position, dtype=np.float64)
    dirs = _pixel_rays(intrinsics, width, height) @ rot  # rows: R^T d
    origin = rot.T @ (-t_cam)

    ax = np.asarray(spec.semi_axes, dtype=np.float64)
    d_s, o_s = dirs / ax, origin / ax
    t_ell = _first_hit((d_s * d_s).sum(-1), 2 * (d_s @ o_s), np.full(dirs.shape[:2], o_s @ o_s - 1.0),
                       lambda t: np.ones_like(t, dtype=bool))

    apex = np.array([0.0, 0.0, -(ax[2] + spec.nose_length)])
    k2 = (spec.nose_radius / spec.nose_length) ** 2
    h_max = 1.8 * spec.nose_length  # base sunk inside the ellipsoid so it never shows
    q = origin - apex
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy - k2 * dz * dz
    b = 2 * (q[0] * dx + q[1] * dy - k2 * q[2] * dz)
    c = np.full(a.shape, q[0] ** 2 + q[1] ** 2 - k2 * q[2] ** 2)
    t_cone = _first_hit(a, b, c, lambda t: (q[2] + t * dz >= 0) & (q[2] + t * dz <= h_max))

    t = np.minimum(t_ell, t_cone)
    return np.where(np.isfinite(t), t, background)


def project_point(spec: SyntheticHeadSpec, intrinsics: CameraIntrinsics, width: int, height: int,
                  head_point) -> tuple[float, float, float]:
    """Pixel (u, v) and depth of a point given in the head frame."""
    p = rotation_matrix(*spec.pose) @ np.asarray(head_point, dtype=np.float64) + np.asarray(spec.position)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    return float(intrinsics.fx * p[0] / p[2] + cx), float(intrinsics.fy * p[1] / p[2] + cy), float(p[2])


def render_synthetic_head(spec: SyntheticHeadSpec, intrinsics: CameraIntrinsics, image_size=(192, 144),
                          frame_id: str = "", background: int = BACKGROUND_MM):
    """Render one head to a (DepthFrame, Annotation) pair; the annotated centre is the projected head centre."""
    width, height = image_size
    depth = render_depth(spec, intrinsics, width, height, background)
    xc, yc, z = project_point(spec, intrinsics, width, height, (0.0, 0.0, 0.0))
    border = np.concatenate([depth[0], depth[-1], depth[:, 0], depth[:, -1]])
    if not (0 <= xc < width and 0 <= yc < height) or np.any(border < background):
        raise ValueError("head projects outside image")
    frame = DepthFrame(np.rint(depth).astype(np.uint16), intrinsics, frame_id)
    return frame, Annotation(frame_id, xc, yc, z, tuple(float(v) for v in spec.pose))


@dataclass(frozen=True)
class PoseDistribution:
    """Independent uniform angles: center +/- span, in degrees (pitch, roll, yaw)."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    span: tuple[float, float, float] = (60.0, 50.0, 75.0)

    def sample(self, rng: np.random.Generator) -> tuple[float, float, float]:
        c, s = np.asarray(self.center), np.asarray(self.span)
        return tuple(float(v) for v in c + rng.uniform(-1.0, 1.0, size=3) * s)


@dataclass(frozen=True)
class SynthConfig:
    intrinsics: CameraIntrinsics = CameraIntrinsics(240.0, 240.0)
    image_size: tuple[int, int] = (192, 144)
    distance_mm: tuple[float, float] = (850.0, 1150.0)
    lateral_mm: float = 50.0
    shape_jitter: float = 0.08  # relative per-subject variation of head dimensions
    subjects_offset: int = 0
    background: int = BACKGROUND_MM


def subject_head(seed: int, subject: int, cfg: SynthConfig = SynthConfig()) -> SyntheticHeadSpec:
    rng = np.random.default_rng([seed, subject, 0])
    j = 1.0 + rng.uniform(-cfg.shape_jitter, cfg.shape_jitter, size=5)
    base = SyntheticHeadSpec()
    return SyntheticHeadSpec(
        semi_axes=tuple(float(a * s) for a, s in zip(base.semi_axes, j[:3])),
        nose_length=float(base.nose_length * j[3]),
        nose_radius=float(base.nose_radius * j[4]),
    )


def synth_frame(seed: int, subject: int, index: int, pose, cfg: SynthConfig = SynthConfig()):
    """Render frame ``index`` of ``subject`` at ``pose`` with seeded position jitter."""
    head = subject_head(seed, subject, cfg)
    rng = np.random.default_rng([seed, subject, index + 1])
    x, y = rng.uniform(-cfg.lateral_mm, cfg.lateral_mm, size=2)
    z = rng.uniform(*cfg.distance_mm)
    spec = SyntheticHeadSpec(head.semi_axes, head.nose_length, head.nose_radius, (float(x), float(y), float(z)),
                             tuple(float(v) for v in pose))
    return render_synthetic_head(spec, cfg.intrinsics, cfg.image_size, f"s{subject:02d}_{index:05d}", cfg.background)


def generate_dataset(root, n_subjects: int, frames_per_subject: int,
                     pose_distribution: PoseDistribution = PoseDistribution(), seed: int = 0,
                     cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Render a synthetic dataset; written to ``root`` unless it is None."""
    frames, anns = {}, []
    for s in range(cfg.subjects_offset, cfg.subjects_offset + n_subjects):
        pose_rng = np.random.default_rng([seed, s, 10 ** 9])
        for i in range(frames_per_subject):
            frame, ann = synth_frame(seed, s, i, pose_distribution.sample(pose_rng), cfg)
            frames[ann.frame_id] = frame
            anns.append(ann)
    ds = Dataset(anns, frames)
    if root is not None:
        ds.save(root)
        ds.root = Path(root)
    return ds
