"""Deterministic simulator producing paired image/tactile sequences.

A virtual parallel gripper follows a smooth planar trajectory while the
grasped object stays fixed in the world, so the object pose in the gripper
frame is the inverse of the gripper pose. Ground-truth pose deltas come
from exact homogeneous-transform algebra; the camera and tactile frames
are procedural renders of the relative pose.

Object knobs mirror the two failure axes of the task: ``size_class`` drives
how much of the camera view a gripper-like band occludes, and
``texture_richness`` scales the contrast of the tactile imprint (0 leaves
the tactile frame featureless).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
import struct

import numpy as np

__all__ = [
    "PoseDelta",
    "ObjectSpec",
    "SequenceSample",
    "PerturbSpec",
    "make_pose",
    "invert_pose",
    "pose_params",
    "delta_transform",
    "pose_delta_from_transforms",
    "gen_trajectory",
    "render_image",
    "render_image_layers",
    "render_tactile",
    "generate_sequence",
    "apply_perturbation",
    "GeneratorConfig",
    "default_object_roster",
    "SequenceRecord",
    "Dataset",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "dataset_equal",
    "DatasetParseError",
    "TRANSLATION_LIMIT_MM",
    "ROTATION_LIMIT_DEG",
    "SPLITS",
]

TRANSLATION_LIMIT_MM = 30.0
ROTATION_LIMIT_DEG = 40.0
MOTION_KINDS = ("translation", "rotation", "combined")
SPLITS = ("train", "eval_known", "eval_unknown")

# Fraction of train sequences per motion kind (numerator, denominator).
TRAIN_FRACTIONS = {"translation": (3, 5), "rotation": (3, 5), "combined": (2, 3)}


@dataclass(frozen=True)
class PoseDelta:
    """3-DoF relative pose change in the gripper frame: mm, mm, degrees."""

    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


@dataclass(frozen=True)
class ObjectSpec:
    """Simulated object: occlusion and tactile-informativeness knobs in [0, 1]."""

    label: str
    size_class: float
    texture_richness: float
    shape_seed: int

    def __post_init__(self):
        if not (0.0 <= self.size_class <= 1.0 and 0.0 <= self.texture_richness <= 1.0):
            raise ValueError(f"size_class/texture_richness must lie in [0,1]: {self}")


@dataclass
class SequenceSample:
    """One grasp motion: aligned image frames, tactile frames, and targets.

    Frames are float32 in [0, 255]; targets are float32 (dx mm, dy mm,
    dtheta deg) with the first step fixed at zero.
    """

    object: ObjectSpec
    motion_kind: str
    frames_image: np.ndarray  # [T,1,H,W]
    frames_tactile: np.ndarray  # [T,1,H',W']
    targets: np.ndarray  # [T,3]
    rate_hz: float


@dataclass(frozen=True)
class PerturbSpec:
    """Evaluation-time sensor degradation for one modality."""

    modality: str  # "image" | "tactile"
    kind: str  # "gaussian-noise" | "mute"
    variance: float = 0.0

    def __post_init__(self):
        if self.modality not in ("image", "tactile"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.kind not in ("gaussian-noise", "mute"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")


# ---------------------------------------------------------------------------
# planar homogeneous transforms


def make_pose(x: float, y: float, theta_deg: float) -> np.ndarray:
    """3x3 planar transform: rotation ``theta_deg`` about z plus (x, y) translation."""
    th = np.deg2rad(theta_deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def _check_transform(h: np.ndarray, name: str) -> None:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"{name} must be a 3x3 transform, got shape {h.shape}")
    if not np.allclose(h[2], (0.0, 0.0, 1.0), atol=1e-9):
        raise ValueError(f"{name} last row must be (0,0,1), got {h[2]}")
    r = h[:2, :2]
    if not np.allclose(r.T @ r, np.eye(2), atol=1e-6) or np.linalg.det(r) < 0:
        raise ValueError(f"{name} rotation block is not orthonormal with det +1")


def invert_pose(h: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a valid planar transform."""
    rt = h[:2, :2].T
    out = np.eye(3)
    out[:2, :2] = rt
    out[:2, 2] = -rt @ h[:2, 2]
    return out


def pose_params(h: np.ndarray) -> tuple[float, float, float]:
    """(x, y, theta) with theta in degrees, range (-180, 180]."""
    theta = float(np.degrees(np.arctan2(h[1, 0], h[0, 0])))
    if theta <= -180.0:
        theta += 360.0
    return float(h[0, 2]), float(h[1, 2]), theta


def delta_transform(h_g1: np.ndarray, h_gt: np.ndarray) -> np.ndarray:
    """Object pose change between grasp start and step t.

    The object is fixed while the gripper moves, so the object pose is the
    inverse gripper pose and the change works out to H(1) @ inverse(H(t)).
    """
    _check_transform(h_g1, "h_g1")
    _check_transform(h_gt, "h_gt")
    return np.asarray(h_g1, dtype=np.float64) @ invert_pose(np.asarray(h_gt, dtype=np.float64))


def pose_delta_from_transforms(h_g1: np.ndarray, h_gt: np.ndarray) -> PoseDelta:
    x, y, theta = pose_params(delta_transform(h_g1, h_gt))
    return PoseDelta(x, y, theta)


# ---------------------------------------------------------------------------
# gripper trajectories


def _smooth_profile(rng: np.random.Generator, tau: np.ndarray) -> np.ndarray:
    """Two-harmonic sinusoid, exactly zero at tau=0, peak magnitude exactly 1."""
    f1 = rng.uniform(0.4, 1.0)
    f2 = rng.uniform(1.1, 2.2)
    p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    c2 = rng.uniform(0.15, 0.45)
    w = np.sin(2 * np.pi * f1 * tau + p1) + c2 * np.sin(2 * np.pi * f2 * tau + p2)
    w = w - w[0]
    peak = np.max(np.abs(w))
    return w / peak if peak > 1e-12 else np.zeros_like(w)


def gen_trajectory(kind: str, steps: int, rng: np.random.Generator) -> np.ndarray:
    """[T,3,3] gripper poses, identity at step 1, magnitudes inside the
    30 mm / 40 deg motion envelopes."""
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}")
    if steps < 2:
        raise ValueError(f"trajectory needs at least 2 steps, got {steps}")
    tau = np.linspace(0.0, 1.0, steps)
    x = y = theta = np.zeros(steps)
    if kind in ("translation", "combined"):
        amp = rng.uniform(10.0, 29.0) if kind == "translation" else rng.uniform(8.0, 26.0)
        px = _smooth_profile(rng, tau)
        py = _smooth_profile(rng, tau)
        norms = np.hypot(px, py)
        scale = amp / max(np.max(norms), 1e-12)
        x, y = px * scale, py * scale
    if kind in ("rotation", "combined"):
        amp = rng.uniform(12.0, 38.0) if kind == "rotation" else rng.uniform(8.0, 34.0)
        theta = _smooth_profile(rng, tau) * amp
    return np.stack([make_pose(x[t], y[t], theta[t]) for t in range(steps)])


# ---------------------------------------------------------------------------
# renderers: pure functions of (object spec, gripper pose, frame dims)

_IMAGE_FIELD_MM = 135.0  # horizontal field of view mapped onto the frame width
_TACTILE_FIELD_MM = 50.0
_GRAY = 127.5


def _object_frame_coords(hw: tuple[int, int], px_per_mm: float, h_gt: np.ndarray):
    """Pixel grid expressed in the object's frame (mm), given the gripper pose."""
    h, w = hw
    rel = invert_pose(np.asarray(h_gt, dtype=np.float64))  # object pose in gripper frame
    x_rel, y_rel, theta = pose_params(rel)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = (jj - (w - 1) / 2.0) / px_per_mm - x_rel
    dy = (ii - (h - 1) / 2.0) / px_per_mm - y_rel
    th = np.deg2rad(theta)
    c, s = np.cos(th), np.sin(th)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return u, v, ii, jj


def render_image_layers(obj: ObjectSpec, h_gt: np.ndarray, hw: tuple[int, int]) -> dict:
    """Camera render plus the object/occluder masks (the masks are what the
    occlusion tests count)."""
    h, w = hw
    px_per_mm = w / _IMAGE_FIELD_MM
    srng = np.random.default_rng(np.random.SeedSequence([obj.shape_seed, 11]))
    a_mm = 40.0 + 8.0 * srng.uniform()
    b_mm = 26.0 + 6.0 * srng.uniform()
    f1 = 0.15 + 0.20 * srng.uniform()
    f2 = 0.15 + 0.20 * srng.uniform()
    p1, p2 = srng.uniform(0.0, 2.0 * np.pi, size=2)

    u, v, ii, jj = _object_frame_coords(hw, px_per_mm, h_gt)
    inside = (u / a_mm) ** 2 + (v / b_mm) ** 2 <= 1.0
    pattern = _GRAY + 85.0 * np.sin(f1 * u + p1) * np.cos(f2 * v + p2) + 25.0 * np.tanh(u / 20.0)
    background = _GRAY + 60.0 * (jj - (w - 1) / 2.0) / w + 40.0 * (ii - (h - 1) / 2.0) / h
    frame = np.where(inside, pattern, background)

    occluder = np.zeros_like(inside)
    if obj.size_class > 0.0:
        band = int(round(w * 0.96 * obj.size_class))
        occluder[:, :band] = True
        frame = np.where(occluder, _GRAY, frame)
    return {
        "frame": np.clip(frame, 0.0, 255.0).astype(np.float32),
        "object_mask": inside,
        "occluder_mask": occluder,
    }


def render_image(obj: ObjectSpec, h_gt: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Grayscale camera frame [H,W] in [0,255]; deterministic in its inputs."""
    return render_image_layers(obj, h_gt, hw)["frame"]


def render_tactile(obj: ObjectSpec, h_gt: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Tactile imprint [H',W']: an object-fixed interference texture that
    slides and rotates with the contact pose; contrast scales with
    texture_richness (0 gives a featureless frame)."""
    h, w = hw
    px_per_mm = w / _TACTILE_FIELD_MM
    srng = np.random.default_rng(np.random.SeedSequence([obj.shape_seed, 23]))
    freqs = srng.uniform(0.35, 0.9, size=(3, 2))
    phases = srng.uniform(0.0, 2.0 * np.pi, size=(3, 2))
    weights = srng.uniform(0.5, 1.0, size=3)

    u, v, _, _ = _object_frame_coords(hw, px_per_mm, h_gt)
    pattern = np.zeros((h, w))
    for k in range(3):
        pattern += weights[k] * np.sin(freqs[k, 0] * u + phases[k, 0]) * np.sin(freqs[k, 1] * v + phases[k, 1])
    pattern /= weights.sum()
    frame = _GRAY + 110.0 * obj.texture_richness * pattern
    return np.clip(frame, 0.0, 255.0).astype(np.float32)


def generate_sequence(
    obj: ObjectSpec,
    kind: str,
    steps: int,
    image_hw: tuple[int, int],
    tactile_hw: tuple[int, int],
    seed: int,
    rate_hz: float = 15.0,
) -> SequenceSample:
    rng = np.random.default_rng(seed)
    traj = gen_trajectory(kind, steps, rng)
    frames_image = np.empty((steps, 1, *image_hw), dtype=np.float32)
    frames_tactile = np.empty((steps, 1, *tactile_hw), dtype=np.float32)
    targets = np.empty((steps, 3), dtype=np.float32)
    for t in range(steps):
        frames_image[t, 0] = render_image(obj, traj[t], image_hw)
        frames_tactile[t, 0] = render_tactile(obj, traj[t], tactile_hw)
        targets[t] = pose_delta_from_transforms(traj[0], traj[t]).as_array()
    return SequenceSample(obj, kind, frames_image, frames_tactile, targets, rate_hz)


def apply_perturbation(sample: SequenceSample, spec: PerturbSpec, seed: int) -> SequenceSample:
    """Degrade one modality; the other modality and the targets are untouched."""
    rng = np.random.default_rng(seed)
    img = sample.frames_image.copy()
    tac = sample.frames_tactile.copy()
    target = img if spec.modality == "image" else tac
    if spec.kind == "gaussian-noise":
        noisy = target.astype(np.float64) + rng.normal(0.0, np.sqrt(spec.variance), size=target.shape)
        degraded = np.clip(noisy, 0.0, 255.0).astype(np.float32)
    else:  # mute: the modality carries nothing but uniform random pixels
        degraded = rng.uniform(0.0, 255.0, size=target.shape).astype(np.float32)
    if spec.modality == "image":
        img = degraded
    else:
        tac = degraded
    return replace(sample, frames_image=img, frames_tactile=tac, targets=sample.targets.copy())


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass(frozen=True)
class GeneratorConfig:
    image_hw: tuple[int, int] = (20, 30)
    tactile_hw: tuple[int, int] = (40, 30)
    sequence_length: int = 40
    rate_hz: float = 15.0
    translation_sequences: int = 5
    rotation_sequences: int = 5
    combined_sequences: int = 6
    known_objects: int = 11
    unknown_objects: int = 4
    objects: tuple[tuple[ObjectSpec, str], ...] | None = None  # (spec, "known"|"unknown")

    def validate(self) -> None:
        if self.sequence_length < 2:
            raise ValueError(f"sequence_length must be >= 2, got {self.sequence_length}")
        counts = {
            "translation": self.translation_sequences,
            "rotation": self.rotation_sequences,
            "combined": self.combined_sequences,
        }
        if any(v < 0 for v in counts.values()) or sum(counts.values()) < 1:
            raise ValueError(f"sequence counts must be >= 0 with a positive total, got {counts}")
        for kind, n in counts.items():
            num, den = TRAIN_FRACTIONS[kind]
            if n % den:
                raise ValueError(
                    f"{kind} count {n} breaks the {num}/{den} train split; use a multiple of {den}"
                )
        if self.objects is not None:
            if not self.objects:
                raise ValueError("explicit object roster is empty")
            roles = {role for _, role in self.objects}
            if not roles <= {"known", "unknown"}:
                raise ValueError(f"object roles must be known/unknown, got {roles}")
            if "known" not in roles:
                raise ValueError("roster needs at least one known object")
            labels = [spec.label for spec, _ in self.objects]
            if len(labels) != len(set(labels)):
                raise ValueError("object labels must be unique")
        elif self.known_objects < 1 or self.unknown_objects < 0:
            raise ValueError(
                f"need >= 1 known and >= 0 unknown objects, got {self.known_objects}/{self.unknown_objects}"
            )

    def kind_counts(self) -> dict[str, int]:
        return {
            "translation": self.translation_sequences,
            "rotation": self.rotation_sequences,
            "combined": self.combined_sequences,
        }


# Hand-picked roster covering the informativeness corners: small untextured
# objects (images useful, tactile blank) through large textured ones (camera
# view occluded, tactile rich).
_KNOWN_TABLE = [
    ("k00-small-smooth", 0.00, 0.00),
    ("k01-small-rich", 0.00, 1.00),
    ("k02-slim-rough", 0.10, 0.80),
    ("k03-light-matte", 0.20, 0.20),
    ("k04-mid-grain", 0.30, 0.50),
    ("k05-wide-rough", 0.50, 0.90),
    ("k06-broad-matte", 0.60, 0.10),
    ("k07-bulky-grain", 0.70, 0.70),
    ("k08-large-rich", 0.90, 1.00),
    ("k09-huge-grain", 1.00, 0.60),
    ("k10-mid-smooth", 0.40, 0.00),
]
_UNKNOWN_TABLE = [
    ("u00-slim-rich", 0.15, 0.90),
    ("u01-large-rough", 0.85, 0.85),
    ("u02-small-matte", 0.05, 0.05),
    ("u03-huge-matte", 0.95, 0.30),
]


def default_object_roster(n_known: int = 11, n_unknown: int = 4) -> tuple[tuple[ObjectSpec, str], ...]:
    rng = np.random.default_rng(np.random.SeedSequence([77, n_known, n_unknown]))

    def build(table, n, role, seed_base):
        out = []
        for i in range(n):
            if i < len(table):
                label, size, tex = table[i]
            else:
                label = f"{role[0]}{i:02d}-extra"
                size, tex = rng.uniform(0.0, 1.0, size=2).round(2)
            out.append((ObjectSpec(label, size, tex, seed_base + i), role))
        return out

    return tuple(build(_KNOWN_TABLE, n_known, "known", 101) + build(_UNKNOWN_TABLE, n_unknown, "unknown", 501))


@dataclass
class SequenceRecord:
    sample: SequenceSample
    motion: str
    split: str
    seed: int


@dataclass
class Dataset:
    image_hw: tuple[int, int]
    tactile_hw: tuple[int, int]
    rate_hz: float
    objects: tuple[tuple[ObjectSpec, str], ...]
    records: list[SequenceRecord]
    generator_seed: int | None = None

    def split(self, name: str) -> list[SequenceRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def object_spec(self, label: str) -> ObjectSpec:
        for spec, _ in self.objects:
            if spec.label == label:
                return spec
        raise KeyError(f"unknown object label {label!r}")


def build_dataset(config: GeneratorConfig, seed: int) -> Dataset:
    """Generate the full train/eval corpus; deterministic in (config, seed).

    Every sequence derives its own child seed from (seed, sequence index), so
    results do not depend on generation order.
    """
    config.validate()
    roster = config.objects or default_object_roster(config.known_objects, config.unknown_objects)
    records: list[SequenceRecord] = []
    index = 0
    for spec, role in roster:
        for kind, count in config.kind_counts().items():
            num, den = TRAIN_FRACTIONS[kind]
            n_train = count * num // den
            for rep in range(count):
                child_seed = int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])
                index += 1
                if role == "unknown":
                    split = "eval_unknown"
                else:
                    split = "train" if rep < n_train else "eval_known"
                sample = generate_sequence(
                    spec, kind, config.sequence_length, config.image_hw, config.tactile_hw,
                    child_seed, config.rate_hz,
                )
                records.append(SequenceRecord(sample, kind, split, child_seed))
    return Dataset(config.image_hw, config.tactile_hw, config.rate_hz, tuple(roster), records, seed)


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    if (a.image_hw, a.tactile_hw, a.rate_hz, a.objects, a.generator_seed) != (
        b.image_hw, b.tactile_hw, b.rate_hz, b.objects, b.generator_seed,
    ):
        return False
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (ra.motion, ra.split, ra.seed) != (rb.motion, rb.split, rb.seed):
            return False
        sa, sb = ra.sample, rb.sample
        if sa.object != sb.object or sa.motion_kind != sb.motion_kind or sa.rate_hz != sb.rate_hz:
            return False
        if not (
            np.array_equal(sa.frames_image, sb.frames_image)
            and np.array_equal(sa.frames_tactile, sb.frames_tactile)
            and np.array_equal(sa.targets, sb.targets)
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + one binary file per sequence

DATASET_MAGIC = b"DGMS"
SCHEMA_VERSION = 1


class DatasetParseError(Exception):
    """Malformed dataset directory or sequence file."""


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    existing = list(path.iterdir())
    if existing:
        raise FileExistsError(f"refusing to write dataset into non-empty directory {path}")

    sequences = []
    for i, rec in enumerate(dataset.records):
        fname = f"seq_{i:05d}.dgms"
        s = rec.sample
        t, _, h, w = s.frames_image.shape
        ht, wt = s.frames_tactile.shape[2:]
        with open(path / fname, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<5I", t, h, w, ht, wt))
            fh.write(np.ascontiguousarray(s.frames_image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.frames_tactile, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.targets, dtype="<f4").tobytes())
        sequences.append(
            {
                "file": fname,
                "object": s.object.label,
                "motion": rec.motion,
                "split": rec.split,
                "seed": rec.seed,
                "steps": t,
            }
        )

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "image_hw": list(dataset.image_hw),
        "tactile_hw": list(dataset.tactile_hw),
        "rate_hz": dataset.rate_hz,
        "objects": [
            {
                "label": spec.label,
                "size_class": spec.size_class,
                "texture_richness": spec.texture_richness,
                "shape_seed": spec.shape_seed,
                "role": role,
            }
            for spec, role in dataset.objects
        ],
        "sequences": sequences,
        "meta": {"format": DATASET_MAGIC.decode(), "generator_seed": dataset.generator_seed},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_sequence_file(path: Path, image_hw, tactile_hw, expected_steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < 24:
        raise DatasetParseError(f"{path}: file truncated at byte {len(blob)}, header needs 24 bytes")
    if blob[:4] != DATASET_MAGIC:
        raise DatasetParseError(f"{path}: bad magic at byte 0, expected {DATASET_MAGIC!r}")
    t, h, w, ht, wt = struct.unpack("<5I", blob[4:24])
    if t != expected_steps:
        raise DatasetParseError(f"{path}: header says {t} steps, manifest says {expected_steps}")
    if (h, w) != tuple(image_hw) or (ht, wt) != tuple(tactile_hw):
        raise DatasetParseError(
            f"{path}: frame dims {(h, w)}/{(ht, wt)} disagree with manifest {tuple(image_hw)}/{tuple(tactile_hw)}"
        )
    n_img, n_tac, n_tgt = t * h * w, t * ht * wt, t * 3
    expected_len = 24 + 4 * (n_img + n_tac + n_tgt)
    if len(blob) != expected_len:
        raise DatasetParseError(
            f"{path}: expected {expected_len} bytes, got {len(blob)} (payload starts at byte 24)"
        )
    payload = np.frombuffer(blob, dtype="<f4", offset=24)
    img = payload[:n_img].reshape(t, 1, h, w).astype(np.float32)
    tac = payload[n_img : n_img + n_tac].reshape(t, 1, ht, wt).astype(np.float32)
    tgt = payload[n_img + n_tac :].reshape(t, 3).astype(np.float32)
    return img, tac, tgt


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetParseError(f"{path}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{manifest_path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    for key in ("schema_version", "image_hw", "tactile_hw", "rate_hz", "objects", "sequences"):
        if key not in manifest:
            raise DatasetParseError(f"{manifest_path}: missing required key {key!r}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise DatasetParseError(f"{manifest_path}: unsupported schema version {manifest['schema_version']}")

    objects = []
    by_label: dict[str, ObjectSpec] = {}
    for entry in manifest["objects"]:
        spec = ObjectSpec(
            entry["label"], float(entry["size_class"]), float(entry["texture_richness"]), int(entry["shape_seed"])
        )
        objects.append((spec, entry["role"]))
        by_label[spec.label] = spec

    disk_files = {p.name for p in path.glob("*.dgms")}
    manifest_files = {e["file"] for e in manifest["sequences"]}
    if disk_files != manifest_files:
        raise DatasetParseError(
            f"{path}: sequence files on disk do not match the manifest "
            f"(missing {sorted(manifest_files - disk_files)}, unlisted {sorted(disk_files - manifest_files)})"
        )

    image_hw = tuple(manifest["image_hw"])
    tactile_hw = tuple(manifest["tactile_hw"])
    records = []
    for entry in manifest["sequences"]:
        if entry["object"] not in by_label:
            raise DatasetParseError(f"{manifest_path}: sequence references unknown object {entry['object']!r}")
        if entry["split"] not in SPLITS:
            raise DatasetParseError(f"{manifest_path}: unknown split {entry['split']!r}")
        img, tac, tgt = _read_sequence_file(path / entry["file"], image_hw, tactile_hw, int(entry["steps"]))
        sample = SequenceSample(
            by_label[entry["object"]], entry["motion"], img, tac, tgt, float(manifest["rate_hz"])
        )
        records.append(SequenceRecord(sample, entry["motion"], entry["split"], int(entry["seed"])))

    meta = manifest.get("meta", {})
    return Dataset(
        image_hw, tactile_hw, float(manifest["rate_hz"]), tuple(objects), records,
        meta.get("generator_seed"),
    )
