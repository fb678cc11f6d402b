"""Synthetic optical-microscopy flakes for the material-incremental benchmark.

Each material is described by a three-band reflectance profile: the substrate
colour plus a per-thickness colour offset for the flake, modulated by a thin
film interference factor ``sin^2(phase + class shift)``.  A rendered image is
the substrate with one convex flake, a linear illumination ramp and Gaussian
sensor noise.

All randomness comes from Philox (a counter-based 64-bit generator) seeded
through ``numpy.random.SeedSequence``.  Every sample owns an independent
stream keyed by ``(task seed, split, index)``, so rendering order, thread
count and the number of tasks never change a sample's pixels.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

CLASS_NAMES = ("Mono", "Few", "Thick")
NUM_CLASSES = len(CLASS_NAMES)
MATERIAL_ORDER = ("BN", "Graphene", "MoS2", "WTe2")

CLASS_PHASE_SHIFT = math.pi / 12
ILLUMINATION_SPAN = 0.05
COVERAGE_RANGE = (0.10, 0.50)
VERTEX_RANGE = (5, 9)

SPLITS = {"train": 0, "validation": 1}
MANIFEST_NAME = "manifest.tsv"
PROFILES_NAME = "profiles.json"
DATASET_FORMAT = "cliff-dataset v1"


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def checksum64(data: bytes) -> str:
    """64-bit BLAKE2b digest as 16 hex characters."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


@dataclass
class MaterialProfile:
    name: str
    base_reflectance: tuple[float, float, float]
    contrast_per_class: dict[int, tuple[float, float, float]]
    interference_phase: float = 1.2
    noise_std: float = 0.03

    def __post_init__(self):
        self.base_reflectance = tuple(float(v) for v in self.base_reflectance)
        if len(self.base_reflectance) != 3 or not all(0.0 <= v <= 1.0 for v in self.base_reflectance):
            raise ParameterError(f"{self.name}: base reflectance must be 3 values in [0, 1]")
        contrasts = {int(k): tuple(float(v) for v in c) for k, c in self.contrast_per_class.items()}
        if sorted(contrasts) != list(range(NUM_CLASSES)) or any(len(c) != 3 for c in contrasts.values()):
            raise ParameterError(f"{self.name}: need a 3-band contrast for each of {CLASS_NAMES}")
        self.contrast_per_class = contrasts
        if self.noise_std < 0:
            raise ParameterError(f"{self.name}: noise_std must be non-negative")

    def modulation(self, cls: int) -> float:
        return math.sin(self.interference_phase + cls * CLASS_PHASE_SHIFT) ** 2

    def flake_offset(self, cls: int) -> np.ndarray:
        """Per-band reflectance offset of a flake of this class (before clamping)."""
        return np.asarray(self.contrast_per_class[cls]) * self.modulation(cls)

    def flake_color(self, cls: int) -> np.ndarray:
        return np.clip(np.asarray(self.base_reflectance) + self.flake_offset(cls), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_reflectance": list(self.base_reflectance),
            "contrast_per_class": {str(k): list(v) for k, v in self.contrast_per_class.items()},
            "interference_phase": self.interference_phase,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialProfile":
        return cls(
            name=d["name"],
            base_reflectance=tuple(d["base_reflectance"]),
            contrast_per_class={int(k): tuple(v) for k, v in d["contrast_per_class"].items()},
            interference_phase=d["interference_phase"],
            noise_std=d["noise_std"],
        )


# Substrate colours differ slightly between materials (separate imaging
# sessions); flake offsets grow with thickness and change hue per material.
DEFAULT_PROFILES = {
    "BN": MaterialProfile(
        "BN",
        (0.52, 0.42, 0.62),
        {0: (0.08, 0.07, 0.02), 1: (0.18, 0.14, -0.06), 2: (0.32, 0.24, -0.18)},
        interference_phase=1.20,
    ),
    "Graphene": MaterialProfile(
        "Graphene",
        (0.46, 0.40, 0.56),
        {0: (-0.08, -0.10, -0.04), 1: (-0.18, -0.24, -0.06), 2: (-0.34, -0.20, -0.30)},
        interference_phase=1.30,
    ),
    "MoS2": MaterialProfile(
        "MoS2",
        (0.50, 0.46, 0.50),
        {0: (0.12, -0.08, -0.10), 1: (0.24, -0.06, -0.24), 2: (0.06, 0.24, -0.30)},
        interference_phase=1.10,
    ),
    "WTe2": MaterialProfile(
        "WTe2",
        (0.44, 0.50, 0.54),
        {0: (-0.06, 0.08, 0.12), 1: (-0.12, 0.16, 0.28), 2: (0.22, 0.30, 0.30)},
        interference_phase=1.25,
    ),
}


def default_profiles() -> list[MaterialProfile]:
    return [DEFAULT_PROFILES[name] for name in MATERIAL_ORDER]


def profiles_distinct(a: MaterialProfile, b: MaterialProfile, min_gap: float = 0.05) -> bool:
    """True when some (class, band) contrast differs by at least ``min_gap``."""
    return any(
        abs(x - y) >= min_gap
        for k in range(NUM_CLASSES)
        for x, y in zip(a.contrast_per_class[k], b.contrast_per_class[k])
    )


@dataclass
class FlakeSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    thickness_class: int
    material_id: int
    material_name: str

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.thickness_class]

    @property
    def label(self) -> str:
        return f"{self.class_name}_{self.material_name}"


@dataclass
class FlakeGeometry:
    vertices: np.ndarray  # [n, 2] (x, y), counter-clockwise
    mask: np.ndarray  # bool [H, W]
    illumination: np.ndarray  # [H, W] multiplicative factor
    substrate: np.ndarray  # [3, H, W] illuminated substrate, no flake, no noise

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass
class DatasetSplit:
    train: list[FlakeSample]
    validation: list[FlakeSample]
    seed: int
    class_counts: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = {
                "train": count_classes(self.train),
                "validation": count_classes(self.validation),
            }


def count_classes(samples) -> list[int]:
    counts = [0] * NUM_CLASSES
    for s in samples:
        counts[s.thickness_class] += 1
    return counts


def _polygon_mask(vertices: np.ndarray, size: int) -> np.ndarray:
    centers = np.arange(size) + 0.5
    px, py = np.meshgrid(centers, centers)
    inside = np.ones((size, size), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0
    return inside


def _shoelace(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def random_convex_polygon(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertices on a rotated ellipse (hence convex) with 10-50% pixel coverage."""
    lo, hi = COVERAGE_RANGE
    while True:
        n = int(rng.integers(VERTEX_RANGE[0], VERTEX_RANGE[1] + 1))
        step = 2 * math.pi / n
        angles = rng.uniform(0, 2 * math.pi) + step * (np.arange(n) + rng.uniform(-0.3, 0.3, n))
        aspect = rng.uniform(1.0, 1.25)
        tilt = rng.uniform(0, math.pi)
        unit = np.stack([aspect * np.cos(angles), np.sin(angles) / aspect], axis=1)
        rot = np.array([[math.cos(tilt), -math.sin(tilt)], [math.sin(tilt), math.cos(tilt)]])
        unit = unit @ rot.T
        target = rng.uniform(lo + 0.02, hi - 0.02) * size * size
        pts = unit * math.sqrt(target / _shoelace(unit))
        extent = pts.max(axis=0) - pts.min(axis=0)
        if np.any(extent > size - 1):
            pts *= (size - 1) / extent.max()
        lo_xy = -pts.min(axis=0)
        hi_xy = size - pts.max(axis=0)
        pts = pts + rng.uniform(lo_xy, hi_xy)
        mask = _polygon_mask(pts, size)
        if lo <= mask.mean() <= hi:
            return pts, mask


def render_flake_with_geometry(
    profile: MaterialProfile, cls: int, rng: np.random.Generator, size: int = 32, material_id: int = 0
) -> tuple[FlakeSample, FlakeGeometry]:
    if size < 16:
        raise ParameterError(f"image size must be at least 16, got {size}")
    if cls not in range(NUM_CLASSES):
        raise ParameterError(f"unknown thickness class {cls}")
    vertices, mask = random_convex_polygon(rng, size)

    phi = rng.uniform(0, 2 * math.pi)
    strength = rng.uniform(0, ILLUMINATION_SPAN)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gx, gy = np.meshgrid(coords, coords)
    ramp = (gx * math.cos(phi) + gy * math.sin(phi)) / math.sqrt(2.0)
    illumination = 1.0 + strength * ramp

    base = np.asarray(profile.base_reflectance)[:, None, None]
    flake = profile.flake_color(cls)[:, None, None]
    clean = np.where(mask[None], flake, base) * illumination[None]
    noise = rng.normal(0.0, profile.noise_std, size=clean.shape) if profile.noise_std > 0 else 0.0
    image = np.clip(clean + noise, 0.0, 1.0).astype(np.float32)

    substrate = np.broadcast_to(base * illumination[None], clean.shape).copy()
    sample = FlakeSample(image, cls, material_id, profile.name)
    return sample, FlakeGeometry(vertices, mask, illumination, substrate)


def render_flake(
    profile: MaterialProfile, cls: int, rng: np.random.Generator, size: int = 32, material_id: int = 0
) -> FlakeSample:
    return render_flake_with_geometry(profile, cls, rng, size, material_id)[0]


def _render_split(profile, n, seed, split, size, material_id) -> list[FlakeSample]:
    return [
        render_flake(profile, i % NUM_CLASSES, derive_rng(seed, SPLITS[split], i), size, material_id)
        for i in range(n)
    ]


def generate_material_task(
    profile: MaterialProfile, n_train: int, n_val: int, seed: int, material_id: int = 0, size: int = 32
) -> DatasetSplit:
    """Class-balanced train/validation samples for one material.

    Sample ``i`` gets class ``i mod 3``, so counts differ by at most one and any
    remainder goes to the lowest class indices.
    """
    for label, n in (("n_train", n_train), ("n_val", n_val)):
        if n < NUM_CLASSES:
            raise ParameterError(
                f"{label}={n} is too small: at least {NUM_CLASSES} samples are required (3-per-class minimum of one each)"
            )
    return DatasetSplit(
        train=_render_split(profile, n_train, seed, "train", size, material_id),
        validation=_render_split(profile, n_val, seed, "validation", size, material_id),
        seed=int(seed),
    )


def default_benchmark(
    seed: int, n_train: int = 300, n_val: int = 90, size: int = 32, profiles: list[MaterialProfile] | None = None
) -> list[tuple[MaterialProfile, DatasetSplit]]:
    """The four-task stream BN -> Graphene -> MoS2 -> WTe2."""
    profiles = profiles if profiles is not None else default_profiles()
    return [
        (p, generate_material_task(p, n_train, n_val, derive_seed(seed, m), material_id=m, size=size))
        for m, p in enumerate(profiles)
    ]


def augment(sample: FlakeSample, rng) -> FlakeSample:
    """Random flips, quarter-turn rotation and channel jitter, each with p=0.5.

    Only ``rng.random()`` is drawn from, in a fixed order, so a stub generator
    can force any combination.
    """
    draws = [float(rng.random()) for _ in range(4)]
    turns = 1 + min(int(float(rng.random()) * 3), 2)
    jitter = np.array([0.9 + 0.2 * float(rng.random()) for _ in range(3)], dtype=np.float32)
    img = sample.image
    if draws[0] < 0.5:
        img = img[:, :, ::-1]
    if draws[1] < 0.5:
        img = img[:, ::-1, :]
    if draws[2] < 0.5:
        img = np.rot90(img, k=turns, axes=(1, 2))
    if draws[3] < 0.5:
        img = np.clip(img * jitter[:, None, None], 0.0, 1.0)
    return FlakeSample(np.ascontiguousarray(img, dtype=np.float32), sample.thickness_class,
                       sample.material_id, sample.material_name)


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def labels_of(samples) -> np.ndarray:
    return np.array([s.thickness_class for s in samples], dtype=np.int64)


# -- export / import ---------------------------------------------------------

def save_dataset(
    tasks: list[tuple[MaterialProfile, DatasetSplit]], data_dir, root_seed: int | None = None
) -> Path:
    """Write raw little-endian float32 sample files plus a text manifest."""
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# {DATASET_FORMAT}",
        f"# root_seed={'' if root_seed is None else root_seed}",
        "task\tmaterial\tsplit\tindex\tclass\tseed\tshape\tfile\tchecksum",
    ]
    for t, (profile, split) in enumerate(tasks):
        for split_name in SPLITS:
            samples = split.train if split_name == "train" else split.validation
            sub = Path(f"task{t}_{profile.name}") / split_name
            (root / sub).mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(samples):
                payload = s.image.astype("<f4").tobytes()
                rel = sub / f"{i:05d}.bin"
                (root / rel).write_bytes(payload)
                shape = "x".join(str(d) for d in s.image.shape)
                lines.append(
                    f"{t}\t{profile.name}\t{split_name}\t{i}\t{CLASS_NAMES[s.thickness_class]}"
                    f"\t{split.seed}\t{shape}\t{rel.as_posix()}\t{checksum64(payload)}"
                )
    profiles = [p.to_dict() for p, _ in tasks]
    (root / PROFILES_NAME).write_text(json.dumps(profiles, indent=1, sort_keys=True) + "\n")
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, root / MANIFEST_NAME)
    return root / MANIFEST_NAME


def dataset_checksum(data_dir) -> str:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    return checksum64(path.read_bytes())


def load_dataset(data_dir, verify: bool = True) -> list[tuple[MaterialProfile, DatasetSplit]]:
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no dataset manifest at {manifest}")
    try:
        profiles = [MaterialProfile.from_dict(d) for d in json.loads((root / PROFILES_NAME).read_text())]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable material profiles in {root}: {exc}") from exc
    lines = [ln for ln in manifest.read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("task\t"):
        raise DataError(f"{manifest}: missing header row")
    buckets: dict[int, dict[str, list]] = {}
    seeds: dict[int, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 9:
            raise DataError(f"{manifest}:{lineno}: expected 9 fields, got {len(fields)}")
        task, name, split_name, index, cls_name, seed, shape, rel, digest = fields
        t = int(task)
        payload = (root / rel).read_bytes() if (root / rel).exists() else None
        if payload is None:
            raise DataError(f"missing sample file {rel}")
        if verify and checksum64(payload) != digest:
            raise DataError(f"checksum mismatch for {rel}")
        dims = tuple(int(d) for d in shape.split("x"))
        image = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        sample = FlakeSample(image, CLASS_NAMES.index(cls_name), t, name)
        buckets.setdefault(t, {"train": [], "validation": []})[split_name].append((int(index), sample))
        seeds[t] = int(seed)
    tasks = []
    for t in sorted(buckets):
        train = [s for _, s in sorted(buckets[t]["train"], key=lambda p: p[0])]
        val = [s for _, s in sorted(buckets[t]["validation"], key=lambda p: p[0])]
        tasks.append((profiles[t], DatasetSplit(train, val, seeds[t])))
    return tasks
