"""Dataset ingestion, geometric preprocessing, patient-disjoint splits, and
the synthetic two-modality dataset generator.

Severity grades are ordinal 0..5: normal, mild NPDR, moderate NPDR, severe
NPDR, PDR, PRP (laser-treated eyes sit at the top of the ordering and count
as positive under every cutoff).

The synthetic generator plants complementary signals so that neither
modality alone can grade every eye:

* the 2D image gets bright peripheral blobs whose count grows with grade for
  grades 3..5 (grades 0..2 get none), plus a regular dark scar-dot lattice on
  grade-5 eyes;
* the 3D flow channel gets central perfusion-dropout voids whose count tracks
  the grade for grades 0..2, while grades 3..5 draw a decoy dropout level
  uniformly from {0, 1} — severe eyes mimic low grades in 3D.

A rule that reads blobs/scars first and falls back to dropout attains 100%
accuracy at zero noise; each single modality is capped well below that
(about 2/3 for 2D, 1/2 for 3D on balanced labels).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import io as tio
from .tensor import ShapeError

N_GRADES = 6
GRADE_NAMES = ["normal", "mild_npdr", "moderate_npdr", "severe_npdr", "pdr", "prp"]

# planted-signal geometry (fractions of the image/volume extent)
BLOBS_PER_GRADE = {3: 4, 4: 8, 5: 12}
BLOB_AMPLITUDE = 0.55
BLOB_RADIUS_RANGE = (0.30, 0.45)
SCAR_AMPLITUDE = -0.45
SCAR_ANNULUS = (0.26, 0.47)
VOIDS_PER_LEVEL = 7
FLOW_PERFUSED = 0.62
FLOW_BACKGROUND = 0.18
VOID_DARKEN = 0.12

# oracle-feature thresholds (calibrated on the noise-free construction)
BLOB_MASS_THRESHOLDS = (15.0, 70.0)  # no blobs / 4 blobs / 8+ blobs
GRID_SCORE_THRESHOLD = -0.15
DROPOUT_THRESHOLDS = (0.02, 0.08)  # -> dropout levels 0/1/2


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    eye_id: str
    patient_id: str
    grade: int
    cfp: str
    octa_structure: str
    octa_flow: str

    def __post_init__(self):
        if not 0 <= self.grade <= 5:
            raise ValueError(f"grade must be in 0..5, got {self.grade}")


@dataclass
class Manifest:
    seed: int
    samples: list
    base_dir: str = "."

    def __post_init__(self):
        ids = [s.eye_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate eye_id in manifest")

    def path(self, relative: str) -> str:
        return os.path.join(self.base_dir, relative)

    def by_eye(self) -> dict:
        return {s.eye_id: s for s in self.samples}


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "seed": manifest.seed,
        "samples": [asdict(s) for s in manifest.samples],
    }
    with open(path, "w") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_manifest(path) -> Manifest:
    with open(path) as fp:
        doc = json.load(fp)
    samples = [SampleRecord(**s) for s in doc["samples"]]
    return Manifest(seed=doc["seed"], samples=samples, base_dir=os.path.dirname(os.path.abspath(path)))


def one_hot(grades, n_classes: int = N_GRADES, dtype=np.float32) -> np.ndarray:
    g = np.asarray(grades, dtype=np.int64)
    out = np.zeros((g.shape[0], n_classes), dtype=dtype)
    out[np.arange(g.shape[0]), g] = 1
    return out


# ---------------------------------------------------------------------------
# geometric preprocessing
# ---------------------------------------------------------------------------


def center_crop2d(image: np.ndarray, size: int) -> np.ndarray:
    """Central size x size crop of a [C,H,W] image, floor-rounded offsets."""
    c, h, w = image.shape
    if size > h or size > w:
        raise ShapeError(f"center_crop2d: size {size} exceeds image extents {(h, w)}")
    top = (h - size) // 2
    left = (w - size) // 2
    return np.ascontiguousarray(image[:, top : top + size, left : left + size])


def resize2d(image: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] image to [C,out,out].

    Corner-aligned convention: output pixel i samples source coordinate
    i * (in - 1) / (out - 1); a single output pixel samples coordinate 0.
    """
    if out_size < 1:
        raise ValueError(f"resize2d: output size must be >= 1, got {out_size}")
    c, h, w = image.shape

    def grid(n_in, n_out):
        if n_out == 1:
            coords = np.zeros(1)
        else:
            coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.floor(coords).astype(np.int64)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    ylo, yhi, fy = grid(h, out_size)
    xlo, xhi, fx = grid(w, out_size)
    fy = fy[:, None]
    fx = fx[None, :]
    top = image[:, ylo][:, :, xlo] * (1 - fx) + image[:, ylo][:, :, xhi] * fx
    bot = image[:, yhi][:, :, xlo] * (1 - fx) + image[:, yhi][:, :, xhi] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(image.dtype)


def stack_structure_flow(structure: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Stack the two aligned volumes as channels: channel 0 structure, 1 flow."""
    if structure.shape != flow.shape:
        raise ShapeError(
            f"stack_structure_flow: shapes {structure.shape} and {flow.shape} differ"
        )
    return np.stack([structure, flow], axis=0)


def random_crop3d(volume: np.ndarray, size, rng: np.random.Generator) -> np.ndarray:
    """Random crop of a [C,D,H,W] volume; axes matching the full extent get offset 0."""
    c = volume.shape[0]
    extents = volume.shape[1:]
    size = tuple(size)
    if len(size) != 3:
        raise ShapeError(f"random_crop3d: size must have 3 axes, got {size}")
    for ax, (s, e) in enumerate(zip(size, extents)):
        if s > e:
            raise ShapeError(f"random_crop3d: size {s} exceeds extent {e} on spatial axis {ax}")
    offsets = [int(rng.integers(0, e - s + 1)) for s, e in zip(size, extents)]
    d0, h0, w0 = offsets
    d, h, w = size
    return np.ascontiguousarray(volume[:, d0 : d0 + d, h0 : h0 + h, w0 : w0 + w])


# ---------------------------------------------------------------------------
# cross-validation folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    seed: int
    test_fraction: float
    folds: list  # [{"train": [eye_id], "val": [eye_id]}]
    test: list = field(default_factory=list)


def kfold_split_by_patient(manifest: Manifest, k: int = 5, test_fraction: float = 0.2,
                           seed: int = 0) -> FoldPlan:
    """Shuffle patients, hold out a fixed test set, partition the rest into k folds.

    All eyes of one patient always travel together, so no patient appears on
    both sides of any split.
    """
    by_patient: dict[str, list[str]] = {}
    for s in manifest.samples:
        by_patient.setdefault(s.patient_id, []).append(s.eye_id)
    patients = sorted(by_patient)
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_test = int(round(test_fraction * len(patients)))
    test_patients = order[:n_test]
    rest = order[n_test:]
    if len(rest) < k:
        raise ValueError(f"need at least {k} non-test patients for {k} folds, have {len(rest)}")
    fold_patients = [rest[i::k] for i in range(k)]

    def eyes(pids: Iterable[str]) -> list:
        return [eye for pid in pids for eye in by_patient[pid]]

    folds = []
    for i in range(k):
        train_p = [p for j in range(k) if j != i for p in fold_patients[j]]
        folds.append({"train": eyes(train_p), "val": eyes(fold_patients[i])})
    return FoldPlan(k=k, seed=seed, test_fraction=test_fraction, folds=folds, test=eyes(test_patients))


def check_patient_disjoint(plan: FoldPlan, manifest: Manifest) -> None:
    """Raise if any patient appears on both sides of any split."""
    eye_to_patient = {s.eye_id: s.patient_id for s in manifest.samples}
    test_patients = {eye_to_patient[e] for e in plan.test}
    non_test = [e for f in plan.folds for e in f["train"] + f["val"]]
    overlap = test_patients & {eye_to_patient[e] for e in non_test}
    if overlap:
        raise ValueError(f"patients in both test and train/val sides: {sorted(overlap)}")
    for i, f in enumerate(plan.folds):
        both = {eye_to_patient[e] for e in f["train"]} & {eye_to_patient[e] for e in f["val"]}
        if both:
            raise ValueError(f"fold {i}: patients on both train and val sides: {sorted(both)}")


def save_fold_plan(plan: FoldPlan, path) -> None:
    with open(path, "w") as fp:
        json.dump(asdict(plan), fp, indent=2, sort_keys=True)
        fp.write("\n")


def load_fold_plan(path) -> FoldPlan:
    with open(path) as fp:
        return FoldPlan(**json.load(fp))


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def _image_for_eye(grade: int, size: int, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = cx = (s - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)

    lowfreq = rng.uniform(-1.0, 1.0, (1, 8, 8))
    base = 0.42 + 0.08 * resize2d(lowfreq, s)[0] - 0.06 * (r / (s / 2.0)) ** 2

    planted = np.zeros((s, s))
    for _ in range(BLOBS_PER_GRADE.get(grade, 0)):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        rho = rng.uniform(*BLOB_RADIUS_RANGE) * s
        by, bx = cy + rho * np.sin(theta), cx + rho * np.cos(theta)
        d2 = (yy - by) ** 2 + (xx - bx) ** 2
        planted += BLOB_AMPLITUDE * np.exp(-d2 / (2.0 * (s / 32.0) ** 2))
    if grade == 5:
        for gy, gx in _scar_lattice(s):
            d2 = (yy - gy) ** 2 + (xx - gx) ** 2
            planted += SCAR_AMPLITUDE * np.exp(-d2 / (2.0 * (s / 42.0) ** 2))

    channel_scale = np.array([1.0, 0.85, 0.7])
    img = channel_scale[:, None, None] * (base + planted)[None]
    img = img + rng.normal(0.0, noise_level, (3, s, s)) if noise_level > 0 else img
    return img.astype(np.float32)


def _scar_lattice(size: int) -> list:
    cy = cx = (size - 1) / 2.0
    step = max(2, size // 8)
    pts = []
    for gy in range(step // 2, size, step):
        for gx in range(step // 2, size, step):
            rad = np.hypot(gy - cy, gx - cx)
            if SCAR_ANNULUS[0] * size <= rad <= SCAR_ANNULUS[1] * size:
                pts.append((gy, gx))
    return pts


def _dropout_level(grade: int, rng: np.random.Generator) -> int:
    # severe grades carry no reliable flow signal: they mimic level 0 or 1
    return grade if grade < 3 else int(rng.integers(0, 2))


def _volumes_for_eye(grade: int, size: int, noise_level: float, rng: np.random.Generator):
    v = size
    dd, hh, ww = np.mgrid[0:v, 0:v, 0:v].astype(np.float64)
    c = (v - 1) / 2.0
    r = np.sqrt((dd - c) ** 2 + (hh - c) ** 2 + (ww - c) ** 2)

    phase = rng.uniform(0.0, 2.0 * np.pi)
    structure = 0.5 + 0.18 * np.sin(2.0 * np.pi * dd / 9.0 + phase)

    flow = np.where(r <= 0.42 * v, FLOW_PERFUSED, FLOW_BACKGROUND)
    level = _dropout_level(grade, rng)
    for _ in range(VOIDS_PER_LEVEL * level):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        rho = (rng.random() ** (1.0 / 3.0)) * 0.30 * v
        vc = c + direction * rho
        radius = rng.uniform(1.8, 2.6) * (v / 32.0)
        inside = (dd - vc[0]) ** 2 + (hh - vc[1]) ** 2 + (ww - vc[2]) ** 2 < radius**2
        flow = np.where(inside, flow * VOID_DARKEN, flow)
    if noise_level > 0:
        structure = structure + rng.normal(0.0, noise_level, structure.shape)
        flow = flow + rng.normal(0.0, noise_level, flow.shape)
    return structure.astype(np.float32), flow.astype(np.float32)


def synthesize_dataset(out_dir, n_patients: int, eyes_per_patient: int = 1,
                       image_size: int = 64, volume_size: int = 32,
                       noise_level: float = 0.1, seed: int = 0) -> Manifest:
    """Generate a balanced synthetic dataset and write it under `out_dir`.

    Deterministic for a fixed seed down to the file bytes. Grades are spread
    as evenly as possible over the eyes (exactly even when the count divides
    by 6).
    """
    if image_size < 16 or volume_size < 8:
        raise ValueError("image_size must be >= 16 and volume_size >= 8")
    if not 1 <= eyes_per_patient <= 2:
        raise ValueError(f"eyes_per_patient must be 1 or 2, got {eyes_per_patient}")
    os.makedirs(out_dir, exist_ok=True)
    n_eyes = n_patients * eyes_per_patient
    root = np.random.SeedSequence(seed)
    assign_rng = np.random.default_rng(root.spawn(1)[0])
    grades = np.tile(np.arange(N_GRADES), (n_eyes + N_GRADES - 1) // N_GRADES)[:n_eyes]
    grades = grades[assign_rng.permutation(n_eyes)]

    samples = []
    eye_seeds = root.spawn(n_eyes + 1)[1:]
    idx = 0
    for p in range(n_patients):
        patient_id = f"P{p:04d}"
        for e in range(eyes_per_patient):
            eye_id = f"{patient_id}E{e}"
            grade = int(grades[idx])
            rng = np.random.default_rng(eye_seeds[idx])
            img = _image_for_eye(grade, image_size, noise_level, rng)
            structure, flow = _volumes_for_eye(grade, volume_size, noise_level, rng)
            paths = {
                "cfp": f"{eye_id}_cfp.frtn",
                "octa_structure": f"{eye_id}_oct_structure.frtn",
                "octa_flow": f"{eye_id}_oct_flow.frtn",
            }
            tio.save_tensor(os.path.join(out_dir, paths["cfp"]), img)
            tio.save_tensor(os.path.join(out_dir, paths["octa_structure"]), structure)
            tio.save_tensor(os.path.join(out_dir, paths["octa_flow"]), flow)
            samples.append(SampleRecord(eye_id=eye_id, patient_id=patient_id, grade=grade, **paths))
            idx += 1
    manifest = Manifest(seed=seed, samples=samples, base_dir=str(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# oracle features (used by tests and the synthetic-design verification)
# ---------------------------------------------------------------------------


def oracle_features_2d(image: np.ndarray) -> tuple[float, float]:
    """(bright-blob excess mass in the peripheral annulus, scar-lattice score).

    Mass (sum of brightness above a threshold the background cannot reach)
    grows linearly with the planted blob count even when blobs overlap.
    """
    c, s, _ = image.shape
    chan = image.mean(axis=0)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = cx = (s - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)
    annulus = (r >= 0.27 * s) & (r <= 0.48 * s)
    blob_mass = float(np.maximum(chan[annulus] - 0.55, 0.0).sum())
    lattice = _scar_lattice(s)
    on = np.array([chan[gy, gx] for gy, gx in lattice])
    half = max(2, s // 8) // 2
    off = np.array([chan[(gy + half) % s, (gx + half) % s] for gy, gx in lattice])
    grid_score = float(on.mean() - off.mean())
    return blob_mass, grid_score


def oracle_features_3d(flow: np.ndarray) -> tuple[float]:
    """Fraction of dark voxels inside the central perfused region of the flow volume."""
    v = flow.shape[0]
    dd, hh, ww = np.mgrid[0:v, 0:v, 0:v].astype(np.float64)
    c = (v - 1) / 2.0
    r = np.sqrt((dd - c) ** 2 + (hh - c) ** 2 + (ww - c) ** 2)
    central = r <= 0.36 * v
    dark = float(np.count_nonzero(central & (flow < 0.38)) / np.count_nonzero(central))
    return (dark,)


def oracle_grade(features_2d: tuple[float, float], features_3d: tuple[float]) -> int:
    """Plug-in rule over the oracle features: scars/blobs first, dropout fallback."""
    blob_mass, grid_score = features_2d
    (dropout,) = features_3d
    lo, hi = BLOB_MASS_THRESHOLDS
    if grid_score < GRID_SCORE_THRESHOLD:
        return 5
    if blob_mass > hi:
        return 4
    if blob_mass > lo:
        return 3
    d_lo, d_hi = DROPOUT_THRESHOLDS
    if dropout > d_hi:
        return 2
    if dropout > d_lo:
        return 1
    return 0


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------


class EyeDataset:
    """Loads and caches per-eye tensors from a manifest.

    ``volume(eye)`` returns the [2,D,H,W] stack (channel 0 structure,
    channel 1 flow); ``image(eye)`` the [3,H,W] fundus image.
    """

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.records = manifest.by_eye()
        self._images: dict[str, np.ndarray] = {}
        self._volumes: dict[str, np.ndarray] = {}

    def image(self, eye_id: str) -> np.ndarray:
        if eye_id not in self._images:
            rec = self.records[eye_id]
            self._images[eye_id] = tio.load_tensor(self.manifest.path(rec.cfp))
        return self._images[eye_id]

    def volume(self, eye_id: str) -> np.ndarray:
        if eye_id not in self._volumes:
            rec = self.records[eye_id]
            structure = tio.load_tensor(self.manifest.path(rec.octa_structure))
            flow = tio.load_tensor(self.manifest.path(rec.octa_flow))
            self._volumes[eye_id] = stack_structure_flow(structure, flow)
        return self._volumes[eye_id]

    def grade(self, eye_id: str) -> int:
        return self.records[eye_id].grade
