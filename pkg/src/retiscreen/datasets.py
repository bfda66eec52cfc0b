"""Dataset ingestion, balancing, splitting, and a synthetic fundus generator.

The manifest format mirrors an 8-label ocular screening corpus:
``case_id,eye,filename,N,D,G,C,A,H,M,O`` with one image per eye. The
synthetic generator renders a retina disc with a recursive branching
vessel tree plus three pathology analogs (bright lesions, global lens
blur, enlarged optic cup) and returns pixel-exact vessel masks, so the
segmentation, retrieval, and saliency stacks can be verified without
any external data.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import imgio
from .preprocess import gaussian_blur

logger = logging.getLogger(__name__)

LABEL_NAMES = ("normal", "diabetes", "glaucoma", "cataract",
               "amd", "hypertension", "myopia", "other")
LABEL_COLUMNS = ("N", "D", "G", "C", "A", "H", "M", "O")
NORMAL, DIABETES, GLAUCOMA, CATARACT = 0, 1, 2, 3
MANIFEST_HEADER = ("case_id", "eye", "filename") + LABEL_COLUMNS
EYES = ("left", "right", "unknown")

# cup-to-disc ratio at or above this renders (and labels) the glaucoma analog
GLAUCOMA_CUP_RATIO = 0.55


class LabelError(ValueError):
    """A label vector violates the multi-label invariants."""


class ManifestError(ValueError):
    """Manifest rows failed validation; message lists every offender."""


def validate_labels(labels: Sequence[int] | np.ndarray, context: str = "") -> np.ndarray:
    vec = np.asarray(labels, dtype=np.int8)
    where = f" ({context})" if context else ""
    if vec.shape != (8,):
        raise LabelError(f"label vector must have 8 slots{where}, got shape {vec.shape}")
    if not np.isin(vec, (0, 1)).all():
        raise LabelError(f"label values must be 0 or 1{where}")
    if vec.sum() == 0:
        raise LabelError(f"no label set{where}")
    if vec[NORMAL] == 1 and vec.sum() > 1:
        raise LabelError(f"normal is exclusive of disease labels{where}")
    return vec


@dataclass
class CaseRecord:
    """One eye image with labels, provenance, and split assignment."""

    case_id: str
    eye: str
    labels: np.ndarray
    image_path: Path | None = None
    mask_path: Path | None = None
    image: np.ndarray | None = None  # inline pixels for generated cases
    mask: np.ndarray | None = None
    split: str = "unassigned"
    provenance: str = "manifest"
    meta: dict = field(default_factory=dict)

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ValueError(f"case {self.case_id} has no image source")
        return imgio.read_image(self.image_path)

    def load_mask(self) -> np.ndarray | None:
        if self.mask is not None:
            return self.mask
        if self.mask_path is not None:
            return imgio.read_mask(self.mask_path)
        return None

    @property
    def primary_label(self) -> int:
        """First set slot; the stratification key."""
        return int(np.argmax(self.labels))


class Dataset:
    """An ordered collection of case records with per-class counts."""

    def __init__(self, records: Sequence[CaseRecord]):
        ids = [r.case_id for r in records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate case_id(s): {dupes}")
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CaseRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> CaseRecord:
        return self.records[i]

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(8, dtype=np.int64)
        for r in self.records:
            counts += r.labels
        return counts

    def labels_matrix(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]).astype(np.float64)


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

def load_manifest(manifest_path: str | Path, image_dir: str | Path) -> Dataset:
    """Read a manifest CSV, stat-check files, and enforce label invariants.

    Vessel masks are picked up by convention from ``<image_dir>/masks/``
    when a file of the same name exists there.
    """
    manifest_path = Path(manifest_path)
    image_dir = Path(image_dir)
    mask_dir = image_dir / "masks"
    errors: list[str] = []
    records: list[CaseRecord] = []
    seen: set[str] = set()

    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(
                f"bad header: expected {','.join(MANIFEST_HEADER)}, got {header}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                errors.append(f"row {row_no}: expected {len(MANIFEST_HEADER)} fields")
                continue
            case_id, eye, filename = (f.strip() for f in row[:3])
            if case_id in seen:
                errors.append(f"row {row_no}: duplicate case_id {case_id!r}")
                continue
            if eye not in EYES:
                errors.append(f"row {row_no}: eye must be one of {EYES}, got {eye!r}")
                continue
            try:
                labels = validate_labels([int(v) for v in row[3:]], context=case_id)
            except (LabelError, ValueError) as exc:
                errors.append(f"row {row_no}: {exc}")
                continue
            image_path = image_dir / filename
            if not image_path.is_file():
                errors.append(f"row {row_no}: missing file {image_path}")
                continue
            mask_path = mask_dir / filename
            seen.add(case_id)
            records.append(CaseRecord(
                case_id=case_id, eye=eye, labels=labels, image_path=image_path,
                mask_path=mask_path if mask_path.is_file() else None,
            ))
    if errors:
        raise ManifestError("manifest rejected:\n  " + "\n  ".join(errors))
    return Dataset(records)


def write_manifest(ds: Dataset, manifest_path: str | Path,
                   filenames: dict[str, str]) -> None:
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in ds:
            writer.writerow([rec.case_id, rec.eye, filenames[rec.case_id],
                             *[int(v) for v in rec.labels]])


def materialize_dataset(ds: Dataset, out_dir: str | Path,
                        image_format: str = "png") -> Path:
    """Write images, masks, and the manifest of a dataset to disk."""
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    filenames: dict[str, str] = {}
    for rec in ds:
        name = f"{rec.case_id}.{image_format}"
        imgio.write_image(out_dir / name, rec.load_image())
        mask = rec.load_mask()
        if mask is not None:
            imgio.write_mask(out_dir / "masks" / name, mask)
        filenames[rec.case_id] = name
    manifest = out_dir / "manifest.csv"
    write_manifest(ds, manifest, filenames)
    return manifest


# ---------------------------------------------------------------------------
# splitting and balancing
# ---------------------------------------------------------------------------

def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic stratified split on the primary (first set) label slot."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, rec in enumerate(ds):
        groups.setdefault(rec.primary_label, []).append(i)

    val_idx: set[int] = set()
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:
            logger.warning(
                "class %s has %d member(s); falling back to random assignment",
                LABEL_NAMES[key], len(members))
            for i in members:
                if rng.random() < val_fraction:
                    val_idx.add(i)
            continue
        order = rng.permutation(len(members))
        n_val = int(round(val_fraction * len(members)))
        n_val = min(max(n_val, 1), len(members) - 1)
        for j in order[:n_val]:
            val_idx.add(members[j])

    train_recs = [replace(ds[i], split="train") for i in range(len(ds)) if i not in val_idx]
    val_recs = [replace(ds[i], split="val") for i in range(len(ds)) if i in val_idx]
    return Dataset(train_recs), Dataset(val_recs)


def oversample_minority(ds: Dataset, target: int, seed: int) -> Dataset:
    """Duplicate minority-class records until each class reaches the target.

    Originals are all retained; duplicates get suffixed case ids and
    sample with replacement from the records positive for the deficient
    class. Classes with no positives cannot be helped and are skipped.
    """
    rng = np.random.default_rng(seed)
    records = list(ds.records)
    counts = ds.class_counts().astype(int)
    dup_serial = 0
    for cls in range(8):
        if counts[cls] == 0 or counts[cls] >= target:
            continue
        pool = [r for r in ds.records if r.labels[cls] == 1]
        while counts[cls] < target:
            src = pool[int(rng.integers(len(pool)))]
            dup_serial += 1
            dup = replace(src, case_id=f"{src.case_id}-dup{dup_serial}",
                          meta={**src.meta, "duplicate_of": src.case_id})
            records.append(dup)
            counts += dup.labels.astype(int)
    return Dataset(records)


# ---------------------------------------------------------------------------
# synthetic fundus generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Everything that determines one synthetic case; seed fixes the rest."""

    seed: int
    size: int = 64
    eye: str = "right"
    branch_depth: int = 4
    branching_prob: float = 0.55
    vessel_width: float = 1.5
    blur_sigma: float = 0.0        # > 0 renders the lens-opacity analog
    lesion_count: int = 0          # bright exudate-like blobs
    disc_cup_ratio: float = 0.33   # >= GLAUCOMA_CUP_RATIO renders the analog
    background_luminance: float = 1.0

    def labels(self) -> np.ndarray:
        vec = np.zeros(8, dtype=np.int8)
        vec[DIABETES] = 1 if self.lesion_count > 0 else 0
        vec[CATARACT] = 1 if self.blur_sigma > 0 else 0
        vec[GLAUCOMA] = 1 if self.disc_cup_ratio >= GLAUCOMA_CUP_RATIO else 0
        if vec.sum() == 0:
            vec[NORMAL] = 1
        return vec


@dataclass
class SynthCase:
    image: np.ndarray        # HWC in [0, 1]
    vessel_mask: np.ndarray  # HxW in {0, 1}
    labels: np.ndarray
    meta: dict


def _stamp_disk(img: np.ndarray, cy: float, cx: float, radius: float,
                color: Sequence[float]) -> None:
    h, w = img.shape[:2]
    y0, y1 = max(0, int(cy - radius) - 1), min(h, int(cy + radius) + 2)
    x0, x1 = max(0, int(cx - radius) - 1), min(w, int(cx + radius) + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    img[y0:y1, x0:x1][hit] = color


def _stamp_segment(mask: np.ndarray, p0: np.ndarray, p1: np.ndarray,
                   width: float, center: np.ndarray, limit_radius: float) -> None:
    """Mark pixels within width/2 of the segment, clipped to the retina."""
    h, w = mask.shape
    r = width / 2.0 + 1.0
    y0 = max(0, int(min(p0[0], p1[0]) - r))
    y1 = min(h, int(max(p0[0], p1[0]) + r) + 1)
    x0 = max(0, int(min(p0[1], p1[1]) - r))
    x1 = min(w, int(max(p0[1], p1[1]) + r) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    pts = np.stack([yy, xx], axis=-1).astype(np.float64)
    d = p1 - p0
    denom = float(d @ d)
    if denom < 1e-12:
        t = np.zeros(pts.shape[:2])
    else:
        t = np.clip(((pts - p0) @ d) / denom, 0.0, 1.0)
    proj = p0 + t[..., None] * d
    dist2 = ((pts - proj) ** 2).sum(axis=-1)
    inside_retina = ((yy - center[0]) ** 2 + (xx - center[1]) ** 2
                     <= limit_radius * limit_radius)
    mask[y0:y1, x0:x1] |= (dist2 <= (width / 2.0) ** 2) & inside_retina


def _grow_vessel_tree(rng: np.random.Generator, mask: np.ndarray,
                      origin: np.ndarray, retina_center: np.ndarray,
                      retina_radius: float, spec: SynthSpec) -> None:
    base_angle = math.atan2(retina_center[0] - origin[0], retina_center[1] - origin[1])
    fan = np.array([-1.05, -0.35, 0.35, 1.05])
    stack: list[tuple[np.ndarray, float, int]] = []
    for off in fan:
        angle = base_angle + off + rng.normal(0.0, 0.12)
        stack.append((origin.copy(), angle, 0))

    while stack:
        pos, angle, depth = stack.pop()
        length = retina_radius * rng.uniform(0.16, 0.26) * (0.84 ** depth)
        width = max(0.9, spec.vessel_width * (0.85 ** depth))
        step = np.array([math.sin(angle), math.cos(angle)]) * length
        end = pos + step
        _stamp_segment(mask, pos, end, width, retina_center, retina_radius * 0.96)
        if depth >= spec.branch_depth:
            continue
        if np.hypot(*(end - retina_center)) > retina_radius * 0.92:
            continue
        if rng.random() < spec.branching_prob:
            spread = rng.uniform(0.3, 0.7)
            stack.append((end, angle + spread + rng.normal(0.0, 0.08), depth + 1))
            stack.append((end, angle - spread + rng.normal(0.0, 0.08), depth + 1))
        else:
            stack.append((end, angle + rng.normal(0.0, 0.22), depth + 1))


def generate_synthetic_case(spec: SynthSpec) -> SynthCase:
    """Render one synthetic fundus; fully determined by the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    img = np.zeros((s, s, 3), dtype=np.float64)

    retina_radius = s * rng.uniform(0.40, 0.46)
    center = np.array([s / 2.0, s / 2.0]) + rng.uniform(-0.02 * s, 0.02 * s, size=2)
    yy, xx = np.mgrid[0:s, 0:s]
    dist = np.hypot(yy - center[0], xx - center[1])
    inside = dist <= retina_radius

    # orange retina background with a mild vignette
    base = np.array([0.83, 0.46, 0.18]) * spec.background_luminance
    falloff = 1.0 - 0.30 * (dist / retina_radius) ** 2
    img[inside] = base[None, :] * falloff[inside, None]

    # optic disc sits nasally: right eyes show it toward the image left
    od_side = -1.0 if spec.eye == "right" else 1.0
    od_center = center + np.array([rng.uniform(-0.08, 0.08),
                                   od_side * rng.uniform(0.48, 0.60)]) * retina_radius
    od_radius = 0.22 * retina_radius
    cup_radius = spec.disc_cup_ratio * od_radius
    _stamp_disk(img, *od_center, od_radius, (0.95, 0.80, 0.52))
    _stamp_disk(img, *od_center, cup_radius, (1.0, 0.93, 0.72))

    # bright exudate-like lesions (diabetes analog), kept off the disc
    lesions: list[tuple[float, float, float]] = []
    for _ in range(spec.lesion_count):
        for _attempt in range(50):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            rad = retina_radius * math.sqrt(rng.uniform(0.0, 1.0)) * 0.72
            ly, lx = center[0] + rad * math.sin(ang), center[1] + rad * math.cos(ang)
            if np.hypot(ly - od_center[0], lx - od_center[1]) > od_radius + 3.0:
                break
        lr = rng.uniform(1.3, 2.6)
        _stamp_disk(img, ly, lx, lr, (0.96, 0.89, 0.46))
        lesions.append((float(ly), float(lx), float(lr)))

    # vessel tree, darkened multiplicatively so mask pixels stay below
    # their local background in every channel
    vessel_mask = np.zeros((s, s), dtype=bool)
    _grow_vessel_tree(rng, vessel_mask, od_center.copy(), center, retina_radius, spec)
    img[vessel_mask] *= np.array([0.50, 0.22, 0.22])

    noise = rng.normal(0.0, 0.01, size=(s, s, 3))
    img[inside] = np.clip(img[inside] + noise[inside], 0.0, 1.0)
    clean = img.copy()

    if spec.blur_sigma > 0:
        hazy = gaussian_blur(img, spec.blur_sigma)
        hazy = 0.80 * hazy + 0.20 * 0.72  # milky veil over the blur
        img[inside] = np.clip(hazy[inside], 0.0, 1.0)

    disc_area = math.pi * retina_radius ** 2
    meta = {
        "retina_center": center.tolist(),
        "retina_radius": float(retina_radius),
        "od_center": od_center.tolist(),
        "od_radius": float(od_radius),
        "cup_radius": float(cup_radius),
        "lesions": lesions,
        "clean_image": clean,
        "vessel_fraction_of_disc": float(vessel_mask.sum() / disc_area),
        "spec": spec,
    }
    return SynthCase(image=img, vessel_mask=vessel_mask.astype(np.float64),
                     labels=spec.labels(), meta=meta)


def spec_for_class(cls: str, seed: int, size: int, eye: str,
                   rng: np.random.Generator) -> SynthSpec:
    """Draw pathology magnitudes for one class; geometry comes from ``seed``."""
    kwargs = dict(seed=seed, size=size, eye=eye)
    if cls == "diabetes":
        kwargs["lesion_count"] = int(rng.integers(3, 7))
    elif cls == "cataract":
        kwargs["blur_sigma"] = float(rng.uniform(1.3, 2.2))
    elif cls == "glaucoma":
        kwargs["disc_cup_ratio"] = float(rng.uniform(0.65, 0.85))
    elif cls != "normal":
        raise ValueError(f"unsupported synthetic class {cls!r}")
    return SynthSpec(**kwargs)


def make_synthetic_dataset(count: int, seed: int, size: int = 64,
                           classes: Sequence[str] = ("normal", "diabetes",
                                                     "glaucoma", "cataract"),
                           id_prefix: str = "syn") -> Dataset:
    """Generate a class-cycled dataset of synthetic cases, fully seeded."""
    master = np.random.default_rng(seed)
    records = []
    for i in range(count):
        cls = classes[i % len(classes)]
        eye = "right" if master.random() < 0.5 else "left"
        case_seed = int(master.integers(0, 2**31 - 1))
        spec = spec_for_class(cls, case_seed, size, eye, master)
        case = generate_synthetic_case(spec)
        records.append(CaseRecord(
            case_id=f"{id_prefix}-{i:04d}", eye=eye, labels=case.labels,
            image=case.image, mask=case.vessel_mask,
            provenance=f"synthetic({case_seed})", meta=case.meta,
        ))
    return Dataset(records)
