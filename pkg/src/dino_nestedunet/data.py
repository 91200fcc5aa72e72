"""Slide-aware manifests, splitting, patch extraction and synthetic data.

Manifest file format (UTF-8 CSV)::

    # dataset: <name>
    # note: <free text>           (zero or more)
    patch_id,slide_id,image_path,mask_path,split
    s000_p00,s000,images/s000_p00.png,masks/s000_p00.png,train

The header row is mandatory. Leading ``#`` lines carry the dataset name and
free-text notes. Relative paths are resolved against the manifest's
directory. Images are 8-bit RGB rasters; masks are 8-bit single-channel
rasters holding exactly {0, 255} (255 = tumour).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadMaskValues, EmptySplit, ShapeError, TooFewSlides

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("patch_id", "slide_id", "image_path", "mask_path", "split")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    slide_id: str
    image_path: str
    mask_path: str
    split: str | None = None


@dataclass
class Manifest:
    records: list[PatchRecord]
    name: str = ""
    notes: list[str] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [r.patch_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate patch ids: {dup[:5]}")
        by_slide: dict[str, str | None] = {}
        for r in self.records:
            if by_slide.setdefault(r.slide_id, r.split) != r.split:
                raise ValueError(f"slide {r.slide_id} appears in more than one split")

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[PatchRecord]:
        return [r for r in self.records if r.split == name]

    def slides(self, name: str | None = None) -> set[str]:
        return {r.slide_id for r in self.records if name is None or r.split == name}

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def verify(self) -> None:
        """Raise FileNotFoundError listing every missing image or mask."""
        missing = [
            str(self.resolve(p))
            for r in self.records
            for p in (r.image_path, r.mask_path)
            if not self.resolve(p).is_file()
        ]
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest files missing, e.g. {missing[:3]}")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    name, notes, body = "", [], []
    for line in text.splitlines():
        if line.startswith("#") and not body:
            key, _, val = line[1:].strip().partition(":")
            if key.strip() == "dataset":
                name = val.strip()
            else:
                notes.append(val.strip() if key.strip() == "note" else line[1:].strip())
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
    records = [
        PatchRecord(
            row["patch_id"], row["slide_id"], row["image_path"], row["mask_path"], row["split"] or None
        )
        for row in reader
    ]
    return Manifest(records, name, notes, root=path.parent)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if manifest.name:
            fh.write(f"# dataset: {manifest.name}\n")
        for n in manifest.notes:
            fh.write(f"# note: {n}\n")
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            w.writerow([r.patch_id, r.slide_id, r.image_path, r.mask_path, r.split or ""])


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def largest_remainder(n: int, ratios) -> list[int]:
    """Apportion ``n`` items to ``ratios``; leftover goes to the largest remainders.

    Ties are broken by position (earlier ratios first).
    """
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def slide_level_split(records, ratios=(7, 1, 2), seed: int = 0, name: str = "") -> Manifest:
    """Shuffle distinct slides with ``seed`` and assign every patch its slide's split."""
    records = list(records)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    slides = sorted({r.slide_id for r in records})
    if len(slides) < 3:
        raise TooFewSlides(f"need at least 3 distinct slides, got {len(slides)}")
    order = np.random.default_rng(seed).permutation(len(slides))
    counts = largest_remainder(len(slides), ratios)
    assignment, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for k in order[start : start + c]:
            assignment[slides[k]] = split
        start += c
    notes = [f"slide-level split ratios={tuple(ratios)} seed={seed} slides={counts}"]
    return Manifest([replace(r, split=assignment[r.slide_id]) for r in records], name, notes)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray
    mask: np.ndarray
    x: int
    y: int


def mean_saturation(image: np.ndarray) -> float:
    """Mean HSV saturation in [0, 1]; unstained glass and white background score low."""
    rgb = image.astype(np.float32) / 255.0
    mx, mn = rgb.max(-1), rgb.min(-1)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-8), 0.0)
    return float(sat.mean())


def annotation_guided_extract(
    image: np.ndarray,
    mask: np.ndarray,
    patch_size: int = 1024,
    stride: int | None = None,
    min_tumor_fraction: float = 0.0,
    tissue_filter: bool = True,
    min_saturation: float = 0.07,
) -> list[Patch]:
    """Tile a slide on a regular grid and keep tissue patches.

    Only patches fully inside the slide are produced. A patch is kept when its
    mean saturation is at least ``min_saturation`` (if ``tissue_filter``) and
    its tumour fraction is at least ``min_tumor_fraction``.
    """
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ")
    h, w = mask.shape[:2]
    if patch_size > h or patch_size > w:
        raise ShapeError(f"patch size {patch_size} exceeds slide {h}x{w}")
    stride = stride or patch_size
    out = []
    for y in range(0, h - patch_size + 1, stride):
        for x in range(0, w - patch_size + 1, stride):
            img = image[y : y + patch_size, x : x + patch_size]
            m = mask[y : y + patch_size, x : x + patch_size]
            if tissue_filter and mean_saturation(img) < min_saturation:
                continue
            if np.count_nonzero(m) / m.size < min_tumor_fraction:
                continue
            out.append(Patch(img.copy(), m.copy(), x, y))
    return out


# ---------------------------------------------------------------------------
# synthetic patches
# ---------------------------------------------------------------------------

STROMA_RGB = np.array([232.0, 178.0, 204.0])
TUMOR_RGB = np.array([118.0, 62.0, 154.0])


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    """Low-frequency noise in [-1, 1] from a bilinearly upsampled coarse grid."""
    coarse = rng.uniform(-1, 1, size=(cells + 1, cells + 1)).astype(np.float32)
    img = Image.fromarray(coarse).resize((size, size), Image.BILINEAR)
    return np.asarray(img)


def _blob(rng, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Star-shaped region with a smoothly perturbed boundary."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.hypot(yy - cy, xx - cx)
    boundary = np.ones_like(theta)
    for k in range(2, 6):
        boundary += rng.uniform(0, 0.25 / k * 2) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return r <= radius * boundary


def synthesize_patch(
    seed: int,
    size: int = 256,
    blob_count_range: tuple[int, int] = (1, 4),
    noise_level: float = 0.1,
    max_foreground: float = 0.6,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic H&E-like patch with blob-shaped "tumour nests".

    Returns an (size, size, 3) uint8 image and a (size, size) uint8 mask in
    {0, 1} equal to the union of accepted blobs. A blob is accepted only if
    the union stays within ``max_foreground`` of the area; the first blob is
    shrunk until it fits, so the mask is never empty. With
    ``noise_level == 0`` the image is exactly two colours.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    lo, hi = blob_count_range
    rng = np.random.default_rng(seed)
    n_blobs = int(rng.integers(lo, hi + 1))
    mask = np.zeros((size, size), dtype=bool)
    for b in range(n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        radius = rng.uniform(0.08, 0.3) * size
        for _ in range(20):
            cand = mask | _blob(rng, size, cy, cx, radius)
            if cand.mean() <= max_foreground and cand.any():
                mask = cand
                break
            if b > 0:
                break
            radius *= 0.8

    m = mask.astype(np.float32)[..., None]
    image = STROMA_RGB * (1 - m) + TUMOR_RGB * m
    if noise_level > 0:
        # stroma fibres, nuclei-like speckle in nests, and pixel noise
        fibres = _smooth_noise(rng, size, max(size // 16, 2))[..., None]
        nuclei = _smooth_noise(rng, size, max(size // 4, 2))[..., None]
        image = image + noise_level * 120.0 * (fibres * (1 - m) + nuclei * m)
        image = image + rng.normal(0.0, noise_level * 40.0, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8)


def synthesize_cohort(
    out_dir: str | Path,
    n_slides: int = 10,
    patches_per_slide: int = 4,
    size: int = 256,
    seed: int = 0,
    noise_level: float = 0.1,
    ratios=(7, 1, 2),
    name: str = "synthetic",
) -> Manifest:
    """Write a synthetic cohort (PNG images/masks + manifest.csv) under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(n_slides):
        slide = f"{name}-s{s:03d}"
        for p in range(patches_per_slide):
            pid = f"{slide}-p{p:02d}"
            img, mask = synthesize_patch(seed * 1_000_003 + s * 1000 + p, size, noise_level=noise_level)
            ip, mp = f"images/{pid}.png", f"masks/{pid}.png"
            save_patch(img, mask, out_dir / ip, out_dir / mp)
            records.append(PatchRecord(pid, slide, ip, mp))
    manifest = slide_level_split(records, ratios, seed, name)
    manifest.notes.append(f"synthetic: seed={seed} size={size} noise_level={noise_level}")
    manifest.root = out_dir
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------


def save_patch(image: np.ndarray, mask: np.ndarray, image_path, mask_path) -> None:
    """Write an RGB PNG and a {0, 255} mask PNG from a {0, 1} mask."""
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(image_path)
    save_mask(mask, mask_path)


def save_mask(mask: np.ndarray, path) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise BadMaskValues("mask to save must hold {0, 1}")
    Image.fromarray(m.astype(np.uint8) * 255).save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    """Single-channel {0, 255} raster -> uint8 {0, 1}."""
    with Image.open(path) as im:
        m = np.asarray(im.convert("L"))
    bad = np.setdiff1d(np.unique(m), (0, 255))
    if bad.size:
        raise BadMaskValues(f"{path}: mask values {bad[:5].tolist()} outside {{0, 255}}")
    return (m == 255).astype(np.uint8)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def resize_mask(mask: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    hw = (size, size) if isinstance(size, int) else tuple(size)
    if mask.shape == hw:
        return mask
    out = np.asarray(Image.fromarray(mask.astype(np.uint8)).resize(hw[::-1], Image.NEAREST))
    if not np.isin(out, (0, 1)).all():
        raise BadMaskValues("mask resize produced labels outside {0, 1}")
    return out


def load_patch(record: PatchRecord, input_size: int, root: Path | None = None):
    """Image as float32 (3, S, S) in [0, 1]; mask as uint8 (S, S) in {0, 1}."""
    ip, mp = Path(record.image_path), Path(record.mask_path)
    if root is not None:
        ip = ip if ip.is_absolute() else root / ip
        mp = mp if mp.is_absolute() else root / mp
    for p in (ip, mp):
        if not p.is_file():
            raise FileNotFoundError(f"patch file not found: {p}")
    image = resize_image(read_image(ip), input_size)
    mask = resize_mask(read_mask(mp), input_size)
    return image.astype(np.float32).transpose(2, 0, 1) / 255.0, mask


def load_records(manifest: Manifest, records, input_size: int):
    """Patches of ``records`` as stacked arrays ``(ids, images, masks)``."""
    records = list(records)
    if not records:
        raise EmptySplit(f"no records to load from manifest {manifest.name or '?'}")
    pairs = [load_patch(r, input_size, manifest.root) for r in records]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    return [r.patch_id for r in records], images, masks


def load_split(manifest: Manifest, split: str, input_size: int):
    records = manifest.split(split)
    if not records:
        raise EmptySplit(f"split {split!r} of manifest {manifest.name or '?'} is empty")
    return load_records(manifest, records, input_size)
