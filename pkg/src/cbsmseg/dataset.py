"""Binary PGM I/O, manifests, and the seeded synthetic two-ellipse dataset."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import SamplePair

MASK_THRESHOLD = 128
SPLITS = ("train", "val")


class PGMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingMaskError(FileNotFoundError):
    def __init__(self, ids: list[str]):
        super().__init__(f"mask file missing for id(s): {', '.join(ids)}")
        self.ids = ids


class PairingError(ValueError):
    """Image and mask of one entry differ in size."""


class ManifestError(ValueError):
    pass


# -- PGM -----------------------------------------------------------------------


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] onto the 8-bit lattice, round half up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(image: np.ndarray) -> bytes:
    """Encode a 2-D [0, 1] image as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm expects a 2-D image, got shape {image.shape}")
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + quantize(image).tobytes()


def write_pgm_bytes(raw: np.ndarray) -> bytes:
    """Encode an already 8-bit 2-D array as binary PGM."""
    raw = np.asarray(raw, dtype=np.uint8)
    h, w = raw.shape
    return b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes()


def _header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError("unexpected end of header", start)
    return buf[start:pos], pos


def read_pgm_bytes(buf: bytes) -> np.ndarray:
    """Decode binary PGM to a (H, W) uint8 array."""
    if buf[:2] != b"P5":
        raise PGMError("missing P5 magic number", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        off = pos
        tok, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise PGMError(f"invalid {name} {tok!r}", off)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval}, expected 255", pos)
    if w < 1 or h < 1:
        raise PGMError(f"invalid dimensions {w}x{h}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError("header must end with a single whitespace byte", pos)
    pos += 1
    need = w * h
    if len(buf) - pos < need:
        raise PGMError(f"truncated payload: expected {need} bytes, found {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(buf: bytes) -> np.ndarray:
    """Decode binary PGM to a float image in [0, 1]."""
    return read_pgm_bytes(buf) / 255.0


# -- manifests -----------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ManifestError(f"duplicate ids in manifest: {', '.join(dup)}")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            if parts[3] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {parts[3]!r}")
            entries.append(ManifestEntry(*parts))
        return cls(path.parent, entries)

    def write(self, path) -> None:
        lines = [f"{e.id}\t{e.image}\t{e.mask}\t{e.split}" for e in self.entries]
        Path(path).write_text("".join(line + "\n" for line in lines))

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def provenance_of(entry_id: str) -> str:
    for tag in ("flip-contrast", "flip-blur", "contrast", "blur", "flip", "original"):
        if entry_id.endswith("-" + tag):
            return tag
    return "original"


def load_dataset(manifest: DatasetManifest) -> list[SamplePair]:
    """Read every pair listed in ``manifest``; masks are binarised at byte >= 128."""
    missing = [e.id for e in manifest.entries if not manifest.resolve(e.mask).is_file()]
    if missing:
        raise MissingMaskError(missing)
    pairs = []
    for e in manifest.entries:
        img_path = manifest.resolve(e.image)
        if not img_path.is_file():
            raise FileNotFoundError(f"image file missing for id {e.id}: {img_path}")
        image = read_pgm(img_path.read_bytes())
        mask = (read_pgm_bytes(manifest.resolve(e.mask).read_bytes()) >= MASK_THRESHOLD).astype(np.uint8)
        if image.shape != mask.shape:
            raise PairingError(f"{e.id}: image {image.shape} and mask {mask.shape} differ in size")
        pairs.append(SamplePair(e.id, image, mask, provenance_of(e.id), e.split))
    return pairs


def save_dataset(pairs: list[SamplePair], out_dir) -> DatasetManifest:
    """Write ``images/<id>.pgm``, ``masks/<id>.pgm`` and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        img_rel = f"images/{p.id}.pgm"
        mask_rel = f"masks/{p.id}.pgm"
        (out / img_rel).write_bytes(write_pgm(p.image))
        (out / mask_rel).write_bytes(write_pgm_bytes(p.mask * np.uint8(255)))
        entries.append(ManifestEntry(p.id, img_rel, mask_rel, p.split))
    manifest = DatasetManifest(out, entries)
    manifest.write(out / "manifest.tsv")
    return manifest


def assign_splits(ids: list[str], train_fraction: float = 0.8) -> dict[str, str]:
    """Deterministic split: ids ranked by SHA-256, the first round(f * n) go to train."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    n_train = int(round(train_fraction * len(ids)))
    return {i: ("train" if k < n_train else "val") for k, i in enumerate(ranked)}


def split_pairs(pairs: list[SamplePair]) -> tuple[list[SamplePair], list[SamplePair]]:
    return [p for p in pairs if p.split == "train"], [p for p in pairs if p.split == "val"]


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    count: int = 64
    size: int = 64
    seed: int = 7
    noise_sigma: float = 0.08
    background: float = 0.2
    foreground: float = 0.6
    # fractions of the image size; the right ellipse mirrors the left centre range
    center_x: tuple[float, float] = (0.25, 0.35)
    center_y: tuple[float, float] = (0.4, 0.6)
    semi_x: tuple[float, float] = (0.08, 0.14)
    semi_y: tuple[float, float] = (0.2, 0.3)
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"synthetic image size must be >= 16, got {self.size}")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.center_x[0] - self.semi_x[1] < 0 or self.center_y[0] - self.semi_y[1] < 0 \
                or self.center_y[1] + self.semi_y[1] > 1:
            raise ValueError("ellipse ranges must keep both ellipses inside the frame")


def ellipse_mask(size: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    """Pixels whose centres lie inside the axis-aligned ellipse (all lengths in pixels)."""
    c = np.arange(size) + 0.5
    return (((c[None, :] - cx) / ax) ** 2 + ((c[:, None] - cy) / ay) ** 2) <= 1.0


def synth_ellipses(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[float, float, float, float]]:
    s = cfg.size
    out = []
    for mirror in (False, True):
        cx = rng.uniform(*cfg.center_x)
        out.append((
            (1.0 - cx if mirror else cx) * s,
            rng.uniform(*cfg.center_y) * s,
            rng.uniform(*cfg.semi_x) * s,
            rng.uniform(*cfg.semi_y) * s,
        ))
    return out


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> list[SamplePair]:
    """Dark frame with two brighter left/right ellipses plus clipped Gaussian noise."""
    rng = np.random.default_rng(cfg.seed)
    ids = [f"synth{i:04d}" for i in range(cfg.count)]
    splits = assign_splits(ids, cfg.train_fraction)
    pairs = []
    for sid in ids:
        mask = np.zeros((cfg.size, cfg.size), dtype=bool)
        for e in synth_ellipses(cfg, rng):
            mask |= ellipse_mask(cfg.size, *e)
        image = np.where(mask, cfg.foreground, cfg.background)
        if cfg.noise_sigma > 0:
            image = np.clip(image + rng.normal(0.0, cfg.noise_sigma, image.shape), 0.0, 1.0)
        pairs.append(SamplePair(sid, image, mask.astype(np.uint8), "original", splits[sid]))
    return pairs
