"""Dataset manifests, portable-pixmap images and the synthetic identity set."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ValidationError

SPLITS = ("train", "query", "gallery")
# vertical extent of head, upper body, lower body and feet, as fractions of height
BAND_EDGES = (0.0, 0.2, 0.55, 0.85, 1.0)
# background colour varies per image by up to this multiple of the noise level
BACKGROUND_SPREAD = 4.0
MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass(frozen=True)
class Record:
    path: str
    identity: int
    camera: int
    split: str


@dataclass
class Dataset:
    records: list[Record]
    images: np.ndarray  # N×3×H×W in [0, 1]

    def select(self, split: str) -> tuple[np.ndarray, list[Record]]:
        idx = [i for i, r in enumerate(self.records) if r.split == split]
        return self.images[idx], [self.records[i] for i in idx]


# -- portable pixmaps ---------------------------------------------------------

def _tokens(raw: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(raw)
    while len(out) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        out.append(raw[start:pos])
    return out, pos


def decode_pnm(raw: bytes) -> np.ndarray:
    """Decode P2/P3/P5/P6 data to an H×W×C integer array and its maxval."""
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"unsupported format {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (w, h, maxval), pos = _tokens(raw, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        values, _ = _tokens(raw, count, pos)
        data = np.array([int(v) for v in values], dtype=np.int64)
    else:
        pos += 1  # single whitespace byte ends the header
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.int64)
    return data.reshape(h, w, channels), maxval


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 bytes for a 3×H×W image with values in [0, 1]."""
    _, h, w = image.shape
    pixels = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + pixels.transpose(1, 2, 0).tobytes()


def write_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a C×H×W array using pixel-centre alignment."""
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    top = image[:, r0][:, :, c0] * (1 - fc) + image[:, r0][:, :, c1] * fc
    bottom = image[:, r1][:, :, c0] * (1 - fc) + image[:, r1][:, :, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def load_image(path: str | Path, size: tuple[int, int] | None = (64, 32)) -> np.ndarray:
    """Read a portable pixmap/graymap as a 3×H×W float array in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
        pixels, maxval = decode_pnm(raw)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    image = pixels.transpose(2, 0, 1).astype(np.float64) / maxval
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if size is not None:
        image = resize_bilinear(image, *size)
    return image


# -- manifests ----------------------------------------------------------------

def parse_market_name(name: str) -> tuple[int, int]:
    """Identity and camera from a Market1501-style file name (``0002_c1s1_...``)."""
    m = MARKET_NAME.match(Path(name).name)
    if not m:
        raise ValidationError(f"{name}: not a <identity>_c<camera>... file name")
    return int(m.group(1)), int(m.group(2))


def validate_records(records: list[Record]) -> None:
    train = {r.identity for r in records if r.split == "train"}
    test = {r.identity for r in records if r.split in ("query", "gallery")}
    overlap = sorted(train & test)
    if overlap:
        raise ValidationError(f"identities in both train and test splits: {overlap}")
    gallery = {r.identity for r in records if r.split == "gallery"}
    missing = sorted({r.identity for r in records if r.split == "query"} - gallery)
    if missing:
        raise ValidationError(f"query identities missing from the gallery: {missing}")


def load_manifest(path: str | Path) -> list[Record]:
    """Parse ``path<TAB>identity<TAB>camera<TAB>split`` lines.

    A two-field line ``path<TAB>split`` takes identity and camera from the
    file name. Relative paths are resolved against the manifest directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) == 2:
            identity, camera = parse_market_name(fields[0])
            image, split = fields
        elif len(fields) == 4:
            image, identity, camera, split = fields
            try:
                identity, camera = int(identity), int(camera)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: identity and camera must be integers") from None
        else:
            raise ValidationError(f"{path}:{lineno}: expected 2 or 4 tab-separated fields")
        if split not in SPLITS:
            raise ValidationError(f"{path}:{lineno}: unknown split {split!r}")
        full = Path(image) if Path(image).is_absolute() else path.parent / image
        records.append(Record(str(full), identity, camera, split))
    validate_records(records)
    return records


def write_manifest(path: str | Path, records: list[Record]) -> None:
    root = Path(path).parent
    lines = []
    for r in records:
        p = Path(r.path)
        rel = p.relative_to(root) if p.is_absolute() and root in p.parents else p
        lines.append(f"{rel}\t{r.identity}\t{r.camera}\t{r.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(manifest: str | Path, size: tuple[int, int] = (64, 32)) -> Dataset:
    records = load_manifest(manifest)
    images = np.stack([load_image(r.path, size) for r in records]) if records else np.zeros((0, 3, *size))
    return Dataset(records, images)


# -- synthetic identities -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    identities: int = 16
    per_identity: int = 12
    height: int = 64
    width: int = 32
    noise: float = 0.1
    shift: int = 0  # max vertical offset of the band layout, in pixels
    cameras: int = 2
    train_fraction: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class Signature:
    colors: np.ndarray = field(repr=False)  # 4×3 band colours
    textures: tuple[int, ...] = ()  # 0 flat, 1 vertical stripes, 2 horizontal stripes, 3 checks


def _signature(rng: np.random.Generator) -> Signature:
    return Signature(rng.uniform(0.05, 0.95, size=(4, 3)), tuple(int(t) for t in rng.integers(0, 4, size=4)))


def _texture(kind: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if kind == 1:
        return np.broadcast_to((cols // 2) % 2, (len(rows), len(cols)))
    if kind == 2:
        return np.broadcast_to(((rows // 2) % 2)[:, None], (len(rows), len(cols)))
    if kind == 3:
        return ((rows[:, None] // 2) + (cols[None, :] // 2)) % 2
    return np.zeros((len(rows), len(cols)))


def render_person(sig: Signature, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One 3×H×W image of the identity with signature `sig`, and the band offset used.

    Per-image nuisance comes from three sources, all zero at ``noise=0`` and
    ``shift=0``: the background colour, additive Gaussian pixel noise, and a
    vertical offset of the whole band layout.
    """
    h, w = spec.height, spec.width
    offset = int(rng.integers(-spec.shift, spec.shift + 1)) if spec.shift else 0
    image = np.empty((3, h, w))
    background = 0.5 + BACKGROUND_SPREAD * spec.noise * rng.uniform(-1.0, 1.0, size=3)
    image[:] = np.clip(background, 0.0, 1.0)[:, None, None]
    left, right = w // 5, w - w // 5
    cols = np.arange(left, right)
    for band in range(4):
        top = int(round(BAND_EDGES[band] * h)) + offset
        bottom = int(round(BAND_EDGES[band + 1] * h)) + offset
        top, bottom = max(top, 0), min(bottom, h)
        if bottom <= top:
            continue
        rows = np.arange(top, bottom)
        tex = _texture(sig.textures[band], rows, cols)
        color = sig.colors[band][:, None, None]
        image[:, top:bottom, left:right] = color * (0.75 + 0.25 * tex)[None]
    if spec.noise:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), offset


def generate_synthetic(spec: SyntheticSpec, root: str | Path = "images") -> Dataset:
    """Banded person images; identity is fixed by the four band signatures.

    The first ``train_fraction`` of identities form the training split. For
    each remaining identity the first image from every camera is a query and
    the rest go to the gallery. Pixel values are quantised to 8 bits so that
    a written dataset reads back bit-identically.
    """
    if spec.identities < 2:
        raise ValidationError("need at least 2 identities")
    rng = np.random.default_rng(spec.seed)
    signatures = [_signature(rng) for _ in range(spec.identities)]
    n_train = max(1, int(round(spec.identities * spec.train_fraction)))
    records, images = [], []
    for ident, sig in enumerate(signatures, start=1):
        is_train = ident <= n_train
        seen_cameras = set()
        for n in range(spec.per_identity):
            camera = n % spec.cameras + 1
            image, _ = render_person(sig, spec, rng)
            if is_train:
                split = "train"
            elif camera not in seen_cameras:
                split = "query"
            else:
                split = "gallery"
            seen_cameras.add(camera)
            name = f"{ident:04d}_c{camera}_{n:03d}.ppm"
            records.append(Record(str(Path(root) / name), ident, camera, split))
            images.append(np.rint(image * 255) / 255)
    return Dataset(records, np.stack(images))


def write_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write images and ``manifest.tsv`` under `directory`; returns the manifest path."""
    directory = Path(directory)
    records = []
    for record, image in zip(dataset.records, dataset.images):
        target = directory / record.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, image)
        records.append(Record(str(target.resolve()), record.identity, record.camera, record.split))
    manifest = directory / "manifest.tsv"
    write_manifest(manifest.resolve(), records)
    return manifest
