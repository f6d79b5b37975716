"""Dataset ingestion: cell manifests, nucleus-patch extraction, embedding files and gene counts.

Embedding file layout (little-endian)::

    b"LEMB" | u32 version | u64 rows | u64 dims
    rows x (u32 byte length | UTF-8 cell id)
    rows*dims float32, row-major
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import FormatError, InputError, ValidationError

PATCH_SIZE = 60
LEMB_MAGIC = b"LEMB"
LEMB_VERSION = 1

REQUIRED_COLUMNS = ("cell_id", "image_path", "centroid_x", "centroid_y", "slide_id", "organ")
OPTIONAL_COLUMNS = ("label", "counts_ref")


# manifest ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    image_path: str
    centroid_x: float
    centroid_y: float
    slide_id: str
    organ: str
    label: Optional[str] = None
    counts_ref: Optional[str] = None


@dataclass
class CellManifest:
    records: list

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.cell_id in seen:
                raise ValidationError(f"duplicate cell_id {r.cell_id!r} in manifest")
            seen.add(r.cell_id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def cell_ids(self) -> list:
        return [r.cell_id for r in self.records]

    def labels(self) -> list:
        return [r.label for r in self.records]

    def slides(self) -> list:
        return [r.slide_id for r in self.records]


def _data_lines(f):
    for line in f:
        if line.lstrip().startswith("#") or not line.strip():
            continue
        yield line


def read_manifest(path) -> CellManifest:
    """Comma-separated, header-bearing, ``#`` comments allowed.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(_data_lines(f))
            header = reader.fieldnames or []
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise FormatError(f"{path}: manifest header lacks column(s) {', '.join(missing)}")
            unknown = [c for c in header if c not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
            if unknown:
                raise FormatError(f"{path}: unknown manifest column(s) {', '.join(unknown)}")
            records = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    cx, cy = float(row["centroid_x"]), float(row["centroid_y"])
                except (TypeError, ValueError):
                    raise FormatError(f"{path}: row {lineno}: centroid is not numeric") from None
                if not (math.isfinite(cx) and math.isfinite(cy)):
                    raise FormatError(f"{path}: row {lineno}: centroid is not finite")
                img = row["image_path"]
                if img and not Path(img).is_absolute():
                    img = str(path.parent / img)
                records.append(CellRecord(
                    row["cell_id"], img, cx, cy, row["slide_id"], row["organ"],
                    row.get("label") or None, row.get("counts_ref") or None))
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: manifest is not UTF-8 ({exc})") from None
    return CellManifest(records)


def write_manifest(path, manifest: CellManifest) -> None:
    cols = list(REQUIRED_COLUMNS) + [c for c in OPTIONAL_COLUMNS
                                     if any(getattr(r, c) is not None for r in manifest.records)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in manifest.records:
            w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])


@dataclass
class LabelTable:
    cell_ids: list
    labels: list
    slides: Optional[list] = None


def read_labels(path) -> LabelTable:
    """``cell_id,label[,slide_id]`` table (a full manifest also works); rows without a label are skipped."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(_data_lines(f))
        header = reader.fieldnames or []
        if "cell_id" not in header or "label" not in header:
            raise FormatError(f"{path}: label table needs 'cell_id' and 'label' columns")
        rows = [r for r in reader if r.get("label")]
    ids = [r["cell_id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate cell ids in label table")
    slides = [r["slide_id"] for r in rows] if "slide_id" in header else None
    return LabelTable(ids, [r["label"] for r in rows], slides)


def write_labels(path, table: LabelTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["cell_id", "label"] + (["slide_id"] if table.slides is not None else []))
        for i, (cid, lab) in enumerate(zip(table.cell_ids, table.labels)):
            w.writerow([cid, lab] + ([table.slides[i]] if table.slides is not None else []))


# images and patches ---------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """8-bit RGB(A) image as float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise FormatError(f"{path}: unsupported image mode {im.mode}; expected 8-bit RGB")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise InputError(f"image not found: {path}") from None
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from None
    return arr / np.float32(255.0)


class Excluded(ValidationError):
    """Extraction window crosses the image border; the cell is skipped."""

    def __init__(self, reason: str, cell_id: Optional[str] = None):
        super().__init__(reason)
        self.reason = reason
        self.cell_id = cell_id


def window_origin(centroid, size: int) -> tuple[int, int]:
    """Top-left (x0, y0) of the size x size window centred on the centroid (round half up)."""
    cx, cy = centroid
    return int(math.floor(cx + 0.5)) - size // 2, int(math.floor(cy + 0.5)) - size // 2


def extract_patch(image: np.ndarray, centroid, size: int = PATCH_SIZE) -> np.ndarray:
    """Exact pixel copy of the window centred on ``centroid`` = (x, y); no padding."""
    h, w = image.shape[:2]
    x0, y0 = window_origin(centroid, size)
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise Excluded(f"window [{x0},{x0 + size})x[{y0},{y0 + size}) crosses the {w}x{h} image border")
    return image[y0:y0 + size, x0:x0 + size].copy()


@dataclass
class ExtractionReport:
    cell_ids: list
    excluded: list = field(default_factory=list)  # (cell_id, reason)

    def to_tsv(self) -> str:
        lines = [f"# extracted\t{len(self.cell_ids)}", f"# excluded\t{len(self.excluded)}",
                 "cell_id\treason"]
        lines += [f"{cid}\t{reason}" for cid, reason in self.excluded]
        return "\n".join(lines) + "\n"


def extract_patches(manifest: CellManifest, size: int = PATCH_SIZE, workers: int = 1,
                    loader=load_image) -> tuple[np.ndarray, ExtractionReport]:
    """Extract every manifest cell; border-crossing cells are reported, not raised.

    Patches come back in manifest order, so the result is independent of the
    worker count.
    """
    by_image: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_image.setdefault(r.image_path, []).append(i)

    def work(item):
        img_path, rows = item
        image = loader(img_path)
        out = []
        for i in rows:
            r = manifest.records[i]
            try:
                out.append((i, extract_patch(image, (r.centroid_x, r.centroid_y), size), None))
            except Excluded as exc:
                out.append((i, None, exc.reason))
        return out

    items = list(by_image.items())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    slots: list = [None] * len(manifest)
    reasons: dict[int, str] = {}
    for chunk in results:
        for i, patch, reason in chunk:
            if reason is None:
                slots[i] = patch
            else:
                reasons[i] = reason
    kept = [i for i in range(len(manifest)) if i not in reasons]
    patches = np.stack([slots[i] for i in kept]) if kept else np.zeros((0, size, size, 3), np.float32)
    report = ExtractionReport([manifest.records[i].cell_id for i in kept],
                              [(manifest.records[i].cell_id, reasons[i]) for i in sorted(reasons)])
    return patches, report


# embedding files ---------------------------------------------------------------------------


@dataclass
class Embeddings:
    ids: list
    data: np.ndarray  # (rows, dims) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, np.float32)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.ids):
            raise ValidationError(f"{len(self.ids)} ids for data of shape {self.data.shape}")
        self._index = {cid: i for i, cid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValidationError("embedding ids must be unique")

    def row(self, cell_id: str) -> np.ndarray:
        try:
            return self.data[self._index[cell_id]]
        except KeyError:
            raise ValidationError(f"cell id {cell_id!r} not in embedding file") from None

    def align(self, ids: Sequence[str]) -> np.ndarray:
        missing = [c for c in ids if c not in self._index]
        if missing:
            raise ValidationError(f"{len(missing)} id(s) missing from embedding file, e.g. {missing[0]!r}")
        return self.data[[self._index[c] for c in ids]]


def embeddings_bytes(emb: Embeddings) -> bytes:
    rows, dims = emb.data.shape
    out = [LEMB_MAGIC, struct.pack("<IQQ", LEMB_VERSION, rows, dims)]
    for cid in emb.ids:
        b = str(cid).encode("utf-8")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    out.append(np.ascontiguousarray(emb.data, dtype="<f4").tobytes())
    return b"".join(out)


def embeddings_from_bytes(buf: bytes) -> Embeddings:
    mv = memoryview(buf)
    if len(mv) < 24 or bytes(mv[:4]) != LEMB_MAGIC:
        raise FormatError(f"bad magic {bytes(mv[:4])!r}, expected {LEMB_MAGIC!r}")
    version, rows, dims = struct.unpack_from("<IQQ", mv, 4)
    if version != LEMB_VERSION:
        raise FormatError(f"unsupported embedding file version {version} (expected {LEMB_VERSION})")
    pos = 24
    ids = []
    for i in range(rows):
        if pos + 4 > len(mv):
            raise FormatError(f"truncated id table at entry {i} of {rows}")
        (n,) = struct.unpack_from("<I", mv, pos)
        pos += 4
        if pos + n > len(mv):
            raise FormatError(f"truncated id table at entry {i} of {rows}")
        try:
            ids.append(bytes(mv[pos:pos + n]).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"id {i} is not valid UTF-8") from None
        pos += n
    need = rows * dims * 4
    have = len(mv) - pos
    if have != need:
        raise FormatError(f"data length mismatch: header declares {rows}x{dims} "
                          f"({need} bytes), file holds {have} bytes")
    data = np.frombuffer(mv[pos:], dtype="<f4").astype(np.float32).reshape(rows, dims)
    try:
        return Embeddings(ids, data)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None


def write_embeddings(path, emb: Embeddings) -> None:
    Path(path).write_bytes(embeddings_bytes(emb))


def read_embeddings(path) -> Embeddings:
    return embeddings_from_bytes(Path(path).read_bytes())


# gene counts --------------------------------------------------------------------------------


@dataclass
class GeneCounts:
    cell_ids: list
    genes: list
    counts: np.ndarray  # (cells, genes) int64

    def align(self, ids: Sequence[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.cell_ids)}
        missing = [c for c in ids if c not in index]
        if missing:
            raise ValidationError(f"{len(missing)} cell(s) lack gene counts, e.g. {missing[0]!r}")
        return self.counts[[index[c] for c in ids]]


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_gene_counts(path) -> GeneCounts:
    """Cell x gene integer counts.

    Delimited text (comma, or tab for ``.tsv``) with header ``cell_id,<gene>...``, or
    an embedding file holding integer-valued counts plus a ``<path>.genes``
    sidecar naming one gene per line.
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == LEMB_MAGIC:
        emb = read_embeddings(path)
        sidecar = Path(str(path) + ".genes")
        if not sidecar.exists():
            raise FormatError(f"{path}: binary counts need a gene-name sidecar {sidecar.name}")
        genes = [g for g in sidecar.read_text(encoding="utf-8").splitlines() if g]
        if len(genes) != emb.data.shape[1]:
            raise FormatError(f"{sidecar}: {len(genes)} gene names for {emb.data.shape[1]} columns")
        bad = np.argwhere((emb.data < 0) | (emb.data != np.round(emb.data)))
        if len(bad):
            r, c = bad[0]
            raise FormatError(f"{path}: row {r}, col {c}: {emb.data[r, c]} is not a non-negative integer")
        return GeneCounts(list(emb.ids), genes, emb.data.astype(np.int64))

    delim = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(_data_lines(f), delimiter=delim))
    if not rows:
        raise FormatError(f"{path}: empty counts file")
    header = rows[0]
    if len(header) < 2 or any(_is_number(h) for h in header[1:]):
        raise FormatError(f"{path}: missing gene header (expected cell_id{delim}<gene>...)")
    genes = header[1:]
    if len(set(genes)) != len(genes):
        raise FormatError(f"{path}: duplicate gene names in header")
    ids, counts = [], np.zeros((len(rows) - 1, len(genes)), np.int64)
    for r, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {r + 2} has {len(row)} fields, header has {len(header)}")
        ids.append(row[0])
        for c, v in enumerate(row[1:]):
            try:
                x = int(v)
            except ValueError:
                raise FormatError(f"{path}: row {r + 2}, col {c + 2} ({genes[c]}): "
                                  f"{v!r} is not an integer") from None
            if x < 0:
                raise FormatError(f"{path}: row {r + 2}, col {c + 2} ({genes[c]}): negative count {x}")
            counts[r, c] = x
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate cell ids")
    return GeneCounts(ids, genes, counts)


def write_gene_counts(path, gc: GeneCounts) -> None:
    delim = "\t" if Path(path).suffix.lower() in (".tsv", ".tab") else ","
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter=delim)
        w.writerow(["cell_id"] + list(gc.genes))
        for cid, row in zip(gc.cell_ids, gc.counts):
            w.writerow([cid] + [int(v) for v in row])
