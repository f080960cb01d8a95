"""File formats: PPM images, binary label maps, taxonomies and manifests.

Text files (taxonomy, manifest, scene specs, run configs) share one
line-oriented ``key = value`` syntax with ``#`` comments.
"""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, LabelError, ParseError, ValidationError

VOID = 0xFFFF
LABEL_MAGIC = b"TLBL"
LABEL_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


# -- key/value text ------------------------------------------------------------
def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    return parse_kv(text, str(path))


def format_kv(items, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {v}" for k, v in items]
    return "\n".join(lines) + "\n"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- PPM --------------------------------------------------------------------------
def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"PPM image must be [H, W, 3] with H, W >= 1, got {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ParseError(f"not a binary PPM: magic {buf[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("PPM header: expected a decimal number", offset=pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("PPM header: missing whitespace after maxval", offset=pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"PPM maxval {maxval} unsupported (only 255)", offset=pos - 1)
    if w < 1 or h < 1:
        raise ParseError(f"PPM has empty dimensions {w}x{h}", offset=pos - 1)
    n = w * h * 3
    if len(buf) - pos < n:
        raise ParseError(f"PPM pixel data truncated: need {n} bytes, have {len(buf) - pos}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w, 3).copy()


def write_image(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_ppm(image))


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# -- label maps -------------------------------------------------------------------
@dataclass
class LabelMap:
    """Per-pixel codes: ``[0, num_cs)`` CS class, ``num_cs + r`` CA region ``r``, ``VOID``."""

    codes: np.ndarray
    num_cs: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint16)
        if self.codes.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got {self.codes.shape}")

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def void_mask(self) -> np.ndarray:
        return self.codes == VOID

    @property
    def cs_mask(self) -> np.ndarray:
        return self.codes < self.num_cs

    @property
    def ca_mask(self) -> np.ndarray:
        return (self.codes >= self.num_cs) & (self.codes != VOID)

    @property
    def num_regions(self) -> int:
        ca = self.codes[self.ca_mask]
        return int(ca.max()) - self.num_cs + 1 if ca.size else 0

    def region_masks(self) -> list[np.ndarray]:
        return [self.codes == self.num_cs + r for r in range(self.num_regions)]

    def validate(self) -> None:
        ids = np.unique(self.codes[self.ca_mask]).astype(int) - self.num_cs
        if ids.size and not np.array_equal(ids, np.arange(ids.size)):
            raise LabelError(f"CA region ids must be contiguous from 0, got {ids.tolist()}")


def encode_labels(labels: LabelMap) -> bytes:
    h, w = labels.codes.shape
    head = LABEL_MAGIC + struct.pack("<III", LABEL_VERSION, w, h)
    return head + np.ascontiguousarray(labels.codes, dtype="<u2").tobytes()


def decode_labels(buf: bytes, num_cs: int) -> LabelMap:
    if buf[:4] != LABEL_MAGIC:
        raise ParseError(f"bad label magic {buf[:4]!r}, expected {LABEL_MAGIC!r}", offset=0)
    if len(buf) < 16:
        raise ParseError("label header truncated", offset=len(buf))
    version, w, h = struct.unpack_from("<III", buf, 4)
    if version != LABEL_VERSION:
        raise ParseError(f"unsupported label version {version}", offset=4)
    n = w * h
    if len(buf) != 16 + 2 * n:
        raise ParseError(f"label payload is {len(buf) - 16} bytes, expected {2 * n}", offset=16)
    codes = np.frombuffer(buf, dtype="<u2", count=n, offset=16).astype(np.uint16).reshape(h, w)
    return LabelMap(codes, num_cs)


def write_labels(path, labels: LabelMap) -> None:
    atomic_write_bytes(path, encode_labels(labels))


def read_labels(path, num_cs: int) -> LabelMap:
    return decode_labels(Path(path).read_bytes(), num_cs)


# -- taxonomy -------------------------------------------------------------------
@dataclass
class Taxonomy:
    cs_classes: list[str]
    ca_slots: int
    void_ids: frozenset[int] = frozenset({VOID})
    ca_terrain_names: list[str] = field(default_factory=list)
    unscored: frozenset[str] = frozenset()

    @property
    def num_cs(self) -> int:
        return len(self.cs_classes)

    @property
    def scored_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.cs_classes) if n not in self.unscored]

    def validate(self) -> None:
        if not self.cs_classes:
            raise ValidationError("taxonomy declares no CS classes")
        if self.ca_slots < 1:
            raise ValidationError(f"ca_slots must be >= 1, got {self.ca_slots}")
        if len(set(self.cs_classes)) != len(self.cs_classes):
            raise ValidationError("duplicate CS class names")
        clash = sorted(i for i in self.void_ids if 0 <= i < self.num_cs)
        if clash:
            raise ValidationError(f"void ids {clash} collide with CS ids")
        missing = sorted(self.unscored - set(self.cs_classes))
        if missing:
            raise ValidationError(f"unscored names {missing} are not CS classes")

    def to_text(self) -> str:
        items = [("ca_slots", self.ca_slots)]
        items += [(f"cs.{i}", n) for i, n in enumerate(self.cs_classes)]
        items.append(("void_ids", ", ".join(str(v) for v in sorted(self.void_ids))))
        if self.ca_terrain_names:
            items.append(("ca_terrains", ", ".join(self.ca_terrain_names)))
        if self.unscored:
            items.append(("unscored", ", ".join(n for n in self.cs_classes if n in self.unscored)))
        return format_kv(items)


_CS_KEY = re.compile(r"cs\.(\d+)$")


def _split_list(value: str) -> list[str]:
    return [s.strip() for s in value.split(",") if s.strip()]


def taxonomy_from_kv(kv: dict[str, str], source: str = "<taxonomy>") -> Taxonomy:
    cs: dict[int, str] = {}
    slots = None
    void = {VOID}
    terrains: list[str] = []
    unscored: list[str] = []
    for key, value in kv.items():
        m = _CS_KEY.match(key)
        if m:
            cs[int(m.group(1))] = value
        elif key == "ca_slots":
            try:
                slots = int(value)
            except ValueError:
                raise ValidationError(f"{source}: ca_slots must be an integer, got {value!r}") from None
        elif key == "void_ids":
            void = {int(v) for v in _split_list(value)}
        elif key == "ca_terrains":
            terrains = _split_list(value)
        elif key == "unscored":
            unscored = _split_list(value)
        else:
            raise ValidationError(f"{source}: unknown taxonomy key {key!r}")
    if slots is None:
        raise ValidationError(f"{source}: missing ca_slots")
    ids = sorted(cs)
    if ids != list(range(len(ids))):
        raise ValidationError(f"{source}: CS ids must be dense from 0, got {ids}")
    tax = Taxonomy([cs[i] for i in ids], slots, frozenset(void), terrains, frozenset(unscored))
    tax.validate()
    return tax


def load_taxonomy(path) -> Taxonomy:
    return taxonomy_from_kv(read_kv(path), str(path))


def bundled_taxonomy(name: str = "rugd") -> Taxonomy:
    text = resources.files("trinity.data").joinpath(f"{name}.taxonomy").read_text(encoding="utf-8")
    return taxonomy_from_kv(parse_kv(text, f"{name}.taxonomy"), f"{name}.taxonomy")


# -- manifests ------------------------------------------------------------------
@dataclass(frozen=True)
class Sample:
    id: str
    image: Path
    labels: Path
    split: str
    terrains: tuple[str, ...] = ()


@dataclass
class Manifest:
    samples: list[Sample]
    taxonomy: Taxonomy
    version: int = MANIFEST_VERSION

    def split(self, tag: str) -> list[Sample]:
        return [s for s in self.samples if s.split == tag]

    def __len__(self):
        return len(self.samples)


def manifest_text(samples: list[Sample], taxonomy_file: str, root: Path) -> str:
    items = [("version", MANIFEST_VERSION), ("taxonomy", taxonomy_file)]
    for s in samples:
        rel_img = Path(os.path.relpath(s.image, root)).as_posix()
        rel_lbl = Path(os.path.relpath(s.labels, root)).as_posix()
        items.append((f"sample.{s.id}", f"{rel_img} | {rel_lbl} | {s.split} | {','.join(s.terrains)}"))
    return format_kv(items)


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    kv = read_kv(path)
    root = path.parent
    version = int(kv.pop("version", "0"))
    if version != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {version}")
    tax_ref = kv.pop("taxonomy", None)
    if tax_ref is None:
        raise ValidationError(f"{path}: missing taxonomy reference")
    taxonomy = bundled_taxonomy(tax_ref[len("bundled:"):]) if tax_ref.startswith("bundled:") \
        else load_taxonomy(root / tax_ref)
    samples = []
    for key, value in kv.items():
        if not key.startswith("sample."):
            raise ValidationError(f"{path}: unknown manifest key {key!r}")
        parts = [p.strip() for p in value.split("|")]
        if len(parts) not in (3, 4):
            raise ParseError(f"{path}: sample {key!r} needs 'image | labels | split [| terrains]'")
        if parts[2] not in SPLITS:
            raise ValidationError(f"{path}: sample {key!r} has unknown split {parts[2]!r}")
        terrains = tuple(_split_list(parts[3])) if len(parts) == 4 else ()
        samples.append(Sample(key[len("sample."):], root / parts[0], root / parts[1], parts[2], terrains))
    if check_files:
        missing = [str(p) for s in samples for p in (s.image, s.labels) if not p.exists()]
        if missing:
            raise FileNotFoundError(f"{path}: {len(missing)} missing file(s): " + ", ".join(missing))
    return Manifest(samples, taxonomy, version)


def concat_manifests(manifests: list[Manifest]) -> Manifest:
    """Join datasets sharing one taxonomy; ids are prefixed with the manifest index."""
    if not manifests:
        raise ValidationError("no manifests given")
    base = manifests[0].taxonomy
    for m in manifests[1:]:
        if m.taxonomy.cs_classes != base.cs_classes or m.taxonomy.ca_slots != base.ca_slots:
            raise ValidationError("manifests disagree on taxonomy")
    if len(manifests) == 1:
        return manifests[0]
    samples = [
        Sample(f"{i}:{s.id}", s.image, s.labels, s.split, s.terrains)
        for i, m in enumerate(manifests) for s in m.samples
    ]
    return Manifest(samples, base)
