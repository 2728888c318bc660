"""
PixelVeil — Metadata
The PSO annotation model and the metadata document that drives encryption
and decryption:
  - sensitivity scores on [alpha, beta] and their normalization from ratings
  - L sensitivity groups (lower-exclusive / upper-inclusive bins, group 1
    also takes alpha)
  - region geometry: bounding boxes or run-length encoded masks
  - canonical JSON (sorted keys, 4-digit reals) so byte equality is testable
"""
import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from errors import ValidationError

SCHEMA_VERSION = 1

DEFAULT_ALPHA = 0.1
DEFAULT_BETA  = 1.0

# Case-study thresholds; the dataset experiments use (0.35, 0.70, 0.90, 1.00)
DEFAULT_THRESHOLDS = (0.25, 0.50, 0.75, 1.00)

MODALITIES = ("visual", "textual", "multimodal")
CHANNELS   = (1, 3, 4)

# Rating scale used by the user study the class scores come from
RATING_MIN = 1.0
RATING_MAX = 5.0


def quantize(value):
    """Round a real to the 4 fractional digits the document stores."""
    return float(f"{float(value):.4f}")


def _fmt(value):
    return f"{value:.4f}"


# ============================================================
# SCORES + GROUPS
# ============================================================
@dataclass(frozen=True)
class SensitivityGroupTable:
    thresholds: tuple = DEFAULT_THRESHOLDS
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        thresholds = tuple(quantize(t) for t in self.thresholds)
        alpha, beta = quantize(self.alpha), quantize(self.beta)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

        named = [("alpha", alpha), ("beta", beta)] + [(f"thresholds[{i}]", t) for i, t in enumerate(thresholds)]
        for name, value in named:
            if not math.isfinite(value):
                raise ValidationError(f"group_table.{name}: {value} is not a finite number")
        if not alpha < beta:
            raise ValidationError(f"group_table.alpha: {alpha} must be below beta {beta}")
        if not thresholds:
            raise ValidationError("group_table.thresholds: at least one group is required")
        previous = alpha
        for i, upper in enumerate(thresholds):
            if upper <= previous:
                raise ValidationError(
                    f"group_table.thresholds[{i}]: {upper} must be above {previous} (strictly ascending in (alpha, beta])"
                )
            previous = upper
        if thresholds[-1] != beta:
            raise ValidationError(f"group_table.thresholds: last threshold {thresholds[-1]} must equal beta {beta}")

    @property
    def group_count(self):
        return len(self.thresholds)


def normalize_score(mean_rating):
    """Map a mean rating on the 1..5 scale linearly onto [0.1, 1.0]."""
    rating = float(mean_rating)
    if not RATING_MIN <= rating <= RATING_MAX:
        raise ValidationError(f"mean_rating: {mean_rating} outside [{RATING_MIN}, {RATING_MAX}]")
    span = DEFAULT_BETA - DEFAULT_ALPHA
    return DEFAULT_ALPHA + span * (rating - RATING_MIN) / (RATING_MAX - RATING_MIN)


def assign_group(score, table):
    """Smallest group whose upper threshold is >= score."""
    if not table.alpha <= score <= table.beta:
        raise ValidationError(f"sensitivity_score: {score} outside [{table.alpha}, {table.beta}]")
    for group, upper in enumerate(table.thresholds, 1):
        if score <= upper:
            return group
    # unreachable: last threshold == beta
    raise ValidationError(f"sensitivity_score: {score} not covered by group table")


def group_bands(table):
    """[(group, low, high, low_inclusive)]; group 1 includes alpha."""
    bands = []
    low = table.alpha
    for group, high in enumerate(table.thresholds, 1):
        bands.append((group, low, high, group == 1))
        low = high
    return bands


# ============================================================
# MASK CODEC: row-major runs, zero-run first
# ============================================================
def encode_mask_rle(mask):
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return ()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds  = np.concatenate(([0], changes, [flat.size]))
    runs    = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return tuple(int(r) for r in runs)


def decode_mask_rle(counts, width, height):
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise ValidationError("mask_rle: negative run length")
    if int(counts.sum()) != width * height:
        raise ValidationError(
            f"mask_rle: runs cover {int(counts.sum())} pixels, image has {width * height}"
        )
    values = (np.arange(counts.size) % 2) == 1
    return np.repeat(values, counts).reshape(height, width)


# ============================================================
# GEOMETRY + ANNOTATIONS
# ============================================================
@dataclass(frozen=True)
class RegionGeometry:
    kind: str
    bbox: Optional[tuple] = None
    mask_rle: Optional[tuple] = None

    @classmethod
    def from_bbox(cls, x, y, width, height):
        return cls(kind="bbox", bbox=(int(x), int(y), int(width), int(height)))

    @classmethod
    def from_mask(cls, mask):
        return cls(kind="mask", mask_rle=encode_mask_rle(mask))

    def validate(self, width, height, where="geometry"):
        if self.kind == "bbox":
            if self.bbox is None or len(self.bbox) != 4 or self.mask_rle is not None:
                raise ValidationError(f"{where}: bbox geometry needs exactly (x, y, width, height)")
            x, y, w, h = self.bbox
            if w < 1 or h < 1:
                raise ValidationError(f"{where}.bbox: width and height must be >= 1, got {w}x{h}")
            if x < 0 or y < 0 or x + w > width or y + h > height:
                raise ValidationError(f"{where}.bbox: {self.bbox} outside image {width}x{height}")
        elif self.kind == "mask":
            if self.mask_rle is None or self.bbox is not None:
                raise ValidationError(f"{where}: mask geometry needs mask_rle")
            runs = self.mask_rle
            if any(r < 0 for r in runs):
                raise ValidationError(f"{where}.mask_rle: negative run length")
            if sum(runs) != width * height:
                raise ValidationError(
                    f"{where}.mask_rle: runs cover {sum(runs)} pixels, image has {width * height}"
                )
            if sum(runs[1::2]) < 1:
                raise ValidationError(f"{where}.mask_rle: mask has no set pixel")
        else:
            raise ValidationError(f"{where}.kind: unknown geometry kind {self.kind!r}")

    def mask(self, width, height):
        """Boolean raster of the full image plane."""
        if self.kind == "mask":
            return decode_mask_rle(self.mask_rle, width, height)
        x, y, w, h = self.bbox
        raster = np.zeros((height, width), dtype=bool)
        raster[y:y + h, x:x + w] = True
        return raster


@dataclass(frozen=True)
class PsoAnnotation:
    id: int
    label: str
    modality: str
    geometry: RegionGeometry
    confidence: float
    sensitivity_score: float
    group: int

    def __post_init__(self):
        object.__setattr__(self, "confidence", quantize(self.confidence))
        object.__setattr__(self, "sensitivity_score", quantize(self.sensitivity_score))
        where = f"annotations[id={self.id}]"
        if self.modality not in MODALITIES:
            raise ValidationError(f"{where}.modality: {self.modality!r} not in {MODALITIES}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"{where}.confidence: {self.confidence} outside [0, 1]")
        if not self.label:
            raise ValidationError(f"{where}.label: empty")
        expected = "mask" if self.modality == "visual" else "bbox"
        if self.geometry.kind != expected:
            raise ValidationError(
                f"{where}.geometry: {self.modality} annotations carry {expected} geometry, got {self.geometry.kind}"
            )


def relabel(annotation, label, score, table):
    """Same region, new class: rescored and regrouped."""
    score = quantize(score)
    return replace(annotation, label=label, sensitivity_score=score, group=assign_group(score, table))


# ============================================================
# IMAGE METADATA
# ============================================================
@dataclass(frozen=True)
class ImageMetadata:
    image_id: str
    width: int
    height: int
    channels: int
    annotations: tuple = ()
    group_table: SensitivityGroupTable = SensitivityGroupTable()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.image_id:
            raise ValidationError("image_id: empty")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"width/height: image must be at least 1x1, got {self.width}x{self.height}")
        if self.channels not in CHANNELS:
            raise ValidationError(f"channels: {self.channels} not in {CHANNELS}")
        for index, annotation in enumerate(self.annotations):
            where = f"annotations[id={annotation.id}]"
            if annotation.id != index:
                raise ValidationError(f"{where}.id: ids must be unique and dense from 0 (expected {index})")
            annotation.geometry.validate(self.width, self.height, where=f"{where}.geometry")
            try:
                expected = assign_group(annotation.sensitivity_score, self.group_table)
            except ValidationError as e:
                raise ValidationError(f"{where}.sensitivity_score: {e}") from None
            if annotation.group != expected:
                raise ValidationError(
                    f"{where}.group: claims group {annotation.group} but score "
                    f"{annotation.sensitivity_score} belongs to group {expected}"
                )

    @property
    def shape(self):
        return (self.height, self.width, self.channels)


def regroup_metadata(meta, table):
    """Apply new thresholds to existing annotations, no re-detection."""
    annotations = [replace(a, group=assign_group(a.sensitivity_score, table)) for a in meta.annotations]
    return replace(meta, annotations=annotations, group_table=table)


def apply_confidence_floor(meta, floor):
    """Drop annotations below `floor` confidence; ids are re-densified."""
    kept = [a for a in meta.annotations if a.confidence >= floor]
    return replace(meta, annotations=[replace(a, id=i) for i, a in enumerate(kept)])


# ============================================================
# CANONICAL DOCUMENT
# ============================================================
def metadata_to_dict(meta):
    annotations = []
    for a in meta.annotations:
        if a.geometry.kind == "bbox":
            geometry = {"kind": "bbox", "bbox": list(a.geometry.bbox)}
        else:
            geometry = {"kind": "mask", "mask_rle": list(a.geometry.mask_rle)}
        annotations.append({
            "id":                a.id,
            "label":             a.label,
            "modality":          a.modality,
            "geometry":          geometry,
            "confidence":        _fmt(a.confidence),
            "sensitivity_score": _fmt(a.sensitivity_score),
            "group":             a.group,
        })
    return {
        "schema_version": meta.schema_version,
        "image_id":       meta.image_id,
        "width":          meta.width,
        "height":         meta.height,
        "channels":       meta.channels,
        "group_table": {
            "alpha":      _fmt(meta.group_table.alpha),
            "beta":       _fmt(meta.group_table.beta),
            "thresholds": [_fmt(t) for t in meta.group_table.thresholds],
        },
        "annotations": annotations,
    }


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def serialize_metadata(meta):
    return canonical_json(metadata_to_dict(meta))


def _field(doc, name, where):
    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: expected an object")
    if name not in doc:
        raise ValidationError(f"{where}.{name}: missing")
    return doc[name]


def _int(value, where):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected an integer, got {value!r}")
    return value


def _real(value, where):
    if isinstance(value, bool):
        raise ValidationError(f"{where}: expected a real, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: expected a real, got {value!r}") from None
    if not math.isfinite(number):
        raise ValidationError(f"{where}: expected a finite real, got {value!r}")
    return number


def _str(value, where):
    if not isinstance(value, str):
        raise ValidationError(f"{where}: expected a string, got {value!r}")
    return value


def _parse_geometry(doc, where):
    kind = _str(_field(doc, "kind", where), f"{where}.kind")
    if kind == "bbox":
        bbox = _field(doc, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ValidationError(f"{where}.bbox: expected [x, y, width, height]")
        return RegionGeometry(kind="bbox", bbox=tuple(_int(v, f"{where}.bbox") for v in bbox))
    if kind == "mask":
        runs = _field(doc, "mask_rle", where)
        if not isinstance(runs, list):
            raise ValidationError(f"{where}.mask_rle: expected a list of run lengths")
        return RegionGeometry(kind="mask", mask_rle=tuple(_int(v, f"{where}.mask_rle") for v in runs))
    raise ValidationError(f"{where}.kind: unknown geometry kind {kind!r}")


def metadata_from_dict(doc):
    where = "metadata"
    version = _int(_field(doc, "schema_version", where), "schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version: unsupported version {version}")

    table_doc = _field(doc, "group_table", where)
    thresholds = _field(table_doc, "thresholds", "group_table")
    if not isinstance(thresholds, list):
        raise ValidationError("group_table.thresholds: expected a list")
    table = SensitivityGroupTable(
        thresholds=tuple(_real(t, "group_table.thresholds") for t in thresholds),
        alpha=_real(_field(table_doc, "alpha", "group_table"), "group_table.alpha"),
        beta=_real(_field(table_doc, "beta", "group_table"), "group_table.beta"),
    )

    raw_annotations = _field(doc, "annotations", where)
    if not isinstance(raw_annotations, list):
        raise ValidationError("annotations: expected a list")
    annotations = []
    for index, item in enumerate(raw_annotations):
        at = f"annotations[{index}]"
        ann_id = _int(_field(item, "id", at), f"{at}.id")
        at = f"annotations[id={ann_id}]"
        annotations.append(PsoAnnotation(
            id=ann_id,
            label=_str(_field(item, "label", at), f"{at}.label"),
            modality=_str(_field(item, "modality", at), f"{at}.modality"),
            geometry=_parse_geometry(_field(item, "geometry", at), f"{at}.geometry"),
            confidence=_real(_field(item, "confidence", at), f"{at}.confidence"),
            sensitivity_score=_real(_field(item, "sensitivity_score", at), f"{at}.sensitivity_score"),
            group=_int(_field(item, "group", at), f"{at}.group"),
        ))

    return ImageMetadata(
        image_id=_str(_field(doc, "image_id", where), "image_id"),
        width=_int(_field(doc, "width", where), "width"),
        height=_int(_field(doc, "height", where), "height"),
        channels=_int(_field(doc, "channels", where), "channels"),
        annotations=annotations,
        group_table=table,
        schema_version=version,
    )


def parse_metadata(document):
    try:
        doc = json.loads(document.decode("utf-8") if isinstance(document, (bytes, bytearray)) else document)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"metadata: not valid UTF-8 JSON ({e})") from None
    return metadata_from_dict(doc)
