"""
PixelVeil — Annotation Ingest
Turns a detector export into ImageMetadata.

Input (JSON, the shape redaction-dataset exports take):
    {
      "image_id": "case-study", "width": 64, "height": 48, "channels": 3,
      "class_scores": {"face": 0.70},                    # optional overrides
      "objects": [
        {"class": "face", "modality": "visual",
         "polygons": [[[x, y], [x, y], ...]], "confidence": 0.97},
        {"class": "date", "modality": "textual",
         "bbox": [x, y, w, h], "text": "12/04/1990", "confidence": 0.91},
        {"class": "driver_license", "modality": "multimodal",
         "bbox": [x, y, w, h], "confidence": 0.88}
      ],
      "ocr": [{"text": "student", "bbox": [x, y, w, h]}]  # optional
    }

Order of work: textual rules -> drop what is still `safe` -> score + group
-> CAPC on multimodal detections -> confidence floor.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from errors import ValidationError
from metadata import (
    CHANNELS,
    MODALITIES,
    ImageMetadata,
    PsoAnnotation,
    RegionGeometry,
    apply_confidence_floor,
    assign_group,
    quantize,
)
from postcorrect import (
    DEFAULT_CAPC_THRESHOLD,
    SAFE_LABEL,
    AnnotationOcr,
    CueTable,
    TextObject,
    apply_textual_rules,
    capc,
    reference_classifier,
)


@dataclass(frozen=True)
class RawObject:
    label: str
    modality: str
    confidence: float
    bbox: tuple = None
    polygons: tuple = None
    text: str = None


@dataclass(frozen=True)
class AnnotationFile:
    image_id: str
    width: int
    height: int
    channels: int
    objects: tuple
    ocr: tuple = ()
    class_scores: dict = field(default_factory=dict)


@dataclass
class IngestResult:
    metadata: ImageMetadata
    corrections: list = field(default_factory=list)    # human-readable relabel notes
    warnings: list = field(default_factory=list)


# ============================================================
# PARSE
# ============================================================
def _bbox(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ValidationError(f"{where}.bbox: expected [x, y, width, height]")
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}.bbox: expected integers, got {value!r}") from None


def _number(value, where, kind=float):
    if isinstance(value, bool):
        raise ValidationError(f"{where}: expected a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: expected a number, got {value!r}") from None
    if not math.isfinite(number):
        raise ValidationError(f"{where}: expected a finite number, got {value!r}")
    return kind(number)


def _polygons(value, where):
    if not isinstance(value, list) or not value:
        raise ValidationError(f"{where}.polygons: expected a non-empty list of polygons")
    polygons = []
    for n, poly in enumerate(value):
        try:
            points = tuple((float(p[0]), float(p[1])) for p in poly)
        except (TypeError, ValueError, IndexError):
            raise ValidationError(f"{where}.polygons[{n}]: expected [[x, y], ...]") from None
        if len(points) < 3:
            raise ValidationError(f"{where}.polygons[{n}]: a polygon needs at least 3 points")
        polygons.append(points)
    return tuple(polygons)


def parse_annotation_document(doc):
    if not isinstance(doc, dict):
        raise ValidationError("annotation file: expected a JSON object")
    for key in ("image_id", "width", "height", "objects"):
        if key not in doc:
            raise ValidationError(f"annotation file: {key} missing")

    class_scores = doc.get("class_scores", {})
    if not isinstance(class_scores, dict):
        raise ValidationError("class_scores: expected an object of label -> score")
    if not isinstance(doc["objects"], list):
        raise ValidationError("objects: expected a list")

    objects = []
    for index, item in enumerate(doc["objects"]):
        where = f"objects[{index}]"
        if not isinstance(item, dict) or "class" not in item:
            raise ValidationError(f"{where}.class: missing")
        modality = item.get("modality", "visual")
        if modality not in MODALITIES:
            raise ValidationError(f"{where}.modality: {modality!r} not in {MODALITIES}")
        if "polygons" in item:
            bbox, polygons = None, _polygons(item["polygons"], where)
        elif "bbox" in item:
            bbox, polygons = _bbox(item["bbox"], where), None
        else:
            raise ValidationError(f"{where}: needs polygons or bbox")
        if item.get("text") is not None and not isinstance(item["text"], str):
            raise ValidationError(f"{where}.text: expected a string, got {item['text']!r}")
        objects.append(RawObject(
            label=str(item["class"]),
            modality=modality,
            confidence=_number(item.get("confidence", 1.0), f"{where}.confidence"),
            bbox=bbox,
            polygons=polygons,
            text=item.get("text"),
        ))

    if not isinstance(doc.get("ocr", []), list):
        raise ValidationError("ocr: expected a list of text boxes")
    ocr = []
    for n, o in enumerate(doc.get("ocr", [])):
        where = f"ocr[{n}]"
        if not isinstance(o, dict) or not isinstance(o.get("text"), str) or not o["text"].strip():
            raise ValidationError(f"{where}.text: missing")
        ocr.append(TextObject(
            text=o["text"],
            bbox=_bbox(o.get("bbox"), where),
            predicted_label=SAFE_LABEL,
            confidence=_number(o.get("confidence", 1.0), f"{where}.confidence"),
        ))
    channels = _number(doc.get("channels", 3), "annotation file: channels", int)
    if channels not in CHANNELS:
        raise ValidationError(f"annotation file: channels {channels} not in {CHANNELS}")

    return AnnotationFile(
        image_id=str(doc["image_id"]),
        width=_number(doc["width"], "annotation file: width", int),
        height=_number(doc["height"], "annotation file: height", int),
        channels=channels,
        objects=tuple(objects),
        ocr=tuple(ocr),
        class_scores={str(k): _number(v, f"class_scores.{k}") for k, v in class_scores.items()},
    )


def load_annotation_file(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not valid JSON ({e})") from None
    return parse_annotation_document(doc)


# ============================================================
# IMAGES: PNG in, PNG out, always (height, width, channels) uint8
# ============================================================
def read_image(path):
    with Image.open(path) as img:
        if img.mode in ("1", "I", "I;16", "F"):
            img = img.convert("L")
        elif img.mode not in ("L", "RGB", "RGBA"):
            has_alpha = "A" in img.getbands() or "transparency" in img.info
            img = img.convert("RGBA" if has_alpha else "RGB")
        pixels = np.array(img, dtype=np.uint8)
    return pixels if pixels.ndim == 3 else pixels[..., None]


def write_image(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    Image.fromarray(pixels[..., 0] if pixels.shape[-1] == 1 else pixels).save(path, format="PNG")
    return Path(path)


# ============================================================
# GEOMETRY
# ============================================================
def rasterize_polygons(polygons, width, height):
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for points in polygons:
        draw.polygon(list(points), fill=1, outline=1)
    return np.array(canvas, dtype=bool)


def _clip(lo, hi, dim):
    return min(max(lo, 0), dim), min(max(hi, 0), dim)


def _off_image(where, width, height):
    return ValidationError(f"{where}: region covers no pixel of the {width}x{height} image")


def _geometry(obj, width, height, where):
    if obj.modality == "visual":
        if obj.polygons is not None:
            raster = rasterize_polygons(obj.polygons, width, height)
        else:
            x, y, w, h = obj.bbox
            x0, x1 = _clip(x, x + w, width)
            y0, y1 = _clip(y, y + h, height)
            raster = np.zeros((height, width), dtype=bool)
            raster[y0:y1, x0:x1] = True
        if not raster.any():
            raise _off_image(where, width, height)
        return RegionGeometry.from_mask(raster)

    if obj.bbox is not None:
        return RegionGeometry.from_bbox(*obj.bbox)
    xs = [p[0] for poly in obj.polygons for p in poly]
    ys = [p[1] for poly in obj.polygons for p in poly]
    lo_x, hi_x = int(np.floor(min(xs))), int(np.ceil(max(xs)))
    lo_y, hi_y = int(np.floor(min(ys))), int(np.ceil(max(ys)))
    if hi_x < 0 or hi_y < 0 or lo_x >= width or lo_y >= height:
        raise _off_image(where, width, height)
    x0, x1 = _clip(lo_x, hi_x, width)
    y0, y1 = _clip(lo_y, hi_y, height)
    # a line or point on the image still owns one pixel
    x0, y0 = min(x0, width - 1), min(y0, height - 1)
    return RegionGeometry.from_bbox(x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))


def _text_bbox(obj, width, height):
    if obj.bbox is not None:
        return obj.bbox
    return _geometry(obj, width, height, "text").bbox


# ============================================================
# BUILD
# ============================================================
def build_metadata(
    annotations,
    class_scores,
    table,
    image=None,
    cues=None,
    classifier=None,
    ocr=None,
    capc_threshold=DEFAULT_CAPC_THRESHOLD,
    min_confidence=0.0,
):
    """AnnotationFile -> IngestResult, running both post-correction passes."""
    result_notes, warnings = [], []
    scores = {**class_scores, **annotations.class_scores}
    width, height = annotations.width, annotations.height

    # 1. textual rules over every textual object that carries text
    labels = [o.label for o in annotations.objects]
    textual = [i for i, o in enumerate(annotations.objects) if o.modality == "textual" and o.text and o.text.strip()]
    text_objects = [
        TextObject(
            text=annotations.objects[i].text,
            bbox=_text_bbox(annotations.objects[i], width, height),
            predicted_label=labels[i],
            confidence=quantize(annotations.objects[i].confidence),
        )
        for i in textual
    ]
    for i, corrected in zip(textual, apply_textual_rules(text_objects, cues or CueTable())):
        if corrected.predicted_label != labels[i]:
            result_notes.append(f"objects[{i}] {corrected.text!r}: {labels[i]} → {corrected.predicted_label}")
            labels[i] = corrected.predicted_label

    # 2. score + group everything that is still a PSO
    built = []
    for i, obj in enumerate(annotations.objects):
        label = labels[i]
        if label == SAFE_LABEL:
            continue
        where = f"objects[{i}]"
        if label not in scores:
            raise ValidationError(f"{where}.class: {label!r} has no sensitivity score")
        score = quantize(scores[label])
        try:
            group = assign_group(score, table)
        except ValidationError as e:
            raise ValidationError(f"{where}.class: {label!r} {e}") from None
        built.append(PsoAnnotation(
            id=len(built),
            label=label,
            modality=obj.modality,
            geometry=_geometry(obj, width, height, where),
            confidence=obj.confidence,
            sensitivity_score=score,
            group=group,
        ))

    # 3. CAPC on multimodal detections
    if any(a.modality == "multimodal" for a in built):
        ocr = ocr or AnnotationOcr(annotations.ocr)
        classifier = classifier or reference_classifier
        for n, annotation in enumerate(built):
            if annotation.modality != "multimodal":
                continue
            outcome = capc(annotation, image, ocr, classifier, scores, table, threshold=capc_threshold)
            if outcome.warning:
                warnings.append(outcome.warning)
            if outcome.rewritten:
                result_notes.append(f"PSO {annotation.id}: {annotation.label} → {outcome.annotation.label} (CAPC)")
                built[n] = outcome.annotation

    meta = ImageMetadata(
        image_id=annotations.image_id,
        width=width,
        height=height,
        channels=annotations.channels,
        annotations=built,
        group_table=table,
    )
    if min_confidence > 0.0:
        meta = apply_confidence_floor(meta, min_confidence)
    return IngestResult(metadata=meta, corrections=result_notes, warnings=warnings)
