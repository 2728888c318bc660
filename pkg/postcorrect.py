"""
PixelVeil — Post-Correction
Fixes detector labels before they turn into sensitivity groups.

Textual rules (one snapshot of the input labels, first rule wins per target):
  temporal cue (dob / born / birthday)  + nearest `date` -> birthdate
  identity cue (name / surname / alias) + nearest `safe` -> name
  location cue (office / city)          + nearest `safe` -> place

CAPC (context-aware post-correction) for multimodal detections: OCR the
region, classify the text, take the classifier's label when it is
confident enough, and rescore the annotation under the new label.

OCR and classification are ports. Shipped implementations:
  KeywordClassifier  deterministic keyword-table scoring (the reference)
  CommandClassifier  external process, one JSON object per line
  CommandOcr         external process, one JSON object per line
  AnnotationOcr      serves text boxes that came with the annotation file
"""
import json
import math
import queue
import re
import subprocess
import threading
from dataclasses import dataclass, replace
from typing import Optional, Protocol

from errors import ValidationError
from metadata import relabel

DEFAULT_CAPC_THRESHOLD = 0.5
SAFE_LABEL = "safe"

DEFAULT_CUES = {
    "temporal": ("dob", "born", "birthday"),
    "identity": ("name", "surname", "alias"),
    "location": ("office", "city"),
}

# (cue kind, label the nearest object must carry, label it becomes)
TEXT_RULES = (
    ("temporal", "date", "birthdate"),
    ("identity", SAFE_LABEL, "name"),
    ("location", SAFE_LABEL, "place"),
)

DEFAULT_KEYWORDS = {
    "passport":       ("passport", "visa", "expiry", "nationality"),
    "student_id":     ("student", "university", "campus", "enrollment"),
    "ticket":         ("boarding", "pass", "gate", "seat"),
    "driver_license": ("driver", "license", "licence", "vehicle"),
    "receipt":        ("total", "subtotal", "tax", "cash"),
}

_TOKEN = re.compile(r"\w+")


def tokenize(text):
    """Lowercase word tokens (any script); punctuation is a separator."""
    return _TOKEN.findall(text.lower())


def contains_run(tokens, wanted):
    """True when `wanted` occurs in `tokens` as a contiguous run."""
    n = len(wanted)
    return any(tokens[i:i + n] == wanted for i in range(len(tokens) - n + 1))


# ============================================================
# TYPES
# ============================================================
@dataclass(frozen=True)
class TextObject:
    text: str
    bbox: tuple
    predicted_label: str
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if not self.text or not self.text.strip():
            raise ValidationError("text object: text is empty")
        if len(self.bbox) != 4:
            raise ValidationError(f"text object {self.text!r}: bbox needs (x, y, width, height)")
        x, y, w, h = self.bbox
        if x < 0 or y < 0 or w < 1 or h < 1:
            raise ValidationError(f"text object {self.text!r}: bad bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"text object {self.text!r}: confidence {self.confidence} outside [0, 1]")

    @property
    def centroid(self):
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)

    def inside(self, bbox):
        x, y, w, h = self.bbox
        bx, by, bw, bh = bbox
        return x >= bx and y >= by and x + w <= bx + bw and y + h <= by + bh

    def check_bounds(self, width, height):
        if not self.inside((0, 0, width, height)):
            raise ValidationError(f"text object {self.text!r}: bbox {self.bbox} outside image {width}x{height}")


@dataclass(frozen=True)
class CueTable:
    temporal: frozenset = frozenset(DEFAULT_CUES["temporal"])
    identity: frozenset = frozenset(DEFAULT_CUES["identity"])
    location: frozenset = frozenset(DEFAULT_CUES["location"])

    def __post_init__(self):
        for kind in DEFAULT_CUES:
            cues = frozenset(getattr(self, kind))
            object.__setattr__(self, kind, cues)
            if not cues:
                raise ValidationError(f"cues.{kind}: at least one cue is required")
            for cue in cues:
                if cue != cue.lower() or not tokenize(cue):
                    raise ValidationError(f"cues.{kind}: {cue!r} must be lowercase text")

    @classmethod
    def from_dict(cls, doc):
        """Config section -> table; kinds left out keep their defaults."""
        doc = doc or {}
        unknown = sorted(set(doc) - set(DEFAULT_CUES))
        if unknown:
            raise ValidationError(f"cues: unknown cue kind(s) {unknown}")
        return cls(**{kind: frozenset(doc.get(kind, DEFAULT_CUES[kind])) for kind in DEFAULT_CUES})

    def matches(self, kind, tokens):
        """Whole-token match; multi-word cues match as a token run."""
        return any(contains_run(tokens, tokenize(cue)) for cue in getattr(self, kind))

    def any_cue(self, tokens):
        return any(self.matches(kind, tokens) for kind in DEFAULT_CUES)


class ClassifierPort(Protocol):
    def classify(self, text: str) -> tuple: ...


class OcrPort(Protocol):
    def read_region(self, image, bbox: tuple) -> list: ...


# ============================================================
# TEXTUAL RULES
# ============================================================
def _nearest(index, objects):
    cx, cy = objects[index].centroid
    best, best_dist = None, math.inf
    for j, other in enumerate(objects):
        if j == index:
            continue
        ox, oy = other.centroid
        dist = math.hypot(ox - cx, oy - cy)
        if dist < best_dist:
            best, best_dist = j, dist
    return best


def apply_textual_rules(objects, cues=None):
    objects = list(objects)
    cues = cues or CueTable()
    tokens = [tokenize(o.text) for o in objects]
    labels = [o.predicted_label for o in objects]
    rewritten = {}

    for kind, target, result in TEXT_RULES:
        for i in range(len(objects)):
            if not cues.matches(kind, tokens[i]):
                continue
            j = _nearest(i, objects)
            if j is None or j in rewritten:
                continue
            if labels[j] != target or cues.any_cue(tokens[j]):
                continue
            rewritten[j] = result

    return [
        replace(o, predicted_label=rewritten[i]) if i in rewritten else o
        for i, o in enumerate(objects)
    ]


# ============================================================
# CLASSIFIERS
# ============================================================
class KeywordClassifier:
    """
    Score = fraction of a label's keywords present in the text. A keyword
    of several words ("boarding pass") counts when its tokens appear as a run.
    """

    def __init__(self, keywords=None):
        table = keywords if keywords is not None else DEFAULT_KEYWORDS
        self.keywords = {}
        for label, words in table.items():
            runs = set()
            for word in words:
                run = tuple(tokenize(str(word)))
                if not run:
                    raise ValidationError(f"classifier.keywords.{label}: {word!r} holds no word")
                runs.add(run)
            if not runs:
                raise ValidationError(f"classifier.keywords.{label}: keyword set is empty")
            self.keywords[label] = frozenset(runs)

    def classify(self, text):
        tokens = tokenize(text)
        best_label, best_score = SAFE_LABEL, 0.0
        for label in sorted(self.keywords):
            runs = self.keywords[label]
            score = sum(contains_run(tokens, list(run)) for run in runs) / len(runs)
            if score > best_score:
                best_label, best_score = label, score
        return best_label, best_score

    __call__ = classify


REFERENCE_CLASSIFIER = KeywordClassifier()


def reference_classifier(text):
    return REFERENCE_CLASSIFIER.classify(text)


class _JsonLineProcess:
    """
    A long-lived child process: one JSON request line in, one JSON line out.
    A reader thread feeds stdout into a queue so every reply wait is bounded
    by `timeout`; a child that misses it is killed and started fresh on the
    next request.
    """

    def __init__(self, command, timeout=30):
        self.command = command
        self.timeout = timeout
        self._proc = None
        self._lines = None
        self._lock = threading.Lock()

    @staticmethod
    def _pump(stream, lines):
        for line in stream:
            lines.put(line)
        lines.put(None)  # EOF

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                shell=isinstance(self.command, str),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
            self._lines = queue.Queue()
            threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()
        return self._proc

    def _kill(self):
        if self._proc is not None:
            self._proc.kill()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        self._proc, self._lines = None, None

    def request(self, payload):
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n")
                proc.stdin.flush()
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._kill()
                raise TimeoutError(f"{self.command!r} gave no reply within {self.timeout}s") from None
            except OSError:
                self._kill()
                raise
        if line is None:
            raise RuntimeError(f"{self.command!r} closed its output")
        return json.loads(line)

    def close(self):
        with self._lock:
            if self._proc is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass  # child already gone
                try:
                    self._proc.wait(timeout=self.timeout)
                except subprocess.TimeoutExpired:
                    self._proc.kill()
                self._proc, self._lines = None, None


class CommandClassifier:
    """Request {"text": ...}, response {"label": ..., "confidence": ...}."""

    def __init__(self, command, timeout=30):
        self._process = _JsonLineProcess(command, timeout=timeout)

    def classify(self, text):
        try:
            reply = self._process.request({"text": text})
            return str(reply["label"]), float(reply["confidence"])
        except Exception as e:
            print(f"   ⚠️  [Classifier] command failed ({e}) — treating text as safe")
            return SAFE_LABEL, 0.0

    def close(self):
        self._process.close()


class CommandOcr:
    """
    Request {"bbox": [x, y, w, h], "width": W, "height": H, "channels": C,
    "pixels": hex of the region's row-major bytes}; response
    {"objects": [{"text": ..., "bbox": [...], "confidence": ...}]}.
    Boxes outside the queried region are dropped.
    """

    def __init__(self, command, timeout=30):
        self._process = _JsonLineProcess(command, timeout=timeout)

    def read_region(self, image, bbox):
        x, y, w, h = bbox
        region = image[y:y + h, x:x + w]
        reply = self._process.request({
            "bbox":     list(bbox),
            "width":    int(image.shape[1]),
            "height":   int(image.shape[0]),
            "channels": int(image.shape[2]) if image.ndim == 3 else 1,
            "pixels":   region.tobytes().hex(),
        })
        objects = [
            TextObject(
                text=item["text"],
                bbox=tuple(item["bbox"]),
                predicted_label=SAFE_LABEL,
                confidence=float(item.get("confidence", 1.0)),
            )
            for item in reply.get("objects", [])
            if str(item.get("text", "")).strip()
        ]
        return [o for o in objects if o.inside(bbox)]

    def close(self):
        self._process.close()


class AnnotationOcr:
    """OCR answers taken from text boxes shipped with the annotation file."""

    def __init__(self, objects):
        self.objects = list(objects)

    def read_region(self, image, bbox):
        return [o for o in self.objects if o.inside(bbox)]


# ============================================================
# CAPC
# ============================================================
@dataclass(frozen=True)
class CapcResult:
    annotation: object                 # metadata.PsoAnnotation
    rewritten: bool = False
    warning: Optional[str] = None


def reading_order_text(objects):
    """Top-to-bottom, then left-to-right by bbox origin."""
    ordered = sorted(objects, key=lambda o: (o.bbox[1], o.bbox[0]))
    return " ".join(o.text.strip() for o in ordered).strip()


def _warn(detection, message):
    print(f"   ⚠️  [CAPC] PSO {detection.id} ({detection.label}): {message}")
    return CapcResult(annotation=detection, rewritten=False, warning=message)


def capc(detection, image, ocr, classifier, class_scores, table, threshold=DEFAULT_CAPC_THRESHOLD):
    if detection.modality != "multimodal":
        raise ValidationError(f"annotations[id={detection.id}]: CAPC only applies to multimodal detections")

    try:
        objects = list(ocr.read_region(image, detection.geometry.bbox))
    except Exception as e:
        return _warn(detection, f"OCR failed, label kept ({e})")

    text = reading_order_text(objects)
    if not text:
        return CapcResult(annotation=detection)

    classify = getattr(classifier, "classify", classifier)
    try:
        label, confidence = classify(text)
    except Exception as e:
        return _warn(detection, f"classifier failed, label kept ({e})")

    if confidence < threshold or label == detection.label:
        return CapcResult(annotation=detection)
    if label not in class_scores:
        return _warn(detection, f"classifier proposed {label!r} which has no sensitivity score, label kept")

    return CapcResult(annotation=relabel(detection, label, class_scores[label], table), rewritten=True)
