import itertools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from config import DEFAULT_CLASS_SCORES
from errors import ValidationError
from metadata import PsoAnnotation, RegionGeometry, assign_group
from postcorrect import (
    TEXT_RULES,
    AnnotationOcr,
    CommandClassifier,
    CommandOcr,
    CueTable,
    KeywordClassifier,
    TextObject,
    apply_textual_rules,
    capc,
    reading_order_text,
    reference_classifier,
    tokenize,
)

FIXTURES = Path(__file__).parent / "fixtures"


def T(text, x, label, y=0, w=20, h=10):
    return TextObject(text=text, bbox=(x, y, w, h), predicted_label=label)


# Each rule x {nearest match, non-nearest, wrong-label target, no cue}
GOLDEN_RULES = [
    ("dob-nearest",
     [T("DOB:", 0, "safe"), T("12/04/1990", 30, "date", w=40)],
     ["safe", "birthdate"]),
    ("dob-non-nearest",
     [T("DOB:", 0, "safe"), T("Lobby", 25, "safe"), T("12/04/1990", 100, "date", w=40)],
     ["safe", "safe", "date"]),
    ("dob-wrong-label",
     [T("Born", 0, "safe"), T("12/04/1990", 30, "receipt", w=40)],
     ["safe", "receipt"]),
    ("dob-no-cue",
     [T("Date:", 0, "safe"), T("12/04/1990", 30, "date", w=40)],
     ["safe", "date"]),
    ("name-nearest",
     [T("Name:", 0, "safe"), T("Alice", 25, "safe"), T("Lobby", 100, "safe")],
     ["safe", "name", "safe"]),
    ("name-non-nearest",
     [T("Name:", 0, "safe"), T("12/04/1990", 25, "date"), T("Alice", 100, "safe")],
     ["safe", "date", "safe"]),
    ("name-wrong-label",
     [T("Surname:", 0, "safe"), T("Smith", 25, "signature")],
     ["safe", "signature"]),
    ("name-no-cue",
     [T("Hello", 0, "safe"), T("Alice", 25, "safe")],
     ["safe", "safe"]),
    ("place-nearest",
     [T("Office:", 0, "safe"), T("Room 12", 25, "safe"), T("Alice", 100, "safe")],
     ["safe", "place", "safe"]),
    ("place-non-nearest",
     [T("City:", 0, "safe"), T("1990", 25, "date"), T("Springfield", 100, "safe")],
     ["safe", "date", "safe"]),
    ("place-wrong-label",
     [T("Office", 0, "safe"), T("Receipt", 25, "receipt")],
     ["safe", "receipt"]),
    ("place-no-cue",
     [T("Floor", 0, "safe"), T("Room", 25, "safe")],
     ["safe", "safe"]),
]


@pytest.mark.parametrize("objects, expected", [c[1:] for c in GOLDEN_RULES], ids=[c[0] for c in GOLDEN_RULES])
def test_textual_rules_golden(objects, expected):
    out = apply_textual_rules(objects, CueTable())
    assert [o.predicted_label for o in out] == expected
    assert [o.text for o in out] == [o.text for o in objects]


def test_textual_rules_empty():
    assert apply_textual_rules([], CueTable()) == []


def test_cue_matching_is_case_and_punctuation_insensitive():
    out = apply_textual_rules([T("d.o.b / BIRTHDAY!", 0, "safe"), T("01.01.2000", 25, "date")])
    assert out[1].predicted_label == "birthdate"


def test_first_rule_wins_on_shared_target():
    # "Alice" is nearest to both an identity and a location cue
    objects = [T("Name", 0, "safe"), T("Alice", 25, "safe"), T("City", 50, "safe")]
    assert [o.predicted_label for o in apply_textual_rules(objects)] == ["safe", "name", "safe"]


def test_target_carrying_a_cue_is_left_alone():
    objects = [T("Name:", 0, "safe"), T("Office", 25, "safe")]
    assert [o.predicted_label for o in apply_textual_rules(objects)] == ["safe", "safe"]


def test_multiword_cue():
    cues = CueTable.from_dict({"temporal": ["date of birth"]})
    out = apply_textual_rules([T("Date of birth:", 0, "safe"), T("1990", 25, "date")], cues)
    assert out[1].predicted_label == "birthdate"
    out = apply_textual_rules([T("birth of date", 0, "safe"), T("1990", 25, "date")], cues)
    assert out[1].predicted_label == "date"


def test_accented_cue_matches_whole_word_only():
    cues = CueTable.from_dict({"temporal": ["né", "née"]})
    assert tokenize("Née le") == ["née", "le"]
    out = apply_textual_rules([T("N 5", 0, "safe"), T("12/04/1990", 25, "date")], cues)
    assert out[1].predicted_label == "date"
    out = apply_textual_rules([T("Née:", 0, "safe"), T("12/04/1990", 25, "date")], cues)
    assert out[1].predicted_label == "birthdate"


POOL_TEXTS = ["DOB", "Name", "City", "Alice", "1990", "Lobby", "born", "office", "x"]
POOL_LABELS = ["safe", "date", "face", "receipt"]


def _random_objects(rng):
    return [
        T(str(rng.choice(POOL_TEXTS)), int(rng.integers(0, 200)), str(rng.choice(POOL_LABELS)), y=int(rng.integers(0, 200)))
        for _ in range(int(rng.integers(0, 8)))
    ]


def _exhaustive_oracle(objects, cues):
    """Every (cue object, candidate) pair; the candidate survives only at minimum distance."""
    labels = [o.predicted_label for o in objects]
    out = list(labels)
    done = set()
    for kind, target, result in TEXT_RULES:
        for i, j in itertools.product(range(len(objects)), repeat=2):
            if i == j or not cues.matches(kind, tokenize(objects[i].text)):
                continue
            d = math.dist(objects[i].centroid, objects[j].centroid)
            closer = [
                k for k in range(len(objects))
                if k != i and (math.dist(objects[i].centroid, objects[k].centroid), k) < (d, j)
            ]
            if closer or j in done or labels[j] != target or cues.any_cue(tokenize(objects[j].text)):
                continue
            out[j] = result
            done.add(j)
    return out


def test_textual_rules_match_exhaustive_oracle(rng):
    cues = CueTable()
    for _ in range(300):
        objects = _random_objects(rng)
        assert [o.predicted_label for o in apply_textual_rules(objects, cues)] == _exhaustive_oracle(objects, cues)


def test_textual_rules_are_idempotent_and_scoped(rng):
    cues = CueTable()
    for _ in range(300):
        objects = _random_objects(rng)
        once = apply_textual_rules(objects, cues)
        assert apply_textual_rules(once, cues) == once
        for before, after in zip(objects, once):
            if before.predicted_label != after.predicted_label:
                assert before.predicted_label in ("date", "safe")
                assert not cues.any_cue(tokenize(before.text))


def test_cue_table_validation():
    with pytest.raises(ValidationError, match="lowercase"):
        CueTable(temporal=frozenset({"DOB"}))
    with pytest.raises(ValidationError, match="at least one"):
        CueTable(location=frozenset())
    with pytest.raises(ValidationError, match="unknown cue kind"):
        CueTable.from_dict({"weather": ["rain"]})


def test_text_object_validation():
    with pytest.raises(ValidationError):
        TextObject(text="  ", bbox=(0, 0, 1, 1), predicted_label="safe")
    with pytest.raises(ValidationError):
        TextObject(text="a", bbox=(0, 0, 0, 1), predicted_label="safe")
    with pytest.raises(ValidationError, match="outside image"):
        T("a", 90, "safe").check_bounds(100, 100)


# ---------- classifiers ----------

def test_reference_classifier_examples():
    label, confidence = reference_classifier("passport republic of")
    assert label == "passport" and confidence > 0
    assert reference_classifier("") == ("safe", 0.0)
    assert reference_classifier("visa expiry passport no") == ("passport", 0.75)
    assert reference_classifier("BOARDING pass, gate 12") == ("ticket", 0.75)


def test_keyword_ties_break_lexicographically():
    clf = KeywordClassifier({"zeta": ["shared"], "alpha": ["shared"]})
    assert clf.classify("shared") == ("alpha", 1.0)


def test_keyword_classifier_rejects_empty_sets():
    with pytest.raises(ValidationError):
        KeywordClassifier({"passport": []})
    with pytest.raises(ValidationError, match="holds no word"):
        KeywordClassifier({"passport": ["--"]})


def test_multiword_keywords_match_as_a_run():
    clf = KeywordClassifier({"ticket": ("boarding pass", "gate")})
    assert clf.classify("BOARDING-PASS, gate 12") == ("ticket", 1.0)
    assert clf.classify("pass boarding gate") == ("ticket", 0.5)
    assert clf.classify("boarding pass") == ("ticket", 0.5)


def test_non_ascii_keywords():
    clf = KeywordClassifier({"passport": ("pasaporte", "nacionalidad", "número")})
    label, confidence = clf.classify("Número de pasaporte")
    assert label == "passport"
    assert confidence == pytest.approx(2 / 3)


def test_command_classifier_protocol():
    clf = CommandClassifier([sys.executable, str(FIXTURES / "echo_classifier.py")])
    try:
        assert clf.classify("Gate 12") == ("ticket", 0.9)
        assert clf.classify("nothing") == ("safe", 0.0)
    finally:
        clf.close()


def test_command_classifier_failure_degrades_to_safe(capsys):
    clf = CommandClassifier([sys.executable, "-c", "pass"])
    try:
        assert clf.classify("gate") == ("safe", 0.0)
    finally:
        clf.close()
    assert "⚠️" in capsys.readouterr().out


def test_command_ocr_drops_boxes_outside_the_query():
    ocr = CommandOcr([sys.executable, str(FIXTURES / "echo_ocr.py")])
    image = np.zeros((20, 30, 3), dtype=np.uint8)
    try:
        objects = ocr.read_region(image, (5, 5, 10, 10))
    finally:
        ocr.close()
    assert [o.text for o in objects] == ["Boarding"]


def test_silent_classifier_times_out_and_restarts(capsys):
    clf = CommandClassifier([sys.executable, str(FIXTURES / "stall_classifier.py")], timeout=1)
    try:
        started = time.monotonic()
        assert clf.classify("stall here") == ("safe", 0.0)
        assert time.monotonic() - started < 10
        assert "no reply within 1s" in capsys.readouterr().out
        assert clf.classify("Gate 12") == ("ticket", 0.9)
    finally:
        clf.close()


def test_silent_ocr_becomes_a_capc_warning(group_table):
    ocr = CommandOcr([sys.executable, "-c", "import time; time.sleep(60)"], timeout=1)
    detection = _detection("driver_license", group_table)
    image = np.zeros((20, 40, 3), dtype=np.uint8)
    try:
        started = time.monotonic()
        result = capc(detection, image, ocr, reference_classifier, DEFAULT_CLASS_SCORES, group_table)
        assert time.monotonic() - started < 10
    finally:
        ocr.close()
    assert result.annotation == detection
    assert "OCR failed" in result.warning


# ---------- CAPC ----------

def _detection(label, table, bbox=(0, 0, 40, 20)):
    score = DEFAULT_CLASS_SCORES[label]
    return PsoAnnotation(
        id=0,
        label=label,
        modality="multimodal",
        geometry=RegionGeometry.from_bbox(*bbox),
        confidence=0.9,
        sensitivity_score=score,
        group=assign_group(score, table),
    )


def test_capc_student_id_over_driver_license(group_table):
    ocr = AnnotationOcr([
        TextObject("Student", (2, 10, 10, 5), "safe"),
        TextObject("University of Trento", (2, 2, 20, 5), "safe"),
    ])
    result = capc(_detection("driver_license", group_table), None, ocr, reference_classifier,
                  DEFAULT_CLASS_SCORES, group_table)
    assert result.rewritten
    assert result.annotation.label == "student_id"
    assert result.annotation.sensitivity_score == 0.55
    assert result.annotation.group == 3
    assert result.warning is None


def test_capc_ticket_over_receipt(group_table):
    ocr = AnnotationOcr([TextObject("boarding pass gate 12", (1, 1, 30, 8), "safe")])
    result = capc(_detection("receipt", group_table), None, ocr, reference_classifier,
                  DEFAULT_CLASS_SCORES, group_table)
    assert result.annotation.label == "ticket"
    assert result.annotation.group == assign_group(DEFAULT_CLASS_SCORES["ticket"], group_table)


def test_capc_empty_ocr_keeps_label(group_table):
    detection = _detection("driver_license", group_table)
    result = capc(detection, None, AnnotationOcr([]), reference_classifier, DEFAULT_CLASS_SCORES, group_table)
    assert result.annotation == detection and not result.rewritten and result.warning is None


def test_capc_ignores_text_outside_the_region(group_table):
    ocr = AnnotationOcr([TextObject("student university", (50, 0, 10, 5), "safe")])
    result = capc(_detection("driver_license", group_table), None, ocr, reference_classifier,
                  DEFAULT_CLASS_SCORES, group_table)
    assert result.annotation.label == "driver_license"


def test_capc_ocr_failure_is_a_warning(group_table, capsys):
    class BrokenOcr:
        def read_region(self, image, bbox):
            raise RuntimeError("tesseract missing")

    detection = _detection("driver_license", group_table)
    result = capc(detection, None, BrokenOcr(), reference_classifier, DEFAULT_CLASS_SCORES, group_table)
    assert result.annotation == detection
    assert "tesseract missing" in result.warning
    assert "⚠️" in capsys.readouterr().out


def test_capc_zero_confidence_classifier_is_identity(group_table):
    ocr = AnnotationOcr([TextObject("anything at all", (1, 1, 10, 5), "safe")])
    for label in ("driver_license", "receipt", "ticket"):
        detection = _detection(label, group_table)
        result = capc(detection, None, ocr, lambda text: ("passport", 0.0), DEFAULT_CLASS_SCORES, group_table)
        assert result.annotation == detection


def test_capc_threshold_is_inclusive(group_table):
    ocr = AnnotationOcr([TextObject("text", (1, 1, 10, 5), "safe")])
    detection = _detection("receipt", group_table)
    below = capc(detection, None, ocr, lambda t: ("ticket", 0.49), DEFAULT_CLASS_SCORES, group_table)
    at = capc(detection, None, ocr, lambda t: ("ticket", 0.5), DEFAULT_CLASS_SCORES, group_table)
    assert below.annotation.label == "receipt"
    assert at.annotation.label == "ticket"


def test_capc_reads_top_to_bottom_then_left_to_right(group_table):
    seen = []
    ocr = AnnotationOcr([
        TextObject("third", (1, 10, 5, 5), "safe"),
        TextObject("second", (20, 1, 5, 5), "safe"),
        TextObject("first", (1, 1, 5, 5), "safe"),
    ])
    capc(_detection("receipt", group_table), None, ocr, lambda t: seen.append(t) or ("safe", 0.0),
         DEFAULT_CLASS_SCORES, group_table)
    assert seen == ["first second third"]
    assert reading_order_text([]) == ""


def test_capc_unscored_label_is_kept_with_warning(group_table):
    ocr = AnnotationOcr([TextObject("text", (1, 1, 10, 5), "safe")])
    result = capc(_detection("receipt", group_table), None, ocr, lambda t: ("menu", 0.9),
                  DEFAULT_CLASS_SCORES, group_table)
    assert result.annotation.label == "receipt"
    assert "menu" in result.warning


def test_capc_only_for_multimodal(case_meta, group_table):
    with pytest.raises(ValidationError, match="multimodal"):
        capc(case_meta.annotations[2], None, AnnotationOcr([]), reference_classifier,
             DEFAULT_CLASS_SCORES, group_table)
