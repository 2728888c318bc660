import numpy as np
import pytest

from keycore import reset_crypto_counters, setup_system
from metadata import (
    ImageMetadata,
    PsoAnnotation,
    RegionGeometry,
    SensitivityGroupTable,
    assign_group,
)
from oracles import rect_mask

CASE_WIDTH, CASE_HEIGHT = 64, 48

# (label, modality, score, (x, y, w, h)); the face sits inside the person
CASE_STUDY = (
    ("driver_license", "multimodal", 0.25, (2, 2, 20, 12)),
    ("person",         "visual",     0.30, (30, 4, 20, 30)),
    ("location",       "textual",    0.40, (2, 18, 16, 5)),
    ("date",           "textual",    0.60, (2, 26, 16, 5)),
    ("face",           "visual",     0.70, (34, 6, 10, 10)),
    ("birthdate",      "textual",    0.80, (2, 34, 16, 5)),
    ("name",           "textual",    0.85, (22, 34, 6, 5)),
    ("signature",      "visual",     0.90, (52, 36, 10, 8)),
)
CASE_STUDY_GROUPS = [1, 2, 2, 3, 3, 4, 4, 4]


def case_study_metadata(table=None):
    table = table or SensitivityGroupTable()
    annotations = []
    for pso_id, (label, modality, score, box) in enumerate(CASE_STUDY):
        if modality == "visual":
            geometry = RegionGeometry.from_mask(rect_mask(CASE_WIDTH, CASE_HEIGHT, *box))
        else:
            geometry = RegionGeometry.from_bbox(*box)
        annotations.append(PsoAnnotation(
            id=pso_id,
            label=label,
            modality=modality,
            geometry=geometry,
            confidence=0.9,
            sensitivity_score=score,
            group=assign_group(score, table),
        ))
    return ImageMetadata(
        image_id="case-study",
        width=CASE_WIDTH,
        height=CASE_HEIGHT,
        channels=3,
        annotations=annotations,
        group_table=table,
    )


@pytest.fixture(autouse=True)
def _fresh_counters():
    reset_crypto_counters()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def group_table():
    return SensitivityGroupTable()


@pytest.fixture
def case_meta(group_table):
    return case_study_metadata(group_table)


@pytest.fixture
def case_image():
    rng = np.random.default_rng(7)
    return rng.integers(0, 256, size=(CASE_HEIGHT, CASE_WIDTH, 3), dtype=np.uint8)


@pytest.fixture
def four_level_system():
    """Roles a1..a4, role ak reaching group k."""
    return setup_system({f"a{k}": k for k in range(1, 5)}, 4)


@pytest.fixture
def three_role_system():
    return setup_system({"a1": 1, "a2": 2, "a3": 3}, 3)


# A handful of repeated scores so ties on score (and on group) come up often
_LAYOUT_SCORES = (0.1, 0.25, 0.3, 0.5, 0.5, 0.6, 0.75, 0.8, 0.8, 1.0)


def random_metadata(rng, width, height, table=None, max_psos=8, channels=3):
    """Random overlapping PSO layout; visual PSOs get blobby masks, the rest boxes."""
    table = table or SensitivityGroupTable()
    annotations = []
    for pso_id in range(int(rng.integers(0, max_psos + 1))):
        w = int(rng.integers(1, width + 1))
        h = int(rng.integers(1, height + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        modality = str(rng.choice(["visual", "textual", "multimodal"]))
        if modality == "visual":
            mask = rect_mask(width, height, x, y, w, h) & (rng.random((height, width)) < 0.7)
            mask[y, x] = True
            geometry = RegionGeometry.from_mask(mask)
        else:
            geometry = RegionGeometry.from_bbox(x, y, w, h)
        score = float(rng.choice(_LAYOUT_SCORES))
        annotations.append(PsoAnnotation(
            id=pso_id,
            label=f"class{pso_id}",
            modality=modality,
            geometry=geometry,
            confidence=0.9,
            sensitivity_score=score,
            group=assign_group(score, table),
        ))
    return ImageMetadata(
        image_id="random",
        width=width,
        height=height,
        channels=channels,
        annotations=annotations,
        group_table=table,
    )
