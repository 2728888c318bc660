"""Independent reference computations the tests compare against."""
import numpy as np


def rect_mask(width, height, x, y, w, h):
    mask = np.zeros((height, width), dtype=bool)
    mask[y:y + h, x:x + w] = True
    return mask


def ownership_oracle(annotations, width, height):
    """Per pixel: highest (group, score, -id) covering annotation wins, -1 if none."""
    if not annotations:
        return np.full((height, width), -1, dtype=np.int64)
    keys = np.array([
        a.group * 10**9 + int(round(a.sensitivity_score * 10**4)) * 10**4 + (9999 - a.id)
        for a in annotations
    ], dtype=np.int64)
    ids = np.array([a.id for a in annotations], dtype=np.int64)
    masks = np.stack([a.geometry.mask(width, height) for a in annotations])
    scored = np.where(masks, keys[:, None, None], -1)
    winner = scored.argmax(axis=0)
    covered = masks.any(axis=0)
    return np.where(covered, ids[winner], -1)


def restored_oracle(annotations, width, height, level):
    """Pixels owned by a PSO of group <= level."""
    owner = ownership_oracle(annotations, width, height)
    groups = {a.id: a.group for a in annotations}
    allowed = [pso for pso, g in groups.items() if g <= level]
    return np.isin(owner, allowed)
