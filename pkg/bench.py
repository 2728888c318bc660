"""
PixelVeil — Benchmark Harness
Times protect/unlock at desk scale and accounts for storage overhead.

    python bench.py --count 50 --seed 7 --out bench-out/
    python bench.py --corpus my-images/          # <stem>.png + <stem>.json pairs

Every measurement runs once for warm-up, then `repeats` times; the median
is reported. Encrypt time covers protect_image + writing the container.
Decrypt time at level k covers key recovery + unlock_image for a user whose
only attribute reaches group k.

CSV columns: image_id,pixels,encrypt_s,decrypt_s_1..decrypt_s_L,clean_bytes,container_bytes
"""
import argparse
import csv
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from errors import PixelVeilError, ValidationError
from keycore import recover_max_group, register_user, setup_system
from metadata import (
    DEFAULT_THRESHOLDS,
    ImageMetadata,
    PsoAnnotation,
    RegionGeometry,
    SensitivityGroupTable,
    assign_group,
)
from regioncrypt import protect_image, unlock_image
from repository import CONTAINER_SUFFIX, compressed_size, load_container, store_container

load_dotenv()

if sys.platform == "win32" and hasattr(sys.stdout, "reconfigure"):
    sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    sys.stderr.reconfigure(encoding="utf-8", errors="replace")

DEFAULT_REPEATS = 3
MEAN_PSOS       = 5.6
MAX_PSOS        = 12
MIN_SIDE        = 32
MAX_SIDE        = 384

# Synthetic classes: (label, modality, score)
SYNTH_CLASSES = (
    ("driver_license", "multimodal", 0.25),
    ("person",         "visual",     0.30),
    ("location",       "textual",    0.40),
    ("date",           "textual",    0.60),
    ("face",           "visual",     0.70),
    ("birthdate",      "textual",    0.80),
    ("name",           "textual",    0.85),
    ("signature",      "visual",     0.90),
)


@dataclass
class BenchRecord:
    image_id: str
    pixels: int = 0                      # encrypted (owned) pixel total
    encrypt_s: float = float("nan")
    decrypt_s: tuple = ()                # per key level 1..L
    clean_bytes: int = 0
    container_bytes: int = 0
    channels: int = 3
    error: Optional[str] = None

    @property
    def encrypted_bytes(self):
        return self.pixels * self.channels

    @property
    def overhead_bytes(self):
        return self.container_bytes - self.clean_bytes


# ============================================================
# SYNTHETIC CORPUS
# ============================================================
def _ellipse(width, height, box):
    x, y, w, h = box
    yy, xx = np.ogrid[:height, :width]
    cx, cy = x + (w - 1) / 2.0, y + (h - 1) / 2.0
    rx, ry = max(w / 2.0, 0.5), max(h / 2.0, 0.5)
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    mask[y + h // 2, x + w // 2] = True
    return mask


def synthesize_image(rng, index, table, min_side=MIN_SIDE, max_side=MAX_SIDE, channels=3):
    """Gradient + mild noise image with a Poisson(5.6) number of PSOs."""
    side = int(round(np.exp(rng.uniform(np.log(min_side), np.log(max_side)))))
    width = side
    height = max(int(side * rng.uniform(0.75, 1.0)), 8)

    ramp = np.linspace(0, 200, width, dtype=np.float64)[None, :, None]
    base = np.broadcast_to(ramp, (height, width, channels))
    noise = rng.integers(0, 24, size=(height, width, channels))
    image = np.clip(base + noise, 0, 255).astype(np.uint8)

    count = int(min(max(rng.poisson(MEAN_PSOS), 1), MAX_PSOS))
    annotations = []
    for pso_id in range(count):
        label, modality, score = SYNTH_CLASSES[int(rng.integers(len(SYNTH_CLASSES)))]
        w = max(int(width * rng.uniform(0.08, 0.3)), 1)
        h = max(int(height * rng.uniform(0.08, 0.3)), 1)
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        if modality == "visual":
            geometry = RegionGeometry.from_mask(_ellipse(width, height, (x, y, w, h)))
        else:
            geometry = RegionGeometry.from_bbox(x, y, w, h)
        annotations.append(PsoAnnotation(
            id=pso_id,
            label=label,
            modality=modality,
            geometry=geometry,
            confidence=float(rng.uniform(0.6, 1.0)),
            sensitivity_score=score,
            group=assign_group(score, table),
        ))

    meta = ImageMetadata(
        image_id=f"synth-{index:04d}",
        width=width,
        height=height,
        channels=channels,
        annotations=annotations,
        group_table=table,
    )
    return image, meta


def synthesize_corpus(count, seed=0, table=None, min_side=MIN_SIDE, max_side=MAX_SIDE):
    rng = np.random.default_rng(seed)
    table = table or SensitivityGroupTable(DEFAULT_THRESHOLDS)
    return [synthesize_image(rng, i, table, min_side, max_side) for i in range(count)]


def load_corpus(directory, class_scores, table):
    """<stem>.png + <stem>.json pairs run through the annotation pipeline."""
    from ingest import build_metadata, load_annotation_file, read_image

    corpus = []
    for annotation_path in sorted(Path(directory).glob("*.json")):
        image_path = annotation_path.with_suffix(".png")
        if not image_path.exists():
            print(f"   ⚠️  [Bench] {annotation_path.name}: no matching PNG, skipped")
            continue
        image = read_image(image_path)
        result = build_metadata(load_annotation_file(annotation_path), class_scores, table, image=image)
        corpus.append((image, result.metadata))
    return corpus


# ============================================================
# TIMING
# ============================================================
def _median_time(fn, repeats):
    fn()  # warm-up, not counted
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def bench_keys(group_count):
    """One key store plus one user per level; user `levelk` reaches group k."""
    roles = {f"level{k}": k for k in range(1, group_count + 1)}
    state, store = setup_system(roles, group_count)
    users = {k: register_user(state, f"bench-user-{k}", [f"level{k}"]) for k in range(1, group_count + 1)}
    return state, store, users


def bench_image(image, meta, state, store, users, out_dir, repeats=DEFAULT_REPEATS):
    record = BenchRecord(image_id=meta.image_id, channels=meta.channels)
    path = Path(out_dir) / f"{meta.image_id}{CONTAINER_SUFFIX}"
    chains = state.chains()
    try:
        def encrypt():
            store_container(protect_image(image, meta, chains), path)

        record.encrypt_s = _median_time(encrypt, repeats)
        protected = load_container(path)

        decrypt = []
        for level in range(1, meta.group_table.group_count + 1):
            user = users[level]
            decrypt.append(_median_time(lambda: unlock_image(protected, recover_max_group(user, store)), repeats))

        record.decrypt_s = tuple(decrypt)
        record.pixels = sum(b.pixel_count for b in protected.blobs)
        record.clean_bytes = compressed_size(image)
        record.container_bytes = path.stat().st_size
    except (PixelVeilError, OSError) as e:
        record.error = f"{type(e).__name__}: {e}"
        print(f"   ❌ [Bench] {meta.image_id}: {record.error}")
    return record


def run_bench(corpus, group_count=None, out_dir=None, repeats=DEFAULT_REPEATS, parallel=False, workers=4):
    """Time every (image, metadata) pair of the corpus -> [BenchRecord]."""
    if not corpus:
        return []
    group_count = group_count or corpus[0][1].group_table.group_count
    for _, meta in corpus:
        if meta.group_table.group_count != group_count:
            raise ValidationError(f"{meta.image_id}: uses {meta.group_table.group_count} groups, bench keys have {group_count}")
    state, store, users = bench_keys(group_count)

    with tempfile.TemporaryDirectory(prefix="pixelveil-bench-") as scratch:
        target = Path(out_dir) if out_dir else Path(scratch)
        target.mkdir(parents=True, exist_ok=True)
        if parallel:
            print(f"⚡ [Bench] PARALLEL mode ({workers} workers) — timings are contended, not comparable")
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(bench_image, image, meta, state, store, users, target, repeats)
                    for image, meta in corpus
                ]
                return [f.result() for f in futures]
        return [bench_image(image, meta, state, store, users, target, repeats) for image, meta in corpus]


# ============================================================
# ANALYSIS
# ============================================================
def fit_linear(points):
    """Ordinary least squares -> (slope, intercept, r_squared)."""
    data = np.asarray(list(points), dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != 2:
        raise ValidationError("fit_linear: need at least two (x, y) points")
    x, y = data[:, 0], data[:, 1]
    if np.unique(x).size < 2:
        raise ValidationError("fit_linear: need at least two distinct x values")

    dx, dy = x - x.mean(), y - y.mean()
    slope = float((dx * dy).sum() / (dx * dx).sum())
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float((dy * dy).sum())
    if ss_tot == 0.0:
        return slope, intercept, 1.0
    residual = y - (slope * x + intercept)
    return slope, intercept, float(1.0 - (residual * residual).sum() / ss_tot)


def summarize(records):
    ok = [r for r in records if r.error is None]
    summary = {"images": len(records), "failed": len(records) - len(ok)}
    if not ok:
        return summary
    levels = len(ok[0].decrypt_s)
    summary["median_encrypt_s"] = float(np.median([r.encrypt_s for r in ok]))
    summary["median_decrypt_s"] = [float(np.median([r.decrypt_s[k] for r in ok])) for k in range(levels)]
    summary["clean_bytes"] = sum(r.clean_bytes for r in ok)
    summary["container_bytes"] = sum(r.container_bytes for r in ok)
    try:
        summary["time_fit"] = fit_linear((r.pixels, r.encrypt_s) for r in ok)
        summary["storage_fit"] = fit_linear((r.encrypted_bytes, r.overhead_bytes) for r in ok)
    except ValidationError as e:
        print(f"   ⚠️  [Bench] no linear fit: {e}")
    return summary


def csv_columns(group_count):
    return (
        ["image_id", "pixels", "encrypt_s"]
        + [f"decrypt_s_{k}" for k in range(1, group_count + 1)]
        + ["clean_bytes", "container_bytes"]
    )


def write_csv(records, path, group_count):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(csv_columns(group_count))
        for r in records:
            if r.error is not None:
                continue
            writer.writerow(
                [r.image_id, r.pixels, f"{r.encrypt_s:.6f}"]
                + [f"{t:.6f}" for t in r.decrypt_s]
                + [r.clean_bytes, r.container_bytes]
            )
    return path


def print_summary(summary):
    print("\n" + "=" * 55)
    print(f"📊 BENCH — {summary['images']} image(s), {summary['failed']} failed")
    if "median_encrypt_s" not in summary:
        print("=" * 55)
        return
    print(f"   encrypt (median): {summary['median_encrypt_s'] * 1000:8.2f} ms")
    for level, t in enumerate(summary["median_decrypt_s"], 1):
        print(f"   decrypt key {level} : {t * 1000:8.2f} ms")
    clean, container = summary["clean_bytes"], summary["container_bytes"]
    growth = (container - clean) / clean * 100 if clean else 0.0
    print(f"   storage: {clean / 1e6:.2f} MB clean → {container / 1e6:.2f} MB protected (+{growth:.1f}%)")
    if "time_fit" in summary:
        slope, _, r2 = summary["time_fit"]
        print(f"   time vs pixels   : {slope * 1e6:.3f} µs/pixel, R²={r2:.3f}")
        slope, _, r2 = summary["storage_fit"]
        print(f"   overhead vs bytes: {slope:.3f} B/B, R²={r2:.3f}")
    print("=" * 55)


# ============================================================
# ENTRY POINT
# ============================================================
def build_parser(parser=None):
    parser = parser or argparse.ArgumentParser(description="PixelVeil benchmark harness")
    parser.add_argument("--corpus", help="Directory of <stem>.png + <stem>.json pairs (default: synthetic)")
    parser.add_argument("--count", type=int, default=50, help="Synthetic images to generate")
    parser.add_argument("--seed", type=int, default=0, help="Synthetic corpus seed")
    parser.add_argument("--max-side", type=int, default=MAX_SIDE, help="Largest synthetic image side")
    parser.add_argument("--repeats", type=int, default=DEFAULT_REPEATS, help="Timed runs per measurement")
    parser.add_argument("--parallel", action="store_true", help="Time images concurrently (labeled in output)")
    parser.add_argument("--out", default="bench-out", help="Directory for containers and bench.csv")
    parser.add_argument("--config", help="Settings file (thresholds, class scores)")
    return parser


def run_from_args(args):
    from config import load_config

    config = load_config(args.config)
    if args.corpus:
        print(f"📂 [Bench] loading corpus from {args.corpus}")
        corpus = load_corpus(args.corpus, config.class_scores, config.group_table)
    else:
        print(f"🧪 [Bench] synthesizing {args.count} image(s), seed={args.seed}")
        corpus = synthesize_corpus(args.count, args.seed, config.group_table, max_side=args.max_side)

    out = Path(args.out)
    records = run_bench(
        corpus,
        group_count=config.group_count,
        out_dir=out / "containers",
        repeats=args.repeats,
        parallel=args.parallel,
    )
    csv_path = write_csv(records, out / "bench.csv", config.group_count)
    summary = summarize(records)
    print_summary(summary)
    print(f"✅ CSV → {csv_path}")
    return 0 if summary["failed"] == 0 else 1


if __name__ == "__main__":
    sys.exit(run_from_args(build_parser().parse_args()))
