from dataclasses import replace

import numpy as np
import pytest

from conftest import CASE_STUDY_GROUPS, random_metadata
from errors import IntegrityError, ValidationError
from keycore import DENIED, build_group_chains, chain_segment, recover_max_group, register_user
from metadata import ImageMetadata, PsoAnnotation, RegionGeometry
from oracles import ownership_oracle, restored_oracle
from regioncrypt import (
    coords,
    decrypt_pso,
    encrypt_pso,
    protect_image,
    rasterize_region,
    resolve_ownership,
    restored_mask,
    unlock_image,
)


def _counter_ivs():
    state = {"n": 0}

    def next_iv():
        state["n"] += 1
        return state["n"].to_bytes(16, "big")
    return next_iv


# ---------- raster ----------

def test_rasterize_bbox_is_row_major():
    pso = PsoAnnotation(0, "name", "textual", RegionGeometry.from_bbox(1, 1, 2, 2), 0.9, 0.85, 4)
    pixels = rasterize_region(pso, 4, 4)
    assert pixels.tolist() == [5, 6, 9, 10]
    assert coords(pixels, 4) == [(1, 1), (2, 1), (1, 2), (2, 2)]


def test_rasterize_rejects_out_of_bounds():
    pso = PsoAnnotation(0, "name", "textual", RegionGeometry.from_bbox(3, 3, 2, 2), 0.9, 0.85, 4)
    with pytest.raises(ValidationError, match="outside image"):
        rasterize_region(pso, 4, 4)


# ---------- ownership ----------

def test_ownership_matches_oracle(rng):
    for _ in range(1000):
        width, height = (int(v) for v in rng.integers(1, 129, size=2))
        meta = random_metadata(rng, width, height)
        ownership = resolve_ownership(meta.annotations, width, height)
        expected = ownership_oracle(meta.annotations, width, height)
        np.testing.assert_array_equal(ownership.owner, expected)
        claimed = sum(ownership.count(a.id) for a in meta.annotations)
        assert claimed == int((expected >= 0).sum())


def test_case_study_face_is_carved_out_of_person(case_meta):
    ownership = resolve_ownership(case_meta.annotations, case_meta.width, case_meta.height)
    assert ownership.count(1) == 20 * 30 - 10 * 10
    assert ownership.count(4) == 10 * 10
    assert ownership.owner[10, 38] == 4


def test_equal_group_and_score_tie_goes_to_lower_id():
    box = RegionGeometry.from_bbox(0, 0, 4, 4)
    psos = [
        PsoAnnotation(0, "a", "textual", box, 0.9, 0.5, 2),
        PsoAnnotation(1, "b", "textual", box, 0.9, 0.5, 2),
    ]
    ownership = resolve_ownership(psos, 4, 4)
    assert ownership.count(0) == 16
    assert ownership.count(1) == 0


# ---------- per-PSO cipher ----------

@pytest.mark.parametrize("channels", [1, 3, 4])
def test_ciphertext_length_follows_padding(channels, rng):
    key = bytes(32)
    for n in range(1, 65):
        image = rng.integers(0, 256, size=(1, n, channels), dtype=np.uint8)
        blob, noise = encrypt_pso(key, np.arange(n), image)
        assert len(blob.ciphertext) == -(-(n * channels + 1) // 16) * 16
        assert len(noise) == n * channels
        assert blob.pixel_count == n


def test_fresh_iv_per_encryption(case_image):
    key = bytes(range(32))
    pixels = np.arange(40)
    first, _ = encrypt_pso(key, pixels, case_image)
    second, _ = encrypt_pso(key, pixels, case_image)
    assert first.iv != second.iv
    assert first.ciphertext != second.ciphertext


def test_decrypt_restores_pixels(case_image):
    key = bytes(range(32))
    pixels = np.arange(100, 260)
    blob, noise = encrypt_pso(key, pixels, case_image, pso_id=3, group=2)
    scrambled = case_image.copy()
    scrambled.reshape(-1, 3)[pixels] = np.frombuffer(noise, dtype=np.uint8).reshape(-1, 3)
    assert not np.array_equal(scrambled, case_image)
    decrypt_pso(key, blob, scrambled, pixels)
    np.testing.assert_array_equal(scrambled, case_image)


def test_wrong_key_names_the_pso(case_image):
    pixels = np.arange(16)
    blob, _ = encrypt_pso(bytes(32), pixels, case_image, pso_id=5, group=1)
    with pytest.raises(IntegrityError) as info:
        decrypt_pso(b"\x01" * 32, blob, case_image.copy(), pixels)
    assert info.value.pso_id == 5


def test_tampered_ciphertext_fails(case_image):
    pixels = np.arange(16)
    blob, _ = encrypt_pso(bytes(32), pixels, case_image, pso_id=2)
    flipped = bytes([blob.ciphertext[0] ^ 1]) + blob.ciphertext[1:]
    with pytest.raises(IntegrityError, match="authentication failed"):
        decrypt_pso(bytes(32), replace(blob, ciphertext=flipped), case_image.copy(), pixels)
    with pytest.raises(IntegrityError, match="owns"):
        decrypt_pso(bytes(32), blob, case_image.copy(), np.arange(15))


def test_empty_region_has_empty_blob(case_image):
    blob, noise = encrypt_pso(bytes(32), np.array([], dtype=np.int64), case_image, pso_id=1, group=3)
    assert (blob.pixel_count, blob.ciphertext, noise) == (0, b"", b"")


def test_bad_iv_length(case_image):
    with pytest.raises(ValidationError, match="iv"):
        encrypt_pso(bytes(32), np.arange(4), case_image, iv=b"short")


# ---------- whole images ----------

def test_no_annotations_is_identity(case_image):
    meta = ImageMetadata(image_id="empty", width=64, height=48, channels=3)
    chains = build_group_chains(4)
    protected = protect_image(case_image, meta, chains)
    assert protected.blobs == ()
    np.testing.assert_array_equal(protected.pixels, case_image)
    np.testing.assert_array_equal(unlock_image(protected, (4, chains[3])), case_image)


def test_case_study_blob_groups(case_meta, case_image):
    protected = protect_image(case_image, case_meta, build_group_chains(4))
    assert [b.group for b in protected.blobs] == CASE_STUDY_GROUPS
    assert [b.pso_id for b in protected.blobs] == list(range(8))


def test_progressive_unlock(case_meta, case_image, four_level_system):
    state, store = four_level_system
    protected = protect_image(case_image, case_meta, state.chains())
    outside = ownership_oracle(case_meta.annotations, 64, 48) < 0
    np.testing.assert_array_equal(protected.pixels[outside], case_image[outside])

    previous = np.zeros((48, 64), dtype=bool)
    for level in range(1, 5):
        recovered = recover_max_group(register_user(state, f"u{level}", [f"a{level}"]), store)
        assert recovered[0] == level
        output = unlock_image(protected, recovered)
        restored = restored_oracle(case_meta.annotations, 64, 48, level)
        np.testing.assert_array_equal(restored_mask(protected, level), restored)
        np.testing.assert_array_equal(output[restored], case_image[restored])
        np.testing.assert_array_equal(output[~restored], protected.pixels[~restored])
        assert (previous & ~restored).sum() == 0
        previous = restored
    np.testing.assert_array_equal(output, case_image)


@pytest.mark.parametrize("recovered", [None, DENIED])
def test_nothing_recovered_returns_the_scrambled_image(case_meta, case_image, recovered):
    protected = protect_image(case_image, case_meta, build_group_chains(4))
    output = unlock_image(protected, recovered)
    np.testing.assert_array_equal(output, protected.pixels)
    assert output is not protected.pixels


def test_pinned_ivs_reproduce_output(case_meta, case_image):
    chains = build_group_chains(4)
    a = protect_image(case_image, case_meta, chains, iv_source=_counter_ivs())
    b = protect_image(case_image, case_meta, chains, iv_source=_counter_ivs())
    assert a.blobs == b.blobs
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_protect_needs_every_group_chain(case_meta, case_image):
    with pytest.raises(ValidationError, match="missing group chain"):
        protect_image(case_image, case_meta, build_group_chains(3))


def test_protect_checks_image_shape(case_meta):
    with pytest.raises(ValidationError, match="does not match"):
        protect_image(np.zeros((48, 64, 4), dtype=np.uint8), case_meta, build_group_chains(4))


def test_grayscale_plane_is_accepted(rng):
    meta = random_metadata(rng, 20, 10, channels=1, max_psos=4)
    image = rng.integers(0, 256, size=(10, 20), dtype=np.uint8)
    chains = build_group_chains(4)
    protected = protect_image(image, meta, chains)
    np.testing.assert_array_equal(unlock_image(protected, (4, chains[3]))[..., 0], image)


def test_mismatched_recovery_is_rejected(case_meta, case_image):
    chains = build_group_chains(4)
    protected = protect_image(case_image, case_meta, chains)
    with pytest.raises(ValidationError):
        unlock_image(protected, (3, chains[1]))


def test_lower_chain_cannot_open_higher_segment(case_meta, case_image):
    chains = build_group_chains(4)
    protected = protect_image(case_image, case_meta, chains)
    top_blob = next(b for b in protected.blobs if b.group == 4)
    with pytest.raises(IntegrityError):
        decrypt_pso(
            chain_segment(chains[2], 3),
            top_blob,
            protected.pixels.copy(),
            protected.ownership.pixels[top_blob.pso_id],
        )


def test_scrambled_bytes_look_uniform():
    image = np.zeros((64, 64, 3), dtype=np.uint8)
    meta = ImageMetadata(
        image_id="flat",
        width=64,
        height=64,
        channels=3,
        annotations=[PsoAnnotation(0, "name", "textual", RegionGeometry.from_bbox(0, 0, 64, 64), 0.9, 0.85, 4)],
    )
    protected = protect_image(image, meta, build_group_chains(4))
    data = protected.pixels.ravel()
    counts = np.bincount(data, minlength=256)
    assert (data == 0).mean() < 0.02
    assert abs(data.mean() - 127.5) < 5
    assert counts.max() < 100


@pytest.mark.slow
def test_random_round_trips(rng):
    chains = build_group_chains(4)
    for _ in range(100):
        side = np.exp(rng.uniform(0, np.log(1024), size=2)).astype(int) + 1
        width, height = (int(min(v, 1024)) for v in side)
        meta = random_metadata(rng, width, height, max_psos=12)
        image = rng.integers(0, 256, size=meta.shape, dtype=np.uint8)
        protected = protect_image(image, meta, chains)
        np.testing.assert_array_equal(unlock_image(protected, (4, chains[3])), image)
