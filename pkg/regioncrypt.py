"""
PixelVeil — Region Crypto
Metadata + group chains -> protected image, and back again for whoever holds
the right chain.
  - regions rasterize to row-major flat pixel indices
  - contested pixels belong to the most sensitive PSO covering them
    (group desc, score desc, id asc), so every pixel is encrypted once
  - each PSO: AES-256-CBC under its group key K_l, PKCS#7, fresh IV,
    HMAC-SHA256 over iv || ciphertext with a key derived from K_l
  - the published buffer carries ciphertext bytes over owned pixels
"""
import os
from dataclasses import dataclass, field

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, hmac, padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from errors import IntegrityError, ValidationError
from keycore import DENIED, chain_segment

IV_BYTES  = 16
MAC_BYTES = 32
BLOCK_BITS = 128
MAC_INFO  = b"pixelveil:v1:pso-mac"


# ============================================================
# RASTER + OWNERSHIP
# ============================================================
def rasterize_region(annotation, width, height):
    annotation.geometry.validate(width, height, where=f"annotations[id={annotation.id}].geometry")
    return np.flatnonzero(annotation.geometry.mask(width, height).ravel())


def coords(indices, width):
    """Flat row-major indices -> [(x, y)]."""
    return [(int(i % width), int(i // width)) for i in indices]


def _priority(annotation):
    return (-annotation.group, -annotation.sensitivity_score, annotation.id)


@dataclass(eq=False)
class PixelOwnership:
    owner: np.ndarray                            # (height, width) int32, -1 = unowned
    pixels: dict = field(default_factory=dict)   # pso id -> sorted flat indices

    def count(self, pso_id):
        return int(self.pixels[pso_id].size)


def resolve_ownership(annotations, width, height):
    owner = np.full(width * height, -1, dtype=np.int32)
    pixels = {}
    for annotation in sorted(annotations, key=_priority):
        raster = annotation.geometry.mask(width, height).ravel()
        claim = raster & (owner < 0)
        owner[claim] = annotation.id
        pixels[annotation.id] = np.flatnonzero(claim)
    return PixelOwnership(owner=owner.reshape(height, width), pixels=pixels)


# ============================================================
# PER-PSO CIPHER
# ============================================================
@dataclass(frozen=True)
class EncryptedPso:
    pso_id: int
    group: int
    iv: bytes
    ciphertext: bytes
    mac: bytes
    pixel_count: int


def _mac_key(key):
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=MAC_INFO).derive(key)


def _mac(key, iv, ciphertext):
    h = hmac.HMAC(_mac_key(key), hashes.SHA256())
    h.update(iv + ciphertext)
    return h


def _write_pixels(image, pixels, data):
    flat = image.reshape(-1, image.shape[-1])
    flat[pixels] = np.frombuffer(data, dtype=np.uint8).reshape(-1, image.shape[-1])


def encrypt_pso(key, pixels, image, pso_id=0, group=0, iv=None):
    """(EncryptedPso, bytes to paint over the owned pixels)."""
    if pixels.size == 0:
        return EncryptedPso(pso_id=pso_id, group=group, iv=b"", ciphertext=b"", mac=b"", pixel_count=0), b""

    plaintext = image.reshape(-1, image.shape[-1])[pixels].tobytes()
    iv = iv if iv is not None else os.urandom(IV_BYTES)
    if len(iv) != IV_BYTES:
        raise ValidationError(f"iv: expected {IV_BYTES} bytes, got {len(iv)}")

    padder = padding.PKCS7(BLOCK_BITS).padder()
    padded = padder.update(plaintext) + padder.finalize()
    encryptor = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    ciphertext = encryptor.update(padded) + encryptor.finalize()

    blob = EncryptedPso(
        pso_id=pso_id,
        group=group,
        iv=iv,
        ciphertext=ciphertext,
        mac=_mac(key, iv, ciphertext).finalize(),
        pixel_count=int(pixels.size),
    )
    return blob, ciphertext[:len(plaintext)]


def decrypt_pso(key, blob, image, pixels):
    """Restore one PSO's owned pixels in place."""
    if blob.pixel_count == 0:
        return image
    if pixels.size != blob.pixel_count:
        raise IntegrityError(
            f"PSO {blob.pso_id}: blob covers {blob.pixel_count} pixels, region owns {pixels.size}",
            pso_id=blob.pso_id,
        )
    try:
        _mac(key, blob.iv, blob.ciphertext).verify(blob.mac)
    except InvalidSignature:
        raise IntegrityError(
            f"PSO {blob.pso_id}: authentication failed (wrong key or tampered data)", pso_id=blob.pso_id
        ) from None

    decryptor = Cipher(algorithms.AES(key), modes.CBC(blob.iv)).decryptor()
    padded = decryptor.update(blob.ciphertext) + decryptor.finalize()
    try:
        unpadder = padding.PKCS7(BLOCK_BITS).unpadder()
        plaintext = unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise IntegrityError(f"PSO {blob.pso_id}: bad padding after authentication", pso_id=blob.pso_id) from None
    if len(plaintext) != blob.pixel_count * image.shape[-1]:
        raise IntegrityError(f"PSO {blob.pso_id}: plaintext length mismatch", pso_id=blob.pso_id)

    _write_pixels(image, pixels, plaintext)
    return image


# ============================================================
# WHOLE IMAGES
# ============================================================
@dataclass(eq=False)
class ProtectedImage:
    pixels: np.ndarray           # scrambled (height, width, channels) uint8
    blobs: tuple
    metadata: object             # metadata.ImageMetadata
    ownership: PixelOwnership


def as_pixel_buffer(image, meta):
    buffer = np.asarray(image, dtype=np.uint8)
    if buffer.ndim == 2:
        buffer = buffer[..., None]
    if buffer.shape != meta.shape:
        raise ValidationError(f"image: shape {buffer.shape} does not match metadata {meta.shape}")
    return np.ascontiguousarray(buffer).copy()


def protect_image(image, meta, chains, iv_source=None):
    """Encrypt every PSO of `meta`; iv_source() pins IVs for reproducible output."""
    original = as_pixel_buffer(image, meta)
    group_count = meta.group_table.group_count
    by_group = {c.group: c for c in chains}
    missing = [g for g in range(1, group_count + 1) if g not in by_group]
    if missing:
        raise ValidationError(f"chains: missing group chain(s) {missing}")
    top = by_group[group_count]

    ownership = resolve_ownership(meta.annotations, meta.width, meta.height)
    scrambled = original.copy()
    blobs = []
    for annotation in sorted(meta.annotations, key=lambda a: a.id):
        owned = ownership.pixels[annotation.id]
        blob, noise = encrypt_pso(
            chain_segment(top, annotation.group),
            owned,
            original,
            pso_id=annotation.id,
            group=annotation.group,
            iv=iv_source() if iv_source and owned.size else None,
        )
        if noise:
            _write_pixels(scrambled, owned, noise)
        blobs.append(blob)

    return ProtectedImage(pixels=scrambled, blobs=tuple(blobs), metadata=meta, ownership=ownership)


def unlock_image(protected, recovered):
    """Decrypt every blob at or below the recovered group; the rest stays scrambled."""
    if recovered is None or recovered is DENIED:
        return protected.pixels.copy()
    level, chain = recovered
    if chain.group != level:
        raise ValidationError(f"recovered chain is for group {chain.group}, not {level}")

    output = protected.pixels.copy()
    for blob in protected.blobs:
        if blob.group > level or blob.pixel_count == 0:
            continue
        decrypt_pso(chain_segment(chain, blob.group), blob, output, protected.ownership.pixels[blob.pso_id])
    return output


def restored_mask(protected, level):
    """Pixels a holder of group `level` gets back in plaintext."""
    mask = np.zeros(protected.ownership.owner.shape, dtype=bool)
    flat = mask.ravel()
    for blob in protected.blobs:
        if blob.group <= level and blob.pixel_count:
            flat[protected.ownership.pixels[blob.pso_id]] = True
    return mask
