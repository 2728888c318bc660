"""
PixelVeil — Encrypted Data Repository
Bit-exact persistence for everything PixelVeil writes:
  - protected containers (S2SC): metadata + blob index header, deflated
    scrambled pixels, concatenated ciphertexts, SHA-256 footer
  - key files (S2SK): the public wrapped-key store, the key-service state
    and per-user keys, told apart by a kind byte
  - verify_repository(): integrity verdicts for a directory
  - fetch_key_store(): a path or an http(s) URL, fetched once and cached

Byte layouts are documented in docs/format.md. Integers are little-endian,
offsets absolute. Writes go to a temp file and are renamed into place.
"""
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from errors import CorruptionError, IntegrityError, ValidationError
from keycore import (
    KEY_BYTES,
    AccessPolicy,
    KeyServiceState,
    UserKey,
    WrappedGroupKey,
    WrappedKeyStore,
    policy_nesting_problems,
)
from metadata import canonical_json, metadata_from_dict, metadata_to_dict
from regioncrypt import EncryptedPso, ProtectedImage, resolve_ownership

CONTAINER_MAGIC = b"S2SC"
KEYFILE_MAGIC   = b"S2SK"
FORMAT_VERSION  = 1
DIGEST_BYTES    = 32
DEFLATE_LEVEL   = 6

KIND_KEY_STORE   = 1
KIND_KEY_SERVICE = 2
KIND_USER_KEY    = 3

CONTAINER_SUFFIX   = ".s2sc"
KEY_STORE_SUFFIX   = ".s2sk"
KEY_SERVICE_SUFFIX = ".s2ss"
USER_KEY_SUFFIX    = ".s2su"

# magic + version + header_len
_PREAMBLE = 4 + 2 + 4


# ============================================================
# BYTE PLUMBING
# ============================================================
class _Writer:
    def __init__(self):
        self._parts = []
        self.size = 0

    def raw(self, data):
        self._parts.append(bytes(data))
        self.size += len(data)

    def u8(self, value):
        self.raw(struct.pack("<B", value))

    def u16(self, value):
        self.raw(struct.pack("<H", value))

    def u32(self, value):
        self.raw(struct.pack("<I", value))

    def u64(self, value):
        self.raw(struct.pack("<Q", value))

    def text(self, value):
        data = value.encode("utf-8")
        self.u16(len(data))
        self.raw(data)

    def blob(self, data):
        self.u32(len(data))
        self.raw(data)

    def getvalue(self):
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"{self.path}: unexpected end of file at byte {self.pos}", path=self.path)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def text(self):
        try:
            return self.take(self.u16()).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"{self.path}: string field is not UTF-8", path=self.path) from None

    def blob(self):
        return self.take(self.u32())

    def done(self):
        if self.pos != len(self.data):
            raise CorruptionError(f"{self.path}: {len(self.data) - self.pos} trailing bytes", path=self.path)


def _seal(body):
    return body + hashlib.sha256(body).digest()


def _unseal(data, path, magic, minimum):
    if len(data) < minimum + DIGEST_BYTES:
        raise CorruptionError(f"{path}: file too short ({len(data)} bytes)", path=path)
    if data[:4] != magic:
        raise CorruptionError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}", path=path)
    body, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: digest mismatch (file altered or truncated)", path=path)
    reader = _Reader(body, path)
    reader.take(4)
    version = reader.u16()
    if version != FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported format version {version}", path=path)
    return reader


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


# ============================================================
# PROTECTED CONTAINERS
# ============================================================
def compressed_size(pixels):
    """Size of the deflated pixel buffer, the container's lossless baseline."""
    return len(zlib.compress(np.ascontiguousarray(pixels).tobytes(), DEFLATE_LEVEL))


def _image_section(pixels):
    height, width, channels = pixels.shape
    packed = zlib.compress(np.ascontiguousarray(pixels).tobytes(), DEFLATE_LEVEL)
    w = _Writer()
    w.u32(width)
    w.u32(height)
    w.u8(channels)
    w.u32(len(packed))
    w.raw(packed)
    return w.getvalue()


def _blob_index(blobs, first_offset):
    index, offset = [], first_offset
    for blob in blobs:
        index.append({
            "pso_id":      blob.pso_id,
            "group":       blob.group,
            "offset":      offset,
            "length":      len(blob.ciphertext),
            "iv":          blob.iv.hex(),
            "mac":         blob.mac.hex(),
            "pixel_count": blob.pixel_count,
        })
        offset += len(blob.ciphertext)
    return index


def container_bytes(protected):
    blobs = sorted(protected.blobs, key=lambda b: b.pso_id)
    image = _image_section(protected.pixels)
    meta_doc = metadata_to_dict(protected.metadata)

    # offsets are absolute, so the header has to settle on its own length
    header_len = 0
    for _ in range(32):
        first_offset = _PREAMBLE + header_len + len(image) + 8
        header = canonical_json({"blobs": _blob_index(blobs, first_offset), "metadata": meta_doc})
        if len(header) == header_len:
            break
        header_len = len(header)
    else:
        raise RuntimeError("container header length did not converge")

    w = _Writer()
    w.raw(CONTAINER_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(len(header))
    w.raw(header)
    w.raw(image)
    w.u64(sum(len(b.ciphertext) for b in blobs))
    for blob in blobs:
        w.raw(blob.ciphertext)
    return _seal(w.getvalue())


def store_container(protected, path):
    return _atomic_write(path, container_bytes(protected))


def _hex(value, where, path):
    try:
        return bytes.fromhex(value)
    except (TypeError, ValueError):
        raise CorruptionError(f"{path}: {where} is not hex", path=path) from None


def parse_container(data, path="<memory>"):
    reader = _unseal(data, path, CONTAINER_MAGIC, _PREAMBLE)
    header_raw = reader.take(reader.u32())
    try:
        header = json.loads(header_raw.decode("utf-8"))
        meta = metadata_from_dict(header["metadata"])
        index = header["blobs"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorruptionError(f"{path}: unreadable header ({e})", path=path) from None
    except ValidationError as e:
        raise CorruptionError(f"{path}: header metadata invalid ({e})", path=path) from None

    width, height, channels = reader.u32(), reader.u32(), reader.u8()
    packed = reader.take(reader.u32())
    if (height, width, channels) != meta.shape:
        raise CorruptionError(f"{path}: image section {width}x{height}x{channels} disagrees with metadata", path=path)
    try:
        raw = zlib.decompress(packed)
    except zlib.error as e:
        raise CorruptionError(f"{path}: pixel section does not inflate ({e})", path=path) from None
    if len(raw) != width * height * channels:
        raise CorruptionError(f"{path}: pixel section holds {len(raw)} bytes, expected {width * height * channels}", path=path)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels).copy()

    section_len = reader.u64()
    section_start = reader.pos
    reader.take(section_len)
    reader.done()
    section_end = section_start + section_len

    blobs, ranges = [], []
    try:
        for entry in index:
            offset, length = int(entry["offset"]), int(entry["length"])
            if offset < section_start or offset + length > section_end:
                raise CorruptionError(f"{path}: blob {entry['pso_id']} range outside the blob section", path=path)
            ranges.append((offset, offset + length, entry["pso_id"]))
            blobs.append(EncryptedPso(
                pso_id=int(entry["pso_id"]),
                group=int(entry["group"]),
                iv=_hex(entry["iv"], f"blob {entry['pso_id']} iv", path),
                ciphertext=bytes(data[offset:offset + length]),
                mac=_hex(entry["mac"], f"blob {entry['pso_id']} mac", path),
                pixel_count=int(entry["pixel_count"]),
            ))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptionError(f"{path}: malformed blob index ({e})", path=path) from None

    ranges.sort()
    for (_, end, first), (start, _, second) in zip(ranges, ranges[1:]):
        if start < end:
            raise CorruptionError(f"{path}: blobs {first} and {second} overlap", path=path)

    ownership = resolve_ownership(meta.annotations, meta.width, meta.height)
    by_id = {a.id: a for a in meta.annotations}
    if sorted(b.pso_id for b in blobs) != sorted(by_id):
        raise CorruptionError(f"{path}: blob index does not match the annotations", path=path)
    for blob in blobs:
        if blob.group != by_id[blob.pso_id].group or blob.pixel_count != ownership.count(blob.pso_id):
            raise CorruptionError(f"{path}: blob {blob.pso_id} disagrees with its annotation", path=path)

    blobs.sort(key=lambda b: b.pso_id)
    return ProtectedImage(pixels=pixels, blobs=tuple(blobs), metadata=meta, ownership=ownership)


def load_container(path):
    return parse_container(Path(path).read_bytes(), path)


# ============================================================
# KEY FILES
# ============================================================
def _key_writer(kind):
    w = _Writer()
    w.raw(KEYFILE_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u8(kind)
    return w


def _key_reader(data, path, kind):
    reader = _unseal(data, path, KEYFILE_MAGIC, 4 + 2 + 1)
    found = reader.u8()
    if found != kind:
        raise CorruptionError(f"{path}: key file kind {found}, expected {kind}", path=path)
    return reader


def _fixed(reader, where=None):
    return reader.take(KEY_BYTES)


def key_store_bytes(store):
    w = _key_writer(KIND_KEY_STORE)
    w.u16(store.group_count)
    w.u16(len(store.mpk))
    for attribute in sorted(store.mpk):
        w.text(attribute)
        w.raw(store.mpk[attribute])
    records = sorted(store.records, key=lambda r: r.group)
    w.u16(len(records))
    for record in records:
        w.u16(record.group)
        w.u16(len(record.policy.attributes))
        for attribute in sorted(record.policy.attributes):
            w.text(attribute)
        w.u16(len(record.shares))
        for attribute in sorted(record.shares):
            w.text(attribute)
            w.blob(record.shares[attribute])
    return _seal(w.getvalue())


def parse_key_store(data, path="<memory>"):
    r = _key_reader(data, path, KIND_KEY_STORE)
    group_count = r.u16()
    mpk = {}
    for _ in range(r.u16()):
        name = r.text()
        mpk[name] = _fixed(r, name)
    records = []
    for _ in range(r.u16()):
        group = r.u16()
        attributes = [r.text() for _ in range(r.u16())]
        shares = {}
        for _ in range(r.u16()):
            name = r.text()
            shares[name] = r.blob()
        try:
            policy = AccessPolicy(group=group, attributes=attributes)
        except ValidationError as e:
            raise CorruptionError(f"{path}: {e}", path=path) from None
        records.append(WrappedGroupKey(group=group, policy=policy, shares=shares))
    r.done()
    return WrappedKeyStore(group_count=group_count, mpk=mpk, records=tuple(records))


def store_key_store(store, path):
    return _atomic_write(path, key_store_bytes(store))


def load_key_store(path):
    return parse_key_store(Path(path).read_bytes(), path)


def key_store_problems(store):
    """Coverage (groups 1..L exactly once) and policy nesting."""
    problems = []
    groups = [r.group for r in store.records]
    for group in range(1, store.group_count + 1):
        seen = groups.count(group)
        if seen == 0:
            problems.append(f"missing wrapped key record for group {group}")
        elif seen > 1:
            problems.append(f"group {group} has {seen} wrapped key records")
    stray = sorted(g for g in set(groups) if not 1 <= g <= store.group_count)
    if stray:
        problems.append(f"records for groups outside 1..{store.group_count}: {stray}")
    if len(store.records) != store.group_count:
        problems.append(f"{len(store.records)} records stored, expected exactly {store.group_count}")
    problems.extend(policy_nesting_problems([r.policy for r in store.records], store.group_count))
    for record in store.records:
        if set(record.shares) != set(record.policy.attributes):
            problems.append(f"group {record.group}: shares do not match policy attributes")
        unknown = sorted(record.policy.attributes - set(store.mpk))
        if unknown:
            problems.append(f"group {record.group}: policy names unknown attribute(s) {unknown}")
    return problems


def key_service_bytes(state):
    w = _key_writer(KIND_KEY_SERVICE)
    w.u16(state.group_count)
    w.u16(len(state.base_keys))
    for key in state.base_keys:
        w.raw(key)
    w.u16(len(state.msk))
    for attribute in sorted(state.msk):
        w.text(attribute)
        w.u16(state.role_max_group[attribute])
        w.raw(state.mpk[attribute])
        w.raw(state.msk[attribute])
    return _seal(w.getvalue())


def parse_key_service(data, path="<memory>"):
    r = _key_reader(data, path, KIND_KEY_SERVICE)
    group_count = r.u16()
    base_keys = tuple(_fixed(r, "base key") for _ in range(r.u16()))
    roles, mpk, msk = {}, {}, {}
    for _ in range(r.u16()):
        name = r.text()
        roles[name] = r.u16()
        mpk[name] = _fixed(r, name)
        msk[name] = _fixed(r, name)
    r.done()
    if len(base_keys) != group_count:
        raise CorruptionError(f"{path}: {len(base_keys)} base keys for {group_count} groups", path=path)
    return KeyServiceState(group_count=group_count, base_keys=base_keys, role_max_group=roles, mpk=mpk, msk=msk)


def store_key_service(state, path):
    return _atomic_write(path, key_service_bytes(state))


def load_key_service(path):
    return parse_key_service(Path(path).read_bytes(), path)


def user_key_bytes(user_key):
    w = _key_writer(KIND_USER_KEY)
    w.text(user_key.user_id)
    w.u16(len(user_key.keys))
    for attribute in sorted(user_key.keys):
        w.text(attribute)
        w.raw(user_key.keys[attribute])
    return _seal(w.getvalue())


def parse_user_key(data, path="<memory>"):
    r = _key_reader(data, path, KIND_USER_KEY)
    user_id = r.text()
    keys = {}
    for _ in range(r.u16()):
        name = r.text()
        keys[name] = _fixed(r, name)
    r.done()
    return UserKey(user_id=user_id, keys=keys)


def store_user_key(user_key, path):
    return _atomic_write(path, user_key_bytes(user_key))


def load_user_key(path):
    return parse_user_key(Path(path).read_bytes(), path)


# ============================================================
# REMOTE KEY STORE: fetch once, then work locally
# ============================================================
def fetch_key_store(source, cache_dir):
    source = str(source)
    if not source.startswith(("http://", "https://")):
        return load_key_store(source)

    cache = Path(cache_dir) / (hashlib.sha256(source.encode("utf-8")).hexdigest()[:16] + KEY_STORE_SUFFIX)
    if cache.exists():
        try:
            return load_key_store(cache)
        except CorruptionError as e:
            print(f"   ⚠️  [KeyStore] cached copy unusable ({e}) — fetching again")

    print(f"🌐 [KeyStore] fetching wrapped keys from {source}")
    try:
        resp = requests.get(source, timeout=30)
        resp.raise_for_status()
    except requests.RequestException as e:
        raise OSError(f"key store fetch failed: {e}") from None
    store = parse_key_store(resp.content, source)
    _atomic_write(cache, resp.content)
    print(f"   ✅ cached → {cache}")
    return store


# ============================================================
# VERIFY
# ============================================================
@dataclass
class VerifyEntry:
    path: str
    ok: bool
    message: str


@dataclass
class RepositoryReport:
    directory: str
    entries: list = field(default_factory=list)

    @property
    def ok(self):
        return all(e.ok for e in self.entries)

    def add(self, path, ok, message):
        self.entries.append(VerifyEntry(path=str(path), ok=ok, message=message))

    def to_dict(self):
        return {
            "directory": self.directory,
            "ok": self.ok,
            "entries": [{"path": e.path, "ok": e.ok, "message": e.message} for e in self.entries],
        }


def verify_repository(directory):
    directory = Path(directory)
    report = RepositoryReport(directory=str(directory))

    stores = sorted(directory.glob(f"*{KEY_STORE_SUFFIX}"))
    group_count = None
    if len(stores) != 1:
        report.add(directory, False, f"expected exactly one key store (*{KEY_STORE_SUFFIX}), found {len(stores)}")
    for path in stores:
        try:
            store = load_key_store(path)
        except (CorruptionError, OSError) as e:
            report.add(path, False, f"corrupt key store: {e}")
            continue
        problems = key_store_problems(store)
        if problems:
            report.add(path, False, "; ".join(problems))
        else:
            group_count = store.group_count
            report.add(path, True, f"{store.group_count} wrapped keys, policies nest")

    for path in sorted(directory.glob(f"*{CONTAINER_SUFFIX}")):
        try:
            protected = load_container(path)
        except (IntegrityError, OSError) as e:
            report.add(path, False, f"corrupt container: {e}")
            continue
        groups = protected.metadata.group_table.group_count
        if group_count is not None and groups != group_count:
            report.add(path, False, f"uses {groups} sensitivity groups, key store has {group_count}")
            continue
        report.add(path, True, f"{len(protected.blobs)} PSO blob(s), digest ok")
    return report
