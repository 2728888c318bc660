"""
PixelVeil — Key Core
All key material for the system:
  - one 32-byte symmetric key per sensitivity group (K_1..K_L)
  - group key chains K_G(l) = K_l || K_(l-1) || ... || K_1, so holding a
    group's chain yields every lower group key by offset
  - monotone disjunctive policies, one per group (P_l = any attribute whose
    role reaches group l)
  - the attribute KEM: each attribute owns an X25519 keypair; a group chain
    is wrapped once per policy attribute (ECDH -> HKDF -> AES-GCM), so a
    user can unwrap iff they hold at least one attribute of the policy

Denial is the DENIED sentinel, not an exception. Authentication failures on
an attribute the user does hold raise IntegrityError.
"""
import os
import secrets
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from errors import ConfigError, IntegrityError, ValidationError

KEY_BYTES   = 32
NONCE_BYTES = 12
TAG_BYTES   = 16
WRAP_INFO   = b"pixelveil:v1:attribute-kem:"

# Instrumentation: policy wraps performed, unwrap attempts made
_counters = {"wraps": 0, "unwraps": 0}
_counters_lock = threading.Lock()


def _count(name):
    with _counters_lock:
        _counters[name] += 1


def crypto_counters():
    with _counters_lock:
        return dict(_counters)


def reset_crypto_counters():
    with _counters_lock:
        for name in _counters:
            _counters[name] = 0


class Denial:
    """The key holds no attribute the policy accepts."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self):
        return False

    def __repr__(self):
        return "DENIED"


DENIED = Denial()


# ============================================================
# SYMMETRIC KEYS + GROUP CHAINS
# ============================================================
def ske_gen():
    return secrets.token_bytes(KEY_BYTES)


@dataclass(frozen=True)
class GroupKeyChain:
    group: int
    chain: bytes

    def __post_init__(self):
        if self.group < 1:
            raise ValidationError(f"group: {self.group} must be >= 1")
        if len(self.chain) != KEY_BYTES * self.group:
            raise ValidationError(
                f"chain: group {self.group} needs {KEY_BYTES * self.group} bytes, got {len(self.chain)}"
            )

    def __repr__(self):
        return f"GroupKeyChain(group={self.group}, chain=<{len(self.chain)} bytes>)"


def assemble_chains(base_keys):
    """Chains for groups 1..L from the base keys K_1..K_L."""
    base_keys = list(base_keys)
    for i, key in enumerate(base_keys, 1):
        if len(key) != KEY_BYTES:
            raise ValidationError(f"base_keys[{i}]: expected {KEY_BYTES} bytes, got {len(key)}")
    return [
        GroupKeyChain(group=level, chain=b"".join(reversed(base_keys[:level])))
        for level in range(1, len(base_keys) + 1)
    ]


def build_group_chains(group_count):
    if group_count < 1:
        raise ValidationError(f"group_count: {group_count} must be >= 1")
    return assemble_chains(ske_gen() for _ in range(group_count))


def chain_segment(chain, j):
    """K_j out of a group chain; j=chain.group is the group's own key."""
    if not 1 <= j <= chain.group:
        raise ValidationError(f"segment {j} outside 1..{chain.group}")
    start = KEY_BYTES * (chain.group - j)
    return chain.chain[start:start + KEY_BYTES]


# ============================================================
# POLICIES
# ============================================================
@dataclass(frozen=True)
class AccessPolicy:
    group: int
    attributes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "attributes", frozenset(self.attributes))
        if not self.attributes:
            raise ValidationError(f"policy for group {self.group}: attribute set is empty")

    def satisfied_by(self, attributes):
        return bool(self.attributes & set(attributes))

    def describe(self):
        return " ∨ ".join(sorted(self.attributes))


def build_policies(role_max_group, group_count):
    if group_count < 1:
        raise ConfigError(f"group_count: {group_count} must be >= 1")
    for role, top in role_max_group.items():
        if isinstance(top, bool) or not isinstance(top, int) or not 1 <= top <= group_count:
            raise ConfigError(f"roles.{role}: max group {top!r} outside 1..{group_count}")
    policies = []
    for level in range(1, group_count + 1):
        members = {role for role, top in role_max_group.items() if top >= level}
        if not members:
            raise ConfigError(f"policy for group {level} is empty: no role reaches it, so it could never be decrypted")
        policies.append(AccessPolicy(group=level, attributes=members))
    return policies


def policy_nesting_problems(policies, group_count):
    """Human-readable problems with a policy list; empty when sound."""
    problems = []
    by_group = {p.group: p for p in policies}
    for level in range(1, group_count + 1):
        if level not in by_group:
            problems.append(f"no policy for group {level}")
    for level in range(1, group_count):
        low, high = by_group.get(level), by_group.get(level + 1)
        if low and high and not high.attributes <= low.attributes:
            extra = ", ".join(sorted(high.attributes - low.attributes))
            problems.append(f"policy {level + 1} admits {extra} which policy {level} does not")
    return problems


def capability_matrix(role_max_group, policies):
    """role -> sorted groups whose policy the role satisfies."""
    return {
        role: [p.group for p in policies if p.satisfied_by([role])]
        for role in sorted(role_max_group)
    }


def format_capability_matrix(policies):
    rows = [("Group", "Policy", "Attributes allowed to decrypt")]
    for p in sorted(policies, key=lambda p: p.group):
        allowed = ", or ".join(sorted(p.attributes))
        rows.append((str(p.group), p.describe(), f"Users with {allowed}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for n, row in enumerate(rows):
        lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)


# ============================================================
# ATTRIBUTE KEM (Gen / KeyGen / Enc / Dec)
# ============================================================
def _raw_public(public_key):
    return public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _raw_private(private_key):
    return private_key.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def _kek(shared, ephemeral_pub, recipient_pub, attribute):
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_BYTES,
        salt=ephemeral_pub + recipient_pub,
        info=WRAP_INFO + attribute.encode("utf-8"),
    ).derive(shared)


def _share_aad(attribute, group):
    return f"group={group};attribute={attribute}".encode("utf-8")


def abe_gen(attribute_universe):
    universe = sorted(set(attribute_universe))
    if not universe:
        raise ValidationError("attribute universe is empty")
    mpk, msk = {}, {}
    for attribute in universe:
        if not isinstance(attribute, str) or not attribute:
            raise ValidationError(f"attribute {attribute!r}: must be a non-empty string")
        private = X25519PrivateKey.generate()
        msk[attribute] = _raw_private(private)
        mpk[attribute] = _raw_public(private.public_key())
    return mpk, msk


def abe_keygen(msk, attributes):
    unknown = sorted(set(attributes) - set(msk))
    if unknown:
        raise ValidationError(f"unknown attribute(s): {', '.join(unknown)}")
    return {a: msk[a] for a in sorted(set(attributes))}


@dataclass(frozen=True)
class WrappedGroupKey:
    group: int
    policy: AccessPolicy
    shares: dict = field(default_factory=dict)


def abe_enc(mpk, policy, plaintext):
    missing = sorted(policy.attributes - set(mpk))
    if missing:
        raise ValidationError(f"policy for group {policy.group} names attribute(s) outside the universe: {', '.join(missing)}")
    _count("wraps")
    shares = {}
    for attribute in sorted(policy.attributes):
        recipient_pub = mpk[attribute]
        ephemeral = X25519PrivateKey.generate()
        ephemeral_pub = _raw_public(ephemeral.public_key())
        shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_pub))
        nonce = os.urandom(NONCE_BYTES)
        body = AESGCM(_kek(shared, ephemeral_pub, recipient_pub, attribute)).encrypt(
            nonce, plaintext, _share_aad(attribute, policy.group)
        )
        shares[attribute] = ephemeral_pub + nonce + body
    return WrappedGroupKey(group=policy.group, policy=policy, shares=shares)


def _unwrap(private_raw, attribute, group, share):
    if len(share) < KEY_BYTES + NONCE_BYTES + TAG_BYTES:
        raise IntegrityError(f"wrapped key for group {group}: share for {attribute!r} is truncated")
    ephemeral_pub = share[:KEY_BYTES]
    nonce = share[KEY_BYTES:KEY_BYTES + NONCE_BYTES]
    body = share[KEY_BYTES + NONCE_BYTES:]
    try:
        private = X25519PrivateKey.from_private_bytes(private_raw)
        shared = private.exchange(X25519PublicKey.from_public_bytes(ephemeral_pub))
        kek = _kek(shared, ephemeral_pub, _raw_public(private.public_key()), attribute)
        return AESGCM(kek).decrypt(nonce, body, _share_aad(attribute, group))
    except (InvalidTag, ValueError):
        raise IntegrityError(
            f"wrapped key for group {group} failed authentication under attribute {attribute!r}"
        ) from None


def abe_dec(sk, wrapped):
    """Chain bytes if sk holds a policy attribute, else DENIED."""
    if not wrapped.policy.satisfied_by(sk):
        return DENIED
    attribute = min(set(sk) & wrapped.policy.attributes)
    share = wrapped.shares.get(attribute)
    if share is None:
        raise IntegrityError(f"wrapped key for group {wrapped.group} has no share for policy attribute {attribute!r}")
    _count("unwraps")
    return _unwrap(sk[attribute], attribute, wrapped.group, share)


# ============================================================
# SYSTEM STATE
# ============================================================
@dataclass(frozen=True)
class WrappedKeyStore:
    group_count: int
    mpk: dict
    records: tuple

    @property
    def universe(self):
        return sorted(self.mpk)

    @property
    def policies(self):
        return [r.policy for r in sorted(self.records, key=lambda r: r.group)]


@dataclass(frozen=True)
class KeyServiceState:
    group_count: int
    base_keys: tuple
    role_max_group: dict
    mpk: dict
    msk: dict

    def chains(self):
        return assemble_chains(self.base_keys)

    def __repr__(self):
        return f"KeyServiceState(group_count={self.group_count}, roles={sorted(self.role_max_group)})"


@dataclass(frozen=True)
class UserKey:
    user_id: str
    keys: dict

    @property
    def attributes(self):
        return sorted(self.keys)

    def __repr__(self):
        return f"UserKey(user_id={self.user_id!r}, attributes={self.attributes})"


def setup_system(role_max_group, group_count):
    """Fresh keys, policies and the L wrapped chains for a role table."""
    policies = build_policies(role_max_group, group_count)
    chains = build_group_chains(group_count)
    mpk, msk = abe_gen(role_max_group)
    records = tuple(abe_enc(mpk, p, chains[p.group - 1].chain) for p in policies)
    state = KeyServiceState(
        group_count=group_count,
        base_keys=tuple(chain_segment(c, c.group) for c in chains),
        role_max_group=dict(role_max_group),
        mpk=mpk,
        msk=msk,
    )
    return state, WrappedKeyStore(group_count=group_count, mpk=mpk, records=records)


def register_user(state, user_id, attributes):
    if not user_id:
        raise ValidationError("user_id: empty")
    return UserKey(user_id=user_id, keys=abe_keygen(state.msk, attributes))


def recover_max_group(sk, store):
    """Scan wrapped keys from the most sensitive group down; first unwrap wins."""
    keys = sk.keys if isinstance(sk, UserKey) else sk
    by_group = {r.group: r for r in store.records}
    missing = [g for g in range(1, store.group_count + 1) if g not in by_group]
    if missing:
        raise IntegrityError(f"key store is missing wrapped keys for group(s) {missing}")
    for group in range(store.group_count, 0, -1):
        plaintext = abe_dec(keys, by_group[group])
        if plaintext is DENIED:
            continue
        if len(plaintext) != KEY_BYTES * group:
            raise IntegrityError(f"wrapped key for group {group} unwrapped to {len(plaintext)} bytes")
        return group, GroupKeyChain(group=group, chain=plaintext)
    return DENIED
