"""
PixelVeil — User Roster
The system admin's list of registered users and the attributes their keys
carry. Written by `register`, read by `register --force` checks and by
listing commands. Holds no key material.
"""
import json
import sqlite3
import time
from pathlib import Path

from errors import ValidationError


# ============================================================
# SCHEMA + INIT
# ============================================================
def init_db(db_path):
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_path)
    c = conn.cursor()

    c.execute("""
        CREATE TABLE IF NOT EXISTS users (
            user_id        TEXT PRIMARY KEY,
            attributes     TEXT,
            key_path       TEXT,
            registered_at  REAL
        )
    """)

    # Migration: columns added after the first release
    for col, defn in [
        ("max_group",      "INTEGER DEFAULT 0"),
        ("registrations",  "INTEGER DEFAULT 1"),
    ]:
        try:
            c.execute(f"ALTER TABLE users ADD COLUMN {col} {defn}")
        except sqlite3.OperationalError:
            pass  # Column already exists

    conn.commit()
    conn.close()


def _row(row):
    return {
        "user_id":       row[0],
        "attributes":    json.loads(row[1] or "[]"),
        "key_path":      row[2],
        "registered_at": row[3],
        "max_group":     row[4],
        "registrations": row[5],
    }


_COLUMNS = "user_id, attributes, key_path, registered_at, max_group, registrations"


# ============================================================
# QUERIES
# ============================================================
def get_user(db_path, user_id):
    init_db(db_path)
    conn = sqlite3.connect(db_path)
    c = conn.cursor()
    c.execute(f"SELECT {_COLUMNS} FROM users WHERE user_id = ?", (user_id,))
    row = c.fetchone()
    conn.close()
    return _row(row) if row else None


def add_user(db_path, user_id, attributes, key_path, max_group, force=False):
    """Record a registration; a second one for the same id needs force=True."""
    existing = get_user(db_path, user_id)
    if existing and not force:
        raise ValidationError(f"user {user_id!r} is already registered (use --force to re-issue the key)")

    conn = sqlite3.connect(db_path)
    c = conn.cursor()
    c.execute(f"""
        INSERT OR REPLACE INTO users ({_COLUMNS})
        VALUES (?, ?, ?, ?, ?, ?)
    """, (
        user_id,
        json.dumps(sorted(attributes)),
        str(key_path),
        time.time(),
        max_group,
        (existing["registrations"] + 1) if existing else 1,
    ))
    conn.commit()
    conn.close()


def list_users(db_path):
    init_db(db_path)
    conn = sqlite3.connect(db_path)
    c = conn.cursor()
    c.execute(f"SELECT {_COLUMNS} FROM users ORDER BY user_id")
    rows = c.fetchall()
    conn.close()
    return [_row(r) for r in rows]


def users_reaching(db_path, group):
    """Users whose attributes open `group` (and so every group below it)."""
    return [u for u in list_users(db_path) if u["max_group"] >= group]
