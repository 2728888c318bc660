"""
PixelVeil — Configuration
One JSON (or TOML) settings file -> frozen SystemConfig.
Missing keys fall back to the defaults below; bad values raise ConfigError
naming the key. Relative paths resolve against the settings file's folder.

Environment (read through python-dotenv by the entry points):
  PIXELVEIL_CONFIG       default settings file path
  PIXELVEIL_KEY_SERVICE  overrides paths.key_service
"""
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from errors import ConfigError, ValidationError
from keycore import build_policies
from metadata import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_THRESHOLDS, SensitivityGroupTable
from postcorrect import (
    DEFAULT_CAPC_THRESHOLD,
    DEFAULT_KEYWORDS,
    CommandClassifier,
    CommandOcr,
    CueTable,
    KeywordClassifier,
)

DEFAULT_CONFIG_NAME = "pixelveil.json"

# Per-class sensitivity scores. The first eight are the case-study objects.
DEFAULT_CLASS_SCORES = {
    "driver_license": 0.25,
    "person":         0.30,
    "location":       0.40,
    "date":           0.60,
    "face":           0.70,
    "birthdate":      0.80,
    "name":           0.85,
    "signature":      0.90,
    "ticket":         0.35,
    "receipt":        0.40,
    "place":          0.45,
    "student_id":     0.55,
    "license_plate":  0.60,
    "address":        0.80,
    "passport":       0.95,
}

# Three nested roles: a1 opens group 1, a2 groups 1-2, a3 everything
DEFAULT_ROLES = {"a1": 1, "a2": 2, "a3": 3}
DEFAULT_ROLE_GROUPS = 3

CLASSIFIER_BACKENDS = ("keyword", "command", "groq")

DEFAULT_PATHS = {
    "key_service": "keyservice/state.s2ss",
    "roster":      "keyservice/roster.db",
    "user_keys":   "keys",
    "repository":  "repository",
    "key_store":   "repository/keystore.s2sk",
    "key_cache":   ".pixelveil-cache",
}


@dataclass(frozen=True)
class Paths:
    key_service: Path
    roster: Path
    user_keys: Path
    repository: Path
    key_store: Path
    key_cache: Path


@dataclass(frozen=True)
class SystemConfig:
    group_table: SensitivityGroupTable
    roles: dict
    class_scores: dict
    cues: CueTable = CueTable()
    classifier_backend: str = "keyword"
    keywords: dict = field(default_factory=lambda: dict(DEFAULT_KEYWORDS))
    classifier_command: Optional[str] = None
    classifier_model: Optional[str] = None
    ocr_command: Optional[str] = None
    capc_threshold: float = DEFAULT_CAPC_THRESHOLD
    min_confidence: float = 0.0
    paths: Paths = None

    @property
    def group_count(self):
        return self.group_table.group_count

    def policies(self):
        return build_policies(self.roles, self.group_count)

    def make_classifier(self):
        if self.classifier_backend == "command":
            return CommandClassifier(self.classifier_command)
        if self.classifier_backend == "groq":
            from groq_classifier import DEFAULT_MODEL, GroqClassifier
            return GroqClassifier(labels=self.class_scores, model=self.classifier_model or DEFAULT_MODEL)
        return KeywordClassifier(self.keywords)

    def make_ocr(self):
        """External OCR command, or None to use the annotation file's text boxes."""
        return CommandOcr(self.ocr_command) if self.ocr_command else None


def _section(doc, name):
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a table of values")
    return value


def _unit(value, name):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name}: {value} outside [0, 1]")
    return value


def _resolve(base, value):
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def config_from_dict(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a table at the top level")
    base = Path(base_dir)

    table_doc = _section(doc, "group_table")
    try:
        table = SensitivityGroupTable(
            thresholds=tuple(table_doc.get("thresholds", DEFAULT_THRESHOLDS)),
            alpha=table_doc.get("alpha", DEFAULT_ALPHA),
            beta=table_doc.get("beta", DEFAULT_BETA),
        )
    except (ValidationError, TypeError, ValueError) as e:
        raise ConfigError(f"group_table: {e}") from None

    if "roles" in doc:
        roles = dict(_section(doc, "roles"))
    elif table.group_count == DEFAULT_ROLE_GROUPS:
        roles = dict(DEFAULT_ROLES)
    else:
        # one role per group, aN reaching group N
        roles = {f"a{g}": g for g in range(1, table.group_count + 1)}
    build_policies(roles, table.group_count)

    class_scores = dict(DEFAULT_CLASS_SCORES)
    for label, score in _section(doc, "class_scores").items():
        class_scores[label] = float(score)
    for label, score in class_scores.items():
        if not table.alpha <= score <= table.beta:
            raise ConfigError(f"class_scores.{label}: {score} outside [{table.alpha}, {table.beta}]")

    try:
        cues = CueTable.from_dict(_section(doc, "cues"))
    except ValidationError as e:
        raise ConfigError(str(e)) from None

    classifier = _section(doc, "classifier")
    backend = classifier.get("backend", "keyword")
    if backend not in CLASSIFIER_BACKENDS:
        raise ConfigError(f"classifier.backend: {backend!r} not in {CLASSIFIER_BACKENDS}")
    if backend == "command" and not classifier.get("command"):
        raise ConfigError("classifier.command: required when backend is 'command'")
    keywords = {**DEFAULT_KEYWORDS, **classifier.get("keywords", {})}
    try:
        KeywordClassifier(keywords)
    except ValidationError as e:
        raise ConfigError(str(e)) from None

    raw_paths = {**DEFAULT_PATHS, **_section(doc, "paths")}
    unknown = sorted(set(raw_paths) - set(DEFAULT_PATHS))
    if unknown:
        raise ConfigError(f"paths: unknown key(s) {unknown}")
    override = os.getenv("PIXELVEIL_KEY_SERVICE")
    if override:
        raw_paths["key_service"] = override
    paths = Paths(**{name: _resolve(base, value) for name, value in raw_paths.items()})

    return SystemConfig(
        group_table=table,
        roles=roles,
        class_scores=class_scores,
        cues=cues,
        classifier_backend=backend,
        keywords=keywords,
        classifier_command=classifier.get("command"),
        classifier_model=classifier.get("model"),
        ocr_command=doc.get("ocr_command"),
        capc_threshold=_unit(doc.get("capc_threshold", DEFAULT_CAPC_THRESHOLD), "capc_threshold"),
        min_confidence=_unit(doc.get("min_confidence", 0.0), "min_confidence"),
        paths=paths,
    )


def load_config(path=None):
    """
    Settings file -> SystemConfig. With no path, PIXELVEIL_CONFIG or
    ./pixelveil.json is used; when neither exists the defaults apply.
    """
    if path is None:
        path = os.getenv("PIXELVEIL_CONFIG") or DEFAULT_CONFIG_NAME
        if not Path(path).exists():
            return config_from_dict({}, Path.cwd())
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        if path.suffix.lower() == ".toml":
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: cannot parse ({e})") from None
    return config_from_dict(doc, path.parent)
