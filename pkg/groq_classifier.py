"""
PixelVeil — Groq Classifier
Optional LLM-backed ClassifierPort for CAPC.
Auto-rotates across up to 3 Groq API keys on 429 rate-limit errors and
answers the same text from cache, so repeated runs stay deterministic.
"""
import json
import os
import re
import threading
import time

from dotenv import load_dotenv

from postcorrect import SAFE_LABEL

load_dotenv()

DEFAULT_MODEL = "llama-3.3-70b-versatile"

# Groq daily limits reset slowly; "try again in 24m" is the usual hint
_COOLDOWN_SECS = 25 * 60

_PROMPT = (
    "You label text read from one region of a photo. Choose exactly one label "
    "from this list: {labels}. Use \"{safe}\" when none fits.\n"
    "Reply with JSON only: {{\"label\": \"...\", \"confidence\": 0.0-1.0}}\n\n"
    "Text:\n{text}"
)


def env_keys():
    keys = [os.getenv("GROQ_API_KEY"), os.getenv("GROQ_API_KEY_2"), os.getenv("GROQ_API_KEY_3")]
    return [k for k in keys if k and k.strip()]


def _strip_fences(raw):
    raw = raw.strip()
    if raw.startswith("```"):
        raw = re.sub(r"^```[a-zA-Z]*\n?", "", raw)
        raw = re.sub(r"\n?```$", "", raw)
    return raw.strip()


class GroqClassifier:
    def __init__(self, labels, keys=None, model=DEFAULT_MODEL, client_factory=None):
        self.labels = sorted(set(labels))
        self.keys = list(keys) if keys is not None else env_keys()
        self.model = model
        self._client_factory = client_factory
        self._exhausted = {}                 # key -> time it hit the rate limit
        self._cache = {}
        self._lock = threading.Lock()

    def _client(self, key):
        if self._client_factory is not None:
            return self._client_factory(key)
        from groq import Groq
        return Groq(api_key=key)

    def _available_keys(self):
        now = time.time()
        with self._lock:
            return [k for k in self.keys if now - self._exhausted.get(k, -_COOLDOWN_SECS - 1) > _COOLDOWN_SECS]

    def _complete(self, messages):
        keys_to_try = self._available_keys()
        if not keys_to_try:
            raise RuntimeError("all Groq keys are rate-limited")

        last_exc = None
        for key in keys_to_try:
            idx = self.keys.index(key) + 1
            try:
                resp = self._client(key).chat.completions.create(
                    model=self.model,
                    messages=messages,
                    temperature=0,
                    max_tokens=64,
                )
                return resp.choices[0].message.content.strip()
            except Exception as e:
                err_str = str(e)
                if "rate_limit_exceeded" in err_str or "429" in err_str:
                    print(f"   ⚠️  Groq key {idx} rate-limited — rotating to next key...")
                    with self._lock:
                        self._exhausted[key] = time.time()
                    last_exc = e
                    continue
                raise
        raise last_exc or RuntimeError("All Groq keys failed")

    def classify(self, text):
        with self._lock:
            if text in self._cache:
                return self._cache[text]
        if not self.keys:
            print("   ⚠️  [Groq] no GROQ_API_KEY configured — treating text as safe")
            return SAFE_LABEL, 0.0

        prompt = _PROMPT.format(labels=", ".join(self.labels), safe=SAFE_LABEL, text=text)
        try:
            raw = self._complete([{"role": "user", "content": prompt}])
            reply = json.loads(_strip_fences(raw))
            label = str(reply["label"])
            confidence = min(max(float(reply["confidence"]), 0.0), 1.0)
        except Exception as e:
            print(f"   ⚠️  [Groq] classification failed ({e}) — treating text as safe")
            return SAFE_LABEL, 0.0

        if label not in self.labels:
            label, confidence = SAFE_LABEL, 0.0
        with self._lock:
            self._cache[text] = (label, confidence)
        return label, confidence

    def status(self):
        now = time.time()
        with self._lock:
            exhausted = dict(self._exhausted)
        lines = []
        for i, k in enumerate(self.keys, 1):
            ex = exhausted.get(k)
            if ex and (now - ex) < _COOLDOWN_SECS:
                remaining = int(_COOLDOWN_SECS - (now - ex))
                lines.append(f"  Key {i}: EXHAUSTED (resets in {remaining//60}m{remaining%60:02d}s)")
            else:
                lines.append(f"  Key {i}: available")
        return "\n".join(lines)


if __name__ == "__main__":
    clf = GroqClassifier(labels=["passport", "student_id", "ticket", "driver_license", "receipt"])
    print(f"Groq keys loaded: {len(clf.keys)}")
    print(clf.status())
