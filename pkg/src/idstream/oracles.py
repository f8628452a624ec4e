"""Extraction, matching and verification oracles.

An oracle is any callable ``oracle(request) -> str`` returning the raw
assistant text; it raises on failure. Everything that consumes oracle output
goes through :func:`parse_oracle_json`, which never raises and degrades to a
role-specific neutral payload.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional
from urllib import error as urlerror
from urllib import request as urlrequest

import numpy as np

logger = logging.getLogger(__name__)

ROLES = ("extract", "match", "verify")
NUM_VERIFY_FRAMES = 3
NEUTRAL_SCORE = 0.5
DEFAULT_DEADLINE = 10.0
IMAGE_SIZE = 256


class OracleError(RuntimeError):
    """Raised by oracle implementations when a call cannot be answered."""


@dataclass
class OracleRequest:
    role: str
    prompt: str
    deadline: float = DEFAULT_DEADLINE
    images: Optional[list] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown oracle role {self.role!r}")

    def envelope(self) -> dict:
        body = {
            "role": self.role,
            "prompt": self.prompt,
            "temperature": 0.0,
            "metadata": self.metadata,
        }
        if self.images:
            body["images"] = [encode_png_b64(im) for im in self.images]
        return body


@dataclass
class OracleResponse:
    role: str
    payload: dict
    raw_text: Optional[str]
    ok: bool
    latency: float


Oracle = Callable[[OracleRequest], str]


# -- prompt templates ---------------------------------------------------------

EXTRACT_TEMPLATE = """\
[System]
List the human characters that appear in the video description below.
Only people count (man, woman, protagonist and similar). For each person
give a short name and only the visible, physical attributes: hair,
clothing, accessories, build, age, skin, face. Leave out actions and moods.
Answer with a single JSON object and nothing else:
{{"entities": [{{"entity": "<name>", "attrs": ["<attr>", "..."]}}]}}
When nobody appears, answer {{"entities": []}}.

[User]
{prompt_text}
"""

MATCH_TEMPLATE = """\
[System]
Decide whether a newly described character is one of the characters
already registered. References such as "protagonist", "main character",
"he" or "she" normally point at someone already introduced, and shared
clothing or appearance is evidence for the same person. Descriptions using
"another", "other", "new" or "different" introduce a new person: answer null.
Answer with JSON only: {{"matched_id": <number or null>}}

[User]
New character:
"{descriptor}"

Registered characters:
{registry_lines}

Return the matching ID, or null if there is no match.
"""

VERIFY_TEMPLATE = """\
Score the {num_frames} attached video frames for visual quality.
Video prompt: "{prompt_text}"
Key entities: {entity_names}

Give each frame a score between 0.0 and 1.0 for how clearly and faithfully
it shows the entities and the prompt.
{attribute_block}Answer with JSON only:
{{"scores": [<float>, ...], "corrections": null}}
or, when some attribute is wrong,
{{"scores": [<float>, ...],
 "corrections": {{"<global_id>": {{"corrected_attrs": ["<attr>", "..."]}}}}}}
"""

ATTRIBUTE_BLOCK = """\
Check these registered attributes against the frames and correct any that
are wrong:
{lines}
"""


def render_extract_prompt(prompt_text: str) -> str:
    return EXTRACT_TEMPLATE.format(prompt_text=prompt_text)


def render_match_prompt(name: str, attributes: list[str], registry_lines: list[str]) -> str:
    descriptor = f"{name}: {', '.join(attributes)}" if attributes else name
    return MATCH_TEMPLATE.format(
        descriptor=descriptor,
        registry_lines="\n".join(registry_lines) if registry_lines else "(none)",
    )


def render_verify_prompt(
    prompt_text: str,
    entity_names: list[str],
    attribute_lines: Optional[list[str]] = None,
    num_frames: int = NUM_VERIFY_FRAMES,
) -> str:
    block = ATTRIBUTE_BLOCK.format(lines="\n".join(attribute_lines)) if attribute_lines else ""
    return VERIFY_TEMPLATE.format(
        num_frames=num_frames,
        prompt_text=prompt_text,
        entity_names=", ".join(entity_names) if entity_names else "(none)",
        attribute_block=block,
    )


# -- parsing ------------------------------------------------------------------

_FENCE = re.compile(r"```(?:json|JSON)?")
_TRAILING_COMMA = re.compile(r",\s*([\]}])")
_STR = r'"((?:[^"\\]|\\.)*)"'


def _balanced_end(text: str, start: int) -> int:
    """Index one past the bracket matching ``text[start]``, or -1."""
    opener = text[start]
    closer = "}" if opener == "{" else "]"
    depth = 0
    in_str = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == opener:
            depth += 1
        elif ch == closer:
            depth -= 1
            if depth == 0:
                return i + 1
    return -1


def _loads(fragment: str) -> Any:
    try:
        return json.loads(fragment)
    except (json.JSONDecodeError, ValueError):
        pass
    try:
        return json.loads(_TRAILING_COMMA.sub(r"\1", fragment))
    except (json.JSONDecodeError, ValueError):
        return None


def extract_json(raw_text: str, opener: str = "{") -> Any:
    """Return the first balanced JSON value starting with ``opener``.

    Code fences and surrounding prose are ignored. Returns ``None`` when
    nothing parses.
    """
    if not isinstance(raw_text, str):
        return None
    text = _FENCE.sub("", raw_text)
    pos = text.find(opener)
    while pos != -1:
        end = _balanced_end(text, pos)
        if end != -1:
            value = _loads(text[pos:end])
            if value is not None:
                return value
        pos = text.find(opener, pos + 1)
    return None


def neutral_payload(role: str) -> dict:
    if role == "extract":
        return {"entities": []}
    if role == "match":
        return {"matched_id": None}
    if role == "verify":
        return {"scores": [NEUTRAL_SCORE] * NUM_VERIFY_FRAMES, "corrections": None}
    raise ValueError(f"unknown oracle role {role!r}")


def _clean_entity(item: Any) -> Optional[dict]:
    if not isinstance(item, dict):
        return None
    name = item.get("entity")
    if not isinstance(name, str) or not name.strip():
        return None
    attrs = item.get("attrs", [])
    if attrs is None:
        attrs = []
    if not isinstance(attrs, list):
        return None
    attrs = [a.strip() for a in attrs if isinstance(a, str) and a.strip()]
    return {"entity": name.strip(), "attrs": attrs}


def _entities_from_list(items: list) -> list[dict]:
    out = []
    for item in items:
        cleaned = _clean_entity(item)
        if cleaned is None:
            logger.debug("dropping malformed entity %r", item)
        else:
            out.append(cleaned)
    return out


def _regex_entities(text: str) -> Optional[list[dict]]:
    hits = list(re.finditer(r'"entity"\s*:\s*' + _STR, text))
    if not hits:
        return None
    out = []
    for k, hit in enumerate(hits):
        stop = hits[k + 1].start() if k + 1 < len(hits) else len(text)
        segment = text[hit.end():stop]
        attrs: list[str] = []
        m = re.search(r'"attrs"\s*:\s*\[([^\]]*)\]', segment)
        if m:
            attrs = [a.strip() for a in re.findall(_STR, m.group(1)) if a.strip()]
        name = hit.group(1).strip()
        if name:
            out.append({"entity": name, "attrs": attrs})
    return out


def _parse_extract(text: str) -> Optional[dict]:
    obj = extract_json(text, "{")
    if isinstance(obj, dict) and isinstance(obj.get("entities"), list):
        return {"entities": _entities_from_list(obj["entities"])}
    # legacy: a bare list of entity objects
    arr = extract_json(text, "[")
    if isinstance(arr, list) and arr and all(isinstance(x, dict) for x in arr):
        return {"entities": _entities_from_list(arr)}
    found = _regex_entities(text)
    if found is not None:
        return {"entities": found}
    return None


def _as_int_id(value: Any) -> Optional[int]:
    if isinstance(value, bool) or not isinstance(value, int):
        return None
    return value


def _parse_match(text: str) -> Optional[dict]:
    obj = extract_json(text, "{")
    if isinstance(obj, dict) and "matched_id" in obj:
        value = obj["matched_id"]
        if value is None:
            return {"matched_id": None}
        ident = _as_int_id(value)
        return {"matched_id": ident}
    m = re.search(r'"matched_id"\s*:\s*(-?\d+|null)\b', text)
    if m:
        return {"matched_id": None if m.group(1) == "null" else int(m.group(1))}
    return None


def _clip_score(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return NEUTRAL_SCORE
    value = float(value)
    if not math.isfinite(value):
        return NEUTRAL_SCORE
    return min(1.0, max(0.0, value))


def _normalize_scores(values: list, num_frames: int) -> list[float]:
    scores = [_clip_score(v) for v in values[:num_frames]]
    scores += [NEUTRAL_SCORE] * (num_frames - len(scores))
    return scores


def parse_corrections(raw: Any) -> Optional[dict[int, list[str]]]:
    """Keep only well-formed ``{"<id>": {"corrected_attrs": [...]}}`` entries."""
    if not isinstance(raw, dict):
        return None
    out: dict[int, list[str]] = {}
    for key, value in raw.items():
        try:
            gid = int(str(key).strip())
        except ValueError:
            continue
        attrs = value.get("corrected_attrs") if isinstance(value, dict) else value
        if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
            continue
        out[gid] = [a.strip() for a in attrs if a.strip()]
    return out or None


def _parse_verify(text: str, num_frames: int) -> Optional[dict]:
    obj = extract_json(text, "{")
    if isinstance(obj, dict) and isinstance(obj.get("scores"), list):
        return {
            "scores": _normalize_scores(obj["scores"], num_frames),
            "corrections": parse_corrections(obj.get("corrections")),
        }
    m = re.search(r'"scores"\s*:\s*\[([^\]]*)\]', text)
    if m:
        values = []
        for tok in m.group(1).split(","):
            try:
                values.append(float(tok))
            except ValueError:
                values.append(None)
        return {"scores": _normalize_scores(values, num_frames), "corrections": None}
    return None


def try_parse(raw_text: Any, role: str, num_frames: int = NUM_VERIFY_FRAMES) -> Optional[dict]:
    """Like :func:`parse_oracle_json` but ``None`` when nothing was recoverable."""
    if role not in ROLES:
        raise ValueError(f"unknown oracle role {role!r}")
    if not isinstance(raw_text, str) or not raw_text.strip():
        return None
    if role == "extract":
        return _parse_extract(raw_text)
    if role == "match":
        return _parse_match(raw_text)
    return _parse_verify(raw_text, num_frames)


def parse_oracle_json(raw_text: Any, role: str, num_frames: int = NUM_VERIFY_FRAMES) -> dict:
    parsed = try_parse(raw_text, role, num_frames)
    if parsed is None:
        logger.info("unparseable %s response, using neutral result", role)
        payload = neutral_payload(role)
        if role == "verify":
            payload["scores"] = [NEUTRAL_SCORE] * num_frames
        return payload
    return parsed


# -- calling ------------------------------------------------------------------

def call_oracle(oracle: Optional[Oracle], request: OracleRequest) -> Optional[str]:
    """Run one oracle call under its deadline; ``None`` on any failure."""
    if oracle is None:
        return None
    if request.deadline <= 0:
        logger.warning("%s oracle call skipped: zero deadline", request.role)
        return None
    box: dict[str, Any] = {}

    def target():
        try:
            box["text"] = oracle(request)
        except Exception as exc:  # noqa: BLE001 - any oracle failure degrades
            box["error"] = exc

    worker = threading.Thread(target=target, daemon=True, name=f"oracle-{request.role}")
    worker.start()
    worker.join(request.deadline)
    if worker.is_alive():
        logger.warning("%s oracle timed out after %.3fs", request.role, request.deadline)
        return None
    if "error" in box:
        logger.warning("%s oracle failed: %s", request.role, box["error"])
        return None
    text = box.get("text")
    return text if isinstance(text, str) else None


def encode_png_b64(frame: np.ndarray, size: int = IMAGE_SIZE) -> str:
    from PIL import Image

    arr = np.asarray(frame)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    img = Image.fromarray(arr).convert("RGB").resize((size, size), Image.BILINEAR)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpOracle:
    """POSTs the request envelope to ``endpoint``; the body is the raw answer."""

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def __call__(self, request: OracleRequest) -> str:
        data = json.dumps(request.envelope()).encode("utf-8")
        req = urlrequest.Request(
            self.endpoint, data=data, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urlrequest.urlopen(req, timeout=max(request.deadline, 1e-3)) as resp:
                return resp.read().decode("utf-8", errors="replace")
        except urlerror.HTTPError as exc:
            raise OracleError(f"HTTP {exc.code} from {self.endpoint}") from exc
        except (urlerror.URLError, OSError) as exc:
            raise OracleError(f"transport failure for {self.endpoint}: {exc}") from exc

    def __repr__(self):
        return f"HttpOracle({self.endpoint!r})"


def remote_call(endpoint: str, request: OracleRequest) -> OracleResponse:
    start = time.monotonic()
    text = call_oracle(HttpOracle(endpoint), request)
    latency = time.monotonic() - start
    if text is None:
        return OracleResponse(request.role, neutral_payload(request.role), None, False, latency)
    parsed = try_parse(text, request.role)
    return OracleResponse(
        request.role,
        parsed if parsed is not None else neutral_payload(request.role),
        text,
        parsed is not None,
        latency,
    )


# -- mocks --------------------------------------------------------------------

@dataclass
class MockRule:
    role: str
    response: str = ""
    contains: Optional[str] = None
    pattern: Optional[str] = None
    metadata: dict = field(default_factory=dict)
    fail: bool = False
    times: Optional[int] = None

    def matches(self, request: OracleRequest) -> bool:
        if self.role != request.role:
            return False
        if self.contains is not None and self.contains.lower() not in request.prompt.lower():
            return False
        if self.pattern is not None and not re.search(self.pattern, request.prompt):
            return False
        return all(request.metadata.get(k) == v for k, v in self.metadata.items())


@dataclass
class MockScript:
    rules: list[MockRule] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        if not isinstance(data, dict) or not isinstance(data.get("rules", []), list):
            raise ValueError("mock script must be an object with a 'rules' list")
        rules = []
        for i, raw in enumerate(data.get("rules", [])):
            if not isinstance(raw, dict) or raw.get("role") not in ROLES:
                raise ValueError(f"rules[{i}]: needs a role in {ROLES}")
            response = raw.get("response", "")
            if not isinstance(response, str):
                response = json.dumps(response)
            unknown = set(raw) - {"role", "response", "contains", "pattern", "metadata", "fail", "times"}
            if unknown:
                raise ValueError(f"rules[{i}]: unknown keys {sorted(unknown)}")
            rules.append(
                MockRule(
                    role=raw["role"],
                    response=response,
                    contains=raw.get("contains"),
                    pattern=raw.get("pattern"),
                    metadata=dict(raw.get("metadata", {})),
                    fail=bool(raw.get("fail", False)),
                    times=raw.get("times"),
                )
            )
        return cls(rules)

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.from_dict(json.loads(Path(path).read_text()))


class MockOracle:
    """Scripted oracle: first matching rule answers, unmatched gets neutral JSON."""

    def __init__(self, script: Optional[MockScript] = None):
        self.script = script or MockScript()
        self._used = [0] * len(self.script.rules)
        self._lock = threading.Lock()
        self.calls: list[tuple[str, dict]] = []

    def __call__(self, request: OracleRequest) -> str:
        with self._lock:
            self.calls.append((request.role, dict(request.metadata)))
            for i, rule in enumerate(self.script.rules):
                if rule.times is not None and self._used[i] >= rule.times:
                    continue
                if rule.matches(request):
                    self._used[i] += 1
                    if rule.fail:
                        raise OracleError(f"scripted failure (rule {i})")
                    return rule.response
        logger.warning("mock oracle: no rule for %s request", request.role)
        return json.dumps(neutral_payload(request.role))


def mock_oracle(script: Optional[MockScript | dict] = None) -> MockOracle:
    if isinstance(script, dict):
        script = MockScript.from_dict(script)
    return MockOracle(script)


def serve_mock(oracle: MockOracle, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Return a (not yet started) HTTP server answering ``POST /oracle``."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802 - http.server API
            if self.path.rstrip("/") != "/oracle":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                request = OracleRequest(
                    role=body["role"], prompt=str(body.get("prompt", "")), metadata=body.get("metadata") or {}
                )
            except (ValueError, KeyError, TypeError):
                self.send_error(400, "bad envelope")
                return
            try:
                text = oracle(request)
            except OracleError as exc:
                self.send_error(500, str(exc))
                return
            payload = text.encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "text/plain; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt, *args):
            logger.debug("mock-oracle: " + fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)


@dataclass
class Oracles:
    """The three oracle slots a session uses; ``None`` means heuristic/neutral."""

    extract: Optional[Oracle] = None
    match: Optional[Oracle] = None
    verify: Optional[Oracle] = None
    deadline: float = DEFAULT_DEADLINE

    @classmethod
    def single(cls, oracle: Optional[Oracle], deadline: float = DEFAULT_DEADLINE) -> "Oracles":
        return cls(oracle, oracle, oracle, deadline)
