"""Dataset construction: content-only captions, style-word screening, splits.

Manifest files are JSON lines with ``image``, ``caption``, ``tag`` and
``split``; anything else (blacklist version, seed) lives in a ``.meta.json``
sidecar next to it.
"""
from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import re
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CAPTION_PROMPT = (
    "Describe only the content and subject of this image in short words. Must ignore any artistic style "
    "and Do not mention the artist, the style. Focus purely on what objects or subjects are depicted. "
    "Do not use words like 'abstract', 'colorful', 'abstract expressionism'. Do not mention colors, "
    "textures, brushstrokes, lighting style, artistic movement, or overall mood."
)
STYLE_SUFFIX = " in the style of [*]."
DEFAULT_BLACKLIST = frozenset(
    {"abstract", "colorful", "colourful", "abstract expressionism", "brushstroke", "brushstrokes"}
)
BLACKLIST_VERSION = "1"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".webp", ".bmp"}
SPLITS = ("train", "test")


class CaptionServiceError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class CaptionValidationError(ValueError):
    pass


@dataclass(frozen=True)
class StyleSample:
    image_path: str
    caption: str
    tag: str
    split: str = "train"

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError(f"empty caption for {self.image_path}")
        if not self.tag.strip():
            raise ValueError(f"empty tag for {self.image_path}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_record(self) -> dict:
        return {"image": self.image_path, "caption": self.caption, "tag": self.tag, "split": self.split}

    @classmethod
    def from_record(cls, rec: dict) -> "StyleSample":
        return cls(rec["image"], rec["caption"], rec["tag"], rec.get("split", "train"))


@dataclass(frozen=True)
class Manifest:
    samples: tuple[StyleSample, ...]
    blacklist_version: str = BLACKLIST_VERSION
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        paths = [s.image_path for s in self.samples]
        dupes = [p for p, n in Counter(paths).items() if n > 1]
        if dupes:
            raise ValueError(f"duplicate image paths in manifest: {dupes[:3]}")

    @property
    def tags(self) -> set[str]:
        return {s.tag for s in self.samples}

    def subset(self, split: str) -> list[StyleSample]:
        return [s for s in self.samples if s.split == split]

    def check_split_coverage(self) -> None:
        missing = self.tags - {s.tag for s in self.subset("test")}
        if missing:
            raise ValueError(f"tags without a test sample: {sorted(missing)[:5]}")


class CaptionClient(Protocol):
    def describe(self, image_path: Path, prompt: str) -> str: ...


class RecordedCaptionClient:
    """Replays recorded captions keyed by path relative to ``root`` (or file name)."""

    def __init__(self, responses: dict[str, str], root: str | Path | None = None):
        self.responses = dict(responses)
        self.root = Path(root) if root is not None else None
        self.prompts: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "RecordedCaptionClient":
        path = Path(path)
        return cls(json.loads(path.read_text()), root=path.parent)

    def describe(self, image_path: Path, prompt: str) -> str:
        self.prompts.append(prompt)
        image_path = Path(image_path)
        keys = [image_path.name]
        if self.root is not None:
            try:
                keys.insert(0, image_path.relative_to(self.root).as_posix())
            except ValueError:
                pass
        for k in keys:
            if k in self.responses:
                return self.responses[k]
        raise CaptionServiceError(f"no recorded caption for {image_path}", attempts=1)


class OpenAICaptionClient:
    """Chat-completions vision client (GPT-4o by default) over ``httpx``."""

    def __init__(self, api_key: str, model: str = "gpt-4o", base_url: str = "https://api.openai.com/v1",
                 max_attempts: int = 3, backoff: float = 2.0, timeout: float = 60.0, http_client=None):
        import httpx

        self.model = model
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._http = http_client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"}

    @classmethod
    def from_env(cls, env_var: str = "OPENAI_API_KEY", **kwargs) -> "OpenAICaptionClient":
        key = os.environ.get(env_var)
        if not key:
            raise PermissionError(f"environment variable {env_var} is not set; captioning needs credentials")
        return cls(key, **kwargs)

    def request_body(self, image_path: Path, prompt: str) -> dict:
        mime = mimetypes.guess_type(str(image_path))[0] or "image/png"
        data = base64.b64encode(Path(image_path).read_bytes()).decode("ascii")
        return {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}},
                    ],
                }
            ],
            "temperature": 0,
        }

    def describe(self, image_path: Path, prompt: str) -> str:
        import httpx

        body = self.request_body(image_path, prompt)
        last = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._http.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers)
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["message"]["content"] or ""
                last = f"HTTP {resp.status_code}"
                if resp.status_code < 500 and resp.status_code != 429:
                    raise CaptionServiceError(f"captioning request rejected: {last}", attempt)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            if attempt < self.max_attempts:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise CaptionServiceError(f"captioning service failed: {last}", self.max_attempts)


def generate_caption(image_path: str | Path, client: CaptionClient) -> str:
    """Ask the captioning service for a content-only description."""
    image_path = Path(image_path)
    try:
        with Image.open(image_path) as im:
            im.verify()
    except (OSError, ValueError) as exc:
        raise OSError(f"unreadable image {image_path}: {exc}") from exc
    caption = client.describe(image_path, CAPTION_PROMPT)
    if not caption or not caption.strip():
        raise CaptionValidationError(f"empty caption returned for {image_path}")
    return caption


@dataclass(frozen=True)
class CaptionCheck:
    offending: frozenset[str] = frozenset()

    @property
    def accepted(self) -> bool:
        return not self.offending


def _blacklist_pattern(word: str) -> re.Pattern:
    parts = [re.escape(p) for p in word.split()]
    return re.compile(r"\b" + r"\s+".join(parts) + r"\b", re.IGNORECASE)


def validate_caption(caption: str, blacklist: Iterable[str] = DEFAULT_BLACKLIST) -> CaptionCheck:
    """Reject captions containing any blacklisted word or phrase (whole words, any case)."""
    hits = frozenset(w for w in blacklist if _blacklist_pattern(w).search(caption))
    return CaptionCheck(hits)


def load_blacklist(extension: str | Path | None = None) -> frozenset[str]:
    words = set(DEFAULT_BLACKLIST)
    if extension is not None:
        for line in Path(extension).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip().lower()
            if line:
                words.add(line)
    return frozenset(words)


def append_style_suffix(caption: str) -> str:
    if not caption.strip():
        raise ValueError("cannot suffix an empty caption")
    if caption.endswith(STYLE_SUFFIX):
        raise ValueError("caption already carries the style suffix")
    return caption + STYLE_SUFFIX


def split_dataset(manifest: Manifest, test_size: int, seed: int = 0) -> Manifest:
    """Assign exactly ``test_size`` test samples covering every tag.

    One sample per tag is drawn first (seeded shuffle within the tag), the
    rest of the test split is a seeded draw from what remains.
    """
    n = len(manifest.samples)
    by_tag: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(manifest.samples):
        by_tag[s.tag].append(i)
    if test_size < len(by_tag):
        raise ValueError(f"test_size={test_size} cannot cover {len(by_tag)} distinct tags")
    if test_size >= n:
        raise ValueError(f"test_size={test_size} must be smaller than the {n} samples")

    rng = np.random.default_rng(seed)
    chosen = set()
    for tag in sorted(by_tag):
        idx = by_tag[tag]
        chosen.add(idx[rng.permutation(len(idx))[0]])
    rest = np.array(sorted(set(range(n)) - chosen))
    chosen.update(rest[rng.permutation(len(rest))[: test_size - len(chosen)]].tolist())

    samples = tuple(replace(s, split="test" if i in chosen else "train") for i, s in enumerate(manifest.samples))
    out = Manifest(samples, manifest.blacklist_version, {**manifest.metadata, "split_seed": seed})
    out.check_split_coverage()
    return out


def discover_images(root: str | Path) -> list[tuple[Path, str]]:
    """(path, tag) pairs for ``root/<tag>/<image>``, sorted for determinism."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    found = []
    for tag_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(tag_dir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                found.append((f, tag_dir.name))
    return found


@dataclass
class BuildSummary:
    counts: dict[str, int]
    rejected: list[tuple[str, str, list[str]]]

    def lines(self) -> list[str]:
        out = [f"{tag}: {n}" for tag, n in sorted(self.counts.items())]
        out.append(f"rejected captions: {len(self.rejected)}")
        out.extend(f"  {path}: {caption!r} ({', '.join(words)})" for path, caption, words in self.rejected)
        return out


def build_manifest(image_root: str | Path, client: CaptionClient, test_size: int, seed: int = 0,
                   blacklist: frozenset[str] = DEFAULT_BLACKLIST, attempts: int = 1,
                   max_workers: int = 4) -> tuple[Manifest, BuildSummary]:
    """Caption, screen, suffix and split every image under ``image_root``.

    Captions that fail screening are requested again up to ``attempts`` times
    and dropped if they never pass.
    """
    images = discover_images(image_root)
    if not images:
        raise ValueError(f"no images under {image_root}")

    def caption_one(item):
        path, _ = item
        caption, check = "", CaptionCheck()
        for _ in range(attempts):
            caption = generate_caption(path, client)
            check = validate_caption(caption, blacklist)
            if check.accepted:
                break
        return caption, check

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(caption_one, images))

    samples, rejected = [], []
    for (path, tag), (caption, check) in zip(images, results):
        if not check.accepted:
            rejected.append((str(path), caption, sorted(check.offending)))
            continue
        samples.append(StyleSample(str(path), append_style_suffix(caption.strip()), tag))
    manifest = Manifest(tuple(samples), BLACKLIST_VERSION, {"seed": seed, "test_size": test_size})
    manifest = split_dataset(manifest, test_size, seed)
    return manifest, BuildSummary(dict(Counter(s.tag for s in manifest.samples)), rejected)


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for s in manifest.samples:
            f.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")
    meta = {"blacklist_version": manifest.blacklist_version, **manifest.metadata}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples = tuple(
        StyleSample.from_record(json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    )
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    version = meta.pop("blacklist_version", BLACKLIST_VERSION)
    return Manifest(samples, version, meta)
