"""Image and text preprocessing shared by every stage.

Images are resized straight to 224x224 (no crop, aspect ratio not kept) and
normalized with the CLIP statistics. Text is always turned into exactly 77 ids.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SIZE = 224
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
MAX_LENGTH = 77


def load_rgb(path: str | Path) -> np.ndarray:
    """Read an image file as an HxWx3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def _as_float_hwc(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise ValueError(f"expected an RGB image, got mode {image.mode!r}")
        return np.asarray(image, dtype=np.float32) / 255.0
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an HxWx3 RGB array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image has no pixels")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def preprocess_image(image, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Resize (bilinear, antialiased) and normalize an RGB image.

    Accepts a PIL RGB image, a uint8 HxWx3 array, or a float HxWx3 array with
    values in [0, 1]. Returns a float32 tensor of shape (3, size, size).
    """
    arr = _as_float_hwc(image)
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", antialias=True, align_corners=False)
    mean = torch.tensor(CLIP_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(CLIP_STD, dtype=x.dtype).view(1, 3, 1, 1)
    x = (x - mean) / std
    if not torch.isfinite(x).all():
        raise ValueError("non-finite pixel values after normalization")
    return x[0]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != MAX_LENGTH or len(self.mask) != MAX_LENGTH:
            raise ValueError("token sequences are always 77 long")

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.ids, dtype=torch.long)


_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class ToyTokenizer:
    """Whitespace/punctuation tokenizer over a fixed hashed vocabulary.

    Stands in for the CLIP BPE tokenizer in toy mode so nothing has to be
    downloaded. Word ids come from crc32, so they are stable across processes.
    """

    pad_id = 0
    bos_id = 1
    eos_id = 2
    n_special = 3

    def __init__(self, vocab_size: int = 1024):
        self.vocab_size = vocab_size

    def word_id(self, word: str) -> int:
        h = zlib.crc32(word.lower().encode("utf-8"))
        return self.n_special + h % (self.vocab_size - self.n_special)

    def __call__(self, text: str) -> TokenSequence:
        words = _WORD_RE.findall(text)
        body = [self.word_id(w) for w in words][: MAX_LENGTH - 2]
        ids = [self.bos_id, *body, self.eos_id]
        mask = [1] * len(ids) + [0] * (MAX_LENGTH - len(ids))
        ids += [self.pad_id] * (MAX_LENGTH - len(ids))
        return TokenSequence(tuple(ids), tuple(mask))


class ClipTokenizer:
    """Adapter giving a Hugging Face CLIP tokenizer the TokenSequence contract."""

    def __init__(self, hf_tokenizer):
        self.hf = hf_tokenizer
        self.bos_id = hf_tokenizer.bos_token_id
        self.eos_id = hf_tokenizer.eos_token_id
        self.pad_id = hf_tokenizer.pad_token_id

    def __call__(self, text: str) -> TokenSequence:
        out = self.hf(text, padding="max_length", truncation=True, max_length=MAX_LENGTH)
        return TokenSequence(tuple(out["input_ids"]), tuple(out["attention_mask"]))


_default_tokenizer = ToyTokenizer()


def tokenize(text: str, tokenizer=None) -> TokenSequence:
    """Tokenize to exactly 77 ids (BOS first, EOS kept under truncation)."""
    return (tokenizer or _default_tokenizer)(text)
