"""Feature extraction from image directories into FeatureFile outputs.

Heavy pretrained vision backbones are out of scope for this deployment;
the provided backbones are classical, deterministic descriptors covering
the same roles (repeated-view detector features, realism features, class
probabilities, and bag-of-words text embeddings).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from bridge.config import BridgeError

FEATURE_MAGIC = b"FTV1"

BACKBONES = ("color-hist", "pixels", "class-probs", "text-hash")

_HIST_BINS = 16
_PIXEL_SIZE = 8
_NUM_CLASSES = 12
_TEXT_DIM = 64


def save_features(matrix: np.ndarray, path: str) -> None:
    if matrix.ndim != 2:
        raise BridgeError("feature matrix must be 2-D")
    k, d = matrix.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", k, d) + matrix.astype("<f4").tobytes())


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except OSError as exc:
        raise BridgeError(f"unreadable image {path}: {exc}") from exc


def backbone_dim(backbone: str) -> int:
    return {
        "color-hist": 3 * _HIST_BINS,
        "pixels": 3 * _PIXEL_SIZE * _PIXEL_SIZE,
        "class-probs": _NUM_CLASSES,
        "text-hash": _TEXT_DIM,
    }[backbone]


def _color_hist(img: np.ndarray) -> np.ndarray:
    chans = []
    for c in range(3):
        h, _ = np.histogram(img[..., c], bins=_HIST_BINS, range=(0.0, 1.0))
        chans.append(h / img[..., c].size)
    return np.concatenate(chans)


def _pixels(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.linspace(0, h - 1, _PIXEL_SIZE).round().astype(int)
    xs = np.linspace(0, w - 1, _PIXEL_SIZE).round().astype(int)
    return img[np.ix_(ys, xs)].reshape(-1)

def _class_probs(img: np.ndarray) -> np.ndarray:
    """Softmax over hue-sector mass: a deterministic stand-in classifier."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    delta = mx - mn
    hue = np.zeros_like(mx)
    nz = delta > 1e-12
    rmax = nz & (mx == r)
    gmax = nz & ~rmax & (mx == g)
    bmax = nz & ~rmax & ~gmax
    hue[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
    hue[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
    hue[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    hist, _ = np.histogram(hue[nz], bins=_NUM_CLASSES, range=(0.0, 6.0))
    logits = hist / max(hue[nz].size, 1) * 10.0
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _text_hash(line: str) -> np.ndarray:
    vec = np.zeros(_TEXT_DIM)
    for word in line.lower().split():
        vec[hash_word(word) % _TEXT_DIM] += 1.0
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else vec


def hash_word(word: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:4], "little")


def extract_features(source: str, backbone: str, out_path: str) -> int:
    """Write one feature row per input item; returns the row count.

    For image backbones ``source`` is a directory of images processed in
    filename order; for ``text-hash`` it is a text file with one prompt per
    line.
    """
    if backbone not in BACKBONES:
        raise BridgeError(f"unknown backbone {backbone!r}; known: {BACKBONES}")
    rows = []
    if backbone == "text-hash":
        with open(source) as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(_text_hash(line))
    else:
        fn = {"color-hist": _color_hist, "pixels": _pixels, "class-probs": _class_probs}[backbone]
        names = sorted(
            n for n in os.listdir(source)
            if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
        )
        if not names:
            raise BridgeError(f"no images found in {source}")
        for name in names:
            rows.append(fn(_load_image(os.path.join(source, name))))
    matrix = np.stack(rows)
    save_features(matrix, out_path)
    return matrix.shape[0]
