"""Procedural texture corpus used by tests, demos and the acceptance suite."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .vision import encode_ppm

CLASSES = ("stripes", "checkerboard", "dots", "rings")
SCALES = ("fine", "medium", "coarse", "wide")
PERIODS = (8, 16, 32, 56)
CAPTION_QUESTION = "Describe the micrograph."


def texture(kind: str, period: int, size: int = 224, phase: int = 0) -> np.ndarray:
    """``uint8[size, size, 3]`` grayscale-looking texture of the given kind."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy += phase
    xx += phase
    if kind == "stripes":
        on = (yy // (period / 2)) % 2 == 0
    elif kind == "checkerboard":
        on = ((yy // (period / 2)) + (xx // (period / 2))) % 2 == 0
    elif kind == "dots":
        cy = (yy % period) - period / 2
        cx = (xx % period) - period / 2
        on = cy * cy + cx * cx <= (period / 3.5) ** 2
    elif kind == "rings":
        r = np.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2)
        on = (r // (period / 2)) % 2 == 0
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    gray = np.where(on, 220, 35).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def caption_for(kind: str, scale: str) -> str:
    return f"{kind} pattern with {scale} spacing ."


def corpus(size: int = 224):
    """16 ``(image, class, caption)`` triples: every class at every scale."""
    out = []
    for kind in CLASSES:
        for scale, period in zip(SCALES, PERIODS):
            out.append((texture(kind, period, size), kind, caption_for(kind, scale)))
    return out


def write_corpus(directory, size: int = 224, by_class: bool = True, indices=None):
    """Write the corpus (or the entries at ``indices``) as PPM files.

    Returns ``[(path, class, caption)]``.
    """
    directory = Path(directory)
    rows = []
    items = corpus(size)
    for i in (range(len(items)) if indices is None else indices):
        img, kind, cap = items[i]
        sub = directory / kind if by_class else directory
        sub.mkdir(parents=True, exist_ok=True)
        path = sub / f"{kind}_{i:02d}.ppm"
        path.write_bytes(encode_ppm(img))
        rows.append((path, kind, cap))
    return rows


def mock_answer(kind: str, scale: str, tag: str, style: str = "long") -> str:
    if style == "short":
        return caption_for(kind, scale)
    topic = tag.replace("_", " ")
    return f"for {topic} , the micrograph shows a {kind} pattern with {scale} spacing ."


def write_mock_answers(rows, image_root, mock_dir, styles=("long",)) -> int:
    """Populate ``mock_dir`` with teacher answers for every template of every image.

    ``rows`` come from :func:`write_corpus`; the material hint is the class
    sub-directory name, matching what dataset generation renders.
    """
    from .datagen import BREVITY_SUFFIX, TEMPLATES, mock_key, render_templates

    mock_dir = Path(mock_dir)
    mock_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for path, kind, cap in rows:
        scale = cap.split(" with ")[1].split()[0]
        rel = Path(path).relative_to(image_root)
        hint = rel.parts[0] if len(rel.parts) > 1 else "nanomaterial"
        data = Path(path).read_bytes()
        for tmpl, q in zip(TEMPLATES, render_templates(hint)):
            for style in styles:
                asked = q + BREVITY_SUFFIX if style == "short" else q
                (mock_dir / mock_key(data, asked)).write_text(mock_answer(kind, scale, tmpl.tag, style), encoding="utf-8")
                n += 1
    return n
