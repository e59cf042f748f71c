"""Instruction-data generation against a teacher model, plus demonstration sampling."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import (
    EmptyImageDir,
    EmptyQuestion,
    HttpStatus,
    KTooLarge,
    MalformedRecord,
    MissingApiKey,
    MissingLabels,
    MockMiss,
    TeacherError,
    TeacherTimeout,
)
from .vision import cosine_rank, cosine_similarities, decode_image, is_image_file

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STYLES = ("long", "short")
BREVITY_SUFFIX = " Answer in one short sentence."


@dataclass(frozen=True)
class PromptTemplate:
    tag: str
    title: str
    questions: tuple

    def render(self, material: str = "nanomaterial") -> str:
        header = f"This electron micrograph shows a {material} sample."
        body = " ".join(f"- {q}" for q in self.questions)
        return f"{header} **{self.title}** {body}"


TEMPLATES = (
    PromptTemplate("basics", "Basics", (
        "Which kind of nanomaterial does the image show?",
        "What scale does the image use, i.e. what length does one unit of the scale bar stand for?")),
    PromptTemplate("morphology_structure", "Morphology and Structure", (
        "What overall shape or morphology do the nanostructures have?",
        "Can you see separate layers, phases or domains?",
        "Are the structures uniform in size and shape, or do they vary?")),
    PromptTemplate("size_distribution", "Size and Distribution", (
        "Roughly how large are the individual nanostructures, or what range do their sizes span?",
        "How are they spread across the field of view: evenly, in clusters, or at random?",
        "Do you see signs of aggregation or bundling?")),
    PromptTemplate("surface", "Surface Characteristics", (
        "Is the surface smooth, rough, or textured in some particular way?",
        "Are defects, pores or impurities visible on the surface?")),
    PromptTemplate("composition", "Composition and Elements", (
        "Do changes in brightness, contrast or colour hint at compositional variation?",
        "Does the image carry labels or markers naming particular elements or compounds?")),
    PromptTemplate("interactions_boundaries", "Interactions and Boundaries", (
        "How do neighbouring nanostructures relate to each other: touching, fused, or apart?",
        "Are the boundaries between structures or phases sharply defined?")),
    PromptTemplate("external_environment", "External Environment", (
        "Does the material appear to interact with a surrounding medium such as a solvent, polymer or matrix?",
        "Does the image contain objects that are not nanomaterials, and if so what are they?")),
    PromptTemplate("technique", "Image Technique and Modifications", (
        "Which imaging technique most likely produced this image (for example SEM or TEM)?",
        "Has the image been post-processed, for instance false-coloured or rendered in 3D?")),
    PromptTemplate("functional", "Functional Features", (
        "Are functional features visible, such as active sites or regions with distinct properties?",
        "Does the image capture a dynamic process, or a static state?")),
    PromptTemplate("context_application", "Context and Application", (
        "What application is this nanomaterial likely intended for?",
        "Does the image come from a real experimental sample or from a theoretical or simulated model?")),
)
TEMPLATE_TAGS = tuple(t.tag for t in TEMPLATES)


def render_templates(material_hint: str = "nanomaterial") -> list[str]:
    return [t.render(material_hint or "nanomaterial") for t in TEMPLATES]


# ------------------------------------------------------------------ teacher

def mock_key(image_bytes: bytes, question: str) -> str:
    return hashlib.sha256(image_bytes + b"\x00" + question.encode("utf-8")).hexdigest()


def chat_payload(model: str, image_bytes: bytes, question: str) -> dict:
    return {
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": question},
                {"type": "image_base64", "data": base64.b64encode(image_bytes).decode("ascii")},
            ],
        }],
    }


def _first_text(reply: dict) -> str:
    try:
        content = reply["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TeacherError(f"unexpected teacher reply: {str(reply)[:200]}") from exc
    if isinstance(content, str):
        return content
    for part in content:
        if isinstance(part, dict) and part.get("type") == "text":
            return part["text"]
    raise TeacherError("teacher reply holds no text part")


@dataclass
class TeacherClient:
    """Chat-completion client; ``mock_dir`` switches to hermetic file lookups."""

    endpoint: str | None = None
    model: str = "teacher"
    api_key_env: str = "TEACHER_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    mock_dir: str | None = None
    sleep: object = field(default=time.sleep, repr=False)
    retries: int = 0

    @property
    def mode(self) -> str:
        return "mock" if self.mock_dir is not None else "live"

    def request_qa(self, image_bytes: bytes, question: str) -> str:
        if not question or not question.strip():
            raise EmptyQuestion("question must be non-empty")
        decode_image(image_bytes)
        if self.mode == "mock":
            key = mock_key(image_bytes, question)
            path = Path(self.mock_dir) / key
            if not path.is_file():
                raise MockMiss(key, self.mock_dir)
            return path.read_text(encoding="utf-8")
        return self._post(chat_payload(self.model, image_bytes, question))

    def _post(self, payload: dict) -> str:
        if not self.endpoint:
            raise TeacherError("live mode needs an endpoint URL")
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise MissingApiKey(f"environment variable {self.api_key_env} is not set")
        headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.retries += 1
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning("teacher request failed (%s); retry %d/%d in %.2fs", last, attempt, self.max_retries, delay)
                self.sleep(delay)
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            except requests.Timeout as exc:
                last = TeacherTimeout(f"no reply within {self.timeout}s")
                last.__cause__ = exc
                continue
            except requests.ConnectionError as exc:
                last = TeacherError(f"transport error: {exc}")
                continue
            if resp.status_code >= 500:
                last = HttpStatus(resp.status_code, resp.text)
                continue
            if resp.status_code != 200:
                raise HttpStatus(resp.status_code, resp.text)
            try:
                return _first_text(resp.json())
            except ValueError as exc:
                raise TeacherError(f"teacher reply is not JSON: {exc}") from exc
        raise last


def request_qa(client: TeacherClient, image_bytes: bytes, question: str) -> str:
    return client.request_qa(image_bytes, question)


# ------------------------------------------------------------------ records

@dataclass
class InstructionSample:
    id: str
    image: str
    question: str
    answer: str
    template: str
    split: str
    category: str | None = None
    answer_style: str = "long"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    def sort_key(self):
        return (self.image, TEMPLATE_TAGS.index(self.template), STYLES.index(self.answer_style))


_REQUIRED = {"id": str, "image": str, "question": str, "answer": str, "template": str, "split": str}


def parse_sample(rec, lineno=None) -> InstructionSample:
    if not isinstance(rec, dict):
        raise MalformedRecord("record must be a JSON object", lineno)
    for key, typ in _REQUIRED.items():
        if not isinstance(rec.get(key), typ):
            raise MalformedRecord(f"field {key!r} missing or not a {typ.__name__}", lineno)
    if not rec["question"].strip() or not rec["answer"].strip():
        raise MalformedRecord("question and answer must be non-empty", lineno)
    if rec["split"] not in SPLITS:
        raise MalformedRecord(f"split must be one of {SPLITS}", lineno)
    if rec["template"] not in TEMPLATE_TAGS:
        raise MalformedRecord(f"unknown template {rec['template']!r}", lineno)
    style = rec.get("answer_style", "long")
    if style not in STYLES:
        raise MalformedRecord(f"answer_style must be one of {STYLES}", lineno)
    unknown = set(rec) - set(_REQUIRED) - {"category", "answer_style"}
    if unknown:
        raise MalformedRecord(f"unknown fields {sorted(unknown)}", lineno)
    return InstructionSample(rec["id"], rec["image"], rec["question"], rec["answer"], rec["template"],
                             rec["split"], rec.get("category"), style)


def load_samples(path, check_images: bool = True) -> list[InstructionSample]:
    """Read and validate a JSONL dataset; image paths resolve against its directory."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON: {exc.msg}", lineno) from exc
            sample = parse_sample(rec, lineno)
            if check_images and not (path.parent / sample.image).is_file():
                raise MalformedRecord(f"image {sample.image!r} not found", lineno)
            out.append(sample)
    return out


def largest_remainder(n: int, fractions) -> list[int]:
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or fr.sum() <= 0:
        raise ValueError("split fractions must be non-negative with a positive sum")
    quotas = fr / fr.sum() * n
    counts = np.floor(quotas).astype(int)
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    # tiny corpora: every split with a positive fraction gets at least one item
    wanted = [i for i in range(len(fr)) if fr[i] > 0]
    if n >= len(wanted):
        for i in wanted:
            if counts[i] == 0:
                counts[int(np.argmax(counts))] -= 1
                counts[i] = 1
    return counts.tolist()


def assign_splits(image_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Deterministic image -> split map: hash order, largest-remainder counts."""
    ranked = sorted(image_ids, key=lambda i: hashlib.sha256(f"{seed}\x00{i}".encode()).hexdigest())
    counts = largest_remainder(len(ranked), fractions)
    out = {}
    pos = 0
    for split, c in zip(SPLITS, counts):
        for i in ranked[pos:pos + c]:
            out[i] = split
        pos += c
    return out


def find_images(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise EmptyImageDir(f"{image_dir} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and is_image_file(p))
    if not files:
        raise EmptyImageDir(f"no PPM/MRAW images under {image_dir}")
    return files


def generate_dataset(image_dir, client: TeacherClient, out_path, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                     styles=("long",), parallel: int = 4) -> dict:
    """Ask the teacher every template for every image; resumable and deterministic.

    Images in sub-directories take the sub-directory name as their category,
    which is also the material hint in the rendered questions.
    """
    root = Path(image_dir)
    out_path = Path(out_path)
    files = find_images(root)
    base = out_path.parent.resolve()
    entries = []
    for f in files:
        rel = f.relative_to(root)
        category = rel.parts[0] if len(rel.parts) > 1 else None
        entries.append((os.path.relpath(f.resolve(), base), f, category, rel.as_posix()))
    by_ref = assign_splits([e[3] for e in entries], fractions, seed)
    splits = {e[0]: by_ref[e[3]] for e in entries}
    names = {e[0]: e[3] for e in entries}

    existing = load_samples(out_path, check_images=False) if out_path.exists() else []
    done = {(s.image, s.template, s.answer_style) for s in existing}
    tasks = []
    for image_ref, f, category, _ in entries:
        questions = render_templates(category or "nanomaterial")
        for tmpl, q in zip(TEMPLATES, questions):
            for style in styles:
                if (image_ref, tmpl.tag, style) not in done:
                    tasks.append((image_ref, f, category, tmpl.tag, q, style))

    lock = threading.Lock()
    new = []

    def run(task):
        image_ref, f, category, tag, q, style = task
        asked = q + BREVITY_SUFFIX if style == "short" else q
        answer = client.request_qa(f.read_bytes(), asked).strip()
        sid = f"{names[image_ref]}#{tag}" + ("#short" if style == "short" else "")
        sample = InstructionSample(sid, image_ref, q, answer, tag, splits[image_ref], category, style)
        with lock, open(out_path, "a", encoding="utf-8") as fh:
            fh.write(sample.to_json() + "\n")
            new.append(sample)

    if tasks:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        workers = max(1, parallel if client.mode == "live" else 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [pool.submit(run, t) for t in tasks]:
                fut.result()
    records = sorted(existing + new, key=InstructionSample.sort_key)
    for r in records:
        r.split = splits.get(r.image, r.split)
    text = "".join(r.to_json() + "\n" for r in records)
    if not out_path.exists() or out_path.read_text(encoding="utf-8") != text:
        out_path.write_text(text, encoding="utf-8")
    counts = {s: sum(1 for r in records if r.split == s) for s in SPLITS}
    return {"images": len(entries), "new": len(new), "total": len(records), **counts}


# ------------------------------------------------------------------ sampling

def _check_k(K, available):
    if K > available:
        raise KTooLarge(f"K={K} exceeds the {available} eligible candidates")


def select_few_shot(target, corpus, K: int, exclude: int | None = None) -> list[int]:
    """Top-K most cosine-similar corpus rows, skipping the target's own index."""
    order = [int(i) for i in cosine_rank(target, corpus) if i != exclude]
    _check_k(K, len(order))
    return order[:K]


def _labelled(target_label, corpus, labels):
    if target_label is None or labels is None or len(labels) != len(corpus):
        raise MissingLabels("class labels are required for every corpus row and the target")
    return np.asarray(labels, dtype=object)


def select_intra_dissimilar(target, target_label, corpus, labels, K: int, exclude: int | None = None) -> list[int]:
    """Least similar rows of the target's own class (ascending cosine)."""
    labels = _labelled(target_label, corpus, labels)
    sims = cosine_similarities(target, corpus)
    idx = [i for i in range(len(corpus)) if labels[i] == target_label and i != exclude]
    _check_k(K, len(idx))
    return sorted(idx, key=lambda i: (sims[i], i))[:K]


def select_inter_similar(target, target_label, corpus, labels, K: int, exclude: int | None = None) -> list[int]:
    """Most similar rows from every other class (descending cosine)."""
    labels = _labelled(target_label, corpus, labels)
    sims = cosine_similarities(target, corpus)
    idx = [i for i in range(len(corpus)) if labels[i] != target_label and i != exclude]
    _check_k(K, len(idx))
    return sorted(idx, key=lambda i: (-sims[i], i))[:K]
