"""Study ingestion, caption handling, vocabulary and the synthetic toy corpus."""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

FRONTAL = "frontal"
LATERAL = "lateral"
VIEWS = (FRONTAL, LATERAL)

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

IMAGE_SIZE = 224
MIN_SIDE = 32

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*|[^\sa-z0-9]")


@dataclass(frozen=True)
class RawReport:
    impression: str = ""
    findings: str = ""
    tags: str = ""
    comparison: str = ""
    indication: str = ""


@dataclass(frozen=True, eq=False)
class XRayStudy:
    study_id: str
    image: np.ndarray
    view: str
    report: RawReport

    def __post_init__(self):
        if self.view not in VIEWS:
            raise DataError(f"study {self.study_id}: unknown view {self.view!r}")
        img = self.image
        if img.ndim != 2:
            raise DataError(f"study {self.study_id}: image must be 2-D, got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise DataError(f"study {self.study_id}: pixel values outside [0, 1]")


@dataclass
class Vocabulary:
    """Token <-> id map with PAD/START/END/UNK pinned to ids 0..3."""

    itos: list[str] = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, idx = line.rsplit("\t", 1)
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataError(f"{path}: vocabulary ids are not contiguous from 0")
        return cls([tok for _, tok in pairs])


@dataclass(frozen=True)
class TokenizedReport:
    sentences: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.sentences:
            raise DataError("a tokenized report needs at least one sentence")
        for sent in self.sentences:
            if not sent or sent[-1] != END or END in sent[:-1]:
                raise DataError("every sentence must end with exactly one END")

    def validate(self, vocab: Vocabulary) -> None:
        n = len(vocab)
        for sent in self.sentences:
            for idx in sent:
                if not 0 <= idx < n:
                    raise DataError(f"token id {idx} outside vocabulary of size {n}")

    def token_ids(self) -> list[int]:
        """All ids in reading order without the END markers."""
        return [i for sent in self.sentences for i in sent[:-1]]

    def words(self, vocab: Vocabulary) -> list[str]:
        return [vocab.token(i) for i in self.token_ids()]


# ---------------------------------------------------------------------------
# captions and tokenization


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def extract_caption(report: RawReport) -> str:
    parts = [" ".join(report.impression.split()), " ".join(report.findings.split())]
    caption = " ".join(p for p in parts if p).lower()
    if not caption:
        raise DataError("report has neither impression nor findings; exclude the study")
    return caption


def _sentences_from_text(text: str) -> list[list[str]]:
    if "\n" in text:
        lines = text.split("\n")
        if lines[-1] == "":
            lines.pop()
        return [line.split(" ") if line else [] for line in lines]
    sentences, current = [], []
    for tok in split_words(text):
        current.append(tok)
        if tok == ".":
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences or [[]]


def tokenize(text: str, vocab: Vocabulary) -> TokenizedReport:
    """Map a caption to sentence-segmented ids.

    Plain captions are split on "." tokens. Text produced by ``detokenize``
    carries one sentence per line and is read back verbatim.
    """
    sentences = []
    for words in _sentences_from_text(text):
        ids = []
        for w in words:
            if w in vocab:
                ids.append(vocab.id(w))
            else:
                ids.extend(vocab.id(piece) for piece in split_words(w))
        sentences.append(tuple(ids) + (END,))
    return TokenizedReport(tuple(sentences))


def detokenize(report: TokenizedReport, vocab: Vocabulary) -> str:
    return "".join(
        " ".join(vocab.token(i) for i in sent[:-1]) + "\n" for sent in report.sentences
    )


def report_text(report: TokenizedReport, vocab: Vocabulary) -> str:
    """Single-line rendering for display and export."""
    return " ".join(report.words(vocab))


def build_vocabulary(captions, min_freq: int = 3) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    captions = list(captions)
    if not captions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for cap in captions for tok in split_words(cap))
    kept = sorted(t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


# ---------------------------------------------------------------------------
# images


def preprocess_image(image: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size``, clipped to [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DataError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DataError(f"image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if (h, w) == (size, size):
        return image.copy()
    t = torch.from_numpy(image)[None, None]
    antialias = h > size or w > size
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False,
                        antialias=antialias)
    return out[0, 0].clamp_(0.0, 1.0).numpy()


def resize_tensor(images: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of an (N, 1, H, W) batch; identity when already at size."""
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    antialias = images.shape[-1] > size
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False,
                         antialias=antialias)


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    return arr / 255.0


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# collections


def load_collection(root) -> tuple[list[XRayStudy], list[str]]:
    """Read a study directory; returns (studies sorted by id, ids skipped for lack of a report)."""
    root = Path(root)
    image_dir, report_dir = root / "images", root / "reports"
    image_files = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []

    owner: dict[str, tuple[RawReport, str]] = {}
    if report_dir.is_dir():
        for path in sorted(report_dir.glob("*.json")):
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"unreadable report file {path}: {exc}") from exc
            report = RawReport(**{k: str(doc.get(k) or "") for k in
                                  ("impression", "findings", "tags", "comparison", "indication")})
            views = doc.get("view", FRONTAL)
            for sid in doc.get("images", []):
                view = views.get(sid, FRONTAL) if isinstance(views, dict) else views
                owner[sid] = (report, str(view).lower())

    studies, skipped = [], []
    for path in image_files:
        sid = path.stem
        if sid not in owner:
            skipped.append(sid)
            continue
        report, view = owner[sid]
        studies.append(XRayStudy(sid, load_png(path), view, report))
    if skipped:
        log.warning("%d image(s) without a report were skipped", len(skipped))
    return studies, skipped


def parse_study_collection(root) -> list[XRayStudy]:
    return load_collection(root)[0]


def write_study_collection(studies, root) -> None:
    """Write studies in the on-disk layout, one report file per study."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "reports").mkdir(parents=True, exist_ok=True)
    for s in studies:
        save_png(s.image, root / "images" / f"{s.study_id}.png")
        doc = {
            "impression": s.report.impression,
            "findings": s.report.findings,
            "tags": s.report.tags,
            "comparison": s.report.comparison,
            "indication": s.report.indication,
            "view": s.view,
            "images": [s.study_id],
        }
        (root / "reports" / f"{s.study_id}.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def filter_frontal(studies):
    return [s for s in studies if s.view == FRONTAL]


def usable_studies(studies):
    """Drop studies whose caption would be empty."""
    out = []
    for s in studies:
        try:
            extract_caption(s.report)
        except DataError:
            log.warning("study %s excluded: empty caption", s.study_id)
            continue
        out.append(s)
    return out


def split_train_test(studies, ratio: float = 0.8, seed: int = 0):
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    studies = list(studies)
    if len(studies) < 2:
        raise DataError("need at least two studies to split")
    order = list(range(len(studies)))
    random.Random(seed).shuffle(order)
    n_train = int(np.floor(ratio * len(studies)))
    train = [studies[i] for i in order[:n_train]]
    test = [studies[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# toy corpus

TOY_SIZE = 64
SHAPES = ("square", "circle", "bar")
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")
_SQUARE_SIDE = 16
_CIRCLE_RADIUS = 6
_BAR_SHAPE = (4, 24)
_JITTER = 1


def quadrant_slices(size: int, quadrant: str) -> tuple[slice, slice]:
    half = size // 2
    q = QUADRANTS.index(quadrant)
    rows = slice(0, half) if q < 2 else slice(half, size)
    cols = slice(0, half) if q % 2 == 0 else slice(half, size)
    return rows, cols


def _draw(canvas: np.ndarray, shape: str, cy: int, cx: int) -> None:
    if shape == "square":
        h = _SQUARE_SIDE // 2
        canvas[cy - h:cy + h, cx - h:cx + h] = 1.0
    elif shape == "circle":
        yy, xx = np.mgrid[:canvas.shape[0], :canvas.shape[1]]
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= _CIRCLE_RADIUS ** 2] = 1.0
    else:
        bh, bw = _BAR_SHAPE
        canvas[cy - bh // 2:cy - bh // 2 + bh, cx - bw // 2:cx - bw // 2 + bw] = 1.0


def toy_report(placements) -> RawReport:
    """Templated report for a list of (shape, quadrant) in canonical shape order."""
    if not placements:
        return RawReport(impression="no findings.")
    findings = " ".join(f"there is a {shape} in the {quad}." for shape, quad in placements)
    return RawReport(impression="abnormal study.", findings=findings)


def toy_view(i: int) -> str:
    """51 of every 100 consecutive indices are frontal, interleaved."""
    return FRONTAL if (i + 1) * 51 // 100 > i * 51 // 100 else LATERAL


def synthesize_toy_dataset(n: int, seed: int = 0, size: int = TOY_SIZE) -> list[XRayStudy]:
    """Images with 0-3 bright shapes, each in its own quadrant, and matching templated reports."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    half, quarter = size // 2, size // 4
    studies = []
    for i in range(n):
        present = [s for s in SHAPES if rng.random() < 0.5]
        quads = rng.permutation(len(QUADRANTS))[:len(present)]
        canvas = np.zeros((size, size), dtype=np.float32)
        placements = []
        for shape, q in zip(present, quads):
            quad = QUADRANTS[q]
            cy = quarter + (half if q >= 2 else 0) + int(rng.integers(-_JITTER, _JITTER + 1))
            cx = quarter + (half if q % 2 else 0) + int(rng.integers(-_JITTER, _JITTER + 1))
            _draw(canvas, shape, cy, cx)
            placements.append((shape, quad))
        studies.append(XRayStudy(f"toy{i:05d}", canvas, toy_view(i), toy_report(placements)))
    return studies


def parse_toy_report(text: str) -> dict[str, str]:
    """shape -> quadrant, read back from templated report text."""
    words = split_words(text)
    found = {}
    for j, w in enumerate(words):
        if w in SHAPES and w not in found:
            quad = next((x for x in words[j + 1:j + 5] if x in QUADRANTS), None)
            found[w] = quad
    return found


def toy_shape_labels(text: str) -> tuple[int, int, int]:
    found = parse_toy_report(text)
    return tuple(int(s in found) for s in SHAPES)


def detect_shapes(image: np.ndarray, threshold: float = 0.5) -> dict[str, str]:
    """shape -> quadrant recovered from pixels by connected-component geometry."""
    from scipy import ndimage

    mask = np.asarray(image) > threshold
    labels, count = ndimage.label(mask)
    size = mask.shape[0]
    found = {}
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        h, w = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
        fill = (labels[sl] == k).sum() / float(h * w)
        if max(h, w) >= 3 * min(h, w):
            shape = "bar"
        elif fill > 0.95:
            shape = "square"
        else:
            shape = "circle"
        cy, cx = (sl[0].start + sl[0].stop) / 2, (sl[1].start + sl[1].stop) / 2
        q = (2 if cy >= size / 2 else 0) + (1 if cx >= size / 2 else 0)
        found[shape] = QUADRANTS[q]
    return found


def with_image(study: XRayStudy, image: np.ndarray) -> XRayStudy:
    return replace(study, image=image)


@dataclass
class PairSet:
    """Batched image/report pairs ready for training: images are (N, 1, S, S) in [0, 1]."""

    images: torch.Tensor
    reports: list[TokenizedReport]
    study_ids: list[str]
    captions: list[str]

    def __len__(self) -> int:
        return len(self.reports)

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet(self.images[idx], [self.reports[i] for i in idx],
                       [self.study_ids[i] for i in idx], [self.captions[i] for i in idx])


def make_pairs(studies, vocab: Vocabulary, size: int) -> PairSet:
    studies = list(studies)
    if not studies:
        return PairSet(torch.zeros(0, 1, size, size), [], [], [])
    images = np.stack([preprocess_image(s.image, size) for s in studies])
    captions = [extract_caption(s.report) for s in studies]
    reports = [tokenize(c, vocab) for c in captions]
    return PairSet(torch.from_numpy(images)[:, None], reports,
                   [s.study_id for s in studies], captions)
