"""Procedural shapes-and-captions corpus and its on-disk format.

Each image is a 32x32 RGB canvas with one solid shape in one quadrant. Captions
are 1-3 template sentences, each naming shape, color, quadrant and background.
With probability ``rho`` the caption describes the image; otherwise it describes
an independently drawn scene. Labels always describe the image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .embeddings import TokenSequence, Vocabulary, build_vocab, tokenize

IMAGE_SIZE = 32
SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "purple": (0.6, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.0),
}
QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
BACKGROUNDS = {"dark": 0.05, "gray": 0.3, "pale": 0.55}
QUESTION = "what shape ?"

TEMPLATES = (
    "a {color} {shape} sits in the {quad} corner on a {bg} background",
    "there is a {color} {shape} in the {quad} part of a {bg} image",
    "the picture shows one {color} {shape} placed {quad} over {bg} ground",
    "the {quad} region contains a {color} {shape} against a {bg} backdrop",
    "we can see a single {shape} colored {color} near the {quad} with a {bg} background",
    "this {bg} scene has a {color} {shape} located at the {quad}",
    "look at the {color} {shape} drawn in the {quad} area of the {bg} canvas",
    "a small {shape} painted {color} appears {quad} on {bg} paper",
    "in the {quad} corner you will find a {color} {shape} resting on a {bg} field",
    "an image with a {bg} surface and one {color} {shape} toward the {quad}",
    "the only object is a {color} {shape} and it lies {quad} on the {bg} background",
    "notice how the {color} {shape} occupies the {quad} quarter of this {bg} frame",
    "my drawing has a {color} {shape} sitting {quad} above a {bg} floor",
    "inside the {quad} quadrant lies a {color} {shape} over {bg} tones",
    "one can spot a {color} {shape} at the {quad} of this {bg} photo",
    "the {bg} background holds a lone {color} {shape} toward its {quad} side",
    "somewhere {quad} there is a bright {color} {shape} on {bg} space",
    "every viewer would describe a {color} {shape} within the {quad} zone of a {bg} layout",
)

IMAGE_MAGIC = b"PTIMG001"


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    quadrant: str
    background: str
    jitter: tuple[int, int] = (0, 0)

    @property
    def labels(self) -> dict[str, str]:
        return {"shape": self.shape, "color": self.color, "quadrant": self.quadrant}


def random_spec(rng: np.random.Generator) -> SceneSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    quadrant = QUADRANTS[rng.integers(len(QUADRANTS))]
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    jitter = tuple(int(v) for v in rng.integers(-2, 3, size=2))
    return SceneSpec(shape, color, quadrant, background, jitter)


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return dy * dy + dx * dx <= 25
    if shape == "square":
        return (np.abs(dy) <= 4) & (np.abs(dx) <= 4)
    if shape == "triangle":
        # apex up, widths 1,1,3,3,...,9 over rows -4..4
        return (np.abs(dy) <= 4) & (2 * np.abs(dx) <= dy + 4)
    if shape == "cross":
        return ((np.abs(dy) <= 1) & (np.abs(dx) <= 5)) | ((np.abs(dx) <= 1) & (np.abs(dy) <= 5))
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: SceneSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize without anti-aliasing; the shape is centred in its quadrant plus jitter."""
    half = size // 2
    row = half // 2 + (half if spec.quadrant.startswith("lower") else 0) + spec.jitter[0]
    col = half // 2 + (half if spec.quadrant.endswith("right") else 0) + spec.jitter[1]
    yy, xx = np.mgrid[0:size, 0:size]
    mask = _shape_mask(spec.shape, yy - row, xx - col)
    image = np.full((size, size, 3), BACKGROUNDS[spec.background], dtype=np.float32)
    image[mask] = COLORS[spec.color]
    return image


def decode_labels(image: np.ndarray) -> dict[str, str]:
    """Recover shape/color/quadrant from pixels: used to audit generated data."""
    flat = image.reshape(-1, image.shape[-1])
    values, counts = np.unique(flat, axis=0, return_counts=True)
    background = values[np.argmax(counts)]
    fg = np.any(image != background, axis=-1)
    ys, xs = np.nonzero(fg)
    color_rgb = image[ys[0], xs[0]]
    color = min(COLORS, key=lambda c: float(np.sum((np.array(COLORS[c]) - color_rgb) ** 2)))
    half = image.shape[0] / 2
    quadrant = ("lower" if ys.mean() >= half else "upper") + " " + ("right" if xs.mean() >= half else "left")
    height, width = np.ptp(ys) + 1, np.ptp(xs) + 1
    fill = len(ys) / (height * width)
    if fill > 0.95:
        shape = "square"
    elif fill > 0.6:
        shape = "circle"
    elif height == 9:
        shape = "triangle"
    else:
        shape = "cross"
    return {"shape": shape, "color": color, "quadrant": quadrant}


def describe(spec: SceneSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(1, 4))
    chosen = rng.choice(len(TEMPLATES), size=n, replace=False)
    fields = {"color": spec.color, "shape": spec.shape, "quad": spec.quadrant, "bg": spec.background}
    return " ".join(TEMPLATES[i].format(**fields) + " ." for i in chosen)


def generate_pair(rng: np.random.Generator, rho: float) -> tuple[np.ndarray, str, dict[str, str]]:
    """One (image, caption, labels) sample; the caption is truthful with probability ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    spec = random_spec(rng)
    truthful = rng.random() < rho
    text_spec = spec if truthful else random_spec(rng)
    return render(spec), describe(text_spec, rng), spec.labels


def sentences(text: str) -> list[str]:
    return [s.strip() for s in text.split(".") if s.strip()]


def sample_sentence(text: str, rng: np.random.Generator) -> str:
    parts = sentences(text)
    if not parts:
        raise ValueError("text contains no sentences")
    return parts[int(rng.integers(len(parts)))] + " ."


# -- on-disk formats -------------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    h, w, c = image.shape
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<III", h, w, c) + image.tobytes(order="C"))


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image file (bad magic)")
    h, w, c = struct.unpack("<III", raw[8:20])
    body = raw[20:]
    if len(body) != h * w * c * 4:
        raise ValueError(f"{path}: expected {h * w * c * 4} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


@dataclass
class DatasetManifest:
    records: list[dict]
    split: str
    rho: float
    root: Path

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, record: dict) -> Path:
        return self.root / record["image"]

    def load_images(self) -> np.ndarray:
        return np.stack([read_image(self.image_path(r)) for r in self.records])

    def subset(self, fraction: float) -> "DatasetManifest":
        """Leading ``fraction`` of records (at least one)."""
        n = max(1, int(round(fraction * len(self.records))))
        return DatasetManifest(self.records[:n], self.split, self.rho, self.root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return DatasetManifest(records, records[0]["split"], records[0]["rho"], path.parent)


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def build_dataset(
    n: int,
    rho: float,
    seed: int,
    out_dir,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    names: Sequence[str] = ("train", "val", "test"),
    vocab_size: int = 1000,
) -> dict[str, Path]:
    """Generate ``n`` samples and write per-split manifests, image files and a train vocabulary."""
    if n < 1:
        raise ValueError("n must be positive")
    if len(fractions) != len(names):
        raise ValueError(f"need one fraction per split {tuple(names)}, got {tuple(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    rng = np.random.default_rng(seed)
    counts = split_counts(n, fractions)
    paths: dict[str, Path] = {}
    train_texts: list[str] = []
    index = 0
    for name, count in zip(names, counts):
        split_dir = out / name
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        for _ in range(count):
            image, text, labels = generate_pair(rng, rho)
            rid = f"{index:06d}"
            index += 1
            if any(len(s.split()) < 3 for s in sentences(text)):
                continue
            write_image(split_dir / "images" / f"{rid}.bin", image)
            record = {"id": rid, "image": f"images/{rid}.bin", "text": text, "labels": labels, "split": name, "rho": rho}
            lines.append(json.dumps(record, sort_keys=True))
            if name == names[0]:
                train_texts.append(text)
        # manifest last, after every image it references exists
        (split_dir / "manifest.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        paths[name] = split_dir / "manifest.jsonl"
    corpus = train_texts + [QUESTION] if train_texts else [QUESTION]
    build_vocab(corpus, vocab_size).save(out / "vocab.txt")
    paths["vocab"] = out / "vocab.txt"
    return paths


# -- batching --------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    tokens: list[TokenSequence]
    labels: list[dict[str, str]]
    ids: list[str]
    texts: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def batch_iterator(
    manifest: DatasetManifest,
    batch_size: int,
    rng: np.random.Generator,
    mode: str,
    vocab: Vocabulary,
    max_len: int,
    images: np.ndarray | None = None,
) -> Iterator[Batch]:
    """One epoch: seeded shuffle (train mode), one sampled sentence per caption, tokenized.

    Train mode drops the final short batch; eval mode keeps manifest order and the short batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if not manifest.records:
        raise ValueError("empty manifest")
    if images is None:
        images = manifest.load_images()
    n = len(manifest.records)
    order = rng.permutation(n) if mode == "train" else np.arange(n)
    stop = n - n % batch_size if mode == "train" else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        recs = [manifest.records[i] for i in idx]
        texts = [sample_sentence(r["text"], rng) for r in recs]
        yield Batch(
            images[idx],
            [tokenize(t, vocab, max_len) for t in texts],
            [r["labels"] for r in recs],
            [r["id"] for r in recs],
            texts,
        )


def batches_per_epoch(n: int, batch_size: int, mode: str = "train") -> int:
    return n // batch_size if mode == "train" else -(-n // batch_size)
