"""Mask-annotated image datasets: loading, validation, and synthesis.

On-disk format is a JSON Lines manifest, one record per sample, with paths
(relative to the manifest) to an 8-bit RGB PNG image, an 8-bit grayscale
object-mask PNG, and one mask PNG per positive attribute. Whole-object
attributes carry no separate mask on disk; the loader aliases them to the
object mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CLASSES = (
    "bird",
    "car",
    "cat",
    "deer",
    "dog",
    "equine",
    "frog",
    "plane",
    "ship",
    "truck",
)

ATTRIBUTES = (
    "beak",
    "colored-eyes",
    "ears",
    "floppy-ears",
    "hairy",
    "horns",
    "long",
    "long-snout",
    "mane",
    "metallic",
    "patterned",
    "rectangular",
    "tail",
    "tall",
    "text",
    "wet",
    "wheels",
    "wings",
)

# Attributes that cover the entire object; their mask is the object mask.
WHOLE_OBJECT_ATTRIBUTES = frozenset(
    {"metallic", "hairy", "wet", "tall", "long", "rectangular", "patterned"}
)

# Grayscale mask pixels at or above this 8-bit value decode to 1.
MASK_THRESHOLD = 128

MIN_IMAGE_SIDE = 8


class ManifestError(RuntimeError):
    """Raised for missing files or malformed manifest records."""

    def __init__(self, message: str, sample_id: str | None = None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"sample {sample_id!r}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_sample."""

    sample_id: str
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.sample_id}: {self.field}: {self.rule}"


@dataclass
class Sample:
    """One annotated image.

    image: float array (H, W, 3) with values in [0, 1].
    object_mask: {0,1} float array (H, W).
    attributes: mapping attribute name -> 0/1 (all 18 names present).
    attribute_masks: mask per positive attribute; whole-object attributes
        alias object_mask.
    """

    id: str
    split: str
    class_label: str
    image: np.ndarray
    object_mask: np.ndarray
    attributes: dict[str, int]
    attribute_masks: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Dataset:
    """Ordered collection of samples with a fixed attribute vocabulary.

    Immutable after load by convention; safe for concurrent reads.
    """

    samples: list[Sample]
    attribute_names: tuple[str, ...] = ATTRIBUTES

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name: str) -> "Dataset":
        """Samples belonging to one split, order preserved."""
        return Dataset(
            samples=[s for s in self.samples if s.split == name],
            attribute_names=self.attribute_names,
        )

    @property
    def train(self) -> "Dataset":
        return self.split("train")

    @property
    def test(self) -> "Dataset":
        return self.split("test")

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def class_labels(self) -> dict[str, str]:
        return {s.id: s.class_label for s in self.samples}

    def attribute_vector(self, sample: Sample) -> np.ndarray:
        return np.array(
            [sample.attributes.get(a, 0) for a in self.attribute_names], dtype=np.float64
        )


def _decode_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def _decode_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"), dtype=np.uint8)
    return (raw >= MASK_THRESHOLD).astype(np.float64)


def load_manifest(path: str | Path) -> Dataset:
    """Load a JSONL manifest into a Dataset, in manifest order.

    Masks are thresholded to {0,1} regardless of source bit depth. Raises
    ManifestError naming the offending sample on missing files, malformed
    records, or image/mask shape mismatch.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    attribute_names: tuple[str, ...] | None = None

    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from exc
            sid = rec.get("id")
            if not isinstance(sid, str) or not sid:
                raise ManifestError(f"line {lineno}: missing or invalid 'id'")
            if sid in seen_ids:
                raise ManifestError("duplicate sample id", sample_id=sid)
            seen_ids.add(sid)
            for key in ("split", "class", "image", "object_mask", "attributes"):
                if key not in rec:
                    raise ManifestError(f"missing field {key!r}", sample_id=sid)

            attrs_rec = rec["attributes"]
            names = tuple(sorted(attrs_rec))
            if attribute_names is None:
                attribute_names = names
            elif names != attribute_names:
                raise ManifestError("attribute name set drifts from manifest head", sample_id=sid)

            image_path = base / rec["image"]
            mask_path = base / rec["object_mask"]
            if not image_path.is_file():
                raise ManifestError(f"image file missing: {image_path}", sample_id=sid)
            if not mask_path.is_file():
                raise ManifestError(f"object mask file missing: {mask_path}", sample_id=sid)
            image = _decode_image(image_path)
            object_mask = _decode_mask(mask_path)
            if object_mask.shape != image.shape[:2]:
                raise ManifestError(
                    f"object mask shape {object_mask.shape} does not match "
                    f"image shape {image.shape[:2]}",
                    sample_id=sid,
                )

            attributes = {name: int(attrs_rec[name]) for name in attrs_rec}
            attribute_masks: dict[str, np.ndarray] = {}
            mask_paths = rec.get("attribute_masks", {})
            for name, positive in attributes.items():
                if not positive:
                    continue
                if name in WHOLE_OBJECT_ATTRIBUTES:
                    attribute_masks[name] = object_mask
                    continue
                rel = mask_paths.get(name)
                if rel is None:
                    # Loader is permissive here; validate_sample reports it.
                    continue
                apath = base / rel
                if not apath.is_file():
                    raise ManifestError(f"attribute mask file missing: {apath}", sample_id=sid)
                amask = _decode_mask(apath)
                if amask.shape != image.shape[:2]:
                    raise ManifestError(
                        f"attribute mask {name!r} shape {amask.shape} does not "
                        f"match image shape {image.shape[:2]}",
                        sample_id=sid,
                    )
                attribute_masks[name] = amask

            samples.append(
                Sample(
                    id=sid,
                    split=str(rec["split"]),
                    class_label=str(rec["class"]),
                    image=image,
                    object_mask=object_mask,
                    attributes=attributes,
                    attribute_masks=attribute_masks,
                )
            )

    return Dataset(samples=samples, attribute_names=attribute_names or ATTRIBUTES)


def _encode_image(arr: np.ndarray, path: Path) -> None:
    byte = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(byte, mode="RGB").save(path)


def _encode_mask(mask: np.ndarray, path: Path) -> None:
    byte = np.where(mask >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(path)


def save_manifest(ds: Dataset, directory: str | Path, name: str = "manifest.jsonl") -> Path:
    """Serialize a dataset to a directory: manifest JSONL plus PNG files.

    Round-trips with load_manifest: loading the written manifest yields a
    semantically identical dataset. Whole-object attribute masks are not
    written (the loader re-aliases them).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images_dir = directory / "images"
    masks_dir = directory / "masks"
    images_dir.mkdir(exist_ok=True)
    masks_dir.mkdir(exist_ok=True)

    manifest_path = directory / name
    with manifest_path.open("w", encoding="utf-8") as fh:
        for s in ds.samples:
            image_rel = f"images/{s.id}.png"
            omask_rel = f"masks/{s.id}__object.png"
            _encode_image(s.image, directory / image_rel)
            _encode_mask(s.object_mask, directory / omask_rel)
            attr_masks_rec = {}
            for attr, mask in sorted(s.attribute_masks.items()):
                if attr in WHOLE_OBJECT_ATTRIBUTES:
                    continue
                rel = f"masks/{s.id}__{attr}.png"
                _encode_mask(mask, directory / rel)
                attr_masks_rec[attr] = rel
            rec = {
                "id": s.id,
                "split": s.split,
                "class": s.class_label,
                "image": image_rel,
                "object_mask": omask_rel,
                "attributes": {a: int(s.attributes.get(a, 0)) for a in ds.attribute_names},
                "attribute_masks": attr_masks_rec,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def validate_sample(s: Sample) -> list[Violation]:
    """Check all Sample invariants; returns one Violation per broken rule.

    Violations are data, not errors: a well-formed sample yields [].
    """
    out: list[Violation] = []

    img = s.image
    if img.ndim != 3 or img.shape[2] != 3:
        out.append(Violation(s.id, "image", "expected shape (H, W, 3)"))
        return out
    h, w = img.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        out.append(Violation(s.id, "image", f"height and width must be >= {MIN_IMAGE_SIDE}"))
    if img.min() < 0.0 or img.max() > 1.0:
        out.append(Violation(s.id, "image", "pixel values outside [0, 1]"))

    if s.object_mask.shape != (h, w):
        out.append(Violation(s.id, "object_mask", "shape does not match image"))
    if not np.isin(s.object_mask, (0.0, 1.0)).all():
        out.append(Violation(s.id, "object_mask", "values not in {0, 1}"))

    if s.class_label not in CLASSES:
        out.append(Violation(s.id, "class_label", f"unknown class {s.class_label!r}"))

    if s.split not in ("train", "test"):
        out.append(Violation(s.id, "split", f"unknown split {s.split!r}"))

    for attr, positive in s.attributes.items():
        if attr not in ATTRIBUTES:
            out.append(Violation(s.id, "attributes", f"unknown attribute {attr!r}"))
            continue
        mask = s.attribute_masks.get(attr)
        if positive and mask is None:
            out.append(Violation(s.id, f"attribute_masks[{attr}]", "missing attribute mask"))
        elif not positive and mask is not None:
            out.append(
                Violation(s.id, f"attribute_masks[{attr}]", "mask present for negative attribute")
            )
        if mask is None:
            continue
        if mask.shape != (h, w):
            out.append(Violation(s.id, f"attribute_masks[{attr}]", "shape does not match image"))
            continue
        if not np.isin(mask, (0.0, 1.0)).all():
            out.append(Violation(s.id, f"attribute_masks[{attr}]", "values not in {0, 1}"))
        if attr in WHOLE_OBJECT_ATTRIBUTES and not np.array_equal(mask, s.object_mask):
            out.append(
                Violation(
                    s.id,
                    f"attribute_masks[{attr}]",
                    "whole-object attribute mask mismatch",
                )
            )
    return out


def validate_dataset(ds: Dataset) -> list[Violation]:
    out: list[Violation] = []
    seen: set[str] = set()
    for s in ds.samples:
        if s.id in seen:
            out.append(Violation(s.id, "id", "duplicate sample id"))
        seen.add(s.id)
        out.extend(validate_sample(s))
    return out


# --------------------------------------------------------------------------
# Synthetic datasets
# --------------------------------------------------------------------------

# Distinct foreground/background color per class, far apart in RGB.
_PALETTE = (
    (0.90, 0.10, 0.10),
    (0.10, 0.90, 0.10),
    (0.10, 0.10, 0.90),
    (0.90, 0.90, 0.10),
    (0.90, 0.10, 0.90),
    (0.10, 0.90, 0.90),
    (0.95, 0.55, 0.10),
    (0.55, 0.10, 0.95),
    (0.10, 0.55, 0.55),
    (0.75, 0.75, 0.75),
)

_NEUTRAL = 0.5

# Class-unique attribute assignment for synthetic data, all part-level
# (non-whole-object) so attribute ablation is legal on them.
_SYNTH_ATTRS = ("beak", "ears", "wheels", "wings", "horns", "tail", "mane", "text",
                "colored-eyes", "long-snout")


@dataclass(frozen=True)
class SynthSpec:
    """Configuration for synth_dataset.

    coding="foreground": class is a function of pixels inside the object
    mask only; backgrounds are the class-independent constant 0.5.
    coding="background": the mirror image, class information lives only in
    the background.
    """

    n_samples: int
    image_size: int
    coding: str
    n_classes: int
    seed: int
    train_fraction: float = 0.7
    texture: float = 0.08
    jitter: bool = True
    # Blend of the class palette toward neutral gray; 1.0 keeps the full
    # palette, smaller values make classes subtler and easier to corrupt.
    contrast: float = 1.0
    # Object area as a fraction of the image, drawn uniformly per sample.
    area_range: tuple[float, float] = (0.2, 0.6)

    def __post_init__(self):
        lo, hi = self.area_range
        if not 0.05 <= lo <= hi <= 0.9:
            raise ValueError("area_range must satisfy 0.05 <= lo <= hi <= 0.9")


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Generate a deterministic synthetic dataset per SynthSpec.

    Object masks are axis-aligned rectangles or ellipses covering 20-60% of
    the image. Each sample carries one class-unique part attribute (a small
    patch inside the coded region) plus the whole-object attribute "hairy".
    """
    if spec.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if spec.image_size < 16:
        raise ValueError("image_size must be >= 16")
    if not 2 <= spec.n_classes <= len(CLASSES):
        raise ValueError(f"n_classes must be in [2, {len(CLASSES)}]")
    if spec.coding not in ("foreground", "background"):
        raise ValueError(f"unknown coding {spec.coding!r}")

    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    n_train = int(math.ceil(spec.n_samples * spec.train_fraction))
    samples: list[Sample] = []

    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(spec.n_samples):
        k = i % spec.n_classes
        class_name = CLASSES[k]
        split = "train" if i < n_train else "test"

        # Mask geometry; area fraction within the configured range.
        area_frac = rng.uniform(*spec.area_range)
        aspect = rng.uniform(0.7, 1.4)
        mh = int(round(math.sqrt(area_frac * size * size / aspect)))
        mw = int(round(mh * aspect))
        mh, mw = min(mh, size - 2), min(mw, size - 2)
        if spec.jitter:
            top = int(rng.integers(0, size - mh + 1))
            left = int(rng.integers(0, size - mw + 1))
        else:
            top, left = (size - mh) // 2, (size - mw) // 2

        mask = np.zeros((size, size), dtype=np.float64)
        if rng.random() < 0.5:
            mask[top : top + mh, left : left + mw] = 1.0
        else:
            cy, cx = top + mh / 2.0, left + mw / 2.0
            # Ellipse of the same bounding box.
            inside = ((yy - cy) / (mh / 2.0)) ** 2 + ((xx - cx) / (mw / 2.0)) ** 2 <= 1.0
            mask[inside] = 1.0
            if mask.sum() == 0:
                mask[top : top + mh, left : left + mw] = 1.0

        color = _NEUTRAL + spec.contrast * (np.array(_PALETTE[k]) - _NEUTRAL)
        coded = rng.uniform(-spec.texture, spec.texture, size=(size, size, 3)) + color
        coded = np.clip(coded, 0.0, 1.0)
        neutral = np.full((size, size, 3), _NEUTRAL)
        m3 = mask[:, :, None]
        if spec.coding == "foreground":
            image = m3 * coded + (1.0 - m3) * neutral
        else:
            image = m3 * neutral + (1.0 - m3) * coded

        # Class-unique part attribute: a small patch inside the coded region.
        attr_name = _SYNTH_ATTRS[k]
        ah = max(2, mh // 3)
        aw = max(2, mw // 3)
        amask = np.zeros_like(mask)
        amask[top + 1 : top + 1 + ah, left + 1 : left + 1 + aw] = 1.0
        amask = amask * mask  # keep it inside the object

        attributes = {a: 0 for a in ATTRIBUTES}
        attributes[attr_name] = 1
        attributes["hairy"] = 1
        attribute_masks = {attr_name: amask, "hairy": mask}

        samples.append(
            Sample(
                id=f"synth-{i:05d}",
                split=split,
                class_label=class_name,
                image=image,
                object_mask=mask,
                attributes=attributes,
                attribute_masks=attribute_masks,
            )
        )

    return Dataset(samples=samples)


# --------------------------------------------------------------------------
# Attribute linear probe
# --------------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attribute_linear_probe(
    ds: Dataset,
    seed: int,
    lr: float = 1.0,
    max_iters: int = 3000,
    tol: float = 1e-7,
    l2: float = 1e-4,
) -> dict[str, float]:
    """Fit a multinomial linear classifier from attribute vectors to classes.

    Full-batch gradient descent on the softmax cross-entropy until the
    gradient norm falls below tol or max_iters is reached. Deterministic for
    a fixed seed. Returns {"train_accuracy", "test_accuracy"}.
    """
    train = ds.train.samples
    test = ds.test.samples
    if not train or not test:
        raise ValueError("probe needs non-empty train and test splits")

    classes = sorted({s.class_label for s in train})
    if len(classes) < 2:
        raise ValueError("probe needs at least 2 classes in the train split")
    class_index = {c: i for i, c in enumerate(classes)}

    def design(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([ds.attribute_vector(s) for s in samples])
        y = np.array([class_index.get(s.class_label, -1) for s in samples])
        return x, y

    x_tr, y_tr = design(train)
    x_te, y_te = design(test)
    n, d = x_tr.shape
    kc = len(classes)

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(d, kc))
    b = np.zeros(kc)
    onehot = np.eye(kc)[y_tr]

    for _ in range(max_iters):
        probs = _softmax(x_tr @ w + b)
        err = (probs - onehot) / n
        gw = x_tr.T @ err + l2 * w
        gb = err.sum(axis=0)
        w -= lr * gw
        b -= lr * gb
        if math.sqrt((gw * gw).sum() + (gb * gb).sum()) < tol:
            break

    def accuracy(x: np.ndarray, y: np.ndarray) -> float:
        pred = (x @ w + b).argmax(axis=1)
        return float((pred == y).mean())

    return {"train_accuracy": accuracy(x_tr, y_tr), "test_accuracy": accuracy(x_te, y_te)}
