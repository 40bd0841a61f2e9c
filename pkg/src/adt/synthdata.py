"""Synthetic shape scenes with a clear source domain and fog / night targets.

Every scene draws from its own generator seeded by ``(seed, split, index)``,
so scenes can be produced in any order (or in parallel) with identical
results.

On-disk layout::

    <root>/manifest.json
    <root>/images/<split>/<index>.png

``manifest.json`` holds ``{"format": 1, "classes": [...], "splits": {name:
{"domain": "source"|"target", "records": [...]}}}``. Each record is
``{"path": str, "domain": str, "labels": [str, ...] | null}`` where a label
string is ``"class x_min y_min x_max y_max"``. Pixels are stored as 8-bit
PNG: ``u8 = round(255 * x)`` and read back as ``u8 / 255``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import LabeledBoxes, iou_matrix

CLASS_NAMES = ("disk", "square", "triangle", "ring", "bar")
FOG_COLOR = np.array([0.82, 0.83, 0.86])
FOG_DENSITIES = (0.005, 0.01, 0.02)
_SUPERSAMPLE = 4
_SPLIT_IDS = {"source_train": 0, "source_val": 1, "target_train": 2, "target_eval": 3}


class GenerationError(RuntimeError):
    pass


class DatasetLoadError(ValueError):
    pass


@dataclass
class ObjectSpec:
    cls: int
    cx: float
    cy: float
    size: float  # half-extent along the longer axis, pixels
    color: tuple[float, float, float]
    vertical: bool = False


@dataclass
class SceneSpec:
    seed: int
    height: int = 96
    width: int = 96
    objects: list[ObjectSpec] = field(default_factory=list)
    background: tuple[float, float, float] = (0.45, 0.47, 0.44)
    texture_amplitude: float = 0.08
    texture_scale: float = 12.0


def object_box(obj: ObjectSpec) -> np.ndarray:
    """Analytic tight box of a primitive."""
    s = obj.size
    if CLASS_NAMES[obj.cls] == "bar":
        hx, hy = (0.4 * s, s) if obj.vertical else (s, 0.4 * s)
    else:
        hx = hy = s
    return np.array([obj.cx - hx, obj.cy - hy, obj.cx + hx, obj.cy + hy])


def _coverage(obj: ObjectSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx = xs - obj.cx
    dy = ys - obj.cy
    s = obj.size
    name = CLASS_NAMES[obj.cls]
    if name == "disk":
        return dx * dx + dy * dy <= s * s
    if name == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if name == "triangle":
        # apex at top centre, base along the bottom edge
        inside_y = (dy >= -s) & (dy <= s)
        return inside_y & (np.abs(dx) <= (dy + s) / 2)
    if name == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if name == "bar":
        hx, hy = (0.4 * s, s) if obj.vertical else (s, 0.4 * s)
        return (np.abs(dx) <= hx) & (np.abs(dy) <= hy)
    raise GenerationError(f"unknown class {obj.cls}")


def _texture(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    gh = max(2, int(math.ceil(h / spec.texture_scale)) + 1)
    gw = max(2, int(math.ceil(w / spec.texture_scale)) + 1)
    coarse = rng.uniform(-1, 1, size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int).clip(0, gh - 2)
    x0 = np.floor(xs).astype(int).clip(0, gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    grain = rng.normal(0, 0.25, size=(h, w, 3))
    return np.asarray(spec.background)[None, None] + spec.texture_amplitude * (smooth + grain)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, LabeledBoxes]:
    """Render ``spec`` to a float32 HxWx3 image in [0, 1] and its tight boxes."""
    rng = np.random.default_rng(spec.seed)
    img = _texture(rng, spec)
    boxes, classes = [], []
    ss = _SUPERSAMPLE
    for obj in spec.objects:
        box = object_box(obj)
        if obj.size <= 0:
            raise GenerationError("object size must be positive")
        if box[0] < 0 or box[1] < 0 or box[2] > spec.width or box[3] > spec.height:
            raise GenerationError(f"object {obj} does not fit in {spec.width}x{spec.height}")
        x0, y0 = int(math.floor(box[0])), int(math.floor(box[1]))
        x1, y1 = int(math.ceil(box[2])), int(math.ceil(box[3]))
        sub = (np.arange(ss) + 0.5) / ss
        xs = (np.arange(x0, x1)[:, None] + sub[None]).reshape(-1)
        ys = (np.arange(y0, y1)[:, None] + sub[None]).reshape(-1)
        mask = _coverage(obj, xs[None, :], ys[:, None])
        alpha = mask.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))[..., None]
        shade = np.asarray(obj.color)[None, None] * (1 + 0.05 * rng.normal(size=(y1 - y0, x1 - x0, 1)))
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - alpha) + shade * alpha
        boxes.append(box)
        classes.append(obj.cls)
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, LabeledBoxes(np.asarray(boxes).reshape(-1, 4), np.asarray(classes, dtype=np.int64))


def _random_color(rng: np.random.Generator, background: np.ndarray) -> tuple[float, float, float]:
    for _ in range(50):
        c = rng.uniform(0.0, 1.0, 3)
        if np.abs(c - background).max() > 0.35:
            return tuple(float(v) for v in c)
    return tuple(float(v) for v in 1 - background)


def sample_scene_spec(
    rng: np.random.Generator,
    seed: int,
    height: int = 96,
    width: int = 96,
    num_classes: int = len(CLASS_NAMES),
    max_objects: int = 4,
    size_range: tuple[float, float] = (3.0, 20.0),
    small_bias: float = 0.0,
) -> SceneSpec:
    """Random non-overlapping layout.

    Sizes are log-uniform in ``size_range``; ``small_bias`` in [0, 1] is the
    extra probability of drawing from the bottom third of that range.
    """
    bg = rng.uniform(0.25, 0.65, 3)
    spec = SceneSpec(seed=seed, height=height, width=width, background=tuple(bg))
    count = int(rng.integers(1, max_objects + 1))
    lo, hi = size_range
    placed = []
    for _ in range(count):
        for _attempt in range(30):
            if rng.uniform() < small_bias:
                size = float(np.exp(rng.uniform(np.log(lo), np.log(lo + (hi - lo) / 3))))
            else:
                size = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            cls = int(rng.integers(num_classes))
            obj = ObjectSpec(
                cls=cls,
                cx=0.0,
                cy=0.0,
                size=size,
                color=_random_color(rng, bg),
                vertical=bool(rng.integers(2)),
            )
            box = object_box(obj)
            hx, hy = (box[2] - box[0]) / 2, (box[3] - box[1]) / 2
            obj.cx = float(rng.uniform(hx + 0.5, width - hx - 0.5))
            obj.cy = float(rng.uniform(hy + 0.5, height - hy - 0.5))
            box = object_box(obj)
            grown = box + np.array([-2, -2, 2, 2])
            if placed and iou_matrix(grown, np.stack(placed)).max() > 0:
                continue
            placed.append(box)
            spec.objects.append(obj)
            break
    return spec


def vertical_depth(height: int, width: int, near: float = 10.0, far: float = 120.0) -> np.ndarray:
    """Depth proxy growing from ``near`` at the bottom row to ``far`` at the top."""
    rows = (np.arange(height) + 0.5) / height
    depth = far - (far - near) * rows
    return np.repeat(depth[:, None], width, axis=1)


def apply_fog(img: np.ndarray, density: float, depth_proxy: np.ndarray | float | None = None, fog_color=FOG_COLOR) -> np.ndarray:
    """Atmospheric blend ``x * t + fog * (1 - t)`` with ``t = exp(-density * depth)``."""
    if density < 0:
        raise ValueError("fog density must be non-negative")
    if depth_proxy is None:
        depth_proxy = vertical_depth(img.shape[0], img.shape[1])
    depth = np.broadcast_to(np.asarray(depth_proxy, dtype=np.float64), img.shape[:2])
    if math.isinf(density):
        t = np.zeros_like(depth)
    else:
        t = np.exp(-density * depth)
    t = t[..., None]
    out = img.astype(np.float64) * t + np.asarray(fog_color)[None, None] * (1 - t)
    return np.clip(out, 0, 1).astype(img.dtype)


def apply_night(img: np.ndarray, gain: float, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Darken by ``gain`` and add Gaussian sensor noise, clamped to [0, 1]."""
    if not 0 < gain <= 1:
        raise ValueError("gain must lie in (0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    out = img.astype(np.float64) * gain
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(out, 0, 1).astype(img.dtype)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk."""
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------- datasets


@dataclass
class Record:
    path: str
    domain: str
    labels: LabeledBoxes | None


@dataclass
class Split:
    name: str
    domain: str
    records: list[Record]
    images: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> list[LabeledBoxes]:
        return [r.labels for r in self.records]


@dataclass
class Dataset:
    classes: tuple[str, ...]
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


@dataclass
class DataConfig:
    seed: int = 0
    image_size: int = 96
    num_classes: int = 5
    n_source: int = 200
    n_source_val: int = 50
    n_target: int = 200
    n_eval: int = 100
    corruption: str = "fog"
    max_objects: int = 4
    size_range: tuple[float, float] = (3.0, 20.0)
    small_bias: float = 0.0
    fog_densities: tuple[float, ...] = FOG_DENSITIES
    night_gain: tuple[float, float] = (0.25, 0.45)
    night_noise: float = 0.03


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_IDS[split], index])


def _make_example(cfg: DataConfig, split: str, index: int, corrupt: bool):
    rng = scene_rng(cfg.seed, split, index)
    spec = sample_scene_spec(
        rng,
        seed=int(rng.integers(2**31)),
        height=cfg.image_size,
        width=cfg.image_size,
        num_classes=cfg.num_classes,
        max_objects=cfg.max_objects,
        size_range=tuple(cfg.size_range),
        small_bias=cfg.small_bias,
    )
    img, labels = generate_scene(spec)
    if corrupt:
        if cfg.corruption == "fog":
            img = apply_fog(img, cfg.fog_densities[index % len(cfg.fog_densities)])
        elif cfg.corruption == "night":
            gain = float(rng.uniform(*cfg.night_gain))
            img = apply_night(img, gain, cfg.night_noise, rng)
        else:
            raise GenerationError(f"unknown corruption {cfg.corruption!r}")
    return quantize(img), labels


def make_dataset(cfg: DataConfig | None = None) -> Dataset:
    """Build source (clear) and target (corrupted) splits held in memory.

    Target records keep their labels for evaluation; training code only ever
    reads the target images.
    """
    cfg = cfg or DataConfig()
    plan = [
        ("source_train", "source", cfg.n_source, False),
        ("source_val", "source", cfg.n_source_val, False),
        ("target_train", "target", cfg.n_target, True),
        ("target_eval", "target", cfg.n_eval, True),
    ]
    splits = {}
    for name, domain, n, corrupt in plan:
        images, records = [], []
        for i in range(n):
            img, labels = _make_example(cfg, name, i, corrupt)
            images.append(img)
            records.append(Record(f"images/{name}/{i:05d}.png", domain, labels))
        splits[name] = Split(name, domain, records, images)
    return Dataset(tuple(CLASS_NAMES[: cfg.num_classes]), splits)


def format_label(cls: int, box) -> str:
    return f"{int(cls)} " + " ".join(repr(float(v)) for v in box)


def parse_label(text: str, where: str) -> tuple[int, np.ndarray]:
    parts = text.split()
    if len(parts) != 5:
        raise DatasetLoadError(f"{where}: label {text!r} must be 'class x_min y_min x_max y_max'")
    try:
        cls = int(parts[0])
        box = np.array([float(v) for v in parts[1:]])
    except ValueError as exc:
        raise DatasetLoadError(f"{where}: unparseable label {text!r}") from exc
    if not np.all(np.isfinite(box)) or np.any(box < 0):
        raise DatasetLoadError(f"{where}: box coordinates must be finite and non-negative: {text!r}")
    if box[2] <= box[0] or box[3] <= box[1]:
        raise DatasetLoadError(f"{where}: degenerate box {text!r}")
    return cls, box


def write_dataset(root, dataset: Dataset) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "classes": list(dataset.classes), "splits": {}}
    for name, split in dataset.splits.items():
        if split.images is None:
            raise ValueError(f"split {name} has no pixel data to write")
        recs = []
        for rec, img in zip(split.records, split.images):
            target = root / rec.path
            target.parent.mkdir(parents=True, exist_ok=True)
            u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(u8, mode="RGB").save(target, format="PNG", optimize=False)
            labels = None
            if rec.labels is not None:
                labels = [format_label(c, b) for c, b in zip(rec.labels.classes, rec.labels.boxes)]
            recs.append({"path": rec.path, "domain": rec.domain, "labels": labels})
        manifest["splits"][name] = {"domain": split.domain, "records": recs}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_dataset(root, load_images: bool = True) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetLoadError(f"cannot read manifest {path}: {exc}") from exc
    classes = tuple(manifest.get("classes", ()))
    splits = {}
    for name, body in manifest.get("splits", {}).items():
        records, images = [], []
        for i, rec in enumerate(body["records"]):
            where = f"{name}[{i}] ({rec.get('path')})"
            labels = None
            if rec.get("labels") is not None:
                parsed = [parse_label(t, where) for t in rec["labels"]]
                for cls, _ in parsed:
                    if not 0 <= cls < len(classes):
                        raise DatasetLoadError(f"{where}: class {cls} outside [0, {len(classes)})")
                labels = LabeledBoxes(
                    np.array([b for _, b in parsed]).reshape(-1, 4),
                    np.array([c for c, _ in parsed], dtype=np.int64),
                )
            records.append(Record(rec["path"], rec["domain"], labels))
            if load_images:
                try:
                    with Image.open(root / rec["path"]) as im:
                        images.append(np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0))
                except OSError as exc:
                    raise DatasetLoadError(f"{where}: cannot read image: {exc}") from exc
        splits[name] = Split(name, body["domain"], records, images if load_images else None)
    return Dataset(classes, splits)
