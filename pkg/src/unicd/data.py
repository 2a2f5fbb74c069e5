"""Deterministic synthetic bitemporal scenes with analytically known labels.

A scene is a textured ground layer plus rectangles and ellipses.  Each object
records its class at both dates (0 = absent), so every label map can be
re-rendered from the stored geometry alone.  The post image additionally
receives pseudo-changes (a global brightness shift and local brightness or
noise patches) that never alter any label.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, TaskKind
from .losses import IGNORE_INDEX

GROUND = 1  # land-cover class of the background layer in semantic maps
BUILDING = 2


@dataclass(frozen=True)
class SceneObject:
    shape: str            # "rect" or "ellipse"
    y0: int
    x0: int
    h: int
    w: int
    cls_pre: int          # class at t1, 0 = absent
    cls_post: int         # class at t2 (BDA: damage grade 1..D), 0 = absent

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        if self.shape == "rect":
            return (yy >= self.y0) & (yy < self.y0 + self.h) & (xx >= self.x0) & (xx < self.x0 + self.w)
        cy, cx = self.y0 + (self.h - 1) / 2, self.x0 + (self.w - 1) / 2
        return ((yy - cy) / (self.h / 2)) ** 2 + ((xx - cx) / (self.w / 2)) ** 2 <= 1.0


@dataclass(frozen=True)
class Distractor:
    kind: str             # "brightness" or "noise"
    y0: int
    x0: int
    h: int
    w: int
    amount: float


@dataclass
class SyntheticSample:
    task: str
    pre: np.ndarray
    post: np.ndarray
    labels: dict[str, np.ndarray]
    distractor: np.ndarray
    objects: tuple[SceneObject, ...] = ()
    distractors: tuple[Distractor, ...] = ()
    global_shift: float = 0.0
    seed: tuple[int, int] = (0, 0)
    transform: tuple[int, bool, bool] = (0, False, False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pre.shape[-2:]


def _check_dims(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"image size must be a positive multiple of 32, got {h}x{w}")


def palette(num_classes: int) -> np.ndarray:
    """RGB mean colour per semantic class (index 0 unused)."""
    base = np.array([
        [0.0, 0.0, 0.0],
        [0.45, 0.40, 0.30],   # ground
        [0.85, 0.82, 0.80],   # building
        [0.10, 0.25, 0.60],   # water
        [0.20, 0.55, 0.20],   # vegetation
        [0.60, 0.20, 0.15],   # roofs / bare soil
    ])
    if num_classes + 1 <= len(base):
        return base[: num_classes + 1]
    extra = np.random.default_rng(1234).uniform(0.05, 0.95, (num_classes + 1 - len(base), 3))
    return np.vstack([base, extra])


def _texture(cls: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    fy, fx = 0.07 * (1 + cls % 3), 0.05 * (1 + (cls * 2) % 5)
    return 0.06 * np.sin(2 * np.pi * (fy * yy + fx * xx))


def render_semantic(objects, h: int, w: int, date: str, background: int = GROUND) -> np.ndarray:
    """Class map at one date; later objects overwrite earlier ones."""
    out = np.full((h, w), background, dtype=np.int64)
    for ob in objects:
        cls = ob.cls_pre if date == "pre" else ob.cls_post
        if cls:
            out[ob.mask(h, w)] = cls
    return out


def render_labels(task, objects, h: int, w: int) -> dict[str, np.ndarray]:
    """Every label map of a scene, derived from its geometry alone."""
    kind = TaskKind(task)
    if kind is TaskKind.BDA:
        loc = np.zeros((h, w), dtype=np.int64)
        dmg = np.zeros((h, w), dtype=np.int64)
        for ob in objects:
            m = ob.mask(h, w)
            loc[m] = 1
            dmg[m] = ob.cls_post
        return {"loc": loc, "dmg": dmg}
    s1 = render_semantic(objects, h, w, "pre")
    s2 = render_semantic(objects, h, w, "post")
    change = (s1 != s2).astype(np.int64)
    if kind is TaskKind.BCD:
        return {"change": change}
    return {"change": change, "t1": s1 * change, "t2": s2 * change}


def _random_object(rng: np.random.Generator, h: int, w: int, cls_pre: int, cls_post: int) -> SceneObject:
    oh = int(rng.integers(max(h // 8, 3), max(h // 3, 4) + 1))
    ow = int(rng.integers(max(w // 8, 3), max(w // 3, 4) + 1))
    shape = "rect" if rng.random() < 0.6 else "ellipse"
    return SceneObject(shape, int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1)), oh, ow,
                       cls_pre, cls_post)


def _objects(kind: TaskKind, rng, h, w, num_classes, damage_levels) -> list[SceneObject]:
    n = int(rng.integers(3, 7))
    out = []
    for _ in range(n):
        if kind is TaskKind.BDA:
            out.append(_random_object(rng, h, w, BUILDING, int(rng.integers(1, damage_levels + 1))))
            continue
        if kind is TaskKind.BCD:
            event = rng.choice(["static", "added", "removed"], p=[0.3, 0.35, 0.35])
            pre = 0 if event == "added" else BUILDING
            post = 0 if event == "removed" else BUILDING
            out.append(_random_object(rng, h, w, pre, post))
            continue
        fg = list(range(2, num_classes + 1)) or [GROUND]
        event = rng.choice(["static", "added", "removed", "recolored"], p=[0.25, 0.25, 0.25, 0.25])
        a = int(rng.choice(fg))
        if event == "recolored":
            others = [c for c in range(1, num_classes + 1) if c != a]
            b = int(rng.choice(others))
        else:
            b = a
        pre = 0 if event == "added" else a
        post = 0 if event == "removed" else b
        out.append(_random_object(rng, h, w, pre, post))
    return out


def _paint(classes: np.ndarray, colors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = classes.shape
    img = np.zeros((3, h, w))
    for c in np.unique(classes):
        m = classes == c
        img[:, m] = colors[c][:, None] + _texture(int(c), h, w)[m][None]
    return img + rng.normal(0.0, 0.02, img.shape)


def _damage(img: np.ndarray, objects, rng: np.random.Generator, levels: int) -> np.ndarray:
    """Texture corruption growing with the damage grade; grade 1 is intact."""
    h, w = img.shape[-2:]
    out = img.copy()
    rubble = np.array([0.35, 0.30, 0.25])
    for ob in objects:
        grade = ob.cls_post
        if grade <= 1:
            continue
        m = ob.mask(h, w)
        s = (grade - 1) / max(levels - 1, 1)
        noise = rng.normal(0.0, 0.25 * s, (3, int(m.sum())))
        out[:, m] = (1 - s) * out[:, m] + s * rubble[:, None] + noise
    return out


def _distractors(rng: np.random.Generator, h: int, w: int) -> tuple[float, list[Distractor]]:
    shift = float(rng.uniform(-0.12, 0.12))
    items = []
    for _ in range(int(rng.integers(1, 3))):
        dh, dw = int(rng.integers(h // 6, h // 3 + 1)), int(rng.integers(w // 6, w // 3 + 1))
        kind = "brightness" if rng.random() < 0.5 else "noise"
        amount = float(rng.uniform(0.15, 0.3)) * (1 if rng.random() < 0.5 else -1) if kind == "brightness" \
            else float(rng.uniform(0.05, 0.12))
        items.append(Distractor(kind, int(rng.integers(0, h - dh + 1)), int(rng.integers(0, w - dw + 1)), dh, dw,
                                amount))
    return shift, items


def apply_distractors(img: np.ndarray, shift: float, items, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    out = img + shift
    h, w = img.shape[-2:]
    mask = np.zeros((h, w), dtype=bool)
    for d in items:
        sl = (slice(None), slice(d.y0, d.y0 + d.h), slice(d.x0, d.x0 + d.w))
        if d.kind == "brightness":
            out[sl] += d.amount
        else:
            out[sl] += rng.normal(0.0, d.amount, out[sl].shape)
        mask[d.y0:d.y0 + d.h, d.x0:d.x0 + d.w] = True
    return out, mask


def generate_sample(task, h: int, w: int, seed: int, index: int, num_classes: int = 3, damage_levels: int = 4,
                    distractors: bool = True) -> SyntheticSample:
    _check_dims(h, w)
    kind = TaskKind(task)
    rng = np.random.default_rng([seed, index])
    objects = tuple(_objects(kind, rng, h, w, num_classes, damage_levels))
    n_sem = max(num_classes, BUILDING)
    colors = palette(n_sem)
    if kind is TaskKind.BDA:
        pre_cls = render_semantic(objects, h, w, "pre")
        pre = _paint(pre_cls, colors, rng)
        post = _damage(_paint(pre_cls, colors, rng), objects, rng, damage_levels)
    else:
        pre = _paint(render_semantic(objects, h, w, "pre"), colors, rng)
        post = _paint(render_semantic(objects, h, w, "post"), colors, rng)
    shift, items = _distractors(rng, h, w) if distractors else (0.0, [])
    post, dmask = apply_distractors(post, shift, items, rng)
    return SyntheticSample(kind.value, np.clip(pre, 0, 1), np.clip(post, 0, 1), render_labels(kind, objects, h, w),
                           dmask, objects, tuple(items), shift, (seed, index))


def generate_dataset(task, n: int, h: int = 32, w: int = 32, seed: int = 0, num_classes: int = 3,
                     damage_levels: int = 4, distractors: bool = True) -> list[SyntheticSample]:
    """``n`` independent scenes; scene ``i`` depends only on ``(seed, i)``."""
    _check_dims(h, w)
    if n < 0:
        raise ConfigError("dataset size must be non-negative")
    return [generate_sample(task, h, w, seed, i, num_classes, damage_levels, distractors) for i in range(n)]


def dataset_hash(samples) -> str:
    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.pre.tobytes())
        digest.update(s.post.tobytes())
        for k in sorted(s.labels):
            digest.update(k.encode())
            digest.update(s.labels[k].tobytes())
    return digest.hexdigest()


def transform_map(a: np.ndarray, k: int, flip_lr: bool, flip_ud: bool) -> np.ndarray:
    """Rotate by ``k`` quarter turns, then optionally flip, over the last two axes."""
    out = np.rot90(a, k, axes=(-2, -1))
    if flip_lr:
        out = out[..., ::-1]
    if flip_ud:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def apply_transform(sample: SyntheticSample, k: int, flip_lr: bool = False, flip_ud: bool = False) -> SyntheticSample:
    """The same spatial transform applied to both images and every label map."""
    t = lambda a: transform_map(a, k, flip_lr, flip_ud)  # noqa: E731
    return replace(sample, pre=t(sample.pre), post=t(sample.post),
                   labels={name: t(m) for name, m in sample.labels.items()},
                   distractor=t(sample.distractor), transform=(k % 4, flip_lr, flip_ud))


def augment(sample: SyntheticSample, seed: int, rotate: bool = True, flip: bool = True) -> SyntheticSample:
    """Random quarter-turn rotation plus left-right and top-bottom flips, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 4))
    lr, ud = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    return apply_transform(sample, k if rotate else 0, lr and flip, ud and flip)


@dataclass
class Batch:
    pre: np.ndarray
    post: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    distractor: np.ndarray | None = None


def collate(samples, dtype=np.float64) -> Batch:
    if not samples:
        raise ConfigError("cannot batch an empty sample list")
    return Batch(
        np.stack([s.pre for s in samples]).astype(dtype),
        np.stack([s.post for s in samples]).astype(dtype),
        {k: np.stack([s.labels[k] for s in samples]) for k in samples[0].labels},
        np.stack([s.distractor for s in samples]),
    )


def damage_targets(loc: np.ndarray, dmg: np.ndarray, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Damage labels with off-building pixels set to ``ignore_index``."""
    return np.where(loc == 1, dmg, ignore_index)
