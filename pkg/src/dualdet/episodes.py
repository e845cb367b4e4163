"""Synthetic shapes world and episodic task assembly.

Scenes are noise-backed images of colored shapes (one shape kind and hue
family per class).  A training episode pairs one query scene with m
class clusters of K mask-concatenated support images.  Base and novel
classes are disjoint; novel support images during fine-tuning come from
a pool of K scenes fixed once per run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import archive
from .tensor import Tensor

# class id -> (shape kind, base RGB color)
SHAPE_STYLES = [
    ("circle", (0.90, 0.18, 0.15)),
    ("square", (0.15, 0.85, 0.20)),
    ("triangle", (0.22, 0.38, 0.95)),
    ("cross", (0.95, 0.85, 0.10)),
    ("star", (0.90, 0.20, 0.90)),
]

NUM_CLASSES = len(SHAPE_STYLES)
MIN_BOX_SIDE = 8
NOISE_AMPLITUDE = 0.1
_MIN_SCENE_SIDE = 24


@dataclass(frozen=True)
class ClassSplit:
    base_classes: tuple
    novel_classes: tuple

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes overlap")

    @property
    def all_classes(self) -> tuple:
        return tuple(sorted(self.base_classes + self.novel_classes))


@dataclass
class Scene:
    image: Tensor              # [3,H,W] in [0,1]
    objects: list              # [(class_id, np.ndarray [x1,y1,x2,y2])]

    def __post_init__(self):
        _, h, w = self.image.shape
        if not self.objects:
            raise ValueError("scene must contain at least one object")
        for _, box in self.objects:
            x1, y1, x2, y2 = box
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise ValueError(f"box {box} outside {w}x{h} scene")


@dataclass
class SupportImage:
    image_with_mask: Tensor    # [4,Hs,Ws]: RGB + binary object mask
    class_id: int


@dataclass
class Episode:
    query: Scene
    support: dict              # class_id -> list[SupportImage], len K each
    class_list: list           # the m class ids, defines cluster index j

    def __post_init__(self):
        sizes = {len(v) for v in self.support.values()}
        if len(sizes) != 1:
            raise ValueError(f"unequal cluster sizes {sizes}")
        for cid, cluster in self.support.items():
            if any(s.class_id != cid for s in cluster):
                raise ValueError(f"cluster {cid} is not class-pure")
        present = {cid for cid, _ in self.query.objects}
        if not present <= set(self.class_list):
            raise ValueError(f"query classes {present} not covered by {self.class_list}")

    @property
    def k(self) -> int:
        return len(next(iter(self.support.values())))


def make_split(num_classes: int, num_novel: int, seed: int) -> ClassSplit:
    """Deterministically partition class ids into base and novel sets."""
    if not 1 <= num_novel < num_classes:
        raise ValueError(f"need 1 <= num_novel < num_classes, got {num_novel} of {num_classes}")
    from . import rng as _rng
    perm = _rng.stream(seed, "split").permutation(num_classes)
    novel = tuple(sorted(int(c) for c in perm[:num_novel]))
    base = tuple(sorted(int(c) for c in perm[num_novel:]))
    return ClassSplit(base_classes=base, novel_classes=novel)


def _points_in_polygon(yy, xx, verts):
    inside = np.zeros(yy.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
        inside ^= crosses & (xx < xcross)
    return inside


def _shape_mask(kind, cy, cx, half, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == "triangle":
        verts = [(cy - half, cx), (cy + half, cx - half), (cy + half, cx + half)]
        return _points_in_polygon(yy, xx, verts)
    if kind == "cross":
        arm = max(half / 3.0, 1.6)
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= half)
        horz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= half)
        return vert | horz
    if kind == "star":
        angles = -np.pi / 2 + np.arange(10) * np.pi / 5
        radii = np.where(np.arange(10) % 2 == 0, half, 0.45 * half)
        verts = [(cy + r * np.sin(a), cx + r * np.cos(a)) for r, a in zip(radii, angles)]
        return _points_in_polygon(yy, xx, verts)
    raise ValueError(f"unknown shape kind {kind!r}")


def gen_scene(rng: np.random.Generator, class_pool, max_objects: int, size) -> Scene:
    """Render 1..max_objects non-overlapping shapes on a noise background.

    Boxes are measured from the rendered occupancy mask, so they are
    tight by construction; every box side is at least MIN_BOX_SIDE px.
    """
    h, w = size
    if h < _MIN_SCENE_SIDE or w < _MIN_SCENE_SIDE:
        raise ValueError(f"scene size {size} too small to place a shape")
    pool = sorted(class_pool)
    if not pool:
        raise ValueError("class_pool is empty")
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")

    image = rng.uniform(0.0, NOISE_AMPLITUDE, size=(3, h, w))
    n_obj = int(rng.integers(1, max_objects + 1))
    objects = []
    occupied = []
    for _ in range(n_obj):
        placed = _place_shape(rng, pool, h, w, occupied, image)
        if placed is not None:
            objects.append(placed)
    while not objects:
        placed = _place_shape(rng, pool, h, w, occupied, image)
        if placed is not None:
            objects.append(placed)
    return Scene(image=Tensor(np.clip(image, 0.0, 1.0)), objects=objects)


def _place_shape(rng, pool, h, w, occupied, image):
    max_half = min(11.0, (min(h, w) - 4) / 2.0)
    for _ in range(50):
        cid = int(rng.choice(pool))
        kind, color = SHAPE_STYLES[cid]
        half = rng.uniform(5.2, max_half)
        cy = rng.uniform(half + 1.0, h - half - 2.0)
        cx = rng.uniform(half + 1.0, w - half - 2.0)
        mask = _shape_mask(kind, cy, cx, half, h, w)
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
        if box[2] - box[0] < MIN_BOX_SIDE or box[3] - box[1] < MIN_BOX_SIDE:
            continue
        grown = box + np.array([-1, -1, 1, 1])
        if any(_boxes_intersect(grown, other) for other in occupied):
            continue
        brightness = rng.uniform(0.75, 1.0)
        for ch in range(3):
            image[ch][mask] = color[ch] * brightness
        occupied.append(box)
        return (cid, box)
    return None


def _boxes_intersect(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def resize_bilinear(image: np.ndarray, target) -> np.ndarray:
    """Bilinear resize of [C,H,W] with pixel centers at index + 0.5."""
    c, h, w = image.shape
    th, tw = target
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1[None, :]]
    bl = image[:, y1[:, None], x0[None, :]]
    br = image[:, y1[:, None], x1[None, :]]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def scale_box(box, from_size, to_size) -> np.ndarray:
    """Map a box between image sizes and round to the pixel grid."""
    fh, fw = from_size
    th, tw = to_size
    sx, sy = tw / fw, th / fh
    scaled = box * np.array([sx, sy, sx, sy])
    out = np.floor(scaled + 0.5)
    if out[2] <= out[0]:
        out[2] = min(out[0] + 1, tw)
        out[0] = out[2] - 1
    if out[3] <= out[1]:
        out[3] = min(out[1] + 1, th)
        out[1] = out[3] - 1
    return out


def render_support(scene: Scene, object_index: int, target_size) -> SupportImage:
    """Resize a scene and mark one object with a binary mask channel."""
    if not 0 <= object_index < len(scene.objects):
        raise IndexError(f"object index {object_index} out of range "
                         f"({len(scene.objects)} objects)")
    cid, box = scene.objects[object_index]
    _, h, w = scene.image.shape
    th, tw = target_size
    rgb = resize_bilinear(scene.image.values, target_size)
    x1, y1, x2, y2 = scale_box(box, (h, w), (th, tw)).astype(int)
    mask = np.zeros((1, th, tw))
    mask[0, y1:y2, x1:x2] = 1.0
    return SupportImage(image_with_mask=Tensor(np.concatenate([rgb, mask])), class_id=cid)


@dataclass
class NovelPool:
    """The K support shots per novel class, sampled once per run."""
    supports: dict = field(default_factory=dict)   # class_id -> list[SupportImage]

    @property
    def k(self) -> int:
        return len(next(iter(self.supports.values())))


def sample_novel_pool(split: ClassSplit, k: int, rng: np.random.Generator,
                      scene_size, support_size, max_objects: int = 1) -> NovelPool:
    pool = NovelPool()
    for cid in sorted(split.novel_classes):
        shots = []
        for _ in range(k):
            scene = gen_scene(rng, {cid}, max_objects, scene_size)
            shots.append(render_support(scene, 0, support_size))
        pool.supports[cid] = shots
    return pool


def build_episode(phase: str, split: ClassSplit, m: int, k: int,
                  rng: np.random.Generator, scene_size=(64, 64), support_size=(32, 32),
                  max_objects: int = 3, novel_pool: NovelPool = None,
                  query_pool=None) -> Episode:
    """Assemble one task: a query scene plus m clusters of K supports.

    Base phase draws from base classes only; fine-tune from all classes,
    with novel support clusters taken verbatim from the fixed pool.
    ``query_pool`` restricts which of the m classes may appear in the
    query scene (used to alternate base/novel queries during fine-tune).
    """
    if phase == "base":
        avail = sorted(split.base_classes)
    elif phase == "finetune":
        avail = sorted(split.all_classes)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    if m > len(avail):
        raise ValueError(f"m={m} exceeds {len(avail)} available classes for phase {phase!r}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")

    class_list = sorted(int(c) for c in rng.choice(avail, size=m, replace=False))
    if query_pool is None:
        query_classes = class_list
    else:
        query_classes = sorted(set(query_pool) & set(class_list))
        if not query_classes:
            raise ValueError("query_pool shares no classes with the episode")
    query = gen_scene(rng, query_classes, max_objects, scene_size)

    support = {}
    for cid in class_list:
        if phase == "finetune" and novel_pool is not None and cid in novel_pool.supports:
            shots = novel_pool.supports[cid]
            if len(shots) < k:
                raise ValueError(f"novel pool for class {cid} has {len(shots)} < K={k} shots")
            idx = rng.choice(len(shots), size=k, replace=False) if len(shots) > k \
                else np.arange(k)
            support[cid] = [shots[int(i)] for i in idx]
        else:
            shots = []
            for _ in range(k):
                scene = gen_scene(rng, {cid}, 1, scene_size)
                shots.append(render_support(scene, 0, support_size))
            support[cid] = shots
    return Episode(query=query, support=support, class_list=class_list)


# ---------------------------------------------------------------------------
# optional on-disk scene cache

INDEX_FILE = "index.txt"
SCENES_FILE = "scenes.bin"


def save_scene_cache(dirpath: str, scenes) -> None:
    """Store scenes as a named-tensor archive plus a text index."""
    os.makedirs(dirpath, exist_ok=True)
    tensors = {f"scene{i:06d}/image": s.image.values for i, s in enumerate(scenes)}
    archive.write_archive(os.path.join(dirpath, SCENES_FILE), tensors)
    lines = []
    for i, s in enumerate(scenes):
        for cid, box in s.objects:
            coords = ",".join(str(int(v)) for v in box)
            lines.append(f"{i},{cid},{coords}")
    with open(os.path.join(dirpath, INDEX_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene_cache(dirpath: str):
    tensors = archive.read_archive(os.path.join(dirpath, SCENES_FILE))
    objects: dict = {}
    with open(os.path.join(dirpath, INDEX_FILE), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, cid, x1, y1, x2, y2 = (int(v) for v in line.split(","))
            objects.setdefault(sid, []).append(
                (cid, np.array([x1, y1, x2, y2], dtype=np.float64)))
    scenes = []
    for i in sorted(objects):
        image = tensors[f"scene{i:06d}/image"]
        scenes.append(Scene(image=Tensor(image), objects=objects[i]))
    return scenes
