"""Procedural toy datasets with exact masks, splits and pixel-only domain shifts.

Images are rendered in [0, 1], quantized to 8-bit PNG, and exposed to models
in [-1, 1] (``v / 127.5 - 1``). Masks are hard-rasterized (a pixel belongs to
a shape iff its center does) and later shapes overwrite earlier ones.
"""
from __future__ import annotations

import dataclasses
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import SeededRng
from .errors import InvalidArgument, PreconditionError

SPLITS = ("labeled", "unlabeled", "val", "test")
SHIFT_KINDS = ("contrast_invert", "intensity_shift", "texture_swap", "blur", "occlusion")


@dataclass
class DomainShift:
    kind: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise InvalidArgument(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def parse(cls, spec) -> "DomainShift":
        """Accepts a DomainShift, a dict, or text like ``"blur(1.0)"``."""
        if isinstance(spec, DomainShift):
            return spec
        if isinstance(spec, dict):
            return cls(spec["kind"], dict(spec.get("params", {})))
        text = str(spec).strip()
        if "(" in text:
            kind, arg = text[:-1].split("(", 1)
            key = {"intensity_shift": "delta", "blur": "sigma", "occlusion": "fraction",
                   "texture_swap": "amplitude"}.get(kind)
            if key is None:
                raise InvalidArgument(f"shift {kind!r} takes no argument")
            return cls(kind, {key: float(arg)})
        return cls(text)


@dataclass
class ShapeModel:
    """Per-class object law: shape family, count range, size range, intensity range."""
    cls: int
    family: str
    count: Tuple[int, int] = (1, 1)
    size: Tuple[float, float] = (0.1, 0.3)
    intensity: Tuple[float, float] = (0.6, 0.95)
    color: Optional[List[Tuple[float, float]]] = None


@dataclass
class DatasetRecipe:
    name: str
    resolution: int = 64
    c_cls: int = 2
    c_img: int = 1
    layout: str = "independent"
    objects: List[ShapeModel] = field(default_factory=list)
    background_base: Tuple[float, float] = (0.1, 0.25)
    background_noise: float = 0.05
    background_gradient: float = 0.1
    background_color: Optional[List[Tuple[float, float]]] = None
    shift: List[dict] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecipe":
        d = dict(d)
        d["objects"] = [ShapeModel(**{k: (tuple(v) if isinstance(v, list) and k != "color" else v)
                                      for k, v in o.items()}) for o in d.get("objects", [])]
        for key in ("background_base",):
            d[key] = tuple(d[key])
        return cls(**d)


def blobs_a(resolution: int = 64, seed: int = 0) -> DatasetRecipe:
    """Binary lesion-like task: one bright ellipse on a dark noisy background."""
    return DatasetRecipe(
        name="BLOBS-A", resolution=resolution, c_cls=2, c_img=1, layout="independent",
        objects=[ShapeModel(cls=1, family="ellipse", count=(1, 1), size=(0.1, 0.3), intensity=(0.6, 0.95))],
        background_base=(0.1, 0.25), background_noise=0.05, background_gradient=0.1, seed=seed,
    )


def facetoy(resolution: int = 64, seed: int = 0) -> DatasetRecipe:
    """Four-class face-part task: face ellipse, two eye dots, a mouth bar."""
    return DatasetRecipe(
        name="FACETOY", resolution=resolution, c_cls=4, c_img=3, layout="face",
        objects=[
            ShapeModel(cls=1, family="ellipse", size=(0.25, 0.35),
                       color=[(0.7, 0.95), (0.5, 0.75), (0.35, 0.6)]),
            ShapeModel(cls=2, family="ellipse", count=(2, 2), size=(0.05, 0.07),
                       color=[(0.0, 0.2), (0.0, 0.2), (0.05, 0.3)]),
            ShapeModel(cls=3, family="polygon", size=(0.07, 0.09),
                       color=[(0.6, 0.9), (0.05, 0.25), (0.1, 0.3)]),
        ],
        background_base=(0.05, 0.3), background_noise=0.04, background_gradient=0.1,
        background_color=[(0.05, 0.35), (0.05, 0.35), (0.1, 0.45)], seed=seed,
    )


RECIPES = {"BLOBS-A": blobs_a, "FACETOY": facetoy}
OOD_PARTNERS = {
    "BLOBS-A": ["contrast_invert", "texture_swap"],
    "FACETOY": ["intensity_shift(0.3)", "blur(1.0)"],
}


def make_recipe(name: str, resolution: int, seed: int = 0) -> DatasetRecipe:
    if name not in RECIPES:
        raise InvalidArgument(f"unknown recipe {name!r}; known: {sorted(RECIPES)}")
    return RECIPES[name](resolution, seed)


# -- geometry --------------------------------------------------------------------

def _grid(res: int):
    c = np.arange(res) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # px[y, x] = x, py[y, x] = y


def ellipse_mask(res: int, cx, cy, a, b, theta) -> np.ndarray:
    px, py = _grid(res)
    dx, dy = px - cx, py - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def polygon_mask(res: int, vertices) -> np.ndarray:
    """Convex polygon with counter-clockwise vertices (in image x/y coordinates)."""
    px, py = _grid(res)
    inside = np.ones((res, res), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross >= 0
    return inside


def shape_mask(res: int, shape: dict) -> np.ndarray:
    kind = shape["family"]
    if kind == "ellipse":
        return ellipse_mask(res, shape["cx"], shape["cy"], shape["a"], shape["b"], shape["theta"])
    if kind == "ring":
        outer = ellipse_mask(res, shape["cx"], shape["cy"], shape["a"], shape["b"], shape["theta"])
        r = shape["inner"]
        inner = ellipse_mask(res, shape["cx"], shape["cy"], shape["a"] * r, shape["b"] * r, shape["theta"])
        return outer & ~inner
    if kind == "polygon":
        return polygon_mask(res, shape["vertices"])
    raise InvalidArgument(f"unknown shape family {kind!r}")


def _rect(cx, cy, half_w, half_h, theta):
    c, s = math.cos(theta), math.sin(theta)
    pts = [(-half_w, -half_h), (half_w, -half_h), (half_w, half_h), (-half_w, half_h)]
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in pts]


def _random_convex(rng, cx, cy, r, n=6):
    # vertices on a common circle, sorted by angle -> always convex
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    return [(cx + r * math.cos(t), cy + r * math.sin(t)) for t in angles]


def _place_independent(recipe: DatasetRecipe, rng) -> List[dict]:
    res = recipe.resolution
    shapes = []
    for obj in recipe.objects:
        for _ in range(int(rng.integers(obj.count[0], obj.count[1] + 1))):
            a = rng.uniform(*obj.size) * res
            b = rng.uniform(*obj.size) * res
            reach = max(obj.size[1] * res, 1.0)
            lo, hi = reach, res - reach
            if lo >= hi:
                lo, hi = 0.3 * res, 0.7 * res
            cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
            theta = rng.uniform(0, math.pi)
            shape = {"family": obj.family, "cls": obj.cls, "cx": cx, "cy": cy, "a": a, "b": b, "theta": theta}
            if obj.family == "ring":
                shape["inner"] = float(rng.uniform(0.4, 0.7))
            if obj.family == "polygon":
                shape = {"family": "polygon", "cls": obj.cls, "vertices": _random_convex(rng, cx, cy, max(a, b))}
            shape["value"] = _draw_value(obj, rng, recipe.c_img)
            shapes.append(shape)
    return shapes


def _draw_value(obj: ShapeModel, rng, c_img: int) -> List[float]:
    if obj.color is not None and c_img == 3:
        return [float(rng.uniform(*r)) for r in obj.color]
    v = float(rng.uniform(*obj.intensity))
    return [v] * c_img


def _place_face(recipe: DatasetRecipe, rng) -> List[dict]:
    res = recipe.resolution
    face, eye, mouth = recipe.objects
    a = rng.uniform(*face.size) * res
    b = a * rng.uniform(1.1, 1.3)
    b = min(b, 0.45 * res)
    cx = res / 2 + rng.uniform(-0.08, 0.08) * res
    cy = res / 2 + rng.uniform(-0.05, 0.05) * res
    theta = rng.uniform(-0.2, 0.2)
    c, s = math.cos(theta), math.sin(theta)

    def at(u, v):
        return cx + u * c - v * s, cy + u * s + v * c

    shapes = [{"family": "ellipse", "cls": face.cls, "cx": cx, "cy": cy, "a": a, "b": b,
               "theta": theta, "value": _draw_value(face, rng, recipe.c_img)}]
    eye_r = rng.uniform(*eye.size) * res
    eye_value = _draw_value(eye, rng, recipe.c_img)
    for side in (-1, 1):
        ex, ey = at(side * 0.38 * a, -0.25 * b)
        shapes.append({"family": "ellipse", "cls": eye.cls, "cx": ex, "cy": ey, "a": eye_r, "b": eye_r,
                       "theta": 0.0, "value": eye_value})
    mx, my = at(0.0, 0.45 * b)
    half_h = max(rng.uniform(*mouth.size) * res / 2, 0.75)
    shapes.append({"family": "polygon", "cls": mouth.cls,
                   "vertices": _rect(mx, my, 0.45 * a, half_h, theta),
                   "value": _draw_value(mouth, rng, recipe.c_img)})
    return shapes


def item_seed(recipe_seed: int, index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([recipe_seed, index, salt]).generate_state(1)[0])


def render_item(recipe: DatasetRecipe, seed: int):
    """Render one item -> (uint8 image [H, W] or [H, W, 3], uint8 mask [H, W], shapes)."""
    rng = np.random.default_rng(seed)
    res = recipe.resolution
    shapes = _place_face(recipe, rng) if recipe.layout == "face" else _place_independent(recipe, rng)
    img = np.zeros((recipe.c_img, res, res))
    if recipe.background_color is not None and recipe.c_img == 3:
        img += np.array([rng.uniform(*r) for r in recipe.background_color])[:, None, None]
    else:
        img += rng.uniform(*recipe.background_base)
    if recipe.background_gradient:
        px, py = _grid(res)
        t = rng.uniform(0, 2 * math.pi)
        ramp = ((px - res / 2) * math.cos(t) + (py - res / 2) * math.sin(t)) / res
        img += recipe.background_gradient * ramp
    mask = np.zeros((res, res), dtype=np.uint8)
    for shape in shapes:
        m = shape_mask(res, shape)
        mask[m] = shape["cls"]
        img[:, m] = np.array(shape["value"])[:, None]
    img += rng.normal(0.0, recipe.background_noise, img.shape)
    img = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    img = img[0] if recipe.c_img == 1 else img.transpose(1, 2, 0)
    return img, mask, shapes


# -- conversions -----------------------------------------------------------------

def to_model(img_u8: np.ndarray) -> np.ndarray:
    """uint8 [H, W] or [H, W, C] -> float32 [C, H, W] in [-1, 1]."""
    x = img_u8.astype(np.float32) / 127.5 - 1.0
    return x[None] if x.ndim == 2 else x.transpose(2, 0, 1)


def to_uint8(x) -> np.ndarray:
    """float [C, H, W] in [-1, 1] -> uint8 [H, W] or [H, W, C]; clamps."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    u = np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return u[0] if u.shape[0] == 1 else u.transpose(1, 2, 0)


def write_png(path, array_u8: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array_u8).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


# -- manifest --------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    recipe: dict
    items: List[dict]
    splits: Dict[str, List[int]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    _cache: Optional[Tuple[torch.Tensor, torch.Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def c_img(self) -> int:
        return self.recipe["c_img"]

    @property
    def c_cls(self) -> int:
        return self.recipe["c_cls"]

    @property
    def resolution(self) -> int:
        return self.recipe["resolution"]

    def to_json(self) -> str:
        return json.dumps({"recipe": self.recipe, "items": self.items, "splits": self.splits}, indent=1,
                          sort_keys=True)

    def write(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise PreconditionError(f"dataset manifest not found: {path}")
        d = json.loads(path.read_text())
        splits = {s: list(d.get("splits", {}).get(s, [])) for s in SPLITS}
        return cls(path.parent, d["recipe"], d["items"], splits)

    def arrays(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """All items as (images [N, C, H, W] in [-1, 1], labels [N, H, W] int64); cached."""
        if self._cache is None:
            imgs = np.stack([to_model(read_png(self.root / it["image"])) for it in self.items])
            masks = np.stack([read_png(self.root / it["mask"]) for it in self.items])
            self._cache = (torch.from_numpy(imgs), torch.from_numpy(masks.astype(np.int64)))
        return self._cache

    def split_arrays(self, split: str, limit: Optional[int] = None):
        ids = self.splits[split] if split in self.splits else _bad_split(split)
        if limit is not None:
            ids = ids[:limit]
        imgs, labels = self.arrays()
        idx = torch.as_tensor(ids, dtype=torch.long)
        return imgs[idx], labels[idx]


def _bad_split(split):
    raise InvalidArgument(f"unknown split {split!r}; expected one of {SPLITS}")


def generate_dataset(recipe: DatasetRecipe, count: int, root) -> DatasetManifest:
    if count <= 0:
        raise InvalidArgument("count must be positive")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    items = []
    for i in range(count):
        seed = item_seed(recipe.seed, i)
        img, mask, _ = render_item(recipe, seed)
        rel_img, rel_mask = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        write_png(root / rel_img, img)
        write_png(root / rel_mask, mask)
        items.append({"id": i, "image": rel_img, "mask": rel_mask, "seed": seed})
    manifest = DatasetManifest(root, recipe.to_dict(), items)
    manifest.write()
    return manifest


def split(manifest: DatasetManifest, k: int, n: int, val: int, test: int, seed: int = 0,
          enforce_scarcity: bool = True, write: bool = True) -> DatasetManifest:
    """Disjoint deterministic assignment of items to labeled/unlabeled/val/test.

    With ``write`` the new splits replace the manifest file on disk.
    """
    for name, v in (("k", k), ("n", n), ("val", val), ("test", test)):
        if v < 0:
            raise InvalidArgument(f"{name} must be >= 0")
    total = len(manifest.items)
    if k + n + val + test > total:
        raise InvalidArgument(f"split needs {k + n + val + test} items, dataset has {total}")
    if enforce_scarcity and k > n / 10:
        raise InvalidArgument(f"labeled count k={k} violates k <= n/10 (n={n}); "
                              "disable data.enforce_scarcity to allow it")
    perm = np.random.default_rng(seed).permutation(total).tolist()
    # test and val come first so they stay fixed when k/n change under the same seed
    test_ids = perm[:test]
    val_ids = perm[test:test + val]
    rest = perm[test + val:]
    splits = {"test": test_ids, "val": val_ids, "labeled": rest[:k], "unlabeled": rest[k:k + n]}
    out = DatasetManifest(manifest.root, manifest.recipe, manifest.items, splits)
    out._cache = manifest._cache
    if write:
        out.write()
    return out


# -- domain shifts -----------------------------------------------------------------

def shift_image(x: np.ndarray, shift: DomainShift, seed: int = 0, clamp: bool = True) -> np.ndarray:
    """Apply ``shift`` to one float image [C, H, W] in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    p = shift.params
    if shift.kind == "contrast_invert":
        y = -x
    elif shift.kind == "intensity_shift":
        y = x + p.get("delta", 0.3)
    elif shift.kind == "texture_swap":
        rng = np.random.default_rng(seed)
        res = x.shape[-1]
        px, py = _grid(res)
        t = rng.uniform(0, math.pi)
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * math.pi)
        grating = np.sin(2 * math.pi * (px * math.cos(t) + py * math.sin(t)) / period + phase)
        y = x + p.get("amplitude", 0.25) * grating[None]
    elif shift.kind == "blur":
        sigma = p.get("sigma", 1.0)
        y = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in x])
    elif shift.kind == "occlusion":
        rng = np.random.default_rng(seed)
        res = x.shape[-1]
        side = int(round(math.sqrt(p.get("fraction", 0.1)) * res))
        y = x.copy()
        if side > 0:
            r0, c0 = rng.integers(0, res - side + 1, 2)
            y[:, r0:r0 + side, c0:c0 + side] = 0.0
    else:  # pragma: no cover - guarded by DomainShift
        raise InvalidArgument(shift.kind)
    return np.clip(y, -1.0, 1.0) if clamp else y


def apply_shift(manifest: DatasetManifest, shifts, root) -> DatasetManifest:
    """New dataset at ``root`` with shifted images and byte-identical masks."""
    if not isinstance(shifts, (list, tuple)):
        shifts = [shifts]
    shifts = [DomainShift.parse(s) for s in shifts]
    root = Path(root)
    recipe = dict(manifest.recipe)
    recipe["shift"] = list(recipe.get("shift", [])) + [s.to_dict() for s in shifts]
    for it in manifest.items:
        x = to_model(read_png(manifest.root / it["image"]))
        for j, s in enumerate(shifts):
            x = shift_image(x, s, seed=item_seed(it["seed"], j, 1 + SHIFT_KINDS.index(s.kind)))
        write_png(root / it["image"], to_uint8(x))
        (root / it["mask"]).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(manifest.root / it["mask"], root / it["mask"])
    out = DatasetManifest(root, recipe, [dict(it) for it in manifest.items],
                          {k: list(v) for k, v in manifest.splits.items()})
    out.write()
    return out


def load_batch(manifest: DatasetManifest, split_name: str, size: int, rng: Optional[SeededRng] = None,
               with_labels: bool = True):
    """Sample ``size`` items of a split uniformly with replacement (in order if ``rng`` is None)."""
    ids = manifest.splits.get(split_name)
    if ids is None:
        _bad_split(split_name)
    imgs, labels = manifest.arrays()
    if size == 0:
        empty = imgs[:0]
        return (empty, labels[:0]) if with_labels else empty
    if not ids:
        raise InvalidArgument(f"split {split_name!r} is empty")
    if rng is None:
        pick = torch.as_tensor([ids[i % len(ids)] for i in range(size)])
    else:
        pick = torch.as_tensor(ids)[rng.randint(len(ids), size)]
    return (imgs[pick], labels[pick]) if with_labels else imgs[pick]
