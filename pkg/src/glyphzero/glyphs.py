"""Synthetic compositional glyphs.

Radicals are small procedural stroke bitmaps; a character is a spatial
composition of one to three radicals under a layout. Three rendering
styles play fixed roles: ``canonical`` is the fixed reference style used
for the embedding bank, ``variant`` and ``complex`` are progressively
harder "fonts" used for the training-branch input and for testing.

Labels carry only the radical multiset (counts per radical id), never the
layout, so the counting loss sees no structural information.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .seeding import derive_seed, rng_for

LAYOUTS = ("single", "left-right", "top-bottom", "left-middle-right", "top-middle-bottom")
ARITY = {"single": 1, "left-right": 2, "top-bottom": 2, "left-middle-right": 3, "top-middle-bottom": 3}
# relative frequency of each layout when sampling characters
LAYOUT_WEIGHTS = {"single": 0.05, "left-right": 0.4, "top-bottom": 0.3, "left-middle-right": 0.125, "top-middle-bottom": 0.125}
STYLES = ("canonical", "variant", "complex")
DEFAULT_IMAGE_SIZE = 32

_MAX_ATTEMPTS = 1000


class DatasetError(ValueError):
    """Raised for malformed on-disk datasets; the message names the file."""


@dataclass(frozen=True)
class RadicalAtlas:
    n_radicals: int
    cell_px: int
    bitmaps: np.ndarray  # (n_radicals, cell_px, cell_px) uint8 in {0, 1}
    seed: int


@dataclass(frozen=True)
class CharacterSpec:
    char_id: int
    layout: str
    radicals: tuple[int, ...]

    def __post_init__(self):
        if self.layout not in ARITY:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.radicals) != ARITY[self.layout]:
            raise ValueError(
                f"layout {self.layout!r} takes {ARITY[self.layout]} radicals, got {len(self.radicals)}"
            )


@dataclass
class GlyphImage:
    pixels: np.ndarray  # (side, side) float32 in [0, 1]
    style: str
    char_id: int
    blur_sigma: float = 0.0
    rotation_deg: float = 0.0


@dataclass(frozen=True)
class LabelSet:
    category: int
    radical_counts: np.ndarray


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    policy: str

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise ValueError("split lists must be pairwise disjoint")

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), d["policy"])


# ---------------------------------------------------------------------------
# radicals


def _stamp_segment(grid: np.ndarray, p0, p1, thickness: int = 2) -> None:
    n = grid.shape[0]
    steps = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    rows = np.rint(np.linspace(p0[0], p1[0], steps)).astype(int)
    cols = np.rint(np.linspace(p0[1], p1[1], steps)).astype(int)
    for r, c in zip(rows, cols):
        grid[max(r, 0) : min(r + thickness, n), max(c, 0) : min(c + thickness, n)] = 1


def _random_stroke(grid: np.ndarray, rng: np.random.Generator) -> None:
    n = grid.shape[0]
    hi = n - 2
    kind = rng.integers(0, 5)
    if kind == 0:  # horizontal
        r = rng.integers(0, hi + 1)
        c0, c1 = sorted(rng.integers(0, hi + 1, size=2))
        _stamp_segment(grid, (r, c0), (r, max(c1, c0 + n // 3)))
    elif kind == 1:  # vertical
        c = rng.integers(0, hi + 1)
        r0, r1 = sorted(rng.integers(0, hi + 1, size=2))
        _stamp_segment(grid, (r0, c), (max(r1, r0 + n // 3), c))
    elif kind == 2:  # diagonal
        p0 = rng.integers(0, hi + 1, size=2)
        p1 = rng.integers(0, hi + 1, size=2)
        _stamp_segment(grid, tuple(p0), tuple(p1))
    elif kind == 3:  # corner
        r, c = rng.integers(0, hi + 1, size=2)
        r2, c2 = rng.integers(0, hi + 1, size=2)
        _stamp_segment(grid, (r, c), (r, c2))
        _stamp_segment(grid, (r, c2), (r2, c2))
    else:  # dot
        r, c = rng.integers(0, n - 2, size=2)
        grid[r : r + 3, c : c + 3] = 1


def build_radical_atlas(n_radicals: int, cell_px: int, seed: int) -> RadicalAtlas:
    """Procedurally draw ``n_radicals`` distinct stroke bitmaps.

    Each bitmap has ink coverage in [15%, 60%] and differs from every other
    bitmap in at least 10% of its pixels.
    """
    if n_radicals < 2:
        raise ValueError(f"n_radicals must be >= 2, got {n_radicals}")
    if cell_px < 8:
        raise ValueError(f"cell_px must be >= 8, got {cell_px}")
    rng = rng_for(seed, "atlas")
    area = cell_px * cell_px
    min_dist = int(np.ceil(0.1 * area))
    bitmaps: list[np.ndarray] = []
    for k in range(n_radicals):
        for _ in range(_MAX_ATTEMPTS):
            grid = np.zeros((cell_px, cell_px), dtype=np.uint8)
            for _ in range(rng.integers(2, 5)):
                _random_stroke(grid, rng)
            coverage = grid.sum() / area
            if not 0.15 <= coverage <= 0.60:
                continue
            if all(np.count_nonzero(grid != other) >= min_dist for other in bitmaps):
                bitmaps.append(grid)
                break
        else:
            raise RuntimeError(
                f"could not draw radical {k} distinct from {len(bitmaps)} others "
                f"(cell {cell_px}px, min Hamming {min_dist}) after {_MAX_ATTEMPTS} attempts"
            )
    return RadicalAtlas(n_radicals, cell_px, np.stack(bitmaps), seed)


# ---------------------------------------------------------------------------
# characters


def character_capacity(n_radicals: int, layouts=LAYOUTS) -> int:
    return sum(n_radicals ** ARITY[lay] for lay in layouts)


def enumerate_characters(
    atlas: RadicalAtlas, n_chars: int, seed: int, layouts=LAYOUTS
) -> list[CharacterSpec]:
    """Sample ``n_chars`` unique (layout, radicals) compositions.

    Radicals are dealt from a shuffled deck so each radical is used about
    equally often. Small capacities are enumerated exhaustively instead.
    """
    layouts = tuple(layouts)
    n = atlas.n_radicals
    capacity = character_capacity(n, layouts)
    if n_chars > capacity:
        raise ValueError(f"requested {n_chars} characters but capacity is {capacity}")
    rng = rng_for(seed, "characters")

    if capacity <= 4 * n_chars:
        combos = [
            (lay, tuple(int(v) for v in idx))
            for lay in layouts
            for idx in np.ndindex(*([n] * ARITY[lay]))
        ]
        picks = sorted(rng.choice(len(combos), size=n_chars, replace=False))
        return [CharacterSpec(i, *combos[j]) for i, j in enumerate(picks)]

    weights = np.array([LAYOUT_WEIGHTS[lay] for lay in layouts], dtype=float)
    weights /= weights.sum()
    deck: list[int] = []
    seen: set[tuple] = set()
    specs: list[CharacterSpec] = []
    while len(specs) < n_chars:
        lay = layouts[rng.choice(len(layouts), p=weights)]
        k = ARITY[lay]
        while len(deck) < k:
            deck.extend(rng.permutation(n).tolist())
        radicals = tuple(deck[:k])
        if (lay, radicals) in seen:
            rng.shuffle(deck)
            continue
        del deck[:k]
        seen.add((lay, radicals))
        specs.append(CharacterSpec(len(specs), lay, radicals))
        if k == 1 and sum(1 for s_ in seen if s_[0] == lay) == n:
            # every single-radical character exists; stop drawing that layout
            weights[layouts.index(lay)] = 0.0
            weights /= weights.sum()
    return specs


def make_labels(spec: CharacterSpec, n_radicals: int) -> LabelSet:
    counts = np.zeros(n_radicals, dtype=np.int64)
    for r in spec.radicals:
        if not 0 <= r < n_radicals:
            raise ValueError(f"radical id {r} out of range for {n_radicals} radicals")
        counts[r] += 1
    return LabelSet(spec.char_id, counts)


# ---------------------------------------------------------------------------
# rendering


def _slots(layout: str, size: int, cell: int) -> list[tuple[int, int, int, int]]:
    """(row, col, height, width) of each radical slot on the canvas.

    Multi-radical layouts share one centred 3x3 slot grid: two-part layouts
    use the outer slots, three-part layouts all three, along their axis.
    With an 8px cell on a 32px canvas the slots start at 4, 12 and 20, so a
    radical sits at the same phase of a stride-8 feature grid wherever it
    is placed.
    """
    if layout == "single":
        o = (size - cell) // 2
        return [(o, o, cell, cell)]
    span = min(cell, size // 3)
    start = (size - 3 * span) // 2
    grid = [start + i * span for i in range(3)]
    cols = [grid[0], grid[2]] if ARITY[layout] == 2 else grid
    cross = (size - cell) // 2
    if layout in ("left-right", "left-middle-right"):
        return [(cross, c, cell, span) for c in cols]
    return [(c, cross, span, cell) for c in cols]


def _fit(bitmap: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour squeeze of a radical into a narrower slot."""
    if bitmap.shape == (h, w):
        return bitmap
    rows = (np.arange(h) * bitmap.shape[0] // h).astype(int)
    cols = (np.arange(w) * bitmap.shape[1] // w).astype(int)
    return bitmap[np.ix_(rows, cols)]


def _paste(canvas: np.ndarray, patch: np.ndarray, r: int, c: int) -> None:
    H, W = canvas.shape
    h, w = patch.shape
    r0, c0 = max(r, 0), max(c, 0)
    r1, c1 = min(r + h, H), min(c + w, W)
    if r1 <= r0 or c1 <= c0:
        return
    region = patch[r0 - r : r1 - r, c0 - c : c1 - c]
    np.maximum(canvas[r0:r1, c0:c1], region, out=canvas[r0:r1, c0:c1])


_STYLE_INDEX = {s: i for i, s in enumerate(STYLES)}
_CROSS = ndimage.generate_binary_structure(2, 1)
_BLOCK = np.ones((2, 2), dtype=bool)


def render_glyph(
    spec: CharacterSpec,
    atlas: RadicalAtlas,
    style: str = "canonical",
    size: int = DEFAULT_IMAGE_SIZE,
    seed: int = 0,
) -> GlyphImage:
    if style not in _STYLE_INDEX:
        raise ValueError(f"unknown style {style!r}")
    if len(spec.radicals) != ARITY[spec.layout]:
        raise ValueError(f"layout {spec.layout!r} needs {ARITY[spec.layout]} radicals, got {len(spec.radicals)}")
    cell = atlas.cell_px
    if size < cell or (ARITY[spec.layout] > 1 and size < 2 * cell):
        raise ValueError(f"image size {size} too small for cell {cell} with layout {spec.layout!r}")
    for r in spec.radicals:
        if not 0 <= r < atlas.n_radicals:
            raise ValueError(f"radical id {r} out of range for atlas of {atlas.n_radicals}")

    rng = np.random.default_rng(derive_seed(seed, spec.char_id, _STYLE_INDEX[style]))
    canvas = np.zeros((size, size), dtype=np.float32)
    styled = style != "canonical"
    if styled:
        thicken = bool(rng.integers(0, 2))
        dr, dc = (int(v) for v in rng.integers(-2, 3, size=2))
    for rad, (r, c, h, w) in zip(spec.radicals, _slots(spec.layout, size, cell)):
        patch = _fit(atlas.bitmaps[rad], h, w).astype(bool)
        if styled:
            if thicken:
                patch = ndimage.binary_dilation(patch, structure=_BLOCK)
            else:
                patch = ndimage.binary_erosion(patch, structure=_BLOCK, border_value=0)
            r, c = r + dr, c + dc
        _paste(canvas, patch.astype(np.float32), r, c)
    if styled:
        canvas *= np.float32(rng.uniform(0.8, 1.0))
    if style == "complex":
        shear = np.tan(np.deg2rad(rng.uniform(-10.0, 10.0)))
        centre = (size - 1) / 2.0
        matrix = np.array([[1.0, 0.0], [shear, 1.0]])
        offset = np.array([centre, centre]) - matrix @ np.array([centre, centre])
        canvas = ndimage.affine_transform(canvas, matrix, offset=offset, order=1, mode="constant", cval=0.0)
        ink = canvas > 0
        drop = rng.random(canvas.shape) < 0.2
        canvas = np.where(ink & drop, 0.0, canvas).astype(np.float32)
    return GlyphImage(np.clip(canvas, 0.0, 1.0).astype(np.float32), style, spec.char_id)


def augment(
    img: GlyphImage,
    blur_sigma: float = 0.0,
    rotation_range: tuple[float, float] = (0.0, 0.0),
    seed: int = 0,
) -> GlyphImage:
    """Gaussian blur followed by a random rotation drawn from ``rotation_range``."""
    lo, hi = rotation_range
    if blur_sigma < 0:
        raise ValueError(f"blur_sigma must be >= 0, got {blur_sigma}")
    if not np.isclose(lo, -hi):
        raise ValueError(f"rotation range must be symmetric around 0, got {rotation_range}")
    pixels = img.pixels.copy()
    if blur_sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, blur_sigma, mode="constant", cval=0.0)
    angle = 0.0
    if hi > lo:
        angle = float(np.random.default_rng(seed).uniform(lo, hi))
        pixels = ndimage.rotate(pixels, angle, reshape=False, order=1, mode="constant", cval=0.0)
    return GlyphImage(
        np.clip(pixels, 0.0, 1.0).astype(np.float32), img.style, img.char_id, float(blur_sigma), angle
    )


# ---------------------------------------------------------------------------
# splits


def _radicals_of(chars) -> dict[int, set[int]]:
    return {c.char_id: set(c.radicals) for c in chars}


def split_dataset(
    chars: list[CharacterSpec],
    train_n: int,
    val_n: int,
    test_n: int,
    policy: str = "radical-covered",
    seed: int = 0,
) -> SplitSpec:
    """Partition characters so that test characters never appear in training.

    The test set depends only on ``(chars, test_n, seed)``, so sweeps over
    ``train_n`` evaluate on one fixed test set. Under ``radical-covered``
    every radical of a test character also occurs in some training
    character; under ``radical-open`` a handful of radicals are withheld
    from training and at least 10% of test characters use one of them.
    """
    if train_n + val_n + test_n > len(chars):
        raise ValueError(f"train+val+test = {train_n + val_n + test_n} exceeds {len(chars)} characters")
    if policy not in ("radical-covered", "radical-open"):
        raise ValueError(f"unknown split policy {policy!r}")
    rng = rng_for(seed, "split")
    order = [chars[i] for i in rng.permutation(len(chars))]
    if policy == "radical-covered":
        return _covered_split(order, train_n, val_n, test_n)
    return _open_split(order, train_n, val_n, test_n, rng)


def _covered_split(order, train_n, val_n, test_n) -> SplitSpec:
    test = order[:test_n]
    pool = order[test_n:]
    needed = sorted(set().union(*(set(c.radicals) for c in test))) if test else []
    pool_radicals = set().union(*(set(c.radicals) for c in pool)) if pool else set()
    missing = [r for r in needed if r not in pool_radicals]
    if missing:
        raise ValueError(f"radical-covered split infeasible: radicals {missing} occur only in test characters")
    train: list[CharacterSpec] = []
    covered: set[int] = set()
    for r in needed:
        if r in covered:
            continue
        pick = next(c for c in pool if r in c.radicals and c not in train)
        train.append(pick)
        covered |= set(pick.radicals)
    if len(train) > train_n:
        raise ValueError(
            f"radical-covered split infeasible: covering radicals {needed} needs {len(train)} "
            f"training characters but train_n={train_n}"
        )
    chosen = {c.char_id for c in train}
    for c in pool:
        if len(train) >= train_n:
            break
        if c.char_id not in chosen:
            train.append(c)
            chosen.add(c.char_id)
    rest = [c for c in pool if c.char_id not in chosen]
    val = rest[:val_n]
    return SplitSpec(
        tuple(c.char_id for c in train), tuple(c.char_id for c in val), tuple(c.char_id for c in test), "radical-covered"
    )


def _open_split(order, train_n, val_n, test_n, rng) -> SplitSpec:
    all_radicals = sorted(set().union(*(set(c.radicals) for c in order)))
    n_hold = max(1, round(0.1 * len(all_radicals)))
    held = set(rng.choice(all_radicals, size=n_hold, replace=False).tolist())
    open_chars = [c for c in order if set(c.radicals) & held]
    closed = [c for c in order if not set(c.radicals) & held]
    quota = int(np.ceil(0.1 * test_n))
    if len(open_chars) < quota:
        raise ValueError(f"radical-open split infeasible: only {len(open_chars)} characters use withheld radicals")
    if len(closed) < train_n:
        raise ValueError(f"radical-open split infeasible: only {len(closed)} characters avoid withheld radicals")
    rest = closed[train_n:] + open_chars[quota:]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    test = open_chars[:quota] + rest[: test_n - quota]
    remaining = rest[test_n - quota :]
    val = remaining[:val_n]
    return SplitSpec(
        tuple(c.char_id for c in closed[:train_n]),
        tuple(c.char_id for c in val),
        tuple(c.char_id for c in test),
        "radical-open",
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class GlyphDataset:
    """Rendered glyphs for every character, indexed by ``char_id``."""

    chars: list[CharacterSpec]
    images: dict[str, np.ndarray]  # style -> (n_chars, side, side) float32, in ``chars`` order
    labels: np.ndarray  # (n_chars, n_radicals) int64 radical counts
    n_radicals: int
    image_size: int
    atlas: RadicalAtlas | None = None
    render_seed: int = 0
    split: SplitSpec | None = None
    _index: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {c.char_id: i for i, c in enumerate(self.chars)}

    def index_of(self, char_ids) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in char_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"char_id {exc.args[0]} not in dataset") from None

    def spec(self, char_id: int) -> CharacterSpec:
        return self.chars[self._index[char_id]]

    def glyphs(self, style: str, char_ids) -> np.ndarray:
        return self.images[style][self.index_of(char_ids)]

    def counts(self, char_ids) -> np.ndarray:
        return self.labels[self.index_of(char_ids)]

    @property
    def char_ids(self) -> list[int]:
        return [c.char_id for c in self.chars]


def make_dataset(
    n_radicals: int = 40,
    n_chars: int = 600,
    cell_px: int = 8,
    image_size: int = DEFAULT_IMAGE_SIZE,
    seed: int = 0,
    styles=STYLES,
) -> GlyphDataset:
    atlas = build_radical_atlas(n_radicals, cell_px, derive_seed(seed, "atlas"))
    chars = enumerate_characters(atlas, n_chars, derive_seed(seed, "characters"))
    render_seed = derive_seed(seed, "render")
    images = {
        style: np.stack([render_glyph(c, atlas, style, image_size, render_seed).pixels for c in chars])
        for style in styles
    }
    labels = np.stack([make_labels(c, n_radicals).radical_counts for c in chars])
    return GlyphDataset(chars, images, labels, n_radicals, image_size, atlas, render_seed)


def _manifest(ds: GlyphDataset) -> dict:
    atlas = None
    if ds.atlas is not None:
        atlas = {"seed": ds.atlas.seed, "n_radicals": ds.atlas.n_radicals, "cell_px": ds.atlas.cell_px}
    return {
        "format": "glyphzero-dataset",
        "version": 1,
        "atlas": atlas,
        "n_radicals": ds.n_radicals,
        "image_size": ds.image_size,
        "render_seed": ds.render_seed,
        "styles": sorted(ds.images),
        "characters": [
            {
                "char_id": c.char_id,
                "layout": c.layout,
                "radicals": list(c.radicals),
                "radical_counts": ds.labels[i].tolist(),
            }
            for i, c in enumerate(ds.chars)
        ],
        "split": ds.split.to_dict() if ds.split is not None else None,
    }


def manifest_bytes(ds: GlyphDataset) -> bytes:
    return (json.dumps(_manifest(ds), indent=1, sort_keys=True) + "\n").encode("utf-8")


def write_dataset(ds: GlyphDataset, root, force: bool = False) -> Path:
    """Write ``manifest.json`` plus ``images/<style>/<char_id>.pgm``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {root} is not empty (use force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_bytes(manifest_bytes(ds))
    for style, stack in ds.images.items():
        folder = root / "images" / style
        folder.mkdir(parents=True, exist_ok=True)
        for c, pixels in zip(ds.chars, stack):
            gray = np.rint(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(gray, mode="L").save(folder / f"{c.char_id}.pgm")
    return root


def read_dataset(root) -> GlyphDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    n_radicals = int(manifest["n_radicals"])
    size = int(manifest["image_size"])
    chars, labels = [], []
    for entry in manifest["characters"]:
        counts = np.asarray(entry["radical_counts"], dtype=np.int64)
        if counts.shape != (n_radicals,):
            raise DatasetError(
                f"{path}: char {entry['char_id']} has {counts.size} radical counts but manifest declares {n_radicals} radicals"
            )
        bad = [r for r in entry["radicals"] if not 0 <= r < n_radicals]
        if bad:
            raise DatasetError(f"{path}: char {entry['char_id']} uses unknown radical ids {bad}")
        spec = CharacterSpec(int(entry["char_id"]), entry["layout"], tuple(int(r) for r in entry["radicals"]))
        if not np.array_equal(counts, make_labels(spec, n_radicals).radical_counts):
            raise DatasetError(f"{path}: char {spec.char_id} radical counts disagree with its radicals")
        chars.append(spec)
        labels.append(counts)
    images = {}
    for style in manifest["styles"]:
        stack = []
        for c in chars:
            img_path = root / "images" / style / f"{c.char_id}.pgm"
            if not img_path.is_file():
                raise DatasetError(f"missing image {img_path}")
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            if arr.shape != (size, size):
                raise DatasetError(f"{img_path}: image is {arr.shape[0]}x{arr.shape[1]}, expected {size}x{size}")
            stack.append(arr)
        images[style] = np.stack(stack) if stack else np.zeros((0, size, size), np.float32)
    atlas = None
    if manifest.get("atlas"):
        a = manifest["atlas"]
        atlas = build_radical_atlas(a["n_radicals"], a["cell_px"], a["seed"])
    split = SplitSpec.from_dict(manifest["split"]) if manifest.get("split") else None
    return GlyphDataset(
        chars,
        images,
        np.stack(labels) if labels else np.zeros((0, n_radicals), np.int64),
        n_radicals,
        size,
        atlas,
        int(manifest.get("render_seed", 0)),
        split,
    )


def load_external_dataset(root_path):
    """Load a dataset directory; returns ``(chars, images, labels)``."""
    ds = read_dataset(root_path)
    return ds.chars, ds.images, ds.labels
