"""Procedural quadruple generation: clean scene, region, local degradation, reference crop, instruction.

Every sample is a pure function of ``(scene seed, DataConfig)``.  Random
streams are derived with ``numpy.random.SeedSequence`` so that each stage
(scene, ops, region, degradation, jitter) draws from its own generator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging
from .errors import DegradationError, SelectionError, SpecError, VocabularyError
from .font import GLYPH_HEIGHT, text_bitmap
from .imaging import RegionMask, Rect

DEGRADATION_OPS = (
    "blur",
    "downsample_upsample",
    "quantize",
    "glyph_erode",
    "brightness",
    "hue_swap",
    "glyph_replace",
)

GLYPH_WORDS = ("A", "7", "AB", "OK", "X7", "R2", "HI", "K9", "ZQ", "MW", "LOGO", "SALE", "42", "NEW", "T5", "GO", "E8", "VS")

MAX_RETRIES = 8

# stage identifiers for SeedSequence spawning
_SCENE, _OPS, _REGION, _DEGRADE, _JITTER = range(5)


def stage_rng(seed: int, stage: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stage, attempt]))


def snap_8bit(img: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid so in-memory data equals what a PNG stores."""
    return imaging.quantize_8bit(img).astype(np.float64) / 255.0


# -- scene description ---------------------------------------------------------


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" | "disc"
    top: int
    left: int
    height: int
    width: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class Texture:
    kind: str  # "stripes" | "checker"
    top: int
    left: int
    height: int
    width: int
    period: int
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    vertical: bool = False


@dataclass(frozen=True)
class Glyph:
    text: str
    top: int
    left: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background: tuple[float, float, float]
    shapes: tuple[Shape, ...] = ()
    textures: tuple[Texture, ...] = ()
    glyphs: tuple[Glyph, ...] = ()
    seed: int = 0


@dataclass
class DataConfig:
    image_size: int = 32
    align: int = 4
    min_frac: float = 0.0625
    max_frac: float = 0.25
    jitter_p: float = 0.5
    jitter_flip: bool = True
    jitter_max_delta: float = 0.1
    op_weights: dict = field(default_factory=lambda: {op: 1.0 for op in DEGRADATION_OPS})
    ops_per_sample: int = 1
    max_shapes: int = 3
    max_glyphs: int = 2

    def op_probabilities(self) -> dict[str, float]:
        unknown = set(self.op_weights) - set(DEGRADATION_OPS)
        if unknown:
            raise SpecError(f"unknown degradation ops in config: {sorted(unknown)}")
        total = float(sum(self.op_weights.values()))
        if total <= 0:
            raise SpecError("op weights must have a positive sum")
        return {op: self.op_weights.get(op, 0.0) / total for op in DEGRADATION_OPS}


# -- rendering -------------------------------------------------------------------


def _check_box(spec: SceneSpec, top: int, left: int, h: int, w: int, what: str) -> None:
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > spec.height or left + w > spec.width:
        raise SpecError(f"{what} at ({top},{left}) size {h}x{w} is outside the {spec.height}x{spec.width} canvas")


def glyph_bitmap(spec: SceneSpec, glyph: Glyph) -> np.ndarray:
    """Canvas-sized boolean map of the pixels painted by ``glyph``."""
    bmp = text_bitmap(glyph.text)
    _check_box(spec, glyph.top, glyph.left, bmp.shape[0], bmp.shape[1], f"glyph {glyph.text!r}")
    out = np.zeros((spec.height, spec.width), dtype=bool)
    out[glyph.top : glyph.top + bmp.shape[0], glyph.left : glyph.left + bmp.shape[1]] = bmp
    return out


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Paint background, shapes, textures and glyphs, in that order."""
    if spec.height < 1 or spec.width < 1:
        raise SpecError("canvas must be non-empty")
    img = imaging.solid(spec.height, spec.width, spec.background)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    for s in spec.shapes:
        _check_box(spec, s.top, s.left, s.height, s.width, f"{s.kind} shape")
        if s.kind == "rect":
            img[s.top : s.top + s.height, s.left : s.left + s.width] = s.color
        elif s.kind == "disc":
            cy = s.top + (s.height - 1) / 2.0
            cx = s.left + (s.width - 1) / 2.0
            inside = ((yy - cy) / (s.height / 2.0)) ** 2 + ((xx - cx) / (s.width / 2.0)) ** 2 <= 1.0
            img[inside] = s.color
        else:
            raise SpecError(f"unknown shape kind {s.kind!r}")
    for t in spec.textures:
        _check_box(spec, t.top, t.left, t.height, t.width, f"{t.kind} texture")
        if t.period < 2:
            raise SpecError(f"texture period must be >= 2, got {t.period}")
        half = t.period // 2
        ly, lx = np.mgrid[0 : t.height, 0 : t.width]
        if t.kind == "stripes":
            coord = ly if not t.vertical else lx
            on = (coord % t.period) < half
        elif t.kind == "checker":
            on = ((ly // half) + (lx // half)) % 2 == 0
        else:
            raise SpecError(f"unknown texture kind {t.kind!r}")
        region = img[t.top : t.top + t.height, t.left : t.left + t.width]
        region[on] = t.color_a
        region[~on] = t.color_b
    for g in spec.glyphs:
        if g.text not in GLYPH_WORDS:
            raise SpecError(f"glyph text {g.text!r} not in the glyph vocabulary")
        img[glyph_bitmap(spec, g)] = g.color
    return img


def _color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in np.round(rng.uniform(0.05, 0.95, size=3), 3))


def _contrasting(rng: np.random.Generator, against, min_dist: float = 0.45):
    for _ in range(64):
        c = _color(rng)
        if np.abs(np.subtract(c, against)).max() >= min_dist:
            return c
    return tuple(float(1.0 - v > 0.5) for v in against)


def random_scene(seed: int, cfg: DataConfig) -> SceneSpec:
    rng = stage_rng(seed, _SCENE)
    n = cfg.image_size
    bg = _color(rng)
    shapes = []
    for _ in range(int(rng.integers(1, cfg.max_shapes + 1))):
        h, w = (int(v) for v in rng.integers(n // 6, n // 2 + 1, size=2))
        top, left = int(rng.integers(0, n - h + 1)), int(rng.integers(0, n - w + 1))
        shapes.append(Shape(str(rng.choice(["rect", "disc"])), top, left, h, w, _contrasting(rng, bg, 0.25)))
    textures = []
    if rng.random() < 0.6:
        h, w = (int(v) for v in rng.integers(n // 4, n // 2 + 1, size=2))
        top, left = int(rng.integers(0, n - h + 1)), int(rng.integers(0, n - w + 1))
        a = _color(rng)
        textures.append(
            Texture(
                str(rng.choice(["stripes", "checker"])),
                top,
                left,
                h,
                w,
                int(rng.choice([2, 4])),
                a,
                _contrasting(rng, a, 0.3),
                bool(rng.random() < 0.5),
            )
        )
    glyphs = []
    for _ in range(int(rng.integers(1, cfg.max_glyphs + 1))):
        fitting = [word for word in GLYPH_WORDS if text_bitmap(word).shape[1] <= n]
        text = str(rng.choice(fitting))
        w = text_bitmap(text).shape[1]
        top = int(rng.integers(0, n - GLYPH_HEIGHT + 1))
        left = int(rng.integers(0, n - w + 1))
        glyphs.append(Glyph(text, top, left, _contrasting(rng, bg)))
    return SceneSpec(n, n, bg, tuple(shapes), tuple(textures), tuple(glyphs), int(seed))


def element_pixels(img: np.ndarray) -> np.ndarray:
    """Pixels that differ from the most frequent (background) colour."""
    flat = img.reshape(-1, img.shape[2])
    colors, counts = np.unique(flat, axis=0, return_counts=True)
    bg = colors[np.argmax(counts)]
    return np.any(img != bg, axis=2)


# -- region selection ---------------------------------------------------------------


def candidate_rects(height: int, width: int, cfg: DataConfig) -> list[Rect]:
    """All grid-aligned rectangles whose area fraction lies in [min_frac, max_frac]."""
    a = cfg.align
    lo, hi = cfg.min_frac * height * width, cfg.max_frac * height * width
    out = []
    for h in range(a, height + 1, a):
        for w in range(a, width + 1, a):
            if not lo - 1e-9 <= h * w <= hi + 1e-9:
                continue
            for top in range(0, height - h + 1, a):
                for left in range(0, width - w + 1, a):
                    out.append(Rect(top, left, h, w))
    return out


def select_region(
    truth: np.ndarray, seed: int, cfg: DataConfig, focus: np.ndarray | None = None, attempt: int = 0
) -> RegionMask:
    """Pick a grid-aligned rectangle that overlaps at least one scene element pixel.

    ``focus`` restricts which pixels count as scene elements; by default every
    pixel that differs from the background colour does.
    """
    height, width = truth.shape[:2]
    if height < 16 or width < 16:
        raise SelectionError(f"image {height}x{width} is smaller than 16x16")
    if focus is None:
        focus = element_pixels(truth)
    cands = [r for r in candidate_rects(height, width, cfg) if focus[r.slices()].any()]
    if not cands:
        raise SelectionError("no rectangle satisfies the area limits and overlaps a scene element")
    rng = stage_rng(seed, _REGION, attempt)
    return RegionMask.from_rect(height, width, cands[int(rng.integers(len(cands)))])


# -- degradations ----------------------------------------------------------------------


@dataclass(frozen=True)
class DegradeOp:
    name: str
    params: dict | None = None


def sample_params(name: str, rng: np.random.Generator) -> dict:
    if name == "blur":
        return {"sigma": round(float(rng.uniform(0.8, 1.6)), 4)}
    if name == "downsample_upsample":
        return {"k": int(rng.choice([2, 4]))}
    if name == "quantize":
        return {"levels": int(rng.choice([2, 3, 4]))}
    if name == "glyph_erode":
        return {"strength": round(float(rng.uniform(0.5, 0.9)), 4), "seed": int(rng.integers(2**31))}
    if name == "brightness":
        return {"delta": round(float(rng.choice([-1, 1]) * rng.uniform(0.15, 0.3)), 4)}
    if name == "hue_swap":
        perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        return {"perm": list(perms[int(rng.integers(len(perms)))])}
    if name == "glyph_replace":
        return {
            "text": str(rng.choice(GLYPH_WORDS)),
            "color": [float(v) for v in np.round(rng.uniform(0.0, 1.0, size=3), 3)],
            "seed": int(rng.integers(2**31)),
        }
    raise SpecError(f"unknown degradation op {name!r}")


def _stroke_pixels(region: np.ndarray, threshold: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    median = np.median(region.reshape(-1, region.shape[2]), axis=0)
    return np.abs(region - median).max(axis=2) > threshold, median


def apply_op(img: np.ndarray, box: Rect, name: str, params: dict) -> np.ndarray:
    """Apply one degradation to the ``box`` area of ``img``; returns a full-size image.

    Pixels outside ``box`` may also be altered in the returned array (blur);
    the caller is responsible for keeping only the region.
    """
    out = img.copy()
    sl = box.slices()
    if name == "blur":
        sigma = float(params["sigma"])
        if sigma < 0:
            raise DegradationError(f"blur sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return out
        return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    if name == "downsample_upsample":
        k = int(params["k"])
        if k < 1:
            raise DegradationError(f"downsample factor must be >= 1, got {k}")
        region = out[sl]
        h, w = region.shape[:2]
        for top in range(0, h, k):
            for left in range(0, w, k):
                block = region[top : top + k, left : left + k]
                block[...] = block.mean(axis=(0, 1))
        return out
    if name == "quantize":
        levels = int(params["levels"])
        if levels < 2:
            raise DegradationError(f"quantize needs >= 2 levels, got {levels}")
        out[sl] = np.rint(out[sl] * (levels - 1)) / (levels - 1)
        return out
    if name == "brightness":
        out[sl] = np.clip(out[sl] + float(params["delta"]), 0.0, 1.0)
        return out
    if name == "hue_swap":
        perm = list(params["perm"])
        if sorted(perm) != [0, 1, 2]:
            raise DegradationError(f"invalid channel permutation {perm}")
        if img.shape[2] == 3:
            out[sl] = out[sl][..., perm]
        return out
    if name == "glyph_erode":
        strength = float(params["strength"])
        if not 0.0 < strength <= 1.0:
            raise DegradationError(f"erode strength must be in (0, 1], got {strength}")
        region = out[sl]
        strokes, median = _stroke_pixels(region)
        drop = strokes & (np.random.default_rng(int(params["seed"])).random(strokes.shape) < strength)
        region[drop] = median
        return out
    if name == "glyph_replace":
        region = out[sl]
        strokes, median = _stroke_pixels(region)
        region[strokes] = median
        bmp = text_bitmap(str(params["text"]))[: box.height, : box.width]
        rng = np.random.default_rng(int(params["seed"]))
        top = int(rng.integers(0, box.height - bmp.shape[0] + 1))
        left = int(rng.integers(0, box.width - bmp.shape[1] + 1))
        window = region[top : top + bmp.shape[0], left : left + bmp.shape[1]]
        window[bmp] = np.asarray(params["color"], dtype=np.float64)[: img.shape[2]]
        return out
    raise SpecError(f"unknown degradation op {name!r}")


def _resolve(op) -> DegradeOp:
    if isinstance(op, DegradeOp):
        return op
    if isinstance(op, str):
        return DegradeOp(op)
    name, params = op
    return DegradeOp(name, params)


def degrade(truth: np.ndarray, mask: RegionMask, ops, seed: int, attempt: int = 0) -> tuple[np.ndarray, list[DegradeOp]]:
    """Degrade ``truth`` inside ``mask`` only.

    Ops without explicit parameters are re-sampled up to ``MAX_RETRIES`` times
    until at least one region pixel changes at 8-bit precision.  Returns the
    degraded image and the ops with the parameters actually used.
    """
    ops = [_resolve(op) for op in ops]
    if not ops:
        raise DegradationError("no degradation ops given")
    for op in ops:
        if op.name not in DEGRADATION_OPS:
            raise SpecError(f"unknown degradation op {op.name!r}")
    if mask.area == 0:
        raise DegradationError("cannot degrade an empty region")
    box = mask.bbox
    explicit = all(op.params is not None for op in ops)
    rng = stage_rng(seed, _DEGRADE, attempt)
    before = imaging.quantize_8bit(truth)[mask.bits]
    for _ in range(1 if explicit else MAX_RETRIES):
        used = [DegradeOp(op.name, op.params if op.params is not None else sample_params(op.name, rng)) for op in ops]
        out = truth
        for op in used:
            out = imaging.composite_masked(apply_op(out, box, op.name, op.params), out, mask)
        out = np.clip(out, 0.0, 1.0)
        if np.any(imaging.quantize_8bit(out)[mask.bits] != before):
            return out, used
    raise DegradationError(f"ops {[op.name for op in ops]} produced no visible change inside the region")


# -- instructions --------------------------------------------------------------------

_TAG_PHRASES = {
    "blur": "restore the blurred region",
    "downsample_upsample": "sharpen the pixelated region",
    "quantize": "recover the banded colors",
    "glyph_erode": "repair the eroded text",
    "brightness": "fix the lighting of the region",
    "hue_swap": "correct the colors of the region",
    "glyph_replace": "replace the wrong text",
}
_SUFFIX = "using the reference"

VOCABULARY: tuple[str, ...] = tuple(
    sorted(
        {w for phrase in _TAG_PHRASES.values() for w in phrase.split()}
        | set(_SUFFIX.split())
        | {"and", "at", "top", "middle", "bottom", "left", "center", "right", "whole", "image"}
    )
)
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCABULARY)}


def region_description(mask: RegionMask) -> str:
    box = mask.bbox
    if box.height == mask.height and box.width == mask.width:
        return "the whole image"
    cy = (box.top + box.height / 2) / mask.height
    cx = (box.left + box.width / 2) / mask.width
    row = "top" if cy < 1 / 3 else "bottom" if cy > 2 / 3 else "middle"
    col = "left" if cx < 1 / 3 else "right" if cx > 2 / 3 else "center"
    return f"the {row} {col}"


def instruction_template(tags, region_desc: str | None = None) -> list[str]:
    tags = list(tags)
    if not tags:
        raise VocabularyError("instruction needs at least one degradation tag")
    unknown = [t for t in tags if t not in _TAG_PHRASES]
    if unknown:
        raise VocabularyError(f"unknown degradation tags {unknown}")
    words: list[str] = []
    for i, tag in enumerate(tags):
        if i:
            words.append("and")
        words.extend(_TAG_PHRASES[tag].split())
    words.extend(_SUFFIX.split())
    if region_desc:
        words.append("at")
        words.extend(region_desc.split())
    missing = [w for w in words if w not in TOKEN_IDS]
    if missing:
        raise VocabularyError(f"words outside the vocabulary: {missing}")
    return words


def encode_tokens(tokens) -> list[int]:
    try:
        return [TOKEN_IDS[t] for t in tokens]
    except KeyError as exc:
        raise VocabularyError(f"token {exc.args[0]!r} not in vocabulary") from None


# -- quadruples ----------------------------------------------------------------------------


@dataclass(eq=False)
class Quadruple:
    input: np.ndarray
    reference: np.ndarray
    truth: np.ndarray
    mask: RegionMask
    instruction: list[str]
    seed: int
    degradation_tags: list[str]
    jitter: dict = field(default_factory=lambda: {"flip": False, "delta": 0.0})


def apply_jitter(ref: np.ndarray, jitter: dict) -> np.ndarray:
    out = np.clip(ref + float(jitter.get("delta", 0.0)), 0.0, 1.0)
    if jitter.get("flip", False):
        out = out[:, ::-1].copy()
    return out


def sample_jitter(seed: int, cfg: DataConfig) -> dict:
    rng = stage_rng(seed, _JITTER)
    jitter = {"flip": False, "delta": 0.0}
    if rng.random() >= cfg.jitter_p:
        return jitter
    choice = int(rng.integers(3)) if cfg.jitter_flip else 0
    if choice in (0, 2):
        jitter["delta"] = round(float(rng.uniform(-cfg.jitter_max_delta, cfg.jitter_max_delta)), 4)
    if choice in (1, 2):
        jitter["flip"] = True
    return jitter


def sample_ops(seed: int, cfg: DataConfig) -> list[str]:
    probs = cfg.op_probabilities()
    rng = stage_rng(seed, _OPS)
    names = list(probs)
    p = np.array([probs[n] for n in names])
    picks = rng.choice(len(names), size=cfg.ops_per_sample, replace=False, p=p)
    return [names[i] for i in sorted(picks)]


def make_quadruple(spec: SceneSpec, cfg: DataConfig, seed: int) -> Quadruple:
    truth = snap_8bit(render_scene(spec))
    ops = sample_ops(seed, cfg)
    focus = None
    if any(op.startswith("glyph") for op in ops) and spec.glyphs:
        focus = np.zeros(truth.shape[:2], dtype=bool)
        for g in spec.glyphs:
            focus |= glyph_bitmap(spec, g)
    # a region can be immune to an op (e.g. flat colour under down/up-sampling): pick another
    for attempt in range(MAX_RETRIES):
        mask = select_region(truth, seed, cfg, focus, attempt)
        try:
            degraded, _ = degrade(truth, mask, ops, seed, attempt)
            break
        except DegradationError:
            if attempt == MAX_RETRIES - 1:
                raise
    jitter = sample_jitter(seed, cfg)
    reference = snap_8bit(apply_jitter(imaging.crop(truth, mask.bbox), jitter))
    instruction = instruction_template(ops, region_description(mask))
    quad = Quadruple(snap_8bit(degraded), reference, truth, mask, instruction, int(seed), list(ops), jitter)
    check_quadruple(quad)
    return quad


def check_quadruple(q: Quadruple, atol: float = 1e-12) -> None:
    """Raise ``AssertionError`` if any quadruple invariant is violated."""
    outside = ~q.mask.bits
    assert np.array_equal(q.input[outside], q.truth[outside]), "input differs from truth outside the region"
    expected = snap_8bit(apply_jitter(imaging.crop(q.truth, q.mask.bbox), q.jitter))
    assert q.reference.shape == expected.shape, "reference shape does not match region bbox"
    assert np.allclose(q.reference, expected, atol=atol, rtol=0), "reference is not the (jittered) truth crop"
    assert all(t in TOKEN_IDS for t in q.instruction), "instruction token outside vocabulary"


def corpus_seed(base: int, index: int) -> int:
    return int(base) ^ int(index)


def generate(count: int, seed: int, cfg: DataConfig, start: int = 0) -> list[Quadruple]:
    quads = []
    for i in range(start, start + count):
        s = corpus_seed(seed, i)
        quads.append(make_quadruple(random_scene(s, cfg), cfg, s))
    return quads


# -- on-disk corpus ---------------------------------------------------------------------------


def write_corpus(out_dir, count: int, seed: int, cfg: DataConfig) -> Path:
    """Write PNGs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(count):
            s = corpus_seed(seed, i)
            q = make_quadruple(random_scene(s, cfg), cfg, s)
            rid = f"{i:06d}"
            paths = {k: f"images/{rid}_{k}.png" for k in ("input", "reference", "truth", "mask")}
            imaging.save_png(out / paths["input"], q.input)
            imaging.save_png(out / paths["reference"], q.reference)
            imaging.save_png(out / paths["truth"], q.truth)
            imaging.save_mask(out / paths["mask"], q.mask)
            record = {
                "id": rid,
                "input_path": paths["input"],
                "reference_path": paths["reference"],
                "truth_path": paths["truth"],
                "mask_path": paths["mask"],
                "instruction_tokens": q.instruction,
                "degradation_tags": q.degradation_tags,
                "seed": q.seed,
                "reference_jitter": q.jitter,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / "data_config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, sort_keys=True, indent=2)
    return manifest


MANIFEST_FIELDS = ("id", "input_path", "reference_path", "truth_path", "mask_path", "instruction_tokens", "degradation_tags", "seed")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: manifest record missing fields {missing}")
            records.append(rec)
    return records


def load_quadruple(record: dict, root) -> Quadruple:
    root = Path(root)
    if root.is_file():
        root = root.parent
    return Quadruple(
        input=imaging.load_png(root / record["input_path"]),
        reference=imaging.load_png(root / record["reference_path"]),
        truth=imaging.load_png(root / record["truth_path"]),
        mask=imaging.load_mask(root / record["mask_path"]),
        instruction=list(record["instruction_tokens"]),
        seed=int(record["seed"]),
        degradation_tags=list(record["degradation_tags"]),
        jitter=dict(record.get("reference_jitter", {"flip": False, "delta": 0.0})),
    )


def load_corpus(manifest) -> list[Quadruple]:
    manifest = Path(manifest)
    root = manifest if manifest.is_dir() else manifest.parent
    return [load_quadruple(rec, root) for rec in read_manifest(manifest)]
