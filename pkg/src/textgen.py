"""
Ground-truth text line synthesis.

Renders HR text-line images (height 128) together with per-character codebook
indexes, pixel boxes and binary 128x128 structure images. Fonts are either real
outline font files (PIL) or procedural stroke fonts, so nothing here needs
assets on disk.
"""

import hashlib
import logging
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from pydantic import BaseModel, model_validator

from src.config import STRUCTURE_SIZE, RenderConfig
from src.errors import CharsetError, GlyphMissingError, TextSamplingError

logger = logging.getLogger(__name__)

SUPERSAMPLE = 4
COVERAGE_THRESHOLD = 0.5
DEFAULT_PUNCTUATION = ".,-:;!"
FONT_SUFFIXES = (".ttf", ".otf", ".ttc")


class Charset:
    """Ordered character table; the codebook index of a character is its position."""

    def __init__(self, chars: Sequence[str]):
        chars = list(chars)
        for ch in chars:
            if len(ch) != 1:
                raise CharsetError(f"Charset entries must be single characters, got {ch!r}")
        if len(set(chars)) != len(chars):
            dupes = sorted({c for c in chars if chars.count(c) > 1})
            raise CharsetError(f"Charset contains duplicates: {dupes}")
        if len(chars) < 2:
            raise CharsetError("Charset needs at least 2 characters")
        self.chars = chars
        self._index = {ch: i for i, ch in enumerate(chars)}

    @classmethod
    def default(cls) -> "Charset":
        return cls(list(string.digits) + list(string.ascii_letters) + list(DEFAULT_PUNCTUATION))

    @classmethod
    def from_file(cls, path: str) -> "Charset":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        return cls([line for line in lines if line != ""])

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.chars) + "\n")

    def subset(self, n: int) -> "Charset":
        return Charset(self.chars[:n])

    @property
    def M(self) -> int:
        return len(self.chars)

    @property
    def blank_index(self) -> int:
        return len(self.chars)

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 1

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.chars).encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def index(self, ch: str) -> int:
        if ch not in self._index:
            raise CharsetError(f"Character {ch!r} is not in the charset")
        return self._index[ch]

    def encode(self, text: str) -> List[int]:
        """Map a string to indexes, dropping characters outside the charset."""
        return [self._index[ch] for ch in text if ch in self._index]

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.chars[i] for i in indices)


class FontSource(BaseModel):
    font_id: int
    kind: Literal["outline", "procedural"]
    path: Optional[str] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_origin(self) -> "FontSource":
        if self.kind == "outline" and not self.path:
            raise ValueError("outline fonts need a path")
        if self.kind == "procedural" and self.seed is None:
            raise ValueError("procedural fonts need a seed")
        return self


class RenderStyle(BaseModel):
    font_size: int
    text_color: Tuple[float, float, float]
    bg_color: Tuple[float, float, float]
    rotation_deg: float = 0.0
    shear: float = 0.0
    spacing: int = 4
    x_margin: int = 8
    y_offset: int = 0
    background: bool = False


class StructureParams(BaseModel):
    font_size: int
    rotation_deg: float = 0.0
    shear: float = 0.0
    top: Optional[int] = None


@dataclass
class TextSample:
    hr_image: np.ndarray
    text: List[int]
    boxes: List[Tuple[int, int, int, int]]
    structure_images: np.ndarray
    font_id: int
    render_params: Dict = field(default_factory=dict)
    sample_id: Optional[int] = None

    @property
    def height(self) -> int:
        return self.hr_image.shape[0]

    @property
    def width(self) -> int:
        return self.hr_image.shape[1]


def sample_rng(global_seed: int, sample_id: int) -> np.random.Generator:
    """Independent per-sample generator derived from (global_seed, sample_id)."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), int(sample_id)]))


# ---------------------------------------------------------------------------
# Fonts
# ---------------------------------------------------------------------------


def _downsample(canvas: np.ndarray, factor: int) -> np.ndarray:
    h, w = canvas.shape
    h, w = h - h % factor, w - w % factor
    blocks = canvas[:h, :w].reshape(h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3))


def _tight(coverage: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    rows = np.where(coverage.max(axis=1) > floor)[0]
    cols = np.where(coverage.max(axis=0) > floor)[0]
    if rows.size == 0 or cols.size == 0:
        return np.zeros((0, 0), dtype=np.float32)
    return coverage[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].astype(np.float32)


class GlyphFont:
    """A font bound to a charset that rasterizes glyph coverage maps."""

    def __init__(self, source: FontSource, charset: Charset):
        self.source = source
        self.charset = charset
        self._cache: Dict[Tuple[str, int], np.ndarray] = {}

    @property
    def font_id(self) -> int:
        return self.source.font_id

    def coverage(self, char: str, size_px: int) -> np.ndarray:
        key = (char, int(size_px))
        if key not in self._cache:
            self._cache[key] = _tight(self._rasterize(char, int(size_px)))
        return self._cache[key]

    def _rasterize(self, char: str, size_px: int) -> np.ndarray:
        raise NotImplementedError


class OutlineFont(GlyphFont):
    def __init__(self, source: FontSource, charset: Charset):
        super().__init__(source, charset)
        self._fonts: Dict[int, ImageFont.FreeTypeFont] = {}

    def _font(self, size: int) -> ImageFont.FreeTypeFont:
        if size not in self._fonts:
            self._fonts[size] = ImageFont.truetype(self.source.path, size)
        return self._fonts[size]

    def _rasterize(self, char: str, size_px: int) -> np.ndarray:
        font = self._font(size_px * SUPERSAMPLE)
        if is_notdef(font, char):
            raise GlyphMissingError(char, self.font_id)
        return _downsample(render_glyph(font, char), SUPERSAMPLE)


# Private-use code point no text font maps; it always renders as .notdef
UNMAPPED_CHAR = "\U0010fffd"


def render_glyph(font: ImageFont.FreeTypeFont, char: str, pad: int = 2 * SUPERSAMPLE) -> np.ndarray:
    left, top, right, bottom = font.getbbox(char)
    w = max(right - left, 1) + 2 * pad
    h = max(bottom - top, 1) + 2 * pad
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).text((pad - left, pad - top), char, fill=255, font=font)
    return np.asarray(canvas, dtype=np.float32) / 255.0


def is_notdef(font: ImageFont.FreeTypeFont, char: str) -> bool:
    """True when `char` is not in the font and would render as its .notdef (tofu) glyph."""
    if char.isspace():
        return False
    return np.array_equal(render_glyph(font, char), render_glyph(font, UNMAPPED_CHAR))


# 3 columns x 5 rows of anchor points in the em box
_ANCHORS = [(x, y) for y in (0.0, 0.25, 0.5, 0.75, 1.0) for x in (0.0, 0.5, 1.0)]
_SEGMENTS = [
    (a, b)
    for a in range(len(_ANCHORS))
    for b in range(a + 1, len(_ANCHORS))
    if abs(_ANCHORS[a][0] - _ANCHORS[b][0]) <= 0.5 and abs(_ANCHORS[a][1] - _ANCHORS[b][1]) <= 0.5
]


def procedural_skeletons(chars: Tuple[str, ...]) -> Dict[str, Tuple[Tuple[int, int], ...]]:
    """Font-independent stroke skeleton per character, unique within `chars`."""
    seen = set()
    table = {}
    for ch in chars:
        salt = 0
        while True:
            rng = np.random.default_rng([ord(ch), salt])
            n = int(rng.integers(3, 7))
            picks = rng.choice(len(_SEGMENTS), size=n, replace=False)
            skeleton = tuple(sorted(_SEGMENTS[i] for i in picks))
            if skeleton not in seen:
                break
            salt += 1
        seen.add(skeleton)
        table[ch] = skeleton
    return table


_SKELETON_CACHE: Dict[Tuple[str, ...], Dict[str, Tuple[Tuple[int, int], ...]]] = {}


class ProceduralFont(GlyphFont):
    """Seeded stroke font: shared skeletons, per-font weight, slant, width and caps."""

    def __init__(self, source: FontSource, charset: Charset):
        super().__init__(source, charset)
        key = tuple(charset.chars)
        if key not in _SKELETON_CACHE:
            _SKELETON_CACHE[key] = procedural_skeletons(key)
        self.skeletons = _SKELETON_CACHE[key]
        rng = np.random.default_rng(source.seed)
        self.stroke = float(rng.uniform(0.08, 0.16))
        self.slant = float(rng.uniform(-0.2, 0.2))
        self.aspect = float(rng.uniform(0.55, 0.85))
        self.round_caps = bool(rng.random() < 0.5)
        self.wobble = float(rng.uniform(0.0, 0.04))

    def _anchor(self, ch: str, idx: int) -> Tuple[float, float]:
        x, y = _ANCHORS[idx]
        rng = np.random.default_rng([self.source.seed, ord(ch), idx])
        dx, dy = rng.uniform(-self.wobble, self.wobble, size=2)
        return x + dx, y + dy

    def _rasterize(self, char: str, size_px: int) -> np.ndarray:
        if char not in self.skeletons:
            raise GlyphMissingError(char, self.font_id)
        em = size_px * SUPERSAMPLE
        width = max(int(round(self.stroke * em)), SUPERSAMPLE)
        pad = width + SUPERSAMPLE * 2 + int(abs(self.slant) * em)
        w_box = em * self.aspect
        canvas = Image.new("L", (int(w_box + 2 * pad), int(em + 2 * pad)), 0)
        draw = ImageDraw.Draw(canvas)

        def to_px(pt: Tuple[float, float]) -> Tuple[float, float]:
            x, y = pt
            return pad + x * w_box + self.slant * (1.0 - y) * em, pad + y * em

        for a, b in self.skeletons[char]:
            p0, p1 = to_px(self._anchor(char, a)), to_px(self._anchor(char, b))
            draw.line([p0, p1], fill=255, width=width)
            r = width / 2.0
            for px, py in (p0, p1):
                if self.round_caps:
                    draw.ellipse([px - r, py - r, px + r, py + r], fill=255)
                else:
                    draw.rectangle([px - r, py - r, px + r, py + r], fill=255)
        return _downsample(np.asarray(canvas, dtype=np.float32) / 255.0, SUPERSAMPLE)


def load_font(source: FontSource, charset: Charset) -> GlyphFont:
    if source.kind == "outline":
        return OutlineFont(source, charset)
    return ProceduralFont(source, charset)


def validate_font(font: GlyphFont, size_px: int = 48) -> None:
    """Every charset member must rasterize to a non-empty glyph."""
    for ch in font.charset.chars:
        cov = font.coverage(ch, size_px)
        if cov.size == 0 or not (cov > COVERAGE_THRESHOLD).any():
            raise GlyphMissingError(ch, font.font_id)


def discover_font_sources(n_fonts: int, font_dir: Optional[str] = None) -> List[FontSource]:
    """Outline fonts found in `font_dir` first, topped up with procedural fonts."""
    sources: List[FontSource] = []
    if font_dir and Path(font_dir).is_dir():
        files = sorted(p for p in Path(font_dir).iterdir() if p.suffix.lower() in FONT_SUFFIXES)
        for p in files[:n_fonts]:
            sources.append(FontSource(font_id=len(sources), kind="outline", path=str(p)))
    while len(sources) < n_fonts:
        sources.append(FontSource(font_id=len(sources), kind="procedural", seed=1000 + len(sources)))
    return sources


def load_fonts(sources: Sequence[FontSource], charset: Charset) -> List[GlyphFont]:
    """Outline fonts missing any charset glyph are replaced by a procedural font with the same id."""
    fonts = []
    for source in sources:
        font = load_font(source, charset)
        if source.kind == "outline":
            try:
                validate_font(font)
            except GlyphMissingError as e:
                logger.warning(f"Replacing font {source.path} with a procedural font: {e}")
                font = load_font(FontSource(font_id=source.font_id, kind="procedural", seed=1000 + source.font_id), charset)
        fonts.append(font)
    if not fonts:
        raise GlyphMissingError("<any>")
    return fonts


# ---------------------------------------------------------------------------
# Text sampling and rendering
# ---------------------------------------------------------------------------


def read_corpus(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def sample_text(
    corpus: Optional[Sequence[str]],
    rng: np.random.Generator,
    charset: Charset,
    n_max: int = 16,
    random_mode: bool = False,
    retry_limit: int = 20,
) -> List[int]:
    """Draw a sequence of 1..n_max codebook indexes from a line corpus or at random."""
    if random_mode:
        k = int(rng.integers(1, n_max + 1))
        return [int(i) for i in rng.integers(0, charset.M, size=k)]
    if not corpus:
        raise TextSamplingError("Corpus is empty and random mode is disabled")
    for _ in range(retry_limit):
        line = corpus[int(rng.integers(0, len(corpus)))]
        indices = charset.encode(line)
        if not indices:
            continue
        if len(indices) > n_max:
            start = int(rng.integers(0, len(indices) - n_max + 1))
            indices = indices[start : start + n_max]
        return indices
    raise TextSamplingError(f"No usable corpus line after {retry_limit} attempts")


def _luminance(rgb: Sequence[float]) -> float:
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def sample_render_style(rng: np.random.Generator, config: RenderConfig) -> RenderStyle:
    lo, hi = config.font_size_range
    text_color = tuple(float(v) for v in rng.uniform(0, 1, size=3))
    bg_color = tuple(float(v) for v in rng.uniform(0, 1, size=3))
    for _ in range(100):
        if abs(_luminance(text_color) - _luminance(bg_color)) >= config.min_contrast:
            break
        bg_color = tuple(float(v) for v in rng.uniform(0, 1, size=3))
    else:
        bg_color = tuple(1.0 - v for v in text_color)
    use_background = bool(config.background_dir) and bool(rng.random() < config.background_prob)
    return RenderStyle(
        font_size=int(rng.integers(lo, hi + 1)),
        text_color=text_color,
        bg_color=bg_color,
        rotation_deg=float(rng.uniform(-config.rotation_deg, config.rotation_deg)),
        shear=float(rng.uniform(-config.shear, config.shear)),
        spacing=int(rng.integers(config.spacing_range[0], config.spacing_range[1] + 1)),
        x_margin=int(rng.integers(config.x_margin_range[0], config.x_margin_range[1] + 1)),
        y_offset=int(rng.integers(-config.y_jitter, config.y_jitter + 1)),
        background=use_background,
    )


def _affine(coverage: np.ndarray, rotation_deg: float, shear: float) -> np.ndarray:
    if coverage.size == 0 or (rotation_deg == 0.0 and shear == 0.0):
        return coverage
    theta = math.radians(rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    forward = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    h, w = coverage.shape
    pad = 2
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=np.float64).T
    mapped = forward @ corners
    out_w = int(math.ceil(mapped[0].max() - mapped[0].min())) + 2 * pad
    out_h = int(math.ceil(mapped[1].max() - mapped[1].min())) + 2 * pad
    inverse = np.linalg.inv(forward)
    offset = np.array([mapped[0].min() - pad, mapped[1].min() - pad])
    # PIL maps output (x, y) -> input (a x + b y + c, d x + e y + f)
    shift = inverse @ offset
    data = (inverse[0, 0], inverse[0, 1], shift[0], inverse[1, 0], inverse[1, 1], shift[1])
    img = Image.fromarray(coverage.astype(np.float32), mode="F")
    out = img.transform((out_w, out_h), Image.AFFINE, data, resample=Image.BILINEAR)
    return _tight(np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0))


def _fit(coverage: np.ndarray, limit: int) -> np.ndarray:
    h, w = coverage.shape
    if max(h, w) <= limit:
        return coverage
    ratio = limit / max(h, w)
    size = (max(int(w * ratio), 1), max(int(h * ratio), 1))
    img = Image.fromarray(coverage, mode="F").resize(size, resample=Image.BILINEAR)
    return _tight(np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0))


def prepare_glyph(font: GlyphFont, char_index: int, font_size: int, rotation_deg: float = 0.0, shear: float = 0.0) -> np.ndarray:
    """Coverage map of one glyph after affine jitter, fitted to the structure canvas."""
    if not 0 <= char_index < font.charset.M:
        raise CharsetError(f"Character index {char_index} outside charset of size {font.charset.M}")
    char = font.charset.chars[char_index]
    cov = _affine(font.coverage(char, font_size), rotation_deg, shear)
    cov = _fit(cov, STRUCTURE_SIZE - 4)
    if cov.size == 0 or not (cov > COVERAGE_THRESHOLD).any():
        raise GlyphMissingError(char, font.font_id)
    return cov


def _structure_canvas(binary: np.ndarray, top: Optional[int]) -> np.ndarray:
    h, w = binary.shape
    canvas = np.zeros((STRUCTURE_SIZE, STRUCTURE_SIZE), dtype=np.uint8)
    if top is None:
        top = (STRUCTURE_SIZE - h) // 2
    top = int(np.clip(top, 0, STRUCTURE_SIZE - h))
    left = (STRUCTURE_SIZE - w) // 2
    canvas[top : top + h, left : left + w] = binary
    return canvas


def render_structure_gt(char_index: int, font: GlyphFont, size_params: StructureParams) -> np.ndarray:
    """Binary 128x128 structure mask of one character (coverage > 0.5)."""
    cov = prepare_glyph(font, char_index, size_params.font_size, size_params.rotation_deg, size_params.shear)
    binary = (cov > COVERAGE_THRESHOLD).astype(np.uint8)
    return _structure_canvas(binary, size_params.top)


def sample_structure_params(rng: np.random.Generator, config: RenderConfig) -> StructureParams:
    lo, hi = config.font_size_range
    return StructureParams(
        font_size=int(rng.integers(lo, hi + 1)),
        rotation_deg=float(rng.uniform(-config.rotation_deg, config.rotation_deg)),
        shear=float(rng.uniform(-config.shear, config.shear)),
    )


def render_structure_batch(
    codes: Sequence[int], fonts: Sequence[GlyphFont], rng: np.random.Generator, config: Optional[RenderConfig] = None
) -> np.ndarray:
    """n x 128 x 128 structure masks, each from a random font, size and jitter, placed as in a text line."""
    config = config or RenderConfig()
    masks = []
    for code in codes:
        font = fonts[int(rng.integers(0, len(fonts)))]
        params = sample_structure_params(rng, config)
        cov = prepare_glyph(font, int(code), params.font_size, params.rotation_deg, params.shear)
        top = (STRUCTURE_SIZE - cov.shape[0]) // 2 + int(rng.integers(-config.y_jitter, config.y_jitter + 1))
        masks.append(_structure_canvas((cov > COVERAGE_THRESHOLD).astype(np.uint8), top))
    return np.stack(masks)


def _background_crop(directory: str, height: int, width: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        return None
    img = Image.open(files[int(rng.integers(0, len(files)))]).convert("RGB")
    factor = int(rng.integers(4, 17))
    ch, cw = max(math.ceil(height / factor), 1), max(math.ceil(width / factor), 1)
    if img.width < cw or img.height < ch:
        img = img.resize((max(img.width, cw), max(img.height, ch)), resample=Image.BICUBIC)
    x0 = int(rng.integers(0, img.width - cw + 1))
    y0 = int(rng.integers(0, img.height - ch + 1))
    crop = img.crop((x0, y0, x0 + cw, y0 + ch)).resize((width, height), resample=Image.BICUBIC)
    return np.asarray(crop, dtype=np.float32) / 255.0


def render_text_image(
    text: Sequence[int],
    font: GlyphFont,
    style: RenderStyle,
    rng: Optional[np.random.Generator] = None,
    config: Optional[RenderConfig] = None,
) -> TextSample:
    """Render a text line left-to-right; widths are zero-padded to `width_multiple`."""
    config = config or RenderConfig()
    if not text:
        raise TextSamplingError("Cannot render an empty text")
    height = config.hr_height
    glyphs = [prepare_glyph(font, idx, style.font_size, style.rotation_deg, style.shear) for idx in text]

    placements = []
    x = style.x_margin
    for g in glyphs:
        h, w = g.shape
        top = int(np.clip((height - h) // 2 + style.y_offset, 0, height - h))
        placements.append((top, x))
        x += w + max(style.spacing, 1)
    content_width = x - max(style.spacing, 1) + style.x_margin
    width = int(math.ceil(content_width / config.width_multiple) * config.width_multiple)

    alpha = np.zeros((height, width), dtype=np.float32)
    boxes: List[Tuple[int, int, int, int]] = []
    structures = []
    for g, (top, left) in zip(glyphs, placements):
        h, w = g.shape
        region = alpha[top : top + h, left : left + w]
        np.maximum(region, g, out=region)
        binary = (g > COVERAGE_THRESHOLD).astype(np.uint8)
        rows = np.where(binary.any(axis=1))[0]
        cols = np.where(binary.any(axis=0))[0]
        boxes.append((left + int(cols[0]), top + int(rows[0]), left + int(cols[-1]) + 1, top + int(rows[-1]) + 1))
        structures.append(_structure_canvas(binary, top))

    image = np.zeros((height, width, 3), dtype=np.float32)
    background = None
    if style.background and config.background_dir:
        background = _background_crop(config.background_dir, height, content_width, rng or np.random.default_rng(0))
    if background is None:
        background = np.broadcast_to(np.asarray(style.bg_color, dtype=np.float32), (height, content_width, 3))
    a = alpha[:, :content_width, None]
    image[:, :content_width] = background * (1.0 - a) + np.asarray(style.text_color, dtype=np.float32) * a
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    return TextSample(
        hr_image=image.astype(np.float32),
        text=[int(i) for i in text],
        boxes=boxes,
        structure_images=np.stack(structures).astype(np.uint8),
        font_id=font.font_id,
        render_params=style.model_dump(),
    )


def synthesize_sample(
    sample_id: int,
    global_seed: int,
    charset: Charset,
    fonts: Sequence[GlyphFont],
    corpus: Optional[Sequence[str]] = None,
    config: Optional[RenderConfig] = None,
) -> TextSample:
    """One sample fully determined by (global_seed, sample_id)."""
    config = config or RenderConfig()
    rng = sample_rng(global_seed, sample_id)
    random_mode = config.random_text or not corpus
    text = sample_text(corpus, rng, charset, config.n_max, random_mode, config.resample_limit)
    font = fonts[int(rng.integers(0, len(fonts)))]
    style = sample_render_style(rng, config)
    sample = render_text_image(text, font, style, rng, config)
    sample.sample_id = sample_id
    return sample
