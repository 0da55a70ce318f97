"""Procedural stained-document pairs: clean page synthesis plus six
parametric degradations (two teas, two inks, seal and watermark overlays).

Every generator is a pure function of its seed and arguments. Liquids and
inks composite multiplicatively (absorption: stained <= clean), overlays
alpha-composite. Pair generation re-rolls the stain seed until the stain
is strong enough to measure (PSNR against the clean page under 40 dB).
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from . import ppm
from .errors import ConfigError, DataError
from .losses import psnr

STAIN_KINDS = ("black_tea", "green_tea", "red_ink", "blue_ink", "seal", "mark")

# Watermark lattice: integer vectors keep tiling exactly periodic.
MARK_LATTICE = ((24, 6), (-6, 24))


class ImagePair:
    """Aligned (stained, clean) pair with its generation provenance."""

    __slots__ = ("stained", "clean", "stain_kind", "severity", "seed")

    def __init__(self, stained, clean, stain_kind, severity, seed):
        if stained.shape != clean.shape:
            raise DataError(f"pair shape mismatch: {stained.shape} vs {clean.shape}")
        if stain_kind not in STAIN_KINDS:
            raise DataError(f"unknown stain kind {stain_kind!r}")
        if not 1 <= severity <= 3:
            raise DataError(f"severity must be 1..3, got {severity}")
        for name, img in (("stained", stained), ("clean", clean)):
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"{name} image leaves [0,1]: [{img.min()}, {img.max()}]")
        self.stained = stained
        self.clean = clean
        self.stain_kind = stain_kind
        self.severity = severity
        self.seed = seed


class StainModel:
    """Color/opacity/edge parameters for one degradation family."""

    __slots__ = ("base_color", "opacity_range", "penetration", "shape_kind", "density")

    def __init__(self, base_color, opacity_range, penetration, shape_kind, density=1.0):
        lo, hi = opacity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"opacity range must sit in (0,1], got {opacity_range}")
        if any(not 0.0 <= c <= 1.0 for c in base_color):
            raise ConfigError(f"base color out of gamut: {base_color}")
        self.base_color = np.asarray(base_color, dtype=np.float64)
        self.opacity_range = (lo, hi)
        self.penetration = penetration
        self.shape_kind = shape_kind
        self.density = density


STAIN_MODELS = {
    "black_tea": StainModel((0.42, 0.26, 0.14), (0.30, 0.65), 0.20, "blob"),
    "green_tea": StainModel((0.56, 0.47, 0.18), (0.25, 0.55), 0.25, "blob"),
    "red_ink": StainModel((0.85, 0.08, 0.10), (0.55, 0.95), 0.08, "stroke"),
    "blue_ink": StainModel((0.10, 0.15, 0.80), (0.55, 0.95), 0.08, "stroke"),
    "seal": StainModel((0.76, 0.10, 0.10), (0.50, 0.90), 0.05, "ring"),
    "mark": StainModel((0.35, 0.38, 0.55), (0.25, 0.45), 0.05, "glyph"),
}


# ---------------------------------------------------------------------------
# clean page synthesis
# ---------------------------------------------------------------------------

def gen_document(seed: int, h: int, w: int) -> np.ndarray:
    """Near-white page with pseudo-text rows and occasional line boxes."""
    if h < 64 or w < 64:
        raise DataError(f"document size {h}x{w} too small (need >= 64)")
    rng = np.random.default_rng([0xD0C, seed, h, w])

    tone = 0.92 + 0.03 * rng.random()
    page = np.full((h, w), tone)
    page += _value_noise(rng, h, w, 6) * 0.02
    page += rng.standard_normal((h, w)) * 0.006

    line_h = max(5, h // 9)
    glyph_h = max(2, int(line_h * 0.40))
    margin = max(2, w // 16)
    y = int(line_h * (0.6 + 0.8 * rng.random()))
    while y + glyph_h < h - margin:
        if rng.random() < 0.12:
            y += int(line_h * 1.5)  # paragraph gap
            continue
        ink = 0.22 + 0.08 * rng.random()
        x = margin + int(rng.random() * margin)
        right = w - margin - int(rng.random() * 0.15 * w)
        while x < right:
            word = int(rng.integers(2, 7)) * max(2, glyph_h)
            word = min(word, right - x)
            if word >= 2:
                page[y:y + glyph_h, x:x + word] = ink - 0.10 * rng.random()
            x += word + glyph_h + int(rng.integers(0, 4))
        y += line_h

    if rng.random() < 0.4:
        bh = int(h * (0.1 + 0.1 * rng.random()))
        bw = int(w * (0.2 + 0.3 * rng.random()))
        by = int(rng.integers(margin, max(margin + 1, h - bh - margin)))
        bx = int(rng.integers(margin, max(margin + 1, w - bw - margin)))
        t = max(1, h // 128)
        dark = 0.15
        page[by:by + t, bx:bx + bw] = dark
        page[by + bh - t:by + bh, bx:bx + bw] = dark
        page[by:by + bh, bx:bx + t] = dark
        page[by:by + bh, bx + bw - t:bx + bw] = dark

    page = np.clip(page, 0.0, 1.0)
    # Slightly warm paper: tint channels around the gray page.
    img = np.stack([np.clip(page * 1.01, 0, 1), page, np.clip(page * 0.985, 0, 1)])
    return img


def _value_noise(rng, h, w, cells):
    """Bilinear interpolation of a seeded lattice, scaled to [0,1]."""
    lattice = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    field = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def _multiplicative(clean, mask, color, opacity):
    """stained = clean * (1 - opacity*mask*(1-color)); never exceeds clean."""
    factor = 1.0 - opacity * mask[None, :, :] * (1.0 - color[:, None, None])
    return np.clip(clean * factor, 0.0, 1.0)


def _alpha_composite(clean, mask, color, alpha):
    a = np.clip(alpha * mask, 0.0, 1.0)[None, :, :]
    return np.clip(clean * (1.0 - a) + color[:, None, None] * a, 0.0, 1.0)


def _pick_opacity(rng, model, severity):
    lo, hi = model.opacity_range
    frac = (severity - 1) / 2.0
    return lo + (hi - lo) * (0.55 * frac + 0.45 * rng.random())


def apply_liquid_stain(clean, model: StainModel, severity: int, seed: int) -> np.ndarray:
    """Blob stain from a thresholded noise field with a drying-edge rim.

    Severity moves the threshold on a field fixed by the seed, so higher
    severity strictly grows the covered pixel set, and scales opacity.
    """
    if severity not in (1, 2, 3):
        raise DataError(f"severity must be 1..3, got {severity}")
    h, w = clean.shape[1], clean.shape[2]
    rng = np.random.default_rng([0x7EA, seed])
    if model.density <= 0:
        return clean.copy()
    field = 0.7 * _value_noise(rng, h, w, 4) + 0.3 * _value_noise(rng, h, w, 9)
    coverage = {1: 0.08, 2: 0.16, 3: 0.28}[severity] * min(model.density, 1.0)
    tau = np.quantile(field, 1.0 - coverage)
    inside = field >= tau
    core = np.clip((field - tau) / max(model.penetration, 1e-6), 0.0, 1.0)
    rim_w = 0.35 * model.penetration
    rim = np.exp(-((field - tau) / max(rim_w, 1e-6)) ** 2) * inside
    mask = np.clip(core * (1.0 - 0.45 * rim) + 0.75 * rim, 0.0, 1.0) * inside
    opacity = _pick_opacity(rng, model, severity)
    return _multiplicative(clean, mask, model.base_color, opacity)


def _segment_distance(yy, xx, p, q):
    # Distance from every pixel to segment pq.
    py, px = p
    qy, qx = q
    dy, dx = qy - py, qx - px
    norm2 = dy * dy + dx * dx
    if norm2 == 0:
        return np.hypot(yy - py, xx - px)
    t = np.clip(((yy - py) * dy + (xx - px) * dx) / norm2, 0.0, 1.0)
    return np.hypot(yy - (py + t * dy), xx - (px + t * dx))


def apply_ink_stain(clean, model: StainModel, severity: int, seed: int) -> np.ndarray:
    """Polyline strokes plus splatter dots; sharper edges than liquids."""
    if severity not in (1, 2, 3):
        raise DataError(f"severity must be 1..3, got {severity}")
    h, w = clean.shape[1], clean.shape[2]
    rng = np.random.default_rng([0x12C, seed])
    n_strokes = int(round(severity * model.density))
    if n_strokes <= 0:
        return clean.copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w))
    width = max(1.0, min(h, w) / 64.0) * (0.8 + 0.3 * severity)
    for _ in range(n_strokes):
        pt = np.array([rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w])
        for _seg in range(int(rng.integers(2, 6))):
            step = rng.standard_normal(2) * min(h, w) * 0.18
            nxt = np.clip(pt + step, 0, [h - 1, w - 1])
            d = _segment_distance(yy, xx, pt, nxt)
            mask = np.maximum(mask, np.clip(1.0 - d / width, 0.0, 1.0) ** 0.6)
            pt = nxt
        for _dot in range(int(rng.integers(2, 5 + 2 * severity))):
            cy = np.clip(pt[0] + rng.standard_normal() * h * 0.08, 0, h - 1)
            cx = np.clip(pt[1] + rng.standard_normal() * w * 0.08, 0, w - 1)
            r = width * rng.uniform(0.4, 1.4)
            d = np.hypot(yy - cy, xx - cx)
            mask = np.maximum(mask, np.clip(1.0 - d / max(r, 0.5), 0.0, 1.0) ** 0.5)
    opacity = _pick_opacity(rng, model, severity)
    return _multiplicative(clean, mask, model.base_color, opacity)


def _glyph_stamp(rng, gh, gw):
    bits = rng.random((gh, gw)) < 0.45
    bits[:, gw // 2] |= rng.random(gh) < 0.5  # vertical bar keeps stamps connected
    return np.kron(bits, np.ones((2, 2)))


def apply_overlay(clean, kind: str, seed: int) -> np.ndarray:
    """Seal (red annulus + inner strokes) or tiled watermark glyph grid.

    Overlays carry no severity axis; dataset records them at severity 2.
    """
    if kind not in ("seal", "mark"):
        raise DataError(f"overlay kind must be seal or mark, got {kind!r}")
    h, w = clean.shape[1], clean.shape[2]
    rng = np.random.default_rng([0x0EA1, seed])
    model = STAIN_MODELS[kind]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    if kind == "seal":
        cy = rng.uniform(0.3, 0.7) * h
        cx = rng.uniform(0.3, 0.7) * w
        r_out = min(h, w) * rng.uniform(0.16, 0.24)
        thick = r_out * 0.18
        d = np.hypot(yy - cy, xx - cx)
        ring = np.clip(1.0 - np.abs(d - r_out) / thick, 0.0, 1.0)
        inner = np.clip(1.0 - np.abs(d - r_out * 0.45) / (thick * 0.8), 0.0, 1.0)
        mask = np.maximum(ring, inner)
        for _ in range(int(rng.integers(2, 5))):  # radial bars
            ang = rng.uniform(0, np.pi)
            p = (cy - np.cos(ang) * r_out * 0.8, cx - np.sin(ang) * r_out * 0.8)
            q = (cy + np.cos(ang) * r_out * 0.8, cx + np.sin(ang) * r_out * 0.8)
            dseg = _segment_distance(yy, xx, p, q)
            bar = np.clip(1.0 - dseg / (thick * 0.5), 0.0, 1.0) * (d < r_out * 0.85)
            mask = np.maximum(mask, bar)
        alpha = rng.uniform(*model.opacity_range)
        return _alpha_composite(clean, mask, model.base_color, alpha)

    stamp = _glyph_stamp(rng, 5, 6)
    sh, sw = stamp.shape
    (v1y, v1x), (v2y, v2x) = MARK_LATTICE
    oy, ox = int(rng.integers(0, 16)), int(rng.integers(0, 16))
    mask = np.zeros((h, w))
    reach = max(h, w) // min(abs(v1y) + abs(v2y), abs(v1x) + abs(v2x)) + 3
    for i in range(-reach, reach + 1):
        for j in range(-reach, reach + 1):
            py = oy + i * v1y + j * v2y
            px = ox + i * v1x + j * v2x
            if py + sh <= 0 or px + sw <= 0 or py >= h or px >= w:
                continue
            ys, xs = max(py, 0), max(px, 0)
            ye, xe = min(py + sh, h), min(px + sw, w)
            mask[ys:ye, xs:xe] = np.maximum(
                mask[ys:ye, xs:xe], stamp[ys - py:ye - py, xs - px:xe - px])
    alpha = rng.uniform(*model.opacity_range)
    return _alpha_composite(clean, mask, model.base_color, alpha)


# ---------------------------------------------------------------------------
# pair and dataset assembly
# ---------------------------------------------------------------------------

MAX_STAIN_ATTEMPTS = 25
DEGRADATION_PSNR_CEILING = 40.0


def apply_stain(clean, kind: str, severity: int, seed: int) -> np.ndarray:
    if kind not in STAIN_MODELS:
        raise ConfigError(f"unknown stain kind {kind!r} (choose from {sorted(STAIN_MODELS)})")
    if severity not in (1, 2, 3):
        raise ConfigError(f"stain severity must be 1, 2 or 3, got {severity}")
    model = STAIN_MODELS[kind]
    if model.shape_kind == "blob":
        return apply_liquid_stain(clean, model, severity, seed)
    if model.shape_kind == "stroke":
        return apply_ink_stain(clean, model, severity, seed)
    return apply_overlay(clean, kind, seed)


def make_pair(kind: str, severity: int, seed: int, h: int, w: int) -> ImagePair:
    """Deterministic pair; re-rolls the stain until it is measurably strong."""
    base = np.random.SeedSequence([seed, 0x9A12]).generate_state(2)
    clean = gen_document(int(base[0]), h, w)
    for attempt in range(MAX_STAIN_ATTEMPTS):
        stained = apply_stain(clean, kind, severity, int(base[1]) + attempt)
        if psnr(stained, clean) < DEGRADATION_PSNR_CEILING:
            return ImagePair(stained, clean, kind, severity, seed)
    raise DataError(
        f"could not produce a measurable {kind} stain after {MAX_STAIN_ATTEMPTS} attempts (seed {seed})")


class ManifestEntry:
    __slots__ = ("pair_id", "kind", "severity", "seed", "split")

    def __init__(self, pair_id, kind, severity, seed, split):
        self.pair_id = int(pair_id)
        self.kind = kind
        self.severity = int(severity)
        self.seed = int(seed)
        self.split = split

    def line(self):
        return f"{self.pair_id},{self.kind},{self.severity},{self.seed},{self.split}"

    @classmethod
    def parse(cls, line):
        parts = line.strip().split(",")
        if len(parts) != 5 or parts[4] not in ("train", "test"):
            raise DataError(f"malformed manifest line: {line!r}")
        return cls(int(parts[0]), parts[1], int(parts[2]), int(parts[3]), parts[4])


def _id_hash(pair_id: int) -> str:
    return hashlib.sha256(f"{pair_id:06d}".encode("ascii")).hexdigest()


def split_ids(ids, test_fraction=0.1):
    """The round(n*fraction) smallest-hash ids become the test split.

    Hashing ids (not positions) keeps membership roughly stable when the
    dataset is regenerated at a different count; rounding keeps split
    sizes exact.
    """
    n_test = int(round(len(ids) * test_fraction))
    ranked = sorted(ids, key=_id_hash)
    return set(ranked[:n_test])


def stain_filename(pair_id):
    return f"{pair_id:06d}_stained.ppm"


def clean_filename(pair_id):
    return f"{pair_id:06d}_clean.ppm"


def gen_dataset(out_dir, count: int, h: int, w: int, mix=None, seed: int = 0,
                test_fraction: float = 0.1):
    """Write `count` pairs plus manifest.txt; returns the manifest entries."""
    if mix is None:
        mix = {k: 1.0 / len(STAIN_KINDS) for k in STAIN_KINDS}
    unknown = set(mix) - set(STAIN_KINDS)
    if unknown:
        raise ConfigError(f"unknown stain kinds in mix: {sorted(unknown)}")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"mix proportions sum to {total}, expected 1")

    # Largest-remainder apportionment gives exact per-kind counts.
    quotas = {k: mix.get(k, 0.0) * count for k in STAIN_KINDS}
    counts = {k: int(quotas[k]) for k in STAIN_KINDS}
    short = count - sum(counts.values())
    for k in sorted(STAIN_KINDS, key=lambda k: quotas[k] - counts[k], reverse=True)[:short]:
        counts[k] += 1
    kinds = [k for k in STAIN_KINDS for _ in range(counts[k])]
    rng = np.random.default_rng([0xDA7A, seed])
    rng.shuffle(kinds)

    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as e:
        raise DataError(f"output directory {out_dir} is not writable: {e}") from None

    test_ids = split_ids(range(count), test_fraction)
    entries = []
    for pair_id in range(count):
        kind = kinds[pair_id]
        pair_seed = int(np.random.SeedSequence([seed, pair_id]).generate_state(1)[0])
        if STAIN_MODELS[kind].shape_kind in ("ring", "glyph"):
            severity = 2
        else:
            severity = int(np.random.default_rng([0x5E7, seed, pair_id]).integers(1, 4))
        pair = make_pair(kind, severity, pair_seed, h, w)
        ppm.write_ppm(os.path.join(out_dir, clean_filename(pair_id)), pair.clean)
        ppm.write_ppm(os.path.join(out_dir, stain_filename(pair_id)), pair.stained)
        split = "test" if pair_id in test_ids else "train"
        entries.append(ManifestEntry(pair_id, kind, severity, pair_seed, split))

    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        for e in entries:
            f.write(e.line() + "\n")
    return entries


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    return [ManifestEntry.parse(ln) for ln in lines]


def load_pairs(data_dir, split=None, dtype=np.float32):
    """Load (entry, stained, clean) triples, optionally one split only."""
    out = []
    for e in load_manifest(data_dir):
        if split is not None and e.split != split:
            continue
        stained = ppm.read_ppm(os.path.join(data_dir, stain_filename(e.pair_id))).astype(dtype)
        clean = ppm.read_ppm(os.path.join(data_dir, clean_filename(e.pair_id))).astype(dtype)
        out.append((e, stained, clean))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(pair: ImagePair, seed: int, crop: int, mixup_alpha: float = 1.2,
            partner: ImagePair | None = None, mixup_lambda: float | None = None) -> ImagePair:
    """Crop/flip/rotate both images identically, then optionally mixup.

    Rotation is restricted to 90-degree multiples so no interpolation
    model enters. Mixup draws lambda ~ Beta(alpha, alpha) unless given.
    """
    h, w = pair.clean.shape[1], pair.clean.shape[2]
    if crop > min(h, w):
        raise DataError(f"crop {crop} larger than image {h}x{w}")
    rng = np.random.default_rng([0xA06, seed])

    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    stained = pair.stained[:, oy:oy + crop, ox:ox + crop]
    clean = pair.clean[:, oy:oy + crop, ox:ox + crop]

    if rng.random() < 0.5:
        stained = stained[:, :, ::-1]
        clean = clean[:, :, ::-1]
    if rng.random() < 0.5:
        stained = stained[:, ::-1, :]
        clean = clean[:, ::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        stained = np.rot90(stained, k, axes=(1, 2))
        clean = np.rot90(clean, k, axes=(1, 2))

    stained = np.ascontiguousarray(stained)
    clean = np.ascontiguousarray(clean)

    if partner is not None:
        lam = float(rng.beta(mixup_alpha, mixup_alpha)) if mixup_lambda is None else float(mixup_lambda)
        ps = partner.stained[:, :crop, :crop]
        pc = partner.clean[:, :crop, :crop]
        if ps.shape != stained.shape:
            raise DataError(f"mixup partner shape {ps.shape} vs {stained.shape}")
        stained = lam * stained + (1.0 - lam) * ps
        clean = lam * clean + (1.0 - lam) * pc

    return ImagePair(stained, clean, pair.stain_kind, pair.severity, seed)
