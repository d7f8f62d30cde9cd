"""Procedural tooth-silhouette images on a black background.

Each class is described by a small shape grammar (number of main cusps,
cusp proportions and slant, serrated edges, lateral cusplets, root
breadth).  Every image is that class's shape under a random rotation,
scale, shift and brightness, rendered anti-aliased by supersampling.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import DatasetManifest, ManifestEntry, write_manifest
from .errors import ConfigError
from .model import GENERA
from .rng import make_rng


@dataclass(frozen=True)
class ToothGrammar:
    crown_count: int = 1
    crown_width: float = 0.5
    crown_height: float = 0.55
    curvature: float = 0.0
    serrated: bool = False
    cusplets: int = 0
    one_sided_cusplets: bool = False
    root_breadth: float = 0.8


DEFAULT_GRAMMARS = (
    ToothGrammar(1, 0.55, 0.50, 0.05, True, 0, False, 0.85),    # Carcharhinus
    ToothGrammar(1, 0.20, 0.72, 0.00, False, 1, False, 0.70),   # Carcharias
    ToothGrammar(1, 0.85, 0.70, 0.00, True, 0, False, 0.95),    # Carcharocles
    ToothGrammar(3, 0.14, 0.55, 0.00, False, 0, False, 0.85),   # Chlamydoselachus
    ToothGrammar(1, 0.55, 0.72, 0.00, False, 0, False, 0.65),   # Cosmopolitodus
    ToothGrammar(1, 0.60, 0.38, 0.30, True, 3, True, 0.90),     # Galeocerdo
    ToothGrammar(1, 0.35, 0.55, 0.22, True, 0, False, 0.55),    # Hemipristis
    ToothGrammar(1, 0.22, 0.32, 0.18, False, 5, True, 1.00),    # Notorynchus
    ToothGrammar(1, 0.40, 0.52, 0.12, False, 0, False, 0.45),   # Prionace
    ToothGrammar(1, 0.12, 0.30, 0.00, False, 0, False, 1.00),   # Squatina
)


@dataclass
class SynthSpec:
    num_classes: int = 10
    per_class: int = 100
    image_size: int = 64
    seed: int = 0
    grammars: tuple = field(default=DEFAULT_GRAMMARS)
    class_names: tuple = field(default=GENERA)
    rotation_deg: float = 15.0
    scale_jitter: float = 0.2
    brightness_jitter: float = 0.15

    def __post_init__(self):
        if not 1 <= self.num_classes <= min(len(self.grammars), len(self.class_names)):
            raise ConfigError(f"num_classes must be in [1, {len(self.grammars)}]")
        if self.per_class < 1 or self.image_size < 8:
            raise ConfigError("per_class must be >= 1 and image_size >= 8")
        used = [astuple(g) for g in self.grammars[: self.num_classes]]
        if len(set(used)) != len(used):
            raise ConfigError("class grammars must be distinct")


def _cusp(cx, base_y, width, height, lean, serrated, side_teeth=7):
    """Triangle cusp pointing down (+y); optionally with sawtooth edges."""
    left, tip, right = (cx - width / 2, base_y), (cx + lean, base_y + height), (cx + width / 2, base_y)
    if not serrated:
        return [left, tip, right]
    pts = []
    amp = 0.012 + 0.02 * width
    for a, b, sign in ((left, tip, -1.0), (tip, right, 1.0)):
        ax, ay = a
        bx, by = b
        nx, ny = -(by - ay), bx - ax
        norm = np.hypot(nx, ny) or 1.0
        nx, ny = sign * nx / norm, sign * ny / norm
        for t in np.linspace(0, 1, 2 * side_teeth + 1)[:-1]:
            off = amp if (round(t * 2 * side_teeth) % 2) else 0.0
            pts.append((ax + (bx - ax) * t + nx * off, ay + (by - ay) * t + ny * off))
    pts.append(right)
    return pts


def tooth_polygons(g: ToothGrammar) -> list:
    """Crown and root polygons in unit coordinates (x right, y down, centred)."""
    base_y = -0.12
    crowns = []
    if g.crown_count == 1:
        crowns.append(_cusp(0.0, base_y, g.crown_width, g.crown_height, g.curvature, g.serrated))
    else:
        spacing = 0.28
        for j in range(g.crown_count):
            cx = (j - (g.crown_count - 1) / 2) * spacing
            crowns.append(_cusp(cx, base_y, g.crown_width, g.crown_height * (1.0 if j == 1 else 0.85),
                                g.curvature, g.serrated))
        crowns.append([(-spacing - 0.07, base_y + 0.01), (spacing + 0.07, base_y + 0.01),
                       (spacing + 0.07, base_y - 0.02), (-spacing - 0.07, base_y - 0.02)])
    cw = 0.09
    for j in range(g.cusplets):
        h = 0.16 * (0.8 ** j)
        sides = (1,) if g.one_sided_cusplets else (-1, 1)
        for s in sides:
            cx = s * (g.crown_width / 2 + (j + 0.5) * cw * 0.9)
            crowns.append(_cusp(cx, base_y, cw, h, s * 0.02, False))
    rb = g.root_breadth
    root = [(-rb / 2, base_y + 0.02), (-rb / 2, base_y - 0.14), (-rb / 4, base_y - 0.26), (0.0, base_y - 0.16),
            (rb / 4, base_y - 0.26), (rb / 2, base_y - 0.14), (rb / 2, base_y + 0.02)]
    return [("root", root)] + [("crown", c) for c in crowns]


def render_tooth(g: ToothGrammar, size: int, rng: np.random.Generator, rotation_deg=15.0,
                 scale_jitter=0.2, brightness_jitter=0.15, supersample: int = 4) -> np.ndarray:
    """Render one uint8 ``size x size x 3`` image of grammar ``g``."""
    theta = np.deg2rad(rng.uniform(-rotation_deg, rotation_deg))
    scale = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
    shift = rng.uniform(-0.04, 0.04, size=2)
    bright = 1.0 + rng.uniform(-brightness_jitter, brightness_jitter)
    big = size * supersample
    img = Image.new("RGB", (big, big), (0, 0, 0))
    draw = ImageDraw.Draw(img)
    c, s = np.cos(theta), np.sin(theta)
    colours = {"root": np.array([0.62, 0.52, 0.42]), "crown": np.array([0.92, 0.88, 0.80])}
    for part, poly in tooth_polygons(g):
        p = np.asarray(poly) * 0.9 * scale
        p = p @ np.array([[c, s], [-s, c]]) + shift
        p = (p + 0.5) * big
        col = tuple(int(v) for v in np.clip(colours[part] * bright * 255, 0, 255))
        draw.polygon([tuple(q) for q in p], fill=col)
    return np.asarray(img.resize((size, size), Image.LANCZOS))


def synthesize_tooth_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write ``per_class`` PNGs per class under ``out_dir`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    entries = []
    for ci in range(spec.num_classes):
        name = spec.class_names[ci]
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        rng = make_rng(spec.seed, "synth", ci)
        for i in range(spec.per_class):
            px = render_tooth(spec.grammars[ci], spec.image_size, rng, spec.rotation_deg,
                              spec.scale_jitter, spec.brightness_jitter)
            rel = f"{name}/{name}_{i:04d}.png"
            Image.fromarray(px).save(out_dir / rel, format="PNG")
            entries.append(ManifestEntry(rel, name))
    manifest = DatasetManifest(entries, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
