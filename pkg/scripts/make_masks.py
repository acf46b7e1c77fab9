"""Render the builtin overlay masks (RGBA PNG, alpha = blend weight)."""

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

SIZE = 64
OUT = Path(__file__).resolve().parents[1] / "src" / "cornercase" / "assets"


def fog(rng):
    noise = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    field = np.asarray(Image.fromarray(noise, mode="F").resize((SIZE, SIZE), Image.BICUBIC))
    alpha = np.clip(0.45 + 0.4 * field, 0, 1)
    rgba = np.dstack([np.full((SIZE, SIZE), 0.88)] * 3 + [alpha])
    return rgba


def glare(rng):
    ys, xs = np.mgrid[0:SIZE, 0:SIZE]
    r = np.hypot(xs - 0.3 * SIZE, ys - 0.25 * SIZE) / SIZE
    alpha = np.clip(np.exp(-(r / 0.35) ** 2), 0, 1)
    rgb = np.dstack([np.ones_like(alpha), np.full_like(alpha, 0.97), np.full_like(alpha, 0.8)])
    return np.dstack([rgb, alpha])


def rain(rng):
    img = Image.new("L", (SIZE, SIZE), 0)
    draw = ImageDraw.Draw(img)
    for _ in range(40):
        x, y = rng.uniform(-10, SIZE), rng.uniform(-10, SIZE)
        length = rng.uniform(6, 14)
        draw.line((x, y, x + 0.35 * length, y + length), fill=int(rng.uniform(150, 230)), width=1)
    alpha = np.asarray(img, dtype=np.float64) / 255.0
    rgb = np.dstack([np.full_like(alpha, 0.75), np.full_like(alpha, 0.8), np.full_like(alpha, 0.9)])
    return np.dstack([rgb, alpha])


def drops(rng):
    img = Image.new("L", (SIZE, SIZE), 0)
    draw = ImageDraw.Draw(img)
    for _ in range(14):
        x, y, r = rng.uniform(0, SIZE), rng.uniform(0, SIZE), rng.uniform(2, 6)
        draw.ellipse((x - r, y - r, x + r, y + r), fill=int(rng.uniform(140, 220)))
    img = img.filter(ImageFilter.GaussianBlur(1.2))
    alpha = np.asarray(img, dtype=np.float64) / 255.0
    rgb = np.dstack([np.full_like(alpha, 0.7), np.full_like(alpha, 0.75), np.full_like(alpha, 0.8)])
    return np.dstack([rgb, alpha])


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for i, fn in enumerate((fog, glare, rain, drops)):
        rgba = fn(np.random.default_rng(i))
        Image.fromarray(np.round(255 * np.clip(rgba, 0, 1)).astype(np.uint8), mode="RGBA").save(OUT / f"{fn.__name__}.png")
        print("wrote", OUT / f"{fn.__name__}.png")


if __name__ == "__main__":
    main()
