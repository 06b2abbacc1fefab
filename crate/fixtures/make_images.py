"""Regenerates the synthetic photos of the fixture corpus (requires Pillow)."""
from pathlib import Path

from PIL import Image, ImageDraw

ROOT = Path(__file__).parent / "corpus" / "images"

# (relative path, size, background, lesion box, lesion colour)
IMAGES = [
    ("derm/d1.png", (160, 120), (214, 180, 150), (20, 30, 111, 91), (190, 40, 40)),
    ("derm/d2.png", (160, 120), (220, 190, 160), (10, 10, 150, 110), (200, 60, 50)),
    ("derm/d3.png", (160, 120), (205, 175, 140), (60, 50, 90, 80), (170, 30, 30)),
    ("derm/d4.png", (160, 120), (225, 195, 170), (40, 20, 120, 100), (180, 50, 60)),
    ("oph/o1.png", (200, 100), (240, 240, 240), (70, 30, 130, 70), (250, 250, 250)),
    ("oph/o2.png", (200, 100), (200, 170, 150), (50, 20, 150, 80), (240, 120, 120)),
    ("oph/o3.png", (200, 100), (190, 160, 140), (10, 10, 50, 50), (230, 110, 110)),
    ("oph/o4.png", (200, 100), (195, 165, 145), (0, 40, 90, 100), (235, 115, 115)),
    ("tcm/t1.jpg", (240, 180), (230, 200, 180), (80, 100, 160, 170), (200, 90, 110)),
    ("tcm/t2.png", (240, 180), (228, 198, 178), (90, 95, 150, 160), (205, 95, 115)),
    ("tcm/t3.jpg", (240, 180), (232, 202, 182), (90, 90, 200, 180), (198, 88, 108)),
    ("tcm/t4.png", (240, 180), (226, 196, 176), (100, 100, 140, 150), (210, 100, 120)),
]


def main():
    for rel, size, bg, box, colour in IMAGES:
        img = Image.new("RGB", size, bg)
        draw = ImageDraw.Draw(img)
        w, h = size
        for x in range(0, w, 8):
            draw.line([(x, 0), (x, h)], fill=tuple(max(c - 25, 0) for c in bg))
        draw.rectangle([box[0], box[1], box[2] - 1, box[3] - 1], fill=colour)
        path = ROOT / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if rel.endswith(".jpg"):
            img.save(path, quality=90)
        else:
            img.save(path)


if __name__ == "__main__":
    main()
