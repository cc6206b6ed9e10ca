"""Builds the six-portrait curation corpus and its golden manifest.

Metrics are computed here independently (pixel counting, per-landmark
loop) and frozen; the Rust manifest builder must reproduce the file
byte-for-byte.
"""
import json
import math
import os

import numpy as np
from PIL import Image

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "curation")
SIDE = 64
rng = np.random.default_rng(20240917)

# (stem, face-centre x shift, landmark jitter scale, hair rows)
PORTRAITS = [
    ("p0", 0.0, 0.0, 18),
    ("p1", 1.0, 0.5, 16),
    ("p2", 3.0, 0.5, 20),
    ("p3", 4.5, 0.5, 14),
    ("p4", 7.0, 1.0, 22),
    ("p5", 0.0, 0.5, 4),  # too little hair: excluded
]

base = [[20.0 + 24.0 * (k % 17) / 16.0, 28.0 + 4.0 * (k // 17)] for k in range(68)]


def disc(cx, cy, r):
    yy, xx = np.mgrid[0:SIDE, 0:SIDE]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def save_mask(m, name):
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(os.path.join(OUT, name))


os.makedirs(OUT, exist_ok=True)
data = {}
for stem, shift, jitter, hair_rows in PORTRAITS:
    face = disc(32 + shift, 36, 14)
    hair = np.zeros((SIDE, SIDE), bool)
    hair[:hair_rows, 8:56] = True
    hair[hair_rows:hair_rows + 10, 8:14] = True
    hair[hair_rows:hair_rows + 10, 50:56] = True
    hair &= ~face
    img = np.zeros((SIDE, SIDE, 3), np.uint8)
    img[..., :] = (180, 190, 200)
    img[face] = (220, 180, 150)
    img[hair] = (60, 40, 20)
    Image.fromarray(img, mode="RGB").save(os.path.join(OUT, stem + ".png"))
    save_mask(face, stem + ".face.png")
    save_mask(hair, stem + ".hair.png")
    # quarter-pixel landmarks keep the JSON exact
    lm = [[x + shift + round(rng.normal() * jitter * 4) / 4, y + round(rng.normal() * jitter * 4) / 4] for x, y in base]
    with open(os.path.join(OUT, stem + ".landmarks.json"), "w") as f:
        json.dump(lm, f)
    data[stem] = (face, hair, lm)


def iou(a, b):
    inter = 0
    union = 0
    for y in range(SIDE):
        for x in range(SIDE):
            inter += bool(a[y, x] and b[y, x])
            union += bool(a[y, x] or b[y, x])
    return inter / union


def pd(a, b):
    s = 0.0
    for p, q in zip(a, b):
        s += math.hypot(p[0] - q[0], p[1] - q[1])
    return s / len(a)


def category(i, d):
    if 0.8 < i <= 1.0 and 0.0 <= d < 2.0:
        return "Easy"
    if 0.7 < i <= 0.8 and 2.0 <= d < 4.0:
        return "Medium"
    if 0.6 < i <= 0.7 and 4.0 <= d < 5.0:
        return "Difficult"
    return "Rejected"


def paths(stem):
    return {"image": stem + ".png", "face_mask": stem + ".face.png",
            "hair_mask": stem + ".hair.png", "landmarks": stem + ".landmarks.json"}


valid = sorted(s for s, (_, hair, _) in data.items() if hair.sum() / hair.size >= 0.18)
records = []
for a in valid:
    for b in valid:
        i = iou(data[a][0], data[b][0])
        d = pd(data[a][2], data[b][2])
        for c in valid:
            records.append({
                "id": f"{a}__{b}__{c}", "identity": paths(a), "shape": paths(b), "appearance": paths(c),
                "iou": i, "pd": d, "category": category(i, d), "resolution": [SIDE, SIDE],
            })
records.sort(key=lambda r: r["id"])
with open(os.path.join(os.path.dirname(OUT), "curation_golden.jsonl"), "w") as f:
    for r in records:
        f.write(json.dumps(r, separators=(",", ":")) + "\n")

for s, (_, hair, _) in sorted(data.items()):
    print(s, "hair", hair.sum() / hair.size)
from collections import Counter
print(Counter(r["category"] for r in records))
for a in valid:
    print(a, [(b, round(iou(data[a][0], data[b][0]), 3), round(pd(data[a][2], data[b][2]), 3)) for b in valid])
