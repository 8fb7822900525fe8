"""Generate the committed synthetic embedding fixture used by the test and
acceptance suites.

One category ("synthcat"), two feature levels (8x8x4 and 4x4x6), 40 healthy
training samples, 10 healthy + 12 defective validation samples across three
defect types. Defects displace a rectangular patch region of the feature
grid; masks mark the same region at 32x32 image resolution. Deterministic:
re-running reproduces identical bytes.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from sroc_lab.tensors import save_array_npy

ROOT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "synthcat"
GRID = {"level0": (8, 8, 4), "level1": (4, 4, 6)}
IMAGE_HW = (32, 32)
SCALE = 4  # image pixels per level0 patch

# patch-grid defect regions per type: (top, left, height, width) on the 8x8 grid
DEFECT_REGIONS = {
    "blot": (1, 1, 2, 3),
    "band": (5, 0, 1, 8),
    "spot": (3, 6, 2, 2),
}
N_TRAIN = 40
N_VAL_HEALTHY = 10
DEFECT_COUNTS = {"blot": 5, "band": 4, "spot": 3}


def healthy_features(rng, n):
    levels = {}
    for name, (h, w, c) in GRID.items():
        base = np.linspace(-1.0, 1.0, c)[None, None, None, :]
        ramp = np.linspace(0.0, 0.5, h)[None, :, None, None]
        levels[name] = (
            base + ramp + 0.1 * rng.standard_normal((n, h, w, c))
        ).astype(np.float32)
    return levels


def apply_defect(levels, sample_idx, region, rng):
    top, left, height, width = region
    for name, (h, w, c) in GRID.items():
        f = h // GRID["level0"][0] if h >= GRID["level0"][0] else 1
        # map the level0-grid region onto this level's grid
        ratio = h / GRID["level0"][0]
        t = int(np.floor(top * ratio))
        l = int(np.floor(left * ratio))
        b = max(t + 1, int(np.ceil((top + height) * ratio)))
        r = max(l + 1, int(np.ceil((left + width) * ratio)))
        bump = 2.5 + 0.2 * rng.standard_normal((b - t, r - l, c))
        levels[name][sample_idx, t:b, l:r, :] += bump.astype(np.float32)


def region_mask(region):
    top, left, height, width = region
    mask = np.zeros(IMAGE_HW, dtype=np.uint8)
    mask[
        top * SCALE : (top + height) * SCALE,
        left * SCALE : (left + width) * SCALE,
    ] = 255
    return mask


def main():
    rng = np.random.default_rng(20240817)
    n_defect = sum(DEFECT_COUNTS.values())
    n = N_TRAIN + N_VAL_HEALTHY + n_defect
    levels = healthy_features(rng, n)

    records = []
    for i in range(N_TRAIN):
        records.append(
            {
                "id": f"train_{i:03d}",
                "split": "train",
                "label": "healthy",
                "defect_type": None,
                "mask": None,
            }
        )
    for i in range(N_VAL_HEALTHY):
        records.append(
            {
                "id": f"val_good_{i:03d}",
                "split": "val",
                "label": "healthy",
                "defect_type": None,
                "mask": None,
            }
        )

    ROOT.mkdir(parents=True, exist_ok=True)
    (ROOT / "masks").mkdir(exist_ok=True)
    idx = N_TRAIN + N_VAL_HEALTHY
    for dtype, count in DEFECT_COUNTS.items():
        for j in range(count):
            sid = f"val_{dtype}_{j:02d}"
            apply_defect(levels, idx, DEFECT_REGIONS[dtype], rng)
            mask = region_mask(DEFECT_REGIONS[dtype])
            Image.fromarray(mask, mode="L").save(ROOT / "masks" / f"{sid}.png")
            records.append(
                {
                    "id": sid,
                    "split": "val",
                    "label": "defective",
                    "defect_type": dtype,
                    "mask": f"masks/{sid}.png",
                }
            )
            idx += 1

    (ROOT / "manifest.json").write_text(json.dumps(records, indent=1) + "\n")
    for name in GRID:
        save_array_npy(levels[name], ROOT / f"{name}.npy")
    print(f"fixture written to {ROOT}: {n} samples")


if __name__ == "__main__":
    main()
