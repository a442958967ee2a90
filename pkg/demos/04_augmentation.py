"""Augment a synthetic VOC image and check that the boxes follow the pixels."""
import tempfile
from pathlib import Path

import numpy as np

from cayolo.voc_data import (AugmentSpec, affine_rotate, augment, class_histogram, item_rng, load_voc_dir,
                             split_dataset, synthetic_annotation, synthetic_image, write_fixture_dataset)

rng = np.random.default_rng(3)
img = synthetic_image(160, 120, rng)
ann = synthetic_annotation("demo", 160, 120, rng, max_objects=3)
print("objects:", [(o.name, o.xmin, o.ymin, o.xmax, o.ymax) for o in ann.objects])

# rotation moves the boxes; the other ops only touch pixels
for deg in (0, 12.5, 90):
    _, rotated = affine_rotate(img, ann, deg)
    print(f"{deg:>5} deg ->", [(o.xmin, o.ymin, o.xmax, o.ymax) for o in rotated.objects])

spec = AugmentSpec(p_rotate=1.0, p_gaussian=1.0, p_color=1.0, p_median=1.0)
for i in range(3):
    out, new_ann, log = augment(img, ann, spec, item_rng(42, i))
    print(f"item {i}:", ", ".join(f"{e['op']}" for e in log), "| boxes kept", len(new_ann.objects))

# the same seed and index always give the same result
a = augment(img, ann, spec, item_rng(42, 1))[0]
b = augment(img, ann, spec, item_rng(42, 1))[0]
print("reproducible:", a.tobytes() == b.tobytes())

with tempfile.TemporaryDirectory() as tmp:
    write_fixture_dataset(Path(tmp), count=10, seed=1)
    anns, errors = load_voc_dir(tmp)
    print("histogram:", class_histogram(a for _, a in anns), "errors:", errors)
    train, val, test = split_dataset([p.name for p, _ in anns], (0.8, 0.1, 0.1), seed=42)
    print("split sizes:", len(train), len(val), len(test))
