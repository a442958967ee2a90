"""Pascal VOC annotations, label statistics and box-aware augmentation.

Annotations keep the VOC convention: 1-based inclusive pixel corners.  Internal
geometry works on 0-based half-open boxes, related by
``x1 = xmin - 1, x2 = xmax`` (and the same for y).

Images are ``uint8`` arrays of shape (height, width, 3), RGB interleaved.
"""
from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (AnnotationParseError, ConfigError, InvariantError, ParameterError,
                     SchemaError)

CLASSES = ("mask_correct", "no_mask", "mask_incorrect")

# label counts reported for the private NPMD dataset; documentation only
NPMD_LABEL_COUNTS = {"mask_correct": 14185, "no_mask": 7857, "mask_incorrect": 6703}
NPMD_LABEL_TOTAL = 28745

MIN_KEPT_FRACTION = 0.25


@dataclass(frozen=True)
class VOCObject:
    name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def xyxy(self) -> Tuple[float, float, float, float]:
        """0-based half-open corners."""
        return (self.xmin - 1.0, self.ymin - 1.0, float(self.xmax), float(self.ymax))


@dataclass(frozen=True)
class ImageAnnotation:
    image_path: str
    width: int
    height: int
    depth: int = 3
    objects: Tuple[VOCObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def validate(self, classes: Sequence[str] = CLASSES) -> "ImageAnnotation":
        for i, o in enumerate(self.objects):
            if o.name not in classes:
                raise InvariantError(f"object {i}: unknown class {o.name!r}")
            if not (1 <= o.xmin < o.xmax <= self.width and 1 <= o.ymin < o.ymax <= self.height):
                raise InvariantError(
                    f"object {i} box ({o.xmin},{o.ymin},{o.xmax},{o.ymax}) violates "
                    f"1 <= min < max <= size for a {self.width}x{self.height} image")
        return self


def _text(node, path):
    found = node.find(path)
    if found is None or found.text is None or not found.text.strip():
        raise SchemaError(f"missing field <{path}>", field=path)
    return found.text.strip()


def _number(node, path) -> int:
    raw = _text(node, path)
    try:
        value = float(raw)
    except ValueError:
        raise SchemaError(f"field <{path}> is not a number: {raw!r}", field=path) from None
    return int(round(value))


def _byte_offset(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[:max(line - 1, 0)]) + column


def parse_voc_xml(data, classes: Sequence[str] = CLASSES) -> ImageAnnotation:
    """Parse one LabelImg / VOC annotation document."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        offset = _byte_offset(data, line, col)
        raise AnnotationParseError(f"malformed XML at byte {offset}: {exc}", offset=offset) from None
    filename = root.findtext("filename", default="").strip()
    path = root.findtext("path", default="").strip() or filename
    width = _number(root, "size/width")
    height = _number(root, "size/height")
    depth_node = root.find("size/depth")
    depth = _number(root, "size/depth") if depth_node is not None and depth_node.text else 3
    objects = []
    for obj in root.findall("object"):
        name = _text(obj, "name")
        coords = [_number(obj, f"bndbox/{k}") for k in ("xmin", "ymin", "xmax", "ymax")]
        objects.append(VOCObject(name, *coords))
    return ImageAnnotation(path, width, height, depth, tuple(objects)).validate(classes)


def serialize_voc_xml(ann: ImageAnnotation) -> bytes:
    """Write an annotation as a VOC XML document."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = Path(ann.image_path).name
    ET.SubElement(root, "path").text = ann.image_path
    size = ET.SubElement(root, "size")
    for tag, value in (("width", ann.width), ("height", ann.height), ("depth", ann.depth)):
        ET.SubElement(size, tag).text = str(value)
    for o in ann.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = o.name
        ET.SubElement(obj, "difficult").text = "0"
        box = ET.SubElement(obj, "bndbox")
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            ET.SubElement(box, tag).text = str(getattr(o, tag))
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8") + b"\n"


def class_histogram(annotations, classes: Sequence[str] = CLASSES) -> Dict[str, int]:
    """Label counts per class plus a ``total`` entry."""
    counts = Counter(o.name for ann in annotations for o in ann.objects)
    out = {name: counts.get(name, 0) for name in classes}
    out["total"] = sum(out.values())
    return out


def read_class_names(path) -> List[str]:
    return [l.strip() for l in Path(path).read_text().splitlines() if l.strip()]


# --- geometry ---------------------------------------------------------------

def rotate_points(points: np.ndarray, degrees: float, width: int, height: int) -> np.ndarray:
    """Rotate (x, y) points counter-clockwise (as displayed) about the image centre.

    Points are in continuous half-open pixel coordinates, so the centre is
    ``(width / 2, height / 2)``.
    """
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = width / 2.0, height / 2.0
    dx, dy = points[:, 0] - cx, points[:, 1] - cy
    return np.stack([cx + c * dx + s * dy, cy - s * dx + c * dy], axis=1)


def _rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: rotate output pixel centres by -degrees to find the source
    centres = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    src = rotate_points(centres, -degrees, w, h) - 0.5
    # right angles land on the grid up to rounding; keep border pixels inside
    snapped = np.rint(src)
    src = np.where(np.abs(src - snapped) < 1e-9, snapped, src)
    coords = [src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)]
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        plane = ndimage.map_coordinates(img[:, :, ch].astype(np.float64), coords, order=1,
                                        mode="constant", cval=0.0)
        out[:, :, ch] = np.clip(np.rint(plane), 0, 255).astype(np.uint8)
    return out


def rotate_box(obj: VOCObject, degrees: float, width: int, height: int) -> Optional[VOCObject]:
    """Axis-aligned hull of the rotated box, clipped; None if too little survives."""
    x1, y1, x2, y2 = obj.xyxy()
    corners = np.array([[x1, y1], [x2, y1], [x1, y2], [x2, y2]])
    r = rotate_points(corners, degrees, width, height)
    nx1, ny1 = np.clip(r.min(axis=0), 0, [width, height])
    nx2, ny2 = np.clip(r.max(axis=0), 0, [width, height])
    hull_area = (r[:, 0].max() - r[:, 0].min()) * (r[:, 1].max() - r[:, 1].min())
    kept = max(nx2 - nx1, 0) * max(ny2 - ny1, 0)
    if hull_area <= 0 or kept < MIN_KEPT_FRACTION * hull_area:
        return None
    xmin, ymin = int(round(nx1)) + 1, int(round(ny1)) + 1
    xmax, ymax = int(round(nx2)), int(round(ny2))
    if not (1 <= xmin < xmax <= width and 1 <= ymin < ymax <= height):
        return None
    return VOCObject(obj.name, xmin, ymin, xmax, ymax)


def affine_rotate(img: np.ndarray, ann: ImageAnnotation, degrees: float):
    """Rotate image and boxes about the image centre.

    Bilinear sampling with black fill; each box becomes the clipped hull of
    its rotated corners and is dropped when less than a quarter of the hull
    stays inside the frame.
    """
    if abs(degrees) > 180:
        raise ParameterError(f"rotation must be within +-180 degrees, got {degrees}")
    if degrees == 0:
        return img.copy(), ann
    out = _rotate_image(img, degrees)
    objects = [rotate_box(o, degrees, ann.width, ann.height) for o in ann.objects]
    return out, replace(ann, objects=tuple(o for o in objects if o is not None))


# --- photometric ops ----------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), edge-replicated borders."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    f = img.astype(np.float64)
    f = ndimage.convolve1d(f, k, axis=0, mode="nearest")
    f = ndimage.convolve1d(f, k, axis=1, mode="nearest")
    return np.clip(np.rint(f), 0, 255).astype(np.uint8)


def color_gain(img: np.ndarray, gains) -> np.ndarray:
    g = np.asarray(gains, dtype=np.float64).reshape(1, 1, -1)
    return np.clip(np.rint(img.astype(np.float64) * g), 0, 255).astype(np.uint8)


def median_blur(img: np.ndarray, kernel: int = 3) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"median kernel must be odd, got {kernel}")
    return ndimage.median_filter(img, size=(kernel, kernel, 1), mode="nearest")


# --- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: Tuple[float, float] = (-15.0, 15.0)
    gaussian_sigma: Tuple[float, float] = (0.5, 1.5)
    color_gain: Tuple[float, float] = (0.8, 1.2)
    median_kernel: int = 3
    p_rotate: float = 0.5
    p_gaussian: float = 0.5
    p_color: float = 0.5
    p_median: float = 0.5
    seed: int = 42

    def __post_init__(self):
        for name in ("rotation_degrees", "gaussian_sigma", "color_gain"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) is degenerate")
        if self.gaussian_sigma[0] <= 0 or self.color_gain[0] < 0:
            raise ConfigError("gaussian_sigma must be positive and color_gain non-negative")
        if max(abs(v) for v in self.rotation_degrees) > 180:
            raise ConfigError("rotation_degrees must lie within +-180")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError(f"median_kernel must be odd, got {self.median_kernel}")
        for name in ("p_rotate", "p_gaussian", "p_color", "p_median"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")

    @classmethod
    def from_mapping(cls, values: dict) -> "AugmentSpec":
        kwargs = {}
        for key, raw in values.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown augment setting {key!r}")
            if key in ("rotation_degrees", "gaussian_sigma", "color_gain"):
                parts = [float(v) for v in str(raw).replace(",", " ").split()]
                if len(parts) == 1 and key == "rotation_degrees":
                    parts = [-abs(parts[0]), abs(parts[0])]
                if len(parts) != 2:
                    raise ConfigError(f"{key} needs 'low, high', got {raw!r}")
                kwargs[key] = tuple(parts)
            elif key in ("median_kernel", "seed"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def with_probability(self, p: float) -> "AugmentSpec":
        return replace(self, p_rotate=p, p_gaussian=p, p_color=p, p_median=p)


def augment(img: np.ndarray, ann: ImageAnnotation, spec: AugmentSpec,
            rng: np.random.Generator):
    """Apply rotate, gaussian blur, colour gain and median blur, each with its probability.

    Returns ``(image, annotation, log)``; ``log`` lists the applied ops with
    their drawn parameters.  Only rotation changes boxes.
    """
    log = []
    if rng.random() < spec.p_rotate:
        deg = float(rng.uniform(*spec.rotation_degrees))
        img, ann = affine_rotate(img, ann, deg)
        log.append({"op": "rotate", "degrees": deg})
    if rng.random() < spec.p_gaussian:
        sigma = float(rng.uniform(*spec.gaussian_sigma))
        img = gaussian_blur(img, sigma)
        log.append({"op": "gaussian_blur", "sigma": sigma})
    if rng.random() < spec.p_color:
        gains = [float(g) for g in rng.uniform(*spec.color_gain, size=3)]
        img = color_gain(img, gains)
        log.append({"op": "color_gain", "gains": gains})
    if rng.random() < spec.p_median:
        img = median_blur(img, spec.median_kernel)
        log.append({"op": "median_blur", "kernel": spec.median_kernel})
    return img, ann, log


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Per-item generator so results do not depend on processing order."""
    return np.random.default_rng([seed, index])


def split_dataset(items: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 42):
    """Seeded shuffle then contiguous train / val / test slices."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    b1 = int(round(n * ratios[0]))
    b2 = int(round(n * (ratios[0] + ratios[1])))
    shuffled = [items[i] for i in order]
    return shuffled[:b1], shuffled[b1:b2], shuffled[b2:]


# --- files -------------------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(path, img: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def find_image(xml_path: Path, ann: ImageAnnotation) -> Path:
    """Locate the image next to (or named by) an annotation file."""
    candidates = []
    if ann.image_path:
        candidates.append(xml_path.parent / Path(ann.image_path).name)
    candidates += [xml_path.with_suffix(s) for s in IMAGE_SUFFIXES]
    for c in candidates:
        if c.is_file():
            return c
    raise FileNotFoundError(f"no image found for {xml_path}")


def load_voc_dir(directory, classes: Sequence[str] = CLASSES):
    """Parse every ``*.xml`` under ``directory``.

    Returns ``(annotations, errors)``: a list of ``(xml_path, ImageAnnotation)``
    sorted by path and a dict mapping failing paths to error messages.
    """
    anns, errors = [], {}
    for xml_path in sorted(Path(directory).glob("*.xml")):
        try:
            anns.append((xml_path, parse_voc_xml(xml_path.read_bytes(), classes)))
        except Exception as exc:  # reported per file
            errors[str(xml_path)] = f"{type(exc).__name__}: {exc}"
    return anns, errors


# --- fixtures ------------------------------------------------------------------------

def synthetic_image(width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random colour field with a few flat rectangles."""
    yy, xx = np.mgrid[0:height, 0:width]
    img = np.empty((height, width, 3), dtype=np.float64)
    for ch in range(3):
        fx, fy, ph = rng.uniform(0.01, 0.08), rng.uniform(0.01, 0.08), rng.uniform(0, 6.28)
        img[:, :, ch] = 128 + 90 * np.sin(fx * xx + ph) * np.cos(fy * yy)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_annotation(name: str, width: int, height: int, rng: np.random.Generator,
                         max_objects: int = 4, classes: Sequence[str] = CLASSES) -> ImageAnnotation:
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        bw = int(rng.integers(8, max(9, width // 3)))
        bh = int(rng.integers(8, max(9, height // 3)))
        xmin = int(rng.integers(1, width - bw))
        ymin = int(rng.integers(1, height - bh))
        objects.append(VOCObject(classes[int(rng.integers(len(classes)))],
                                 xmin, ymin, xmin + bw, ymin + bh))
    return ImageAnnotation(f"{name}.png", width, height, 3, tuple(objects))


def write_fixture_dataset(directory, count: int = 6, size=(96, 80), seed: int = 0) -> List[Path]:
    """Write ``count`` synthetic PNG + XML pairs; returns the XML paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        name = f"img_{i:04d}"
        ann = synthetic_annotation(name, size[0], size[1], rng)
        save_png(directory / f"{name}.png", synthetic_image(size[0], size[1], rng))
        xml_path = directory / f"{name}.xml"
        xml_path.write_bytes(serialize_voc_xml(ann))
        paths.append(xml_path)
    return paths
