"""File interchange: yolo-txt and coco-json annotation I/O, mask rasters.

Directory layout for both formats::

    <dir>/<image_id>.png          image rasters
    <dir>/masks/<image_id>_<k>.png   optional per-instance binary masks
    <dir>/<image_id>.txt          (yolo-txt) one line per box
    <dir>/annotations.json        (coco-json) single file
    <dir>/manifest.json           name + domain tag, written on save

Boxes are serialized with six decimal places in yolo-txt, so a save/load
round trip drifts coordinates by at most 5e-7.
"""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import (
    REAL,
    SYNTHETIC,
    AnnotatedImage,
    AnnotationError,
    BBox,
    DatasetManifest,
    InstanceMask,
)
from .imageops import from_uint8, to_uint8

log = logging.getLogger(__name__)

YOLO_TXT = "yolo-txt"
COCO_JSON = "coco-json"
FORMATS = (YOLO_TXT, COCO_JSON)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Boxes may overflow the unit square by up to this much before load refuses
# to clamp silently.
CLAMP_TOLERANCE = 0.05


class FormatError(ValueError):
    """Malformed annotation file or directory layout."""


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return from_uint8(arr)


def save_image(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def _find_images(directory: Path) -> list[Path]:
    paths = [p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    if not paths:
        raise FormatError(f"no image files under {directory}")
    return paths


def _clamp_boxes(image_id: str, boxes: list[BBox]) -> list[BBox]:
    """Validate boxes, clamping small overflows to the unit square."""
    out = []
    for k, box in enumerate(boxes):
        box.validate(overflow_tol=CLAMP_TOLERANCE)
        x0, y0, x1, y1 = box.corners()
        if x0 < 0 or y0 < 0 or x1 > 1 or y1 > 1:
            box = box.clamped()
            log.warning("%s: box %d clamped to the unit square", image_id, k)
        out.append(box)
    return out


def _mask_dir(directory: Path) -> Path:
    return directory / "masks"


_MASK_NAME = re.compile(r"^(?P<image_id>.+)_(?P<instance_id>\d+)$")


def _load_masks_for(directory: Path, image_id: str, shape: tuple[int, int]) -> list[InstanceMask] | None:
    mdir = _mask_dir(directory)
    if not mdir.is_dir():
        return None
    found = {}
    for p in sorted(mdir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _MASK_NAME.match(p.stem)
        if m is None or m.group("image_id") != image_id:
            continue
        with Image.open(p) as img:
            raster = np.asarray(img.convert("L")) >= 128
        found[int(m.group("instance_id"))] = raster
    if not found:
        return None
    masks = []
    for k in sorted(found):
        mask = InstanceMask(instance_id=k, raster=found[k])
        mask.validate(shape)
        masks.append(mask)
    if sorted(found) != list(range(len(found))):
        raise FormatError(f"{image_id}: mask instance ids {sorted(found)} are not 0..{len(found) - 1}")
    return masks


def save_masks(directory: Path, image_id: str, masks: list[InstanceMask]) -> None:
    mdir = _mask_dir(directory)
    mdir.mkdir(exist_ok=True)
    for mask in masks:
        raster = (mask.raster.astype(np.uint8)) * 255
        Image.fromarray(raster, mode="L").save(mdir / f"{image_id}_{mask.instance_id}.png", format="PNG")


# ---------------------------------------------------------------- yolo-txt


def _parse_yolo_line(line: str, path: Path, lineno: int) -> BBox:
    parts = line.split()
    if len(parts) != 5:
        raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
    try:
        class_id = int(parts[0])
        cx, cy, w, h = (float(v) for v in parts[1:])
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None
    return BBox(class_id=class_id, cx=cx, cy=cy, w=w, h=h)


def _load_yolo(directory: Path, domain_tag: str) -> DatasetManifest:
    records = []
    for img_path in _find_images(directory):
        image_id = img_path.stem
        ann_path = directory / f"{image_id}.txt"
        if not ann_path.is_file():
            raise FormatError(f"{image_id}: missing annotation file {ann_path.name}")
        pixels = load_image(img_path)
        boxes = []
        for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            boxes.append(_parse_yolo_line(line, ann_path, lineno))
        boxes = _clamp_boxes(image_id, boxes)
        masks = _load_masks_for(directory, image_id, pixels.shape[:2])
        records.append(
            AnnotatedImage(image_id=image_id, pixels=pixels, boxes=boxes, masks=masks, domain_tag=domain_tag)
        )
    return DatasetManifest(name=directory.name, records=records, domain_tag=domain_tag)


def _save_yolo(manifest: DatasetManifest, directory: Path) -> None:
    for rec in manifest.records:
        save_image(directory / f"{rec.image_id}.png", rec.pixels)
        lines = [
            f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}" for b in rec.boxes
        ]
        (directory / f"{rec.image_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        if rec.masks is not None:
            save_masks(directory, rec.image_id, rec.masks)


# ---------------------------------------------------------------- coco-json


def decode_rle(size: list[int], counts: list[int]) -> np.ndarray:
    """Uncompressed COCO run-length encoding to a boolean raster.

    Runs alternate 0/1 starting with zeros and scan the raster column-major.
    """
    h, w = size
    total = int(sum(counts))
    if total != h * w:
        raise FormatError(f"RLE covers {total} pixels, raster has {h * w}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if run < 0:
            raise FormatError("negative RLE run")
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape((w, h)).T  # column-major scan order


def encode_rle(raster: np.ndarray) -> dict:
    """Boolean raster to uncompressed COCO run-length encoding."""
    flat = np.asarray(raster, dtype=bool).T.reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8)))
    bounds = np.concatenate(([0], change + 1, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(raster.shape[0]), int(raster.shape[1])], "counts": [int(c) for c in counts]}


def _load_coco(directory: Path, domain_tag: str) -> DatasetManifest:
    ann_path = directory / "annotations.json"
    if not ann_path.is_file():
        raise FormatError(f"missing {ann_path}")
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{ann_path}: {exc}") from None
    for key in ("images", "annotations"):
        if key not in doc:
            raise FormatError(f"{ann_path}: missing top-level key {key!r}")

    by_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        by_image.setdefault(int(ann["image_id"]), []).append(ann)

    records = []
    for info in sorted(doc["images"], key=lambda d: int(d["id"])):
        file_name = info["file_name"]
        image_id = Path(file_name).stem
        img_path = directory / file_name
        if not img_path.is_file():
            raise FormatError(f"{image_id}: listed file {file_name} not found")
        pixels = load_image(img_path)
        height, width = pixels.shape[:2]
        if int(info.get("height", height)) != height or int(info.get("width", width)) != width:
            raise FormatError(f"{image_id}: header dims disagree with the raster")
        anns = sorted(by_image.get(int(info["id"]), []), key=lambda d: int(d["id"]))
        boxes, masks = [], []
        for ann in anns:
            try:
                x, y, w, h = (float(v) for v in ann["bbox"])
            except (KeyError, TypeError, ValueError):
                raise FormatError(f"{image_id}: bad bbox in annotation {ann.get('id')}") from None
            boxes.append(
                BBox(
                    class_id=int(ann.get("category_id", 0)),
                    cx=(x + w / 2) / width,
                    cy=(y + h / 2) / height,
                    w=w / width,
                    h=h / height,
                )
            )
            seg = ann.get("segmentation")
            if isinstance(seg, dict):
                raster = decode_rle(seg["size"], seg["counts"])
                masks.append(InstanceMask(instance_id=len(masks), raster=raster))
        boxes = _clamp_boxes(image_id, boxes)
        if masks and len(masks) != len(boxes):
            raise FormatError(f"{image_id}: {len(masks)} segmentations for {len(boxes)} boxes")
        file_masks = _load_masks_for(directory, image_id, pixels.shape[:2])
        records.append(
            AnnotatedImage(
                image_id=image_id,
                pixels=pixels,
                boxes=boxes,
                masks=masks if masks else file_masks,
                domain_tag=domain_tag,
            )
        )
    return DatasetManifest(name=directory.name, records=records, domain_tag=domain_tag)


def _save_coco(manifest: DatasetManifest, directory: Path) -> None:
    images, annotations = [], []
    ann_id = 1
    for img_num, rec in enumerate(manifest.records, start=1):
        save_image(directory / f"{rec.image_id}.png", rec.pixels)
        images.append(
            {
                "id": img_num,
                "file_name": f"{rec.image_id}.png",
                "width": rec.width,
                "height": rec.height,
            }
        )
        for k, box in enumerate(rec.boxes):
            x0 = (box.cx - box.w / 2) * rec.width
            y0 = (box.cy - box.h / 2) * rec.height
            ann = {
                "id": ann_id,
                "image_id": img_num,
                "category_id": box.class_id,
                "bbox": [x0, y0, box.w * rec.width, box.h * rec.height],
                "area": box.w * rec.width * box.h * rec.height,
                "iscrowd": 0,
            }
            if rec.masks is not None:
                ann["segmentation"] = encode_rle(rec.masks[k].raster)
            annotations.append(ann)
            ann_id += 1
        if rec.masks is not None:
            save_masks(directory, rec.image_id, rec.masks)
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 0, "name": "person"}],
    }
    (directory / "annotations.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- entry points


def load_annotations(directory, fmt: str, domain_tag: str = SYNTHETIC) -> DatasetManifest:
    """Read a dataset directory into a validated manifest."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"not a directory: {directory}")
    if domain_tag not in (SYNTHETIC, REAL):
        raise ValueError(f"unknown domain tag {domain_tag!r}")
    if fmt == YOLO_TXT:
        manifest = _load_yolo(directory, domain_tag)
    elif fmt == COCO_JSON:
        manifest = _load_coco(directory, domain_tag)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    meta = directory / "manifest.json"
    if meta.is_file():
        doc = json.loads(meta.read_text())
        manifest.name = doc.get("name", manifest.name)
    manifest.validate()
    return manifest


def save_annotations(manifest: DatasetManifest, directory, fmt: str) -> None:
    """Write a manifest's images, boxes, and masks to a directory."""
    manifest.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == YOLO_TXT:
        _save_yolo(manifest, directory)
    elif fmt == COCO_JSON:
        _save_coco(manifest, directory)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    meta = {
        "name": manifest.name,
        "domain_tag": manifest.domain_tag,
        "format": fmt,
        "image_ids": [rec.image_id for rec in manifest.records],
    }
    (directory / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- predictions


def load_predictions(path) -> list[tuple[str, BBox, float]]:
    """Detector output file: lines ``image_id class score cx cy w h``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            image_id = parts[0]
            class_id = int(parts[1])
            score = float(parts[2])
            cx, cy, w, h = (float(v) for v in parts[3:])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{path}:{lineno}: score {score} outside [0, 1]")
        out.append((image_id, BBox(class_id=class_id, cx=cx, cy=cy, w=w, h=h), score))
    return out


def save_predictions(path, rows: list[tuple[str, BBox, float]]) -> None:
    lines = [
        f"{image_id} {box.class_id} {score:.6f} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
        for image_id, box, score in rows
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
