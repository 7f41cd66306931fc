"""File formats and dataset loading.

Formats:
  - PFM float maps ("Pf" grayscale / "PF" color), scale sign giving byte
    order, rows stored bottom-up, 32-bit payloads.
  - Camera text files: "extrinsic" + 4x4 world-to-camera matrix, "intrinsic"
    + 3x3 K, then a depth line "min interval num max".
  - Pair lists: first line the view count, then per view its id on one line
    and "N src score src score ..." on the next.
  - ASCII PLY point clouds with per-vertex color and confidence.
  - Dataset layout: root/{images,cams,depths,priors,pairs}/<scene>/..., with
    priors as <view>_depth.pfm and <view>_normal.pfm and one pairs/<scene>.txt
    per scene.

All readers raise DataError with the offending path (and line where it
applies); writer/reader pairs round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import Camera


# ---- PFM ----------------------------------------------------------------------


def write_pfm(path, data):
    """Write (H, W) or (H, W, 3) float data as a little-endian PFM file."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H,W) or (H,W,3) data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file into (H, W) or (H, W, 3) float32, top-down rows."""
    with open(path, "rb") as f:
        raw = f.read()

    def next_token(off):
        while off < len(raw) and raw[off : off + 1].isspace():
            off += 1
        start = off
        while off < len(raw) and not raw[off : off + 1].isspace():
            off += 1
        if start == off:
            raise DataError(f"{path}: truncated PFM header")
        return raw[start:off], off

    kind, off = next_token(0)
    if kind not in (b"Pf", b"PF"):
        raise DataError(f"{path}: not a PFM file (magic {kind!r})")
    try:
        wtok, off = next_token(off)
        htok, off = next_token(off)
        stok, off = next_token(off)
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise DataError(f"{path}: bad PFM header: {e}") from None
    off += 1  # single whitespace byte terminates the header
    channels = 3 if kind == b"PF" else 1
    count = w * h * channels
    dt = "<f4" if scale < 0 else ">f4"
    available = (len(raw) - off) // 4
    if available < count:
        raise DataError(f"{path}: PFM payload has {available} values, expected {count}")
    payload = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.ascontiguousarray(payload.reshape(shape)[::-1]).astype(np.float32)


# ---- camera text files --------------------------------------------------------


def write_camera_text(path, cam):
    lines = ["extrinsic"]
    for row in cam.t:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("")
    lines.append("intrinsic")
    for row in cam.k:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("")
    lines.append(f"{cam.depth_min!r} {cam.depth_interval!r} {int(cam.depth_num)} {cam.depth_max!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_matrix_line(path, lines, idx, count):
    try:
        vals = [float(v) for v in lines[idx].split()]
    except (IndexError, ValueError):
        raise DataError(f"{path}:{idx + 1}: expected {count} numbers") from None
    if len(vals) != count:
        raise DataError(f"{path}:{idx + 1}: expected {count} numbers, got {len(vals)}")
    return vals


def read_camera_text(path, height, width):
    """Parse a camera file; image extents come from the caller."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0].strip() != "extrinsic":
        raise DataError(f"{path}:1: expected 'extrinsic'")
    t = np.array([_parse_matrix_line(path, lines, 1 + i, 4) for i in range(4)])
    if len(lines) < 7 or lines[6].strip() != "intrinsic":
        raise DataError(f"{path}:7: expected 'intrinsic'")
    k = np.array([_parse_matrix_line(path, lines, 7 + i, 3) for i in range(3)])
    vals = _parse_matrix_line(path, lines, 11, 4)
    dmin, dinterval, dnum, dmax = vals
    try:
        return Camera(
            k=k,
            t=t,
            height=height,
            width=width,
            depth_min=dmin,
            depth_max=dmax,
            depth_interval=dinterval,
            depth_num=int(dnum),
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


# ---- pair lists ---------------------------------------------------------------


def write_pair_list(path, entries):
    """entries: list of (ref_id, [(src_id, score), ...])."""
    lines = [str(len(entries))]
    for ref_id, sources in entries:
        lines.append(str(int(ref_id)))
        parts = [str(len(sources))]
        for src_id, score in sources:
            parts.append(str(int(src_id)))
            parts.append(repr(float(score)))
        lines.append(" ".join(parts))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_pair_list(path):
    with open(path) as f:
        tokens = f.read().split()
    try:
        it = iter(tokens)
        count = int(next(it))
        entries = []
        for _ in range(count):
            ref_id = int(next(it))
            n = int(next(it))
            sources = []
            for _ in range(n):
                sid = int(next(it))
                score = float(next(it))
                sources.append((sid, score))
            entries.append((ref_id, sources))
        return entries
    except (StopIteration, ValueError):
        raise DataError(f"{path}: malformed pair list") from None


# ---- images -------------------------------------------------------------------


def write_image(path, image):
    """Write a (3, H, W) float array in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB").save(path)


def read_image(path):
    """Read an RGB image into (3, H, W) float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise DataError(f"missing image: {path}") from None
    return np.moveaxis(arr, 2, 0) / 255.0


# ---- point clouds -------------------------------------------------------------


def write_ply(path, xyz, rgb, confidence):
    """ASCII PLY with x y z, uchar colors, and a float confidence per vertex."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    n = xyz.shape[0]
    if rgb.shape[0] != n or confidence.shape[0] != n:
        raise ValueError("xyz, rgb, confidence lengths differ")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float confidence",
        "end_header",
    ]
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for i in range(n):
            x, y, z = (float(v) for v in xyz[i])
            r, g, b = rgb[i]
            f.write(f"{x!r} {y!r} {z!r} {int(r)} {int(g)} {int(b)} {float(confidence[i])!r}\n")


def read_ply(path):
    """Read the PLY files write_ply produces. Returns (xyz, rgb, confidence)."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise DataError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex "):
            n = int(ln.split()[-1])
        if ln == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise DataError(f"{path}: malformed PLY header")
    rows = lines[body_at : body_at + n]
    if len(rows) != n:
        raise DataError(f"{path}: expected {n} vertices, found {len(rows)}")
    xyz = np.zeros((n, 3))
    rgb = np.zeros((n, 3), dtype=np.uint8)
    conf = np.zeros(n)
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != 7:
            raise DataError(f"{path}: bad vertex row {i}")
        xyz[i] = [float(v) for v in parts[:3]]
        rgb[i] = [int(v) for v in parts[3:6]]
        conf[i] = float(parts[6])
    return xyz, rgb, conf


# ---- CSV schemas --------------------------------------------------------------

METRICS_COLUMNS = ["scene", "MAE_m", "pct_lt_3interval", "pct_lt_0p6m", "truncated"]
CURVE_COLUMNS = ["epoch", "L_r1", "L_r2", "L_r3", "L_d1", "L_d2", "L_d3", "L_ref", "L_total", "MAE_val"]


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


# ---- dataset ------------------------------------------------------------------


@dataclass
class SceneSample:
    """One pipeline input: a reference view, its sources, and its priors."""

    name: str
    ref_id: int
    images: list  # (3,H,W) float arrays, reference first
    cameras: list  # Camera per view, reference first
    gt_depth: np.ndarray | None  # (1,H,W) or None
    prior_depth: np.ndarray  # (1,H,W) relative monocular depth
    prior_normal: np.ndarray  # (3,H,W) unit normals, camera frame
    depth_range: tuple  # (min, interval, num, max)


def _view_name(view_id):
    return f"{view_id:04d}"


def scene_paths(root, scene):
    return {
        "images": os.path.join(root, "images", scene),
        "cams": os.path.join(root, "cams", scene),
        "depths": os.path.join(root, "depths", scene),
        "priors": os.path.join(root, "priors", scene),
        "pairs": os.path.join(root, "pairs", f"{scene}.txt"),
    }


def list_scenes(root):
    images_dir = os.path.join(root, "images")
    if not os.path.isdir(images_dir):
        raise DataError(f"not a dataset root (no images/ directory): {root}")
    return sorted(d for d in os.listdir(images_dir) if os.path.isdir(os.path.join(images_dir, d)))


def load_dataset(root, view_count=3):
    """Load every (scene, reference view) sample with view_count - 1 sources.

    Ground-truth depth is optional; prior maps are required. All views of a
    sample must share image extents, and priors must match the reference.
    """
    samples = []
    for scene in list_scenes(root):
        paths = scene_paths(root, scene)
        if not os.path.isfile(paths["pairs"]):
            raise DataError(f"missing pair list: {paths['pairs']}")
        for ref_id, sources in read_pair_list(paths["pairs"]):
            src_ids = [sid for sid, _ in sources[: view_count - 1]]
            if len(src_ids) < view_count - 1:
                raise DataError(f"{paths['pairs']}: view {ref_id} has {len(src_ids)} sources, need {view_count - 1}")
            images = []
            cameras = []
            for vid in [ref_id] + src_ids:
                img = read_image(os.path.join(paths["images"], _view_name(vid) + ".png"))
                cam_path = os.path.join(paths["cams"], _view_name(vid) + ".txt")
                if not os.path.isfile(cam_path):
                    raise DataError(f"missing camera file: {cam_path}")
                cam = read_camera_text(cam_path, img.shape[1], img.shape[2])
                images.append(img)
                cameras.append(cam)
            extents = {im.shape[1:] for im in images}
            if len(extents) != 1:
                raise DataError(f"{scene}: views of sample {ref_id} have mixed extents {sorted(extents)}")

            gt_path = os.path.join(paths["depths"], _view_name(ref_id) + ".pfm")
            gt = read_pfm(gt_path)[None].astype(np.float64) if os.path.isfile(gt_path) else None

            pd_path = os.path.join(paths["priors"], _view_name(ref_id) + "_depth.pfm")
            pn_path = os.path.join(paths["priors"], _view_name(ref_id) + "_normal.pfm")
            if not os.path.isfile(pd_path) or not os.path.isfile(pn_path):
                raise DataError(f"{scene}: missing prior maps for view {ref_id} under {paths['priors']}")
            prior_depth = read_pfm(pd_path)[None].astype(np.float64)
            prior_normal = np.moveaxis(read_pfm(pn_path), 2, 0).astype(np.float64)
            for name, arr in (("gt depth", gt), ("prior depth", prior_depth), ("prior normal", prior_normal)):
                if arr is not None and arr.shape[1:] != images[0].shape[1:]:
                    raise DataError(f"{scene}: {name} extents {arr.shape[1:]} do not match images {images[0].shape[1:]}")

            cam0 = cameras[0]
            samples.append(
                SceneSample(
                    name=scene,
                    ref_id=ref_id,
                    images=images,
                    cameras=cameras,
                    gt_depth=gt,
                    prior_depth=prior_depth,
                    prior_normal=prior_normal,
                    depth_range=(cam0.depth_min, cam0.depth_interval, cam0.depth_num, cam0.depth_max),
                )
            )
    if not samples:
        raise DataError(f"no samples found under {root}")
    return samples


def write_scene(root, scene, views, pair_entries, gt_depths=None, priors=None):
    """Write one scene in the dataset layout.

    views: list of (image (3,H,W) in [0,1], Camera); gt_depths: optional list
    of (H,W) arrays or None per view; priors: optional list of
    (depth (H,W), normal (3,H,W)) or None per view.
    """
    paths = scene_paths(root, scene)
    for key in ("images", "cams", "depths", "priors"):
        os.makedirs(paths[key], exist_ok=True)
    os.makedirs(os.path.dirname(paths["pairs"]), exist_ok=True)
    for vid, (image, cam) in enumerate(views):
        name = _view_name(vid)
        write_image(os.path.join(paths["images"], name + ".png"), image)
        write_camera_text(os.path.join(paths["cams"], name + ".txt"), cam)
        if gt_depths is not None and gt_depths[vid] is not None:
            write_pfm(os.path.join(paths["depths"], name + ".pfm"), np.asarray(gt_depths[vid]))
        if priors is not None and priors[vid] is not None:
            pdepth, pnormal = priors[vid]
            write_pfm(os.path.join(paths["priors"], name + "_depth.pfm"), np.asarray(pdepth))
            write_pfm(os.path.join(paths["priors"], name + "_normal.pfm"), np.moveaxis(np.asarray(pnormal), 0, 2))
    write_pair_list(paths["pairs"], pair_entries)
