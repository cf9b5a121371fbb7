"""Plain-file artifact formats: PFM depth maps, PPM images, ASCII PLY
clouds, camera text files, and the scene directory layout."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .autodiff import ContractError, DimensionError
from .cameras import CameraView, Extrinsics, Intrinsics, format_camera_text, parse_camera_text
from .fusion import PointCloud
from .scene import SyntheticScene

__all__ = [
    "write_pfm", "read_pfm", "write_ppm", "read_ppm", "write_ply", "read_ply",
    "save_scene", "load_scene", "save_camera_file", "load_camera_file",
]


# -- PFM: single-channel float maps -------------------------------------------

def write_pfm(path, data: np.ndarray, little_endian: bool = True) -> None:
    """Grayscale PFM: 'Pf', 'W H', scale line (sign = endianness), rows bottom-up."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"PFM writer expects (H, W), got {arr.shape}")
    h, w = arr.shape
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(f"{scale:.1f}\n".encode("ascii"))
        fh.write(arr[::-1].astype(dtype).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ContractError(f"{path}: not a grayscale PFM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


# -- PPM: 8-bit color images ---------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a (3, H, W) float image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"PPM writer expects (3, H, W), got {img.shape}")
    quant = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """(3, H, W) float image in [0, 1] from a binary P6 file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not header:
        raise ContractError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in header.groups())
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=header.end())
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


# -- PLY: ASCII point clouds ---------------------------------------------------

def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with float32 xyz and uchar rgb per vertex."""
    colors = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(cloud.points.astype(np.float32), colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise ContractError(f"{path}: not a PLY file")
        count = 0
        while True:
            line = fh.readline()
            if not line:
                raise ContractError(f"{path}: truncated PLY header")
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        rows = [fh.readline().split() for _ in range(count)]
    if not rows:
        return PointCloud(points=np.zeros((0, 3)), colors=np.zeros((0, 3)))
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(points=arr[:, :3], colors=arr[:, 3:6] / 255.0)


# -- scene directories -----------------------------------------------------------

def save_camera_file(path, view: CameraView, count: int | None = None) -> None:
    interval = (view.d_max - view.d_min) / max((count or 2) - 1, 1)
    text = format_camera_text(view.intrinsics, view.extrinsics,
                              view.d_min, interval, count, view.d_max)
    Path(path).write_text(text, encoding="utf-8")


def load_camera_file(path) -> tuple[Intrinsics, Extrinsics, dict]:
    return parse_camera_text(Path(path).read_text(encoding="utf-8"))


def save_scene(scene: SyntheticScene, directory, hypothesis_count: int = 16) -> None:
    """Write one scene: PPM images, PFM depths, camera text, manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(scene.views):
        write_ppm(directory / f"view_{i:04d}.ppm", view.image)
        write_pfm(directory / f"depth_{i:04d}.pfm",
                  np.where(view.mask, view.depth, 0.0))
        save_camera_file(directory / f"cam_{i:04d}.txt", view, hypothesis_count)
    spec = scene.spec
    manifest = "\n".join([
        f"kind = {spec.kind}",
        f"seed = {scene.seed}",
        f"n_views = {len(scene.views)}",
        f"height = {spec.height}",
        f"width = {spec.width}",
        f"d_min = {spec.d_min:.17g}",
        f"d_max = {spec.d_max:.17g}",
    ]) + "\n"
    (directory / "manifest.txt").write_text(manifest, encoding="utf-8")


def load_scene(directory) -> tuple[list[CameraView], dict]:
    """Read a scene directory back into views plus its manifest dict."""
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise ContractError(f"{directory} has no manifest.txt")
    manifest: dict = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            manifest[key] = value
    n_views = int(manifest["n_views"])
    d_min = float(manifest["d_min"])
    d_max = float(manifest["d_max"])
    views = []
    for i in range(n_views):
        image = read_ppm(directory / f"view_{i:04d}.ppm")
        depth = read_pfm(directory / f"depth_{i:04d}.pfm").astype(np.float64)
        intr, extr, _ = load_camera_file(directory / f"cam_{i:04d}.txt")
        views.append(CameraView(
            intrinsics=intr, extrinsics=extr, image=image, depth=depth,
            mask=depth > 0, d_min=d_min, d_max=d_max))
    return views, manifest
