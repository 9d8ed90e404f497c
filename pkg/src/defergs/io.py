"""On-disk assets: binary PLY Gaussians, OBJ meshes, PFM images, PNG, manifests.

Every writer goes through ``atomic_write`` (temp file in the target directory,
then ``os.replace``) so an interrupted run never leaves a partial asset.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .scene_model import (AUX_SH, RADIANCE_SH, Camera, EnvironmentLight, Gaussians, HybridScene,
                          SceneError, TrainView, TriangleMesh)

MANIFEST_FORMAT = "defergs-scene 1"

_PLY_FIELDS = (
    [("x", "f8"), ("y", "f8"), ("z", "f8"),
     ("qw", "f8"), ("qx", "f8"), ("qy", "f8"), ("qz", "f8"),
     ("sx", "f8"), ("sy", "f8"), ("sz", "f8"), ("alpha", "f8")]
    + [(f"f_rgb_{i}", "f8") for i in range(RADIANCE_SH * 3)]
    + [("ar", "f8"), ("ag", "f8"), ("ab", "f8"), ("r", "f8"), ("m", "f8"),
       ("qnw", "f8"), ("qnx", "f8"), ("qny", "f8"), ("qnz", "f8")]
    + [(f"f_aux_{i}", "f8") for i in range(AUX_SH * 3)]
    + [("tri_id", "i4"), ("mux", "f8"), ("muy", "f8"), ("muz", "f8")]
)
PLY_DTYPE = np.dtype([(n, "<" + t) for n, t in _PLY_FIELDS])
_PLY_TYPENAMES = {"f8": "double", "i4": "int"}


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise SceneError(f"missing file: {path}") from None


# -- PLY ------------------------------------------------------------------------

def encode_gaussians(g: Gaussians) -> bytes:
    n = len(g)
    rec = np.zeros(n, dtype=PLY_DTYPE)
    cols = {
        "x": g.mu[:, 0], "y": g.mu[:, 1], "z": g.mu[:, 2],
        "qw": g.q_shape[:, 0], "qx": g.q_shape[:, 1], "qy": g.q_shape[:, 2], "qz": g.q_shape[:, 3],
        "sx": g.raw_scale[:, 0], "sy": g.raw_scale[:, 1], "sz": g.raw_scale[:, 2],
        "alpha": g.raw_alpha,
        "ar": g.raw_albedo[:, 0], "ag": g.raw_albedo[:, 1], "ab": g.raw_albedo[:, 2],
        "r": g.raw_rough, "m": g.raw_metal,
        "qnw": g.q_normal[:, 0], "qnx": g.q_normal[:, 1], "qny": g.q_normal[:, 2], "qnz": g.q_normal[:, 3],
        "tri_id": g.tri_id.astype(np.int32),
        "mux": g.mu_init[:, 0], "muy": g.mu_init[:, 1], "muz": g.mu_init[:, 2],
    }
    for k, v in cols.items():
        rec[k] = v
    rgb = g.sh_rgb.reshape(n, RADIANCE_SH * 3)
    aux = g.sh_aux.reshape(n, AUX_SH * 3)
    for i in range(rgb.shape[1]):
        rec[f"f_rgb_{i}"] = rgb[:, i]
    for i in range(aux.shape[1]):
        rec[f"f_aux_{i}"] = aux[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPENAMES[t]} {name}" for name, t in _PLY_FIELDS]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def decode_gaussians(data: bytes) -> Gaussians:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SceneError("malformed header: not a binary PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise SceneError("malformed header: expected binary_little_endian PLY")
    count = None
    props = []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"] and len(parts) == 3:
            count = int(parts[2])
        elif parts[:1] == ["property"] and len(parts) == 3:
            props.append((parts[2], parts[1]))
    expected = [(name, _PLY_TYPENAMES[t]) for name, t in _PLY_FIELDS]
    if count is None or props != expected:
        raise SceneError("malformed header: unexpected Gaussian property layout")
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * PLY_DTYPE.itemsize:
        raise SceneError(f"malformed body: expected {count} records")
    rec = np.frombuffer(body, dtype=PLY_DTYPE, count=count)

    def col(*names):
        return np.stack([rec[k].astype(np.float64) for k in names], axis=1)

    g = Gaussians(
        mu=col("x", "y", "z"),
        q_shape=col("qw", "qx", "qy", "qz"),
        raw_scale=col("sx", "sy", "sz"),
        raw_alpha=rec["alpha"].astype(np.float64),
        sh_rgb=col(*[f"f_rgb_{i}" for i in range(RADIANCE_SH * 3)]).reshape(count, RADIANCE_SH, 3),
        raw_albedo=col("ar", "ag", "ab"),
        raw_rough=rec["r"].astype(np.float64),
        raw_metal=rec["m"].astype(np.float64),
        q_normal=col("qnw", "qnx", "qny", "qnz"),
        sh_aux=col(*[f"f_aux_{i}" for i in range(AUX_SH * 3)]).reshape(count, AUX_SH, 3),
        tri_id=rec["tri_id"].astype(np.int64),
        mu_init=col("mux", "muy", "muz"),
    )
    g.validate()
    return g


# -- OBJ ------------------------------------------------------------------------

def encode_obj(mesh: TriangleMesh) -> bytes:
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return ("\n".join(out) + "\n").encode("ascii")


def decode_obj(data: bytes) -> TriangleMesh:
    verts, faces = [], []
    for lineno, ln in enumerate(data.decode("utf-8").splitlines(), 1):
        parts = ln.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) for t in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise SceneError(f"malformed OBJ record on line {lineno}") from None
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj(path) -> TriangleMesh:
    return decode_obj(_read_bytes(path))


def write_obj(path, mesh: TriangleMesh):
    atomic_write(path, encode_obj(mesh))


# -- PFM ------------------------------------------------------------------------

def encode_pfm(img) -> bytes:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects an H x W x 3 image")
    h, w = img.shape[:2]
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1]).astype("<f4").tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"PF", b"Pf"):
        raise SceneError("malformed header: not a PFM file")
    channels = 3 if parts[0].strip() == b"PF" else 1
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise SceneError("malformed header: bad PFM size/scale") from None
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) != w * h * channels * 4:
        raise SceneError("malformed body: PFM size mismatch")
    img = np.frombuffer(body, dtype=dtype).reshape(h, w, channels)[::-1]
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img.astype(np.float32)


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read_bytes(path))


def write_pfm(path, img):
    atomic_write(path, encode_pfm(img))


def write_png(path, display_img):
    """Write an sRGB display image in [0, 1] as 8-bit PNG."""
    import io as _io

    from PIL import Image

    arr = np.clip(np.round(np.asarray(display_img) * 255.0), 0, 255).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# -- key-value text files ------------------------------------------------------------

def parse_kv(text: str) -> dict:
    out = {}
    for lineno, ln in enumerate(text.splitlines(), 1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise SceneError(f"malformed key-value line {lineno}: {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(d: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in d.items())


def save_scene(scene: HybridScene, path):
    """Write manifest + assets; the assets sit next to the manifest."""
    scene.validate()
    path = Path(path)
    stem = path.stem
    meta = {
        "format": MANIFEST_FORMAT,
        "gaussians": f"{stem}.ply",
        "mesh": f"{stem}.obj",
        "bound": "true" if scene.fully_bound else "false",
        "baked": "true" if scene.baked else "false",
        "sh_global": " ".join(repr(float(x)) for x in scene.light.sh_global.ravel()),
    }
    if scene.light.envmap is not None:
        meta["envmap"] = f"{stem}_env.pfm"
        write_pfm(path.parent / meta["envmap"], scene.light.envmap)
    atomic_write(path.parent / meta["gaussians"], encode_gaussians(scene.gaussians))
    write_obj(path.parent / meta["mesh"], scene.mesh)
    atomic_write(path, format_kv(meta).encode("utf-8"))


def load_scene(path) -> HybridScene:
    path = Path(path)
    meta = parse_kv(_read_bytes(path).decode("utf-8"))
    for key in ("gaussians", "mesh"):
        if key not in meta:
            raise SceneError(f"malformed manifest: missing '{key}'")
    gaussians = decode_gaussians(_read_bytes(path.parent / meta["gaussians"]))
    mesh = read_obj(path.parent / meta["mesh"])
    sh = np.zeros(AUX_SH * 3)
    if meta.get("sh_global"):
        try:
            vals = np.array([float(t) for t in meta["sh_global"].split()])
        except ValueError:
            raise SceneError("malformed manifest: sh_global") from None
        if vals.size != AUX_SH * 3:
            raise SceneError(f"malformed manifest: sh_global needs {AUX_SH * 3} values")
        sh = vals
    envmap = read_pfm(path.parent / meta["envmap"]) if meta.get("envmap") else None
    if meta.get("bound") == "true":
        if len(gaussians) != len(mesh.faces):
            raise SceneError(f"binding mismatch: {len(gaussians)} Gaussians for {len(mesh.faces)} faces")
        if not np.array_equal(gaussians.tri_id, np.arange(len(gaussians))):
            raise SceneError("binding mismatch: tri_id must equal the Gaussian index")
    scene = HybridScene(mesh, gaussians, EnvironmentLight(sh.reshape(AUX_SH, 3), envmap),
                        bvh_dirty=True, baked=meta.get("baked") == "true")
    scene.validate()
    return scene


# -- cameras and view sets ----------------------------------------------------------

_CAM_KEYS = ("R", "t", "fx", "fy", "cx", "cy", "width", "height", "near", "far")


def camera_to_dict(cam: Camera) -> dict:
    return {"R": cam.R.ravel().tolist(), "t": cam.t.tolist(), "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "width": int(cam.width), "height": int(cam.height),
            "near": cam.near, "far": cam.far}


def camera_from_dict(d: dict) -> Camera:
    missing = [k for k in _CAM_KEYS[:8] if k not in d]
    if missing:
        raise SceneError(f"camera entry missing {missing}")
    return Camera(R=np.array(d["R"], dtype=np.float64), t=np.array(d["t"], dtype=np.float64),
                  fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                  width=int(d["width"]), height=int(d["height"]),
                  near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)))


def write_cameras(path, cams):
    """JSON list of cameras (a single camera is written as a one-element list)."""
    atomic_write(path, json.dumps([camera_to_dict(c) for c in cams], indent=1).encode("utf-8"))


def read_cameras(path) -> list:
    try:
        data = json.loads(_read_bytes(path).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise SceneError(f"malformed camera file {path}: {e}") from None
    if isinstance(data, dict):
        data = [data]
    return [camera_from_dict(d) for d in data]


def save_views(views, directory):
    """``cameras.json`` plus ``view_###.pfm`` (linear) and ``mask_###.pfm``."""
    directory = Path(directory)
    for i, v in enumerate(views):
        write_pfm(directory / f"view_{i:03d}.pfm", v.image)
        write_pfm(directory / f"mask_{i:03d}.pfm", np.repeat(v.mask[..., None], 3, axis=2))
    write_cameras(directory / "cameras.json", [v.camera for v in views])


def load_views(directory) -> list:
    directory = Path(directory)
    cams = read_cameras(directory / "cameras.json")
    out = []
    for i, cam in enumerate(cams):
        img = read_pfm(directory / f"view_{i:03d}.pfm").astype(np.float64)
        mpath = directory / f"mask_{i:03d}.pfm"
        mask = (read_pfm(mpath)[..., 0] > 0.5).astype(np.float64) if mpath.exists() else \
            np.ones(img.shape[:2])
        out.append(TrainView(img, mask, cam))
    return out
