"""Bit-exact file formats: binary array artifacts, PGM previews, SVG plots, CSV.

The artifact container is a magic line, a version line, a JSON metadata
block declaring named arrays with shapes, and a payload of little-endian
IEEE-754 float64 values in declared order. Round trips are bit-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict

import numpy as np

from .data import ImageDataset, PointDataset, TextureParams
from .diffusion import NoiseSchedule, make_schedule
from .gmm import GmmDistribution
from .mlp import MlpEpsModel

MAGIC = b"ABDS1"
VERSION = 1


class ArtifactError(ValueError):
    """Raised for malformed, truncated, or mislabeled artifact files."""


def save_artifact(path, arrays: dict, meta: dict | None = None):
    """Write named float64 arrays plus a JSON metadata block."""
    manifest = []
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        if a.ndim > 0 and not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        manifest.append({"name": str(name), "shape": list(a.shape), "dtype": "float64"})
        payload += a.tobytes()
    header = {"arrays": manifest, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(f"version {VERSION}\n".encode())
        fh.write(f"meta {len(blob)}\n".encode())
        fh.write(blob)
        fh.write(bytes(payload))


def load_artifact(path):
    """Read back (arrays, meta); rejects bad magic and truncated payloads."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != MAGIC:
            raise ArtifactError(f"{path}: bad magic")
        vline = fh.readline().split()
        if len(vline) != 2 or vline[0] != b"version" or int(vline[1]) != VERSION:
            raise ArtifactError(f"{path}: unsupported version line")
        mline = fh.readline().split()
        if len(mline) != 2 or mline[0] != b"meta":
            raise ArtifactError(f"{path}: missing meta length")
        blob = fh.read(int(mline[1]))
        if len(blob) != int(mline[1]):
            raise ArtifactError(f"{path}: truncated metadata")
        header = json.loads(blob.decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape)) * 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ArtifactError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ArtifactError(f"{path}: trailing bytes after payload")
    return arrays, header["meta"]


# --- model / schedule / dataset containers ---------------------------------


def _schedule_meta(sched: NoiseSchedule) -> dict:
    return {
        "kind": sched.kind,
        "T": sched.T,
        "terminal_threshold": sched.terminal_threshold,
    }


def save_checkpoint(path, model: MlpEpsModel, sched: NoiseSchedule, extra: dict | None = None):
    arrays = {"beta": sched.beta}
    for name, w in zip(model.weight_names(), model.weights):
        arrays[name] = w
    meta = {
        "kind": "mlp_eps",
        "dim": model.dim,
        "hidden": list(model.hidden),
        "activation": model.activation,
        "schedule": _schedule_meta(sched),
        "extra": extra or {},
    }
    save_artifact(path, arrays, meta)


def _schedule_from(arrays, meta) -> NoiseSchedule:
    beta = arrays["beta"]
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    posterior_var = beta * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    thr = meta["schedule"]["terminal_threshold"]
    return NoiseSchedule(
        kind=meta["schedule"]["kind"],
        T=int(meta["schedule"]["T"]),
        beta=beta,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        terminal_threshold=thr,
        terminal_warning=bool(alpha_bar[-1] > thr),
    )


def load_checkpoint(path):
    arrays, meta = load_artifact(path)
    if meta.get("kind") != "mlp_eps":
        raise ArtifactError(f"{path}: not a model checkpoint")
    model = MlpEpsModel(
        dim=int(meta["dim"]),
        hidden=tuple(meta["hidden"]),
        activation=meta["activation"],
        weights=[],
    )
    model.weights = [arrays[name] for name in model.weight_names()]
    return model, _schedule_from(arrays, meta), meta.get("extra", {})


def save_image_dataset(path, ds: ImageDataset):
    params = asdict(ds.params)
    save_artifact(
        path,
        {"images": ds.images, "masks": ds.masks.astype(np.float64)},
        {"kind": "texture_dataset", "params": params, "seed": ds.seed},
    )


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def load_image_dataset(path) -> ImageDataset:
    arrays, meta = load_artifact(path)
    if meta.get("kind") != "texture_dataset":
        raise ArtifactError(f"{path}: not an image dataset")
    params = {k: _tupled(v) for k, v in meta["params"].items()}
    return ImageDataset(
        images=arrays["images"],
        masks=arrays["masks"].astype(np.int64),
        params=TextureParams(**params),
        seed=int(meta["seed"]),
    )


def save_point_dataset(path, ds: PointDataset):
    save_artifact(
        path,
        {
            "samples": ds.samples,
            "weights": ds.gmm.weights,
            "means": ds.gmm.means,
            "variances": ds.gmm.variances,
        },
        {"kind": "point_dataset", "seed": ds.seed},
    )


def load_point_dataset(path) -> PointDataset:
    arrays, meta = load_artifact(path)
    if meta.get("kind") != "point_dataset":
        raise ArtifactError(f"{path}: not a point dataset")
    gmm = GmmDistribution(arrays["weights"], arrays["means"], arrays["variances"])
    return PointDataset(samples=arrays["samples"], gmm=gmm, seed=int(meta["seed"]))


# --- previews, plots, tables ------------------------------------------------


def write_pgm(path, grid, lo: float = 0.0, hi: float | None = None):
    """8-bit binary graymap preview of a score grid (linear [lo, hi] mapping)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("pgm preview needs a 2-D grid")
    if hi is None:
        hi = float(g.max())
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.round(255.0 * (np.clip(g, lo, hi) - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ArtifactError(f"{path}: not a binary graymap")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        if maxval != 255:
            raise ArtifactError(f"{path}: unsupported max value {maxval}")
        data = fh.read(w * h)
        if len(data) != w * h:
            raise ArtifactError(f"{path}: truncated graymap")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_line_plot(path, xs, series: dict, title="", xlabel="", ylabel=""):
    """Minimal deterministic SVG 1.1 polyline chart (one line per series)."""
    xs = [float(v) for v in xs]
    width, height, ml, mr, mt, mb = 640, 420, 60, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    ys_all = [float(v) for vals in series.values() for v in vals]
    if not xs or not ys_all:
        raise ValueError("empty plot data")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width//2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="black"/>',
        f'<text x="{ml+pw//2}" y="{height-12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{mt+ph//2}" font-size="12" '
        f'transform="rotate(-90 16 {mt+ph//2})" text-anchor="middle">{ylabel}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        parts.append(
            f'<text x="{px(xv):.1f}" y="{mt+ph+16}" text-anchor="middle" '
            f'font-size="10">{xv:.6g}</text>'
        )
        parts.append(
            f'<text x="{ml-6}" y="{py(yv):.1f}" text-anchor="end" '
            f'font-size="10">{yv:.6g}</text>'
        )
    for i, (name, vals) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(float(y)):.2f}" for x, y in zip(xs, vals))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        ly = mt + 14 + 16 * i
        parts.append(
            f'<line x1="{ml+pw+10}" y1="{ly-4}" x2="{ml+pw+30}" y2="{ly-4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{ml+pw+34}" y="{ly}" font-size="11">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
