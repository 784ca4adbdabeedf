"""FieldPack on-disk format and analytic synthetic datasets.

A pack directory holds ``manifest.txt`` (UTF-8, ``key = value`` lines) and five
row-major little-endian binaries::

    x_bd.f32   [n_bd, d]        input point coordinates
    id.u8      [n_bd]           point identifier (0 boundary, 1 domain)
    phi0.f32   [n_bd, n_phi]    initial field at the input points
    x_q.f32    [n_q, d]         query coordinates
    phi.f32    [t, n_q, n_phi]  target series at t0 + i*dt, i = 1..t

The generators produce exact solutions of the inviscid continuity and momentum
equations on the unit square, with channels ordered ``u_x, u_y, p, rho``.
"""

from __future__ import annotations

import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CHANNELS = ("u_x", "u_y", "p", "rho")

_ARRAYS = {
    # name: (file, dtype)
    "x_bd": ("x_bd.f32", "<f4"),
    "id": ("id.u8", "u1"),
    "phi0": ("phi0.f32", "<f4"),
    "x_q": ("x_q.f32", "<f4"),
    "phi": ("phi.f32", "<f4"),
}


class FieldPackError(Exception):
    """Base class for pack read/write failures."""


class PackValidationError(FieldPackError):
    pass


class MissingFileError(FieldPackError):
    pass


class LengthMismatchError(FieldPackError):
    pass


class UnsupportedVersionError(FieldPackError):
    pass


@dataclass
class FieldPack:
    x_bd: np.ndarray
    id: np.ndarray
    phi0: np.ndarray
    x_q: np.ndarray
    phi: np.ndarray
    dt: float
    channel_names: tuple[str, ...] = CHANNELS
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.x_bd.shape[1]

    @property
    def n_bd(self) -> int:
        return self.x_bd.shape[0]

    @property
    def n_q(self) -> int:
        return self.x_q.shape[0]

    @property
    def t(self) -> int:
        return self.phi.shape[0]

    @property
    def n_phi(self) -> int:
        return self.phi0.shape[1]

    def validate(self) -> None:
        x_bd, x_q = np.asarray(self.x_bd), np.asarray(self.x_q)
        if x_bd.ndim != 2 or x_q.ndim != 2 or x_bd.shape[1] != x_q.shape[1]:
            raise PackValidationError(f"coordinate shapes {x_bd.shape}, {x_q.shape} inconsistent")
        if not (np.isfinite(x_bd).all() and np.isfinite(x_q).all()):
            raise PackValidationError("non-finite coordinates")
        n_bd, n_q = x_bd.shape[0], x_q.shape[0]
        ids = np.asarray(self.id)
        if ids.shape != (n_bd,):
            raise PackValidationError(f"id shape {ids.shape} != ({n_bd},)")
        if ids.size and (ids.min() < 0 or ids.max() > 255 or not np.all(ids == np.round(ids))):
            raise PackValidationError("id values must be integers in 0..255")
        if self.phi0.ndim != 2 or self.phi0.shape[0] != n_bd:
            raise PackValidationError(f"phi0 shape {self.phi0.shape} does not match {n_bd} points")
        n_phi = self.phi0.shape[1]
        if self.phi.ndim != 3 or self.phi.shape[1:] != (n_q, n_phi):
            raise PackValidationError(f"phi shape {self.phi.shape} != (t, {n_q}, {n_phi})")
        if self.phi.shape[0] < 1:
            raise PackValidationError("need at least one time step")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise PackValidationError(f"dt must be positive, got {self.dt}")
        names = tuple(self.channel_names)
        if len(names) != n_phi or len(set(names)) != n_phi:
            raise PackValidationError(f"channel_names {names} must be {n_phi} unique labels")
        for nm in names:
            if not nm or any(c in nm for c in ",=\n"):
                raise PackValidationError(f"bad channel name {nm!r}")


# -- serialization --------------------------------------------------------

def _manifest_text(p: FieldPack) -> str:
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"d = {p.d}",
        f"n_bd = {p.n_bd}",
        f"n_q = {p.n_q}",
        f"t = {p.t}",
        f"n_phi = {p.n_phi}",
        f"dt = {float(p.dt)!r}",
        f"channel_names = {','.join(p.channel_names)}",
    ]
    lines += [f"file.{k} = {fname}" for k, (fname, _) in _ARRAYS.items()]
    return "\n".join(lines) + "\n"


def write_fieldpack(sample: FieldPack, directory) -> None:
    """Write atomically: everything goes to a sibling temp dir that is renamed."""
    sample.validate()
    target = Path(directory)
    parent = target.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=parent))
    except OSError as exc:
        raise OSError(f"cannot create pack directory {target}: {exc}") from exc
    try:
        arrays = {
            "x_bd": sample.x_bd,
            "id": sample.id,
            "phi0": sample.phi0,
            "x_q": sample.x_q,
            "phi": sample.phi,
        }
        for k, (fname, dtype) in _ARRAYS.items():
            np.ascontiguousarray(np.asarray(arrays[k]).astype(dtype)).tofile(tmp / fname)
        with open(tmp / "manifest.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_manifest_text(sample))
        if target.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{target.name}.old.", dir=parent))
            os.replace(target, old / "pack")
            os.replace(tmp, target)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, target)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise OSError(f"failed writing pack {target}: {exc}") from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _parse_manifest(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise PackValidationError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_fieldpack(directory) -> FieldPack:
    root = Path(directory)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise MissingFileError(f"missing manifest: {mpath}")
    m = _parse_manifest(mpath)
    try:
        version = int(m["format_version"])
    except (KeyError, ValueError):
        raise PackValidationError(f"{mpath}: bad or missing format_version") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{mpath}: unsupported format_version {version} (expected {FORMAT_VERSION})")
    try:
        d, n_bd, n_q, t, n_phi = (int(m[k]) for k in ("d", "n_bd", "n_q", "t", "n_phi"))
        dt = float(m["dt"])
        names = tuple(m["channel_names"].split(","))
    except (KeyError, ValueError) as exc:
        raise PackValidationError(f"{mpath}: bad manifest field ({exc})") from None
    shapes = {"x_bd": (n_bd, d), "id": (n_bd,), "phi0": (n_bd, n_phi), "x_q": (n_q, d), "phi": (t, n_q, n_phi)}
    arrays = {}
    for k, (default, dtype) in _ARRAYS.items():
        fname = m.get(f"file.{k}", default)
        fpath = root / fname
        if not fpath.is_file():
            raise MissingFileError(f"missing array file {fpath}")
        itemsize = np.dtype(dtype).itemsize
        expected = itemsize * int(np.prod(shapes[k]))
        actual = fpath.stat().st_size
        if actual != expected:
            raise LengthMismatchError(f"{fpath}: {actual} bytes, expected {expected} for shape {shapes[k]}")
        raw = np.fromfile(fpath, dtype=dtype).reshape(shapes[k])
        arrays[k] = raw.astype(np.int64) if k == "id" else raw.astype(np.float64)
    pack = FieldPack(dt=dt, channel_names=names, **arrays)
    pack.validate()
    return pack


# -- synthetic generators -------------------------------------------------

def sample_points(rng: np.random.Generator, n_bd: int, n_q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform points in the unit square; the first 4*ceil(sqrt(n_bd)) inputs
    (capped at n_bd) are snapped to the edges, cycling bottom/right/top/left."""
    x_bd = rng.uniform(0.0, 1.0, size=(n_bd, 2))
    n_b = min(n_bd, 4 * math.ceil(math.sqrt(n_bd)))
    for j in range(n_b):
        edge = j % 4
        if edge == 0:
            x_bd[j, 1] = 0.0
        elif edge == 1:
            x_bd[j, 0] = 1.0
        elif edge == 2:
            x_bd[j, 1] = 1.0
        else:
            x_bd[j, 0] = 0.0
    ids = np.ones(n_bd, dtype=np.int64)
    ids[:n_b] = 0
    x_q = rng.uniform(0.0, 1.0, size=(n_q, 2))
    return x_bd, ids, x_q


def uniform_fields(x, t, u=(1.0, 0.5), p=1.0, rho=1.0):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[:-1] + (4,))
    out[..., 0], out[..., 1], out[..., 2], out[..., 3] = u[0], u[1], p, rho
    return out


def gaussian_fields(x, t, u0=(0.5, 0.25), sigma=0.15, x0=(0.35, 0.4), p=1.0):
    """rho = exp(-|x - x0 - u0 t|^2 / (2 sigma^2)), u = u0, p constant."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(x0) + np.asarray(u0) * t
    r2 = ((x - c) ** 2).sum(axis=-1)
    out = np.empty(x.shape[:-1] + (4,))
    out[..., 0], out[..., 1], out[..., 2] = u0[0], u0[1], p
    out[..., 3] = np.exp(-r2 / (2.0 * sigma**2))
    return out


def vortex_fields(x, t, strength=5.0, gamma=1.4, radius=0.1, center=(0.4, 0.45), u_inf=(0.5, 0.25)):
    """Isentropic vortex advected by a uniform stream (rho_inf = p_inf = 1).

    The classic unit-radius solution evaluated at (x - center - u_inf t) / radius;
    velocity and thermodynamic perturbations are unchanged by the length scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    xb = (x[..., 0] - center[0] - u_inf[0] * t) / radius
    yb = (x[..., 1] - center[1] - u_inf[1] * t) / radius
    r2 = xb * xb + yb * yb
    amp = strength / (2.0 * math.pi) * np.exp(0.5 * (1.0 - r2))
    temp = 1.0 - (gamma - 1.0) * strength**2 / (8.0 * gamma * math.pi**2) * np.exp(1.0 - r2)
    rho = temp ** (1.0 / (gamma - 1.0))
    out = np.empty(x.shape[:-1] + (4,))
    out[..., 0] = u_inf[0] - amp * yb
    out[..., 1] = u_inf[1] + amp * xb
    out[..., 2] = rho**gamma
    out[..., 3] = rho
    return out


def _pack_from_fields(fn, n_bd, n_q, t_steps, dt, seed, meta) -> FieldPack:
    if min(n_bd, n_q, t_steps) < 1:
        raise ValueError("n_bd, n_q and t_steps must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    x_bd, ids, x_q = sample_points(rng, n_bd, n_q)
    phi0 = fn(x_bd, 0.0)
    phi = np.stack([fn(x_q, (i + 1) * dt) for i in range(t_steps)])
    return FieldPack(x_bd=x_bd, id=ids, phi0=phi0, x_q=x_q, phi=phi, dt=float(dt), meta=meta)


def gen_uniform_flow(n_bd, n_q, t_steps, dt, seed) -> FieldPack:
    return _pack_from_fields(uniform_fields, n_bd, n_q, t_steps, dt, seed, {"case": "uniform"})


def gen_advecting_gaussian(n_bd, n_q, t_steps, dt, u0=(0.5, 0.25), sigma=0.15, seed=0, x0=(0.35, 0.4)) -> FieldPack:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    u0 = tuple(float(v) for v in u0)

    def fn(x, t):
        return gaussian_fields(x, t, u0=u0, sigma=sigma, x0=x0)

    return _pack_from_fields(fn, n_bd, n_q, t_steps, dt, seed, {"case": "gaussian", "u0": u0, "sigma": sigma, "x0": x0})


def gen_isentropic_vortex(n_bd, n_q, t_steps, dt, strength=5.0, gamma=1.4, seed=0, radius=0.1) -> FieldPack:
    if not strength > 0:
        raise ValueError("strength must be positive")
    if not gamma > 1:
        raise ValueError("gamma must exceed 1")

    def fn(x, t):
        return vortex_fields(x, t, strength=strength, gamma=gamma, radius=radius)

    meta = {"case": "vortex", "strength": strength, "gamma": gamma, "radius": radius}
    return _pack_from_fields(fn, n_bd, n_q, t_steps, dt, seed, meta)
