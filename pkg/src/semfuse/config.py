"""Run configuration: a flat ``key = value`` text file.

Every key is validated before any computation starts; unknown keys are
rejected. Command-line ``--set key=value`` pairs override file values.

Keys and defaults::

    seed = 0
    threads = 1
    tracking.mode = file            # file | icp
    tracking.levels = 3
    tracking.iters = 10 5 4         # coarse to fine
    tracking.dist_gate_m = 0.10
    tracking.angle_gate_deg = 30
    tracking.convergence = 1e-5
    volume.dims = 256 256 256
    volume.voxel_size = 0.01
    volume.origin = auto            # or x y z (world-frame corner, meters)
    volume.truncation = auto        # 4 * voxel_size
    volume.w_max = 64
    fusion.stride = 12
    fusion.tau_label = auto         # truncation / 2
    crf.w1 = 3, crf.w2 = 5, crf.w3 = 3
    crf.theta_p = 0.05, crf.theta_pI = 0.08, crf.theta_I = 20
    crf.theta_pn = 0.05, crf.theta_n = 0.3
    crf.iters = 5
    crf.exact_threshold = 20000
    crf.trunc_radius_factor = 4
    octree.max_depth = 10
    octree.leaf_capacity = 16
    eval.ignore_label = 255
    paths.<name> = <path>           # free-form path defaults for the CLI

With ``volume.origin = auto`` the dataset's ``bounds.txt`` sets the volume
extent (``volume.dims`` is then derived from it unless given explicitly);
without bounds the volume is centered on the first frame's points.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .crf import CrfParams
from .tracking import IcpConfig

__all__ = ["ConfigError", "VolumeConfig", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class VolumeConfig:
    dims: tuple[int, int, int] = (256, 256, 256)
    dims_explicit: bool = False
    voxel_size: float = 0.01
    origin: tuple[float, float, float] | None = None
    truncation: float | None = None
    w_max: float = 64.0


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    tracking_mode: str = "file"
    icp: IcpConfig = IcpConfig()
    volume: VolumeConfig = VolumeConfig()
    fusion_stride: int = 12
    tau_label: float | None = None
    crf: CrfParams = CrfParams()
    octree_max_depth: int = 10
    octree_leaf_capacity: int = 16
    ignore_label: int = 255
    paths: dict = dataclasses.field(default_factory=dict)


_CRF_KEYS = {
    "crf.w1": "w1", "crf.w2": "w2", "crf.w3": "w3",
    "crf.theta_p": "theta_p", "crf.theta_pI": "theta_pI", "crf.theta_I": "theta_I",
    "crf.theta_pn": "theta_pn", "crf.theta_n": "theta_n",
    "crf.iters": "iterations", "crf.exact_threshold": "exact_threshold",
    "crf.trunc_radius_factor": "trunc_radius_factor",
}
_KNOWN = {
    "seed", "threads", "tracking.mode", "tracking.levels", "tracking.iters",
    "tracking.dist_gate_m", "tracking.angle_gate_deg", "tracking.convergence",
    "volume.dims", "volume.voxel_size", "volume.origin", "volume.truncation", "volume.w_max",
    "fusion.stride", "fusion.tau_label", "octree.max_depth", "octree.leaf_capacity",
    "eval.ignore_label", *_CRF_KEYS,
}


def _numbers(text: str, cast=float) -> list:
    return [cast(v) for v in text.replace(",", " ").split()]


def parse_config(entries: dict[str, tuple[str, str]]) -> RunConfig:
    """Build a validated config from ``{key: (value, where)}``; ``where`` names
    the source line for error messages."""
    for key, (_, where) in entries.items():
        if key not in _KNOWN and not key.startswith("paths."):
            raise ConfigError(f"{where}: unknown config key {key!r}")

    def get(key, cast, default):
        if key not in entries:
            return default
        value, where = entries[key]
        try:
            return cast(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: invalid value {value!r} for {key}: {exc}") from None

    def auto(cast):
        return lambda v: None if v.strip() == "auto" else cast(v)

    def check(key, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except ValueError as exc:
            where = entries[key][1] if key in entries else "config"
            raise ConfigError(f"{where}: {exc}") from None

    mode = get("tracking.mode", str, "file")
    if mode not in ("file", "icp"):
        raise ConfigError(f"{entries['tracking.mode'][1]}: tracking.mode must be 'file' or 'icp'")
    levels = get("tracking.levels", int, 3)
    default_iters = (10, 5, 4) if levels == 3 else tuple([10] * levels)
    icp = check("tracking.iters", lambda: IcpConfig(
        levels=levels,
        iterations=tuple(get("tracking.iters", lambda v: _numbers(v, int), default_iters)),
        dist_gate=get("tracking.dist_gate_m", float, 0.10),
        angle_gate_deg=get("tracking.angle_gate_deg", float, 30.0),
        convergence=get("tracking.convergence", float, 1e-5)))

    def dims(v):
        d = tuple(_numbers(v, int))
        if len(d) != 3 or min(d) < 2:
            raise ValueError("need three sizes >= 2")
        return d

    def origin(v):
        o = tuple(_numbers(v))
        if len(o) != 3:
            raise ValueError("need three coordinates")
        return o

    voxel = get("volume.voxel_size", float, 0.01)
    trunc = get("volume.truncation", auto(float), None)
    if voxel <= 0 or (trunc is not None and trunc <= 0):
        raise ConfigError("config: volume.voxel_size and volume.truncation must be positive")
    volume = VolumeConfig(
        dims=get("volume.dims", dims, (256, 256, 256)),
        dims_explicit="volume.dims" in entries,
        voxel_size=voxel,
        origin=get("volume.origin", auto(origin), None),
        truncation=trunc,
        w_max=get("volume.w_max", float, 64.0))

    crf_kw = {}
    for key, field in _CRF_KEYS.items():
        cast = int if field in ("iterations", "exact_threshold") else float
        if key in entries:
            crf_kw[field] = get(key, cast, None)
    crf_key = next((k for k in ("crf.iters", *_CRF_KEYS) if k in entries), "crf.iters")
    crf = check(crf_key, lambda: CrfParams(**crf_kw))

    stride = get("fusion.stride", int, 12)
    if stride < 1:
        raise ConfigError(f"{entries['fusion.stride'][1]}: fusion.stride must be >= 1")
    threads = get("threads", int, 1)
    if threads < 1:
        raise ConfigError(f"{entries['threads'][1]}: threads must be >= 1")
    max_depth = get("octree.max_depth", int, 10)
    capacity = get("octree.leaf_capacity", int, 16)
    if max_depth < 0 or capacity < 1:
        raise ConfigError("config: octree.max_depth must be >= 0 and octree.leaf_capacity >= 1")

    return RunConfig(
        seed=get("seed", int, 0),
        threads=threads,
        tracking_mode=mode,
        icp=icp,
        volume=volume,
        fusion_stride=stride,
        tau_label=get("fusion.tau_label", auto(float), None),
        crf=crf,
        octree_max_depth=max_depth,
        octree_leaf_capacity=capacity,
        ignore_label=get("eval.ignore_label", int, 255),
        paths={k[6:]: v for k, (v, _) in entries.items() if k.startswith("paths.")},
    )


def read_entries(path) -> dict[str, tuple[str, str]]:
    entries = {}
    text = Path(path).read_text()
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{path}:{no}: duplicate key {key!r}")
        entries[key] = (value, f"{path}:{no}")
    return entries


def load_config(path=None, overrides: list[str] | dict | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``key=value`` overrides."""
    entries = read_entries(path) if path is not None else {}
    if isinstance(overrides, dict):
        overrides = [f"{k}={v}" for k, v in overrides.items()]
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        entries[key] = (value, f"override {key}")
    return parse_config(entries)


def volume_geometry(cfg: VolumeConfig, bounds=None, first_points=None):
    """Resolve (dims, origin) from the config, dataset bounds or first-frame points."""
    vs = cfg.voxel_size
    if cfg.origin is not None:
        return cfg.dims, np.asarray(cfg.origin, dtype=np.float64)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if cfg.dims_explicit:
            center = 0.5 * (lo + hi)
            return cfg.dims, center - 0.5 * np.array(cfg.dims) * vs
        dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / vs - 1e-9), 2))
        return dims, lo
    if first_points is None or len(first_points) == 0:
        raise ConfigError("cannot place the volume: no volume.origin, no bounds.txt and no valid depth")
    center = np.asarray(first_points).mean(axis=0)
    return cfg.dims, center - 0.5 * np.array(cfg.dims) * vs
