"""Pipeline configuration: TOML sections per stage, strict keys, ``auto`` defaults."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .synth import GROUND

AUTO = "auto"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlobConfig:
    min_blob_size: int | str = AUTO  # 200 px at 640x480, scaled with resolution
    smoothing_radius: int | str = AUTO  # 4 px at 640 columns, scaled with width
    rejected_classes: tuple = (GROUND,)


@dataclass(frozen=True)
class GraphConfig:
    construction: str = "3d"  # or "image"
    merge_distance: float = 10.0
    edge_distance: float = 15.0
    pixel_edge_distance: float = 40.0
    query_frames: int = 5


@dataclass(frozen=True)
class WalkConfig:
    num_walks: int = 200
    walk_depth: int = 4
    forbid_backtrack: bool = True
    dedupe_walks: bool = False
    rng_seed: int = 0


@dataclass(frozen=True)
class MatchConfig:
    k: int = 5


@dataclass(frozen=True)
class RansacConfig:
    t_c: float = 10.0
    iterations: int = 500
    seed: int = 0
    min_inliers: int = 4


@dataclass(frozen=True)
class BackendConfig:
    odom_sigma_t: float = 0.1
    odom_sigma_r: float = 0.01
    vertex_sigma: float = 1.0
    match_sigma: float = 2.0
    max_iter: int = 20
    tol: float = 1e-10


@dataclass(frozen=True)
class EvalConfig:
    t_L: float | str = AUTO  # twice the merge distance
    t_c_sweep: tuple = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0)
    success_max_distance: float = 50.0
    success_bins: int = 50


@dataclass(frozen=True)
class PipelineConfig:
    blobs: BlobConfig = field(default_factory=BlobConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    walks: WalkConfig = field(default_factory=WalkConfig)
    matching: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def localization_threshold(self):
        t = self.eval.t_L
        return 2.0 * self.graph.merge_distance if t == AUTO else float(t)

    def with_overrides(self, overrides):
        """``overrides`` maps ``"section.key"`` to values (strings are parsed as TOML values)."""
        data = to_dict(self)
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            if isinstance(value, str):
                value = _parse_value(dotted, value)
            data.setdefault(section, {})[key] = value
        return from_dict(data)


def _parse_value(name, text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        # bare words such as auto or 3d
        return text


_POSITIVE = {"merge_distance", "edge_distance", "pixel_edge_distance", "t_c", "odom_sigma_t", "odom_sigma_r",
             "vertex_sigma", "match_sigma", "tol", "success_max_distance"}
_AT_LEAST_ONE = {"query_frames", "num_walks", "walk_depth", "k", "iterations", "max_iter", "success_bins"}


def _coerce(section, f, value):
    name = f"{section}.{f.name}"
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list")
        kind = float if section == "eval" else int
        try:
            out = tuple(kind(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: list elements must be numbers") from None
        if name == "eval.t_c_sweep":
            if not out or any(b <= a for a, b in zip(out, out[1:])) or out[0] < 0:
                raise ConfigError(f"{name}: must be non-empty, non-negative and ascending")
        return out
    if value == AUTO and default == AUTO:
        return AUTO
    if f.name == "construction":
        if value not in ("3d", "image"):
            raise ConfigError(f"{name}: expected '3d' or 'image'")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number")
    is_int = isinstance(default, int) or f.name in ("min_blob_size", "smoothing_radius")
    if is_int:
        if int(value) != value:
            raise ConfigError(f"{name}: expected an integer")
        value = int(value)
    else:
        value = float(value)
    if f.name in _POSITIVE and not value > 0:
        raise ConfigError(f"{name}: must be positive")
    if f.name in _AT_LEAST_ONE and value < 1:
        raise ConfigError(f"{name}: must be >= 1")
    if f.name in ("min_blob_size",) and value < 1:
        raise ConfigError(f"{name}: must be >= 1")
    if f.name in ("smoothing_radius", "min_inliers", "rng_seed", "seed") and value < 0:
        raise ConfigError(f"{name}: must be >= 0")
    if f.name == "t_L" and not value > 0:
        raise ConfigError(f"{name}: must be positive")
    return value


def from_dict(data):
    sections = {f.name: f for f in fields(PipelineConfig)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for sname, sfield in sections.items():
        cls = sfield.default_factory
        values = data.get(sname, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{sname}] must be a table")
        known = {f.name: f for f in fields(cls)}
        bad = set(values) - set(known)
        if bad:
            raise ConfigError(f"unknown key(s) in [{sname}]: {', '.join(sorted(bad))}")
        kwargs[sname] = cls(**{k: _coerce(sname, known[k], v) for k, v in values.items()})
    return PipelineConfig(**kwargs)


def to_dict(cfg):
    return {f.name: asdict(getattr(cfg, f.name)) for f in fields(cfg)}


def load_config(path=None, text=None):
    if path is not None:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    if text is None:
        return PipelineConfig()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(data)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    return repr(v)


def dump_config(cfg):
    """TOML text that ``load_config`` turns back into an equal config."""
    lines = []
    for section, values in to_dict(cfg).items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format_value(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)

