"""Flat ``key = value`` configuration covering fitting, losses, rasterizer and eval.

Lines starting with ``#`` are comments. Unknown keys are rejected so typos do
not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ContractError, FormatError
from .fit import FitConfig
from .grad import FAMILIES
from .losses import LossWeights
from .metrics import MODES
from .raster import RasterSettings


@dataclass(frozen=True)
class EvalOptions:
    mode: str = "per-frame"
    align: bool = True
    statistic: str = "z"
    flow_scale: str = "point"
    alpha_threshold: float = 0.5
    moving_threshold: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"eval.mode must be one of {MODES}")
        if self.statistic not in ("z", "norm"):
            raise ContractError("eval.statistic must be 'z' or 'norm'")
        if self.flow_scale not in ("point", "own", "none"):
            raise ContractError("eval.flow_scale must be 'point', 'own' or 'none'")


@dataclass(frozen=True)
class Config:
    fit: FitConfig = field(default_factory=FitConfig)
    raster: RasterSettings = field(default_factory=RasterSettings)
    eval: EvalOptions = field(default_factory=EvalOptions)
    seed: int = 0
    threads: int = 1


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats3(s: str) -> tuple:
    vals = tuple(float(x) for x in s.replace(",", " ").split())
    if len(vals) != 3:
        raise ValueError("expected three numbers")
    return vals


def _freeze(s: str) -> frozenset:
    return frozenset(x.strip() for x in s.split(",") if x.strip())


# key -> (attribute, parser)
_FIT_KEYS = {
    "fit.iterations": ("iterations", int),
    "fit.scene_scale": ("scene_scale", float),
    "fit.lr_decay": ("lr_decay", str),
    "fit.lr_final_fraction": ("lr_final_fraction", float),
    "fit.beta1": ("beta1", float),
    "fit.beta2": ("beta2", float),
    "fit.adam_eps": ("adam_eps", float),
    "fit.init_depth": ("init_depth", float),
    "fit.sh_degree": ("sh_degree", int),
    "fit.freeze": ("freeze", _freeze),
    "fit.log_every": ("log_every", int),
}
_LR_KEYS = {f"fit.lr.{k}": k for k in FAMILIES}
_LOSS_KEYS = {f"loss.{f.name}": f.name for f in dataclasses.fields(LossWeights)}
_RASTER_KEYS = {
    "raster.eps_reg": ("eps_reg", float),
    "raster.cutoff_sigma": ("cutoff_sigma", float),
    "raster.z_near": ("z_near", float),
    "raster.t_min": ("t_min", float),
    "raster.background": ("background", _floats3),
}
_EVAL_KEYS = {
    "eval.mode": ("mode", str),
    "eval.align": ("align", _bool),
    "eval.statistic": ("statistic", str),
    "eval.flow_scale": ("flow_scale", str),
    "eval.alpha_threshold": ("alpha_threshold", float),
    "eval.moving_threshold": ("moving_threshold", float),
}
_TOP_KEYS = {"seed": int, "threads": int}

KEYS = tuple(_TOP_KEYS) + tuple(_FIT_KEYS) + tuple(_LR_KEYS) + tuple(_LOSS_KEYS) \
    + tuple(_RASTER_KEYS) + tuple(_EVAL_KEYS)


def parse_pairs(text: str, source="<config>") -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'", source)
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in KEYS:
            raise ContractError(f"{source} line {lineno}: unknown key {key!r}")
        if key in pairs:
            raise ContractError(f"{source} line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def from_pairs(pairs: dict, base: Config | None = None) -> Config:
    """Apply string ``pairs`` on top of ``base`` (defaults if omitted)."""
    base = base or Config()
    fit, lr, loss, raster, ev, top = {}, dict(base.fit.lr), {}, {}, {}, {}
    for key, value in pairs.items():
        try:
            if key in _TOP_KEYS:
                top[key] = _TOP_KEYS[key](value)
            elif key in _FIT_KEYS:
                name, conv = _FIT_KEYS[key]
                fit[name] = conv(value)
            elif key in _LR_KEYS:
                lr[_LR_KEYS[key]] = float(value)
            elif key in _LOSS_KEYS:
                loss[_LOSS_KEYS[key]] = float(value)
            elif key in _RASTER_KEYS:
                name, conv = _RASTER_KEYS[key]
                raster[name] = conv(value)
            elif key in _EVAL_KEYS:
                name, conv = _EVAL_KEYS[key]
                ev[name] = conv(value)
            else:
                raise ContractError(f"unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ContractError):
                raise
            raise ContractError(f"bad value for {key}: {value!r} ({exc})") from None
    weights = dataclasses.replace(base.fit.weights, **loss)
    fit_cfg = dataclasses.replace(base.fit, lr=lr, weights=weights, **fit)
    cfg = Config(
        fit=fit_cfg,
        raster=dataclasses.replace(base.raster, **raster),
        eval=dataclasses.replace(base.eval, **ev),
        seed=top.get("seed", base.seed),
        threads=top.get("threads", base.threads),
    )
    if cfg.threads < 1:
        raise ContractError("threads must be >= 1")
    return cfg


def parse(text: str, source="<config>") -> Config:
    return from_pairs(parse_pairs(text, source))


def load(path) -> Config:
    with open(path) as f:
        return parse(f.read(), path)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (frozenset, set)):
        return ",".join(sorted(value))
    if isinstance(value, tuple):
        return " ".join(repr(float(x)) for x in value)
    return str(value)


def to_pairs(cfg: Config) -> dict:
    if not isinstance(cfg.fit.init_depth, (int, float)):
        raise ContractError("per-pixel init_depth cannot be written to a config file")
    out = {k: _fmt(getattr(cfg, k)) for k in _TOP_KEYS}
    for key, (name, _) in _FIT_KEYS.items():
        val = getattr(cfg.fit, name)
        out[key] = _fmt(float(val) if name == "init_depth" else val)
    for key, fam in _LR_KEYS.items():
        out[key] = _fmt(float(cfg.fit.lr[fam]))
    for key, name in _LOSS_KEYS.items():
        out[key] = _fmt(float(getattr(cfg.fit.weights, name)))
    for key, (name, _) in _RASTER_KEYS.items():
        out[key] = _fmt(getattr(cfg.raster, name))
    for key, (name, _) in _EVAL_KEYS.items():
        out[key] = _fmt(getattr(cfg.eval, name))
    return out


def serialize(cfg: Config, include_threads: bool = True) -> str:
    """Commented ``key = value`` text; ``parse(serialize(c)) == c``.

    Run records written next to results drop ``threads``, which never changes
    an output, so they compare equal across worker counts.
    """
    lines = ["# splat4d configuration; unknown keys are rejected"]
    section = None
    for key, value in to_pairs(cfg).items():
        if key == "threads" and not include_threads:
            continue
        head = key.split(".")[0] if "." in key else "general"
        if head != section:
            lines.append(f"\n# {head}")
            section = head
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save(cfg: Config, path, include_threads: bool = True) -> None:
    with open(path, "w") as f:
        f.write(serialize(cfg, include_threads))

