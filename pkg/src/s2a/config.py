"""Plain-text ``key = value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _ratios(text):
    vals = tuple(float(v) for v in text.replace(":", " ").replace(",", " ").split())
    if len(vals) != 3:
        raise ValueError("expected three ratios train:val:test")
    return vals


def _anchors(text):
    """``w x h @ level`` items separated by commas, e.g. ``32x32@3, 64x64@4``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        size, _, level = item.partition("@")
        w, _, h = size.partition("x")
        out.append((float(w), float(h or w), int(level)))
    return tuple(out)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


# key in file -> (attribute, parser)
KEYS = {
    "cube_dir": ("cube_dir", str),
    "annotation_dir": ("annotation_dir", str),
    "output_dir": ("output_dir", str),
    "checkpoint": ("checkpoint", str),
    "resume": ("resume", str),
    "k_se": ("k_se", int),
    "k_sa": ("k_sa", int),
    "percentile_low": ("percentile_low", float),
    "percentile_high": ("percentile_high", float),
    "lr": ("lr", float),
    "power": ("power", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "max_epoch": ("max_epoch", int),
    "batch": ("batch", int),
    "flip": ("flip", _bool),
    "seed": ("seed", int),
    "num_classes": ("num_classes", int),
    "anchors": ("anchors", _anchors),
    "stage_channels": ("stage_channels", _ints),
    "streams": ("streams", int),
    "second_stream": ("second_stream", str),
    "ssa.stages": ("ssa_stages", _ints),
    "ssa.r": ("ssa_r", int),
    "ssa.d_k": ("ssa_d_k", _opt_int),
    "ssa.d_v": ("ssa_d_v", _opt_int),
    "nms_iou": ("nms_iou", float),
    "conf_threshold": ("conf_threshold", float),
    "eval_conf_threshold": ("eval_conf_threshold", float),
    "split": ("split_ratios", _ratios),
    "split_attempts": ("split_attempts", int),
    "split_tolerance": ("split_tolerance", float),
    "synth.count": ("synth_count", int),
    "synth.height": ("synth_height", int),
    "synth.width": ("synth_width", int),
    "synth.bands": ("synth_bands", int),
    "synth.objects_min": ("synth_objects_min", int),
    "synth.objects_max": ("synth_objects_max", int),
    "gradcheck.seeds": ("gradcheck_seeds", int),
    "gradcheck.modules": ("gradcheck_modules", lambda t: tuple(t.replace(",", " ").split())),
    "gradcheck.tol": ("gradcheck_tol", float),
}


@dataclass(frozen=True)
class PipelineConfig:
    cube_dir: str = ""
    annotation_dir: str = ""
    output_dir: str = "out"
    checkpoint: str = ""
    resume: str = ""
    k_se: int = 3
    k_sa: int = 3
    percentile_low: float = 0.02
    percentile_high: float = 0.98
    lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_epoch: int = 50
    batch: int = 8
    flip: bool = True
    seed: int = 0
    num_classes: int = 2
    anchors: tuple = ()
    stage_channels: tuple = (4, 8, 16, 32, 64)
    streams: int = 2
    second_stream: str = "se"
    ssa_stages: tuple = (3, 4, 5)
    ssa_r: int = 2
    ssa_d_k: int | None = None
    ssa_d_v: int | None = None
    nms_iou: float = 0.6
    conf_threshold: float = 0.25
    eval_conf_threshold: float = 0.001
    split_ratios: tuple = (7.0, 1.0, 2.0)
    split_attempts: int = 100
    split_tolerance: float = 0.10
    synth_count: int = 80
    synth_height: int = 64
    synth_width: int = 64
    synth_bands: int = 16
    synth_objects_min: int = 2
    synth_objects_max: int = 3
    gradcheck_seeds: int = 20
    gradcheck_modules: tuple = ("ops", "conv", "ssa", "detector", "model")
    gradcheck_tol: float = 1e-4
    source: str = field(default="", compare=False)

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.max_epoch < 1:
            problems.append("max_epoch must be >= 1")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if any(r <= 0 for r in self.split_ratios):
            problems.append("split ratios must be positive")
        if not 0 < self.nms_iou <= 1:
            problems.append("nms_iou must be in (0, 1]")
        if self.second_stream not in ("se", "sa"):
            problems.append("second_stream must be 'se' or 'sa'")
        if self.ssa_d_v is not None:
            # the attention output is added back onto the stage input, so d_v is that input's width
            widths = sorted({self.stage_channels[s - 2] for s in self.ssa_stages if 2 <= s <= 6})
            if widths != [self.ssa_d_v]:
                problems.append(f"ssa.d_v = {self.ssa_d_v} must equal the input width of every SSA stage {widths}")
        if problems:
            raise ConfigError("; ".join(problems))

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def out(self, *parts):
        return Path(self.output_dir, *parts)

    def cubes(self):
        return Path(self.cube_dir) if self.cube_dir else self.out("cubes")

    def labels(self):
        return Path(self.annotation_dir) if self.annotation_dir else self.out("labels")

    def to_text(self):
        inv = {attr: key for key, (attr, _) in KEYS.items()}
        lines = []
        for f in fields(self):
            if f.name not in inv:
                continue
            v = getattr(self, f.name)
            if f.name == "anchors":
                v = ", ".join(f"{w:g}x{h:g}@{lv}" for w, h, lv in v)
            elif f.name == "split_ratios":
                v = ":".join(f"{r:g}" for r in v)
            elif isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{inv[f.name]} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def parse_config(text, source="<string>"):
    values, errors = {}, []
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, val = body.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            errors.append(f"{source}:{no}: expected 'key = value'")
            continue
        if key not in KEYS:
            errors.append(f"{source}:{no}: unknown key {key!r}")
            continue
        attr, conv = KEYS[key]
        try:
            values[attr] = conv(val)
        except ValueError as exc:
            errors.append(f"{source}:{no}: bad value for {key}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    return PipelineConfig(**values, source=source)


def load_config(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))
