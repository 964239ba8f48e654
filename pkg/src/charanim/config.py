"""Pipeline configuration: a flat ``key = value`` file plus command-line overrides."""
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .dcam import FusionWeights
from .diffusion import ScheduleError, make_schedule
from .pacm import OptimizerConfig


class ConfigError(ValueError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _words(s):
    if isinstance(s, (list, tuple)):
        return tuple(s)
    return tuple(w.strip() for w in str(s).split(",") if w.strip())


def _optional_str(s):
    s = str(s).strip()
    return s or None


def _choice(*options):
    def parse(s):
        s = str(s).strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


# dotted key -> (attribute, parser, default)
KEYS = {
    "prompt": ("prompt", str, ""),
    "image": ("image", _optional_str, None),
    "pose": ("pose", _optional_str, None),
    "source_mask": ("source_mask", _optional_str, None),
    "subject_tokens": ("subject_tokens", _words, ()),
    "output_dir": ("output_dir", str, "animation"),
    "embedding_cache": ("embedding_cache", _optional_str, None),
    "frames": ("frames", int, 16),
    "jobs": ("jobs", int, 1),
    "keep_partial": ("keep_partial", _bool, False),
    "pata.transition_frames": ("transition_frames", int, 4),
    "pata.easing": ("easing", _choice("linear", "smoothstep"), "linear"),
    "pata.allow_rotation": ("allow_rotation", _bool, False),
    "pata.per_frame_alignment": ("per_frame_alignment", _bool, False),
    "schedule.kind": ("schedule_kind", _choice("linear", "scaled_linear"), "scaled_linear"),
    "schedule.beta_start": ("beta_start", float, 0.00085),
    "schedule.beta_end": ("beta_end", float, 0.012),
    "schedule.train_steps": ("train_steps", int, 1000),
    "schedule.inference_steps": ("inference_steps", int, 50),
    "guidance.inversion": ("inversion_guidance", float, 1.0),
    "guidance.generation": ("generation_guidance", float, 7.5),
    "dcam.enabled": ("dcam_enabled", _bool, True),
    "dcam.lambda1": ("lambda1", float, 0.7),
    "dcam.lambda2": ("lambda2", float, 0.15),
    "dcam.lambda3": ("lambda3", float, 0.15),
    "mgdm.enabled": ("mgdm_enabled", _bool, True),
    "mgdm.threshold": ("mask_threshold", float, 0.35),
    "mgdm.sites": ("mask_sites", _choice("down", "mid", "up"), "up"),
    "mgdm.min_resolution": ("mask_min_resolution", int, 16),
    "mgdm.drop_masked_tokens": ("drop_masked_tokens", _bool, True),
    "maps.head_mean": ("head_mean", _bool, True),
    "pacm.role": ("pacm_role", _choice("conditional", "unconditional"), "conditional"),
    "pacm.eta": ("eta", float, 1e-2),
    "pacm.inner_iterations": ("inner_iterations", int, 5),
    "pacm.early_stop_loss": ("early_stop_loss", float, 1e-5),
    "pose.cond_scale": ("cond_scale", float, 1.0),
    "pose.joint_radius": ("joint_radius", float, 4.0),
    "pose.limb_width": ("limb_width", float, 4.0),
    "backend.kind": ("backend_kind", _choice("toy", "adapter"), "toy"),
    "backend.seed": ("seed", int, 0),
}
PATH_KEYS = ("image", "pose", "source_mask")
# settings that never influence the produced frames
RUN_ONLY = ("output_dir", "embedding_cache", "jobs", "keep_partial")


@dataclass(frozen=True)
class PipelineConfig:
    prompt: str = ""
    image: str = None
    pose: str = None
    source_mask: str = None
    subject_tokens: tuple = ()
    output_dir: str = "animation"
    embedding_cache: str = None
    frames: int = 16
    jobs: int = 1
    keep_partial: bool = False
    transition_frames: int = 4
    easing: str = "linear"
    allow_rotation: bool = False
    per_frame_alignment: bool = False
    schedule_kind: str = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012
    train_steps: int = 1000
    inference_steps: int = 50
    inversion_guidance: float = 1.0
    generation_guidance: float = 7.5
    dcam_enabled: bool = True
    lambda1: float = 0.7
    lambda2: float = 0.15
    lambda3: float = 0.15
    mgdm_enabled: bool = True
    mask_threshold: float = 0.35
    mask_sites: str = "up"
    mask_min_resolution: int = 16
    drop_masked_tokens: bool = True
    head_mean: bool = True
    pacm_role: str = "conditional"
    eta: float = 1e-2
    inner_iterations: int = 5
    early_stop_loss: float = 1e-5
    cond_scale: float = 1.0
    joint_radius: float = 4.0
    limb_width: float = 4.0
    backend_kind: str = "toy"
    seed: int = 0

    @property
    def weights(self):
        return FusionWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def optimizer(self):
        return OptimizerConfig(self.eta, self.inner_iterations, self.early_stop_loss)

    def schedule(self):
        return make_schedule(self.schedule_kind, self.beta_start, self.beta_end, self.train_steps,
                             self.inference_steps)

    def with_overrides(self, **kw):
        return validate_config("", {k: v for k, v in _as_keys(self).items()} | kw)

    def digest(self):
        """Hash of everything that shapes the output; input files enter by content."""
        d = _as_keys(self)
        for k in RUN_ONLY:
            d.pop(k, None)
        for k in PATH_KEYS:
            if d.get(k):
                d[k] = hashlib.sha256(Path(d[k]).read_bytes()).hexdigest()
        d["subject_tokens"] = list(d["subject_tokens"])
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _as_keys(cfg):
    values = asdict(cfg)
    return {key: values[attr] for key, (attr, _, _) in KEYS.items()}


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        raw[key] = value
    return raw


def validate_config(text="", overrides=None, check_paths=True):
    """Parse, default and range-check a configuration.  Unknown keys are errors."""
    raw = parse_config_text(text)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    values = {}
    for key, (attr, parse, default) in KEYS.items():
        if key in raw:
            try:
                values[attr] = parse(raw[key]) if raw[key] is not None else default
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{key}: {e}") from None
        else:
            values[attr] = default
    cfg = PipelineConfig(**values)
    _check(cfg, check_paths)
    return cfg


def _check(cfg, check_paths):
    if cfg.frames < 1:
        raise ConfigError("frames: must be >= 1")
    if cfg.transition_frames < 0:
        raise ConfigError("pata.transition_frames: must be >= 0")
    if cfg.jobs < 1:
        raise ConfigError("jobs: must be >= 1")
    for key, v in (("guidance.inversion", cfg.inversion_guidance), ("guidance.generation", cfg.generation_guidance)):
        if v < 0:
            raise ConfigError(f"{key}: must be >= 0")
    try:
        cfg.weights
    except ValueError as e:
        raise ConfigError(f"dcam.lambda1/2/3: {e}") from None
    try:
        cfg.optimizer
    except ValueError as e:
        raise ConfigError(f"pacm: {e}") from None
    try:
        cfg.schedule()
    except ScheduleError as e:
        raise ConfigError(f"schedule: {e}") from None
    if not 0 <= cfg.mask_threshold <= 1:
        raise ConfigError("mgdm.threshold: must lie in [0, 1]")
    if cfg.early_stop_loss < 0:
        raise ConfigError("pacm.early_stop_loss: must be >= 0")
    if check_paths:
        for key in PATH_KEYS:
            p = getattr(cfg, key)
            if p and not Path(p).is_file():
                raise ConfigError(f"{key}: file not found: {p}")


def load_config(path=None, overrides=None):
    text = Path(path).read_text() if path else ""
    return validate_config(text, overrides)
