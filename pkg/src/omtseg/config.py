"""Run configuration: flat dotted-key = value text files with typed defaults.

Every knob has a default (the desk-scale profile); ``paper_profile`` swaps in
the full-scale published settings.  Values parse according to the type of
their default, so a config file or ``--set`` override can never change a
field's type silently.
"""

from .errors import ConfigError, ParseError

DESK_DEFAULTS = {
    # model geometry
    "model.n_layers": 4,
    "model.model_dim": 64,
    "model.head_count": 4,
    "model.patch_size": 8,
    "model.image_size": 64,
    "model.ffn_hidden": 128,
    "model.n_queries": 8,
    "model.decoder_layers": 3,
    "model.prompt_pool": 64,
    "model.stem_width": 16,
    "model.adapter_points": 4,
    # loss mixture
    "loss.lambda_mask": 5.0,
    "loss.lambda_obj": 2.0,
    "loss.lambda_con": 1.0,
    "loss.temperature": 0.07,
    # inference thresholds
    "thresholds.objectness": 0.5,
    "thresholds.mask": 0.5,
    "thresholds.min_area": 4,
    # optimizer and schedule
    "optim.lr": 2e-4,
    "optim.weight_decay": 0.15,
    "optim.beta1": 0.9,
    "optim.beta2": 0.99,
    "optim.warmup": 100,
    "optim.total_steps": 2000,
    "optim.batch_size": 4,
    # bookkeeping
    "train.log_every": 10,
    "train.eval_every": 500,
    "train.freeze_backbone": True,
    "seed": 0,
    # ablation arms
    "ablation.text_cross_attn": True,
    "ablation.visual_adapter": True,
    "ablation.prompt_tuning": True,
}

PAPER_OVERRIDES = {
    "model.image_size": 640,
    "model.patch_size": 16,
    "optim.lr": 3e-5,
    "optim.weight_decay": 0.15,
    "optim.total_steps": 90000,
    "optim.batch_size": 16,
    "optim.warmup": 600,
}


def _parse_typed(key, raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Typed flat key/value configuration with validation."""

    def __init__(self, values=None):
        self._values = dict(DESK_DEFAULTS)
        if values:
            for key, val in values.items():
                self.set(key, val)
        self.validate()

    @classmethod
    def paper_profile(cls):
        cfg = cls()
        for key, val in PAPER_OVERRIDES.items():
            cfg._values[key] = val
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key, value):
        if key not in DESK_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DESK_DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_typed(key, value, default)
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"{key}: expected {type(default).__name__}")
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        if not isinstance(value, type(default)):
            raise ConfigError(f"{key}: expected {type(default).__name__}")
        self._values[key] = value

    def apply_overrides(self, pairs):
        """Apply 'key=value' strings (the --set flag)."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            key, _, raw = pair.partition("=")
            self.set(key.strip(), raw.strip())
        self.validate()

    def validate(self):
        v = self._values
        if v["model.model_dim"] % v["model.head_count"]:
            raise ConfigError("head_count must divide model_dim")
        if v["model.image_size"] % v["model.patch_size"]:
            raise ConfigError("patch_size must divide image_size")
        if v["model.image_size"] % 32:
            raise ConfigError("image_size must be divisible by 32")
        for key in ("loss.lambda_mask", "loss.lambda_obj", "loss.lambda_con",
                    "loss.temperature"):
            if v[key] <= 0:
                raise ConfigError(f"{key} must be positive")
        if v["optim.warmup"] > v["optim.total_steps"]:
            raise ConfigError("warmup cannot exceed total_steps")
        if v["model.n_layers"] < 1 or v["model.decoder_layers"] < 1:
            raise ConfigError("layer counts must be at least 1")

    def serialize(self):
        lines = [
            f"{key} = {_format_value(self._values[key])}"
            for key in sorted(self._values)
        ]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path):
        cfg = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError(
                        f"expected 'key = value', got {line!r}",
                        path=str(path), line=lineno,
                    )
                key, _, val = line.partition("=")
                try:
                    cfg.set(key.strip(), val.strip())
                except ConfigError as exc:
                    raise ParseError(str(exc), path=str(path), line=lineno)
        cfg.validate()
        return cfg

    def items(self):
        return sorted(self._values.items())
