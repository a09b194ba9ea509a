"""Flat key=value configuration.

One pair per line, UTF-8, "#" starts a comment, unknown or duplicate
keys are errors, and every key has a documented default so an empty
file is a valid configuration.  ``parse_config(render_config(c)) == c``
holds exactly: values are typed at parse time and rendered with
round-trip-stable formatting.
"""

from __future__ import annotations

from dataclasses import dataclass


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class _Key:
    name: str
    default: object
    parse: object
    help: str


SCHEMA = (
    _Key("seed", 0, int, "root RNG seed; env VINE_SEED overrides"),
    _Key("episodes.image_size", 64, int, "square image side, divisible by 4"),
    _Key("episodes.clutter", 2, int, "distractor shapes per rendered image"),
    _Key("episodes.occlusion", 0.0, float,
         "probability of a random occluder box on each support"),
    _Key("episodes.k", 1, int, "support shots per episode"),
    _Key("episodes.view_shift", 0.05, float,
         "corner-perturbation magnitude of the query view vs the supports"),
    _Key("model.channels", 32, int, "feature width C of both encoders"),
    _Key("model.tokens", 50, int, "learnable prompt tokens per branch"),
    _Key("decoder.hidden", 32, int, "hidden width of the mask decoder head"),
    _Key("encoder.use_sam", True, _parse_bool, "enable the semantic branch"),
    _Key("encoder.use_res", True, _parse_bool, "enable the structural branch"),
    _Key("svga.enabled", True, _parse_bool, "spatial-view graph alignment"),
    _Key("svga.num_views", 3, int, "pseudo-views per support (R)"),
    _Key("svga.delta_max", 0.001, float,
         "corner-perturbation magnitude for pseudo-views"),
    _Key("svga.knn_k", 8, int, "spatial-graph neighbors per grid cell"),
    _Key("svga.spatial_heads", 4, int, "attention heads of the spatial GAT"),
    _Key("svga.view_heads", 1, int, "attention heads of the view GAT"),
    _Key("dfm.enabled", True, _parse_bool, "discriminative foreground modulation"),
    _Key("dfm.shared_prior", False, _parse_bool,
         "average the discriminative prior across modalities"),
    _Key("loss.lambda_proto", 1.0, float, "weight of the prototype loss"),
    _Key("loss.lambda_pred", 0.5, float, "weight of the prediction loss"),
    _Key("train.lr", 0.001, float, "Adam peak learning rate (cosine to lr/100)"),
    _Key("train.episodes", 2000, int, "training episodes (= optimizer steps)"),
    _Key("train.eval_episodes", 200, int, "held-out novel episodes for eval"),
    _Key("train.freeze", "", str,
         "comma-separated parameter path prefixes excluded from updates"),
    _Key("train.prefetch", 8, int,
         "episode prefetch queue size; 0 generates inline"),
)

_BY_NAME = {k.name: k for k in SCHEMA}


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, pairs: dict) -> "Config":
        """New validated config with the given keys replaced."""
        vals = dict(self.values)
        for key, v in pairs.items():
            if key not in _BY_NAME:
                raise KeyError(f"unknown config key {key!r}")
            vals[key] = v
        cfg = Config(vals)
        validate_config(cfg)
        return cfg


def default_config() -> Config:
    return Config({k.name: k.default for k in SCHEMA})


def parse_config(text: str) -> Config:
    """Parse key=value lines over the schema defaults."""
    values = {k.name: k.default for k in SCHEMA}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        name, _, value = line.partition("=")
        name = name.strip()
        value = value.strip()
        key = _BY_NAME.get(name)
        if key is None:
            raise ValueError(f"line {lineno}: unknown config key {name!r}")
        if name in seen:
            raise ValueError(f"line {lineno}: duplicate config key {name!r}")
        seen.add(name)
        try:
            values[name] = key.parse(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {name}: {exc}") from None
    cfg = Config(values)
    validate_config(cfg)
    return cfg


def render_config(cfg: Config) -> str:
    """Schema-ordered key=value text; inverse of parse_config."""
    return "".join(f"{k.name}={_render(cfg[k.name])}\n" for k in SCHEMA)


def load_config(path: str | None) -> Config:
    if path is None:
        cfg = default_config()
        validate_config(cfg)
        return cfg
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def validate_config(cfg: Config) -> None:
    """Cross-key constraints that single-value parsers cannot express."""
    if not (cfg["encoder.use_sam"] or cfg["encoder.use_res"]):
        raise ValueError("at least one encoder branch must be enabled")
    size = cfg["episodes.image_size"]
    if size < 32 or size % 4:
        raise ValueError(f"episodes.image_size must be >= 32 and divisible "
                         f"by 4, got {size}")
    c = cfg["model.channels"]
    for key in ("svga.spatial_heads", "svga.view_heads"):
        if c % cfg[key]:
            raise ValueError(f"model.channels={c} not divisible by {key}={cfg[key]}")
    grid = (size // 4) ** 2
    if not 1 <= cfg["svga.knn_k"] <= grid - 1:
        raise ValueError(f"svga.knn_k={cfg['svga.knn_k']} out of range for "
                         f"a {size // 4}x{size // 4} grid")
    if cfg["episodes.k"] < 1:
        raise ValueError("episodes.k must be >= 1")
    if cfg["svga.num_views"] < 0:
        raise ValueError("svga.num_views must be >= 0")
    if not 0.0 <= cfg["svga.delta_max"] < 0.25:
        raise ValueError("svga.delta_max must be in [0, 0.25)")
    if not 0.0 <= cfg["episodes.view_shift"] < 0.25:
        raise ValueError("episodes.view_shift must be in [0, 0.25)")
    if cfg["model.tokens"] < 1:
        raise ValueError("model.tokens must be >= 1")
    if cfg["loss.lambda_proto"] < 0 or cfg["loss.lambda_pred"] < 0:
        raise ValueError("loss weights must be nonnegative")


def config_help() -> str:
    """One line per key: name, default, description (used by --help)."""
    lines = []
    for k in SCHEMA:
        lines.append(f"  {k.name} (default {_render(k.default)}): {k.help}")
    return "\n".join(lines)
