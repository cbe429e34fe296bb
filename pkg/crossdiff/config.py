"""Run configuration for crossdiff."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import toml

from .errors import ConfigError

SCENE_CLASSES = ["chair", "table", "lamp", "shelf", "sofa", "cabinet"]

# key -> (default, help)
DEFAULTS: Dict[str, Tuple[Any, str]] = {
    "seed": (0, "Seed for parameters, scenes and sampling"),

    "model.d_model": (32, "Aligned model width d_mod used by fusion, CLDA and the heads"),
    "model.d_sem": (32, "Width of the coarsest visual tokens and the text tokens"),
    "model.d2": (16, "Width of the per-point visual features"),
    "model.d3": (32, "Width of the intermediate visual features"),
    "model.ratio3": (4, "Subsampling ratio from points to the intermediate level"),
    "model.ratio4": (4, "Subsampling ratio from the intermediate to the coarsest level"),
    "model.max_tokens": (16, "Longest expression the positional table covers"),
    "model.n_decoder_layers": (1, "Decoder layers refining the text query"),
    "model.dtype": ("float64", "Tensor precision"),

    "plda.enabled": (True, "Run point-level differential attention"),
    "plda.n_heads": (2, "Logical attention heads N_h in PLDA"),
    "plda.head_ln": (True, "Layer norm per head instead of over the concatenated heads"),
    "plda.max_block_source": ("kt2v", "Rows feeding the Max block: fv4, kt2v, ft or kv2t"),

    "clda.enabled": (True, "Run cluster-level differential attention"),
    "clda.n_heads": (2, "Attention heads in CLDA and the decoder"),
    "clda.n_clust": (16, "Number of clusters N_clust"),
    "clda.k_graph": (8, "Neighbours per centroid in EdgeConv"),
    "clda.fps_random_start": (False, "Start farthest point sampling at a seeded random point"),

    "attention.kind": ("diff", "Cross attention flavour: diff or standard"),

    "loss.dgtl_enabled": (True, "Use the task-harmonized loss instead of a plain sum"),
    "loss.tau": (0.5, "Gradient conflict threshold"),
    "loss.rho": (1.0, "Correlation weight of every detection/segmentation pair"),
    "loss.lambda_floor": (0.1, "Lower bound of every task weight"),
    "loss.t_warm_frac": (0.2, "Geometry warm-up length as a fraction of the steps"),
    "loss.t_decay_frac": (1.0, "Penalty decay length as a fraction of the steps"),
    "loss.eta_min": (0.0, "Floor of the penalty decay"),
    "loss.mask_k": (20.0, "Sharpness of the box-derived soft mask"),
    "loss.mask_thresh": (0.5, "Binarization threshold of the mask-derived box"),
    "loss.dice_eps": (1e-6, "Dice smoothing term"),
    "loss.snapshot_mode": ("per_task", "Gradient snapshots: per_task or grouped"),

    "train.steps": (200, "Optimizer steps"),
    "train.batch_size": (4, "Samples per step"),
    "train.lr": (2e-4, "Learning rate of everything but the encoders"),
    "train.lr_encoder": (2e-3, "Learning rate of the visual and text encoders"),
    "train.beta1": (0.9, "Adam first moment decay"),
    "train.beta2": (0.999, "Adam second moment decay"),
    "train.eps": (1e-8, "Adam denominator epsilon"),
    "train.n_scenes": (32, "Scenes generated when training without a corpus file"),
    "train.log_every": (10, "Steps between progress log lines"),

    "scenes.n_points": (256, "Points per scene"),
    "scenes.n_objects": (4, "Objects per scene"),
    "scenes.n_distractors": (1, "Extra objects sharing the class of the first object"),
    "scenes.room_size": (5.0, "Side length of the square floor"),
    "scenes.classes": (SCENE_CLASSES, "Object classes"),
    "scenes.expressions_per_scene": (1, "Expressions generated per scene"),
    "scenes.weight_attribute": (1.0, "Sampling weight of attribute templates"),
    "scenes.weight_explicit": (1.0, "Sampling weight of explicit relation templates"),
    "scenes.weight_implicit": (1.0, "Sampling weight of implicit relation templates"),

    "eval.n_scenes": (16, "Held-out scenes for ablations"),
    "eval.seed_offset": (10000, "Seed offset of held-out scenes"),
    "eval.n_distractors": (2, "Same-class distractors in held-out scenes"),

    "gradcheck.step": (1e-5, "Central difference step"),
    "gradcheck.tol": (1e-4, "Maximum relative error"),
    "gradcheck.seeds": (20, "Random instances per check"),

    "ablate.grid": ("components", "Grid: components, clusters, routing or attention"),
    "ablate.seeds": (5, "Seeds per grid cell"),
    "ablate.steps": (100, "Training steps per grid cell"),
    "ablate.n_clust_values": ([4, 8, 16, 32], "N_clust values of the clusters grid"),

    "implicit.backend": ("none", "Language-model backend: none, http or openai"),
    "implicit.use_llm": (False, "Consult the backend when the rules find nothing"),
    "implicit.llm_url": ("", "HTTP endpoint (falls back to CROSSDIFF_LLM_URL)"),
    "implicit.api_key": ("", "API key (falls back to CROSSDIFF_LLM_API_KEY or OPENAI_API_KEY)"),
    "implicit.model": ("gpt-3.5-turbo", "Model name of the openai backend"),
    "implicit.timeout": (30.0, "Request timeout in seconds"),
    "implicit.retries": (3, "Attempts per request"),
    "implicit.backoff": (0.5, "Initial retry backoff in seconds"),
    "implicit.max_concurrency": (4, "Simultaneous backend requests"),
    "implicit.patterns": ("", "Pattern library YAML (packaged default when empty)"),

    "debug.trace_dump": (False, "Write attention maps of the first evaluated sample"),
}

CHOICES: Dict[str, Tuple[str, ...]] = {
    "model.dtype": ("float64", "float32"),
    "plda.max_block_source": ("fv4", "kt2v", "ft", "kv2t"),
    "attention.kind": ("diff", "standard"),
    "loss.snapshot_mode": ("per_task", "grouped"),
    "ablate.grid": ("components", "clusters", "routing", "attention"),
    "implicit.backend": ("none", "http", "openai"),
}


def _flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(_flatten(value, name))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(f"'{key}' expects {type(default).__name__}, got {value!r}")


class RunConfig:
    """Flat dotted-key configuration with typed defaults."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._values: Dict[str, Any] = {key: (list(d) if isinstance(d, list) else d)
                                        for key, (d, _) in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
             seed: Optional[int] = None) -> "RunConfig":
        """
        Defaults, then the config file, then ``key=value`` overrides, then ``seed``.

        Raises:
            ConfigError: unreadable file, unknown key, wrong type or failed validation.
        """
        cfg = cls()
        if path is not None:
            try:
                data = toml.load(str(path))
            except (OSError, toml.TomlDecodeError) as e:
                raise ConfigError(f"Failed to read config {path}: {e}")
            for key, value in _flatten(data).items():
                cfg.set(key, value)
        for item in overrides:
            cfg.set_from_string(item)
        if seed is not None:
            cfg.set("seed", seed)
        cfg.validate()
        return cfg

    def get(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"Unknown configuration key '{key}'")
        return self._values[key]

    def set(self, key: str, value: Any):
        if key not in DEFAULTS:
            raise ConfigError(f"Unknown configuration key '{key}'")
        value = _coerce(key, value)
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"'{key}' must be one of {', '.join(CHOICES[key])}, got '{value}'")
        self._values[key] = value

    def set_from_string(self, item: str):
        """Apply ``key=value``; the value is read as a TOML literal, or as a bare string."""
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        try:
            value = toml.loads(f"v = {raw}")["v"]
        except toml.TomlDecodeError:
            value = raw
        self.set(key, value)

    def with_values(self, values: Dict[str, Any]) -> "RunConfig":
        clone = RunConfig(dict(self._values))
        for key, value in values.items():
            clone.set(key, value)
        return clone

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def nested(self) -> Dict[str, Any]:
        tree: Dict[str, Any] = {}
        for key, value in sorted(self._values.items()):
            node = tree
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return tree

    def dump(self) -> str:
        """TOML text that ``RunConfig.load`` reads back to the same values."""
        return toml.dumps(self.nested())

    def hash(self) -> str:
        canonical = json.dumps(self._values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def validate(self):
        """Cross-key checks; raises ``ConfigError`` listing every violation."""
        issues: List[str] = []
        v = self._values
        plda_div = 2 * v["plda.n_heads"] if v["attention.kind"] == "diff" else v["plda.n_heads"]
        clda_div = 2 * v["clda.n_heads"] if v["attention.kind"] == "diff" else v["clda.n_heads"]
        if v["plda.n_heads"] < 1 or v["model.d_sem"] % plda_div:
            issues.append(f"model.d_sem={v['model.d_sem']} is not divisible by {plda_div}")
        if v["clda.n_heads"] < 1 or v["model.d_model"] % clda_div:
            issues.append(f"model.d_model={v['model.d_model']} is not divisible by {clda_div}")
        if v["clda.n_clust"] < 2 or v["scenes.n_points"] % v["clda.n_clust"]:
            issues.append(f"scenes.n_points={v['scenes.n_points']} is not divisible by "
                          f"clda.n_clust={v['clda.n_clust']}")
        if not 1 <= v["clda.k_graph"] < v["clda.n_clust"]:
            issues.append(f"clda.k_graph={v['clda.k_graph']} must lie in [1, clda.n_clust)")
        if not 0.0 < v["loss.tau"] < 1.0:
            issues.append(f"loss.tau={v['loss.tau']} must lie in (0, 1)")
        if v["loss.rho"] < 0:
            issues.append("loss.rho must be non-negative")
        if v["model.ratio3"] < 1 or v["model.ratio4"] < 1:
            issues.append("model.ratio3 and model.ratio4 must be positive")
        if v["train.steps"] < 0 or v["train.batch_size"] < 1:
            issues.append("train.steps must be >= 0 and train.batch_size >= 1")
        unknown = [c for c in v["scenes.classes"] if c not in SCENE_CLASSES]
        if unknown or not v["scenes.classes"]:
            issues.append(f"scenes.classes must be a non-empty subset of {SCENE_CLASSES}")
        if issues:
            raise ConfigError("; ".join(issues))

    @staticmethod
    def describe() -> List[Tuple[str, Any, str]]:
        return [(key, default, help_text) for key, (default, help_text) in DEFAULTS.items()]

    def template_weights(self) -> Dict[str, float]:
        return {family: self.get(f"scenes.weight_{family}") for family in ("attribute", "explicit", "implicit")}
