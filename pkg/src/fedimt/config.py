"""Strict flat key=value experiment configuration.

One `key = value` pair per line, `#` comments. Unknown keys, duplicate keys,
and type errors are rejected with the offending line; defaults are listed in
SCHEMA. Exactly one data source (synthetic generator or IDX files) must be
configured, and referenced files must exist at parse time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .data import PRESETS
from .estimator import EstimatorParams
from .federation import ALGORITHMS, STRATEGIES, FlConfig


class ConfigError(ValueError):
    pass


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_int_list(text: str) -> list[int]:
    return [int(part.strip()) for part in text.split(",") if part.strip()]


# key -> (parser, default); REQUIRED defaults are enforced after parsing.
_REQUIRED = object()
SCHEMA: dict[str, tuple] = {
    "data": (_parse_str, _REQUIRED),  # synthetic | idx
    "preset": (_parse_str, None),  # tenclass | ford | har
    "classes": (_parse_int, None),
    "feature_dim": (_parse_int, None),
    "class_counts": (_parse_int_list, None),
    "cluster_scale": (_parse_float, 1.0),
    "class_separation": (_parse_float, 3.0),
    "run_length": (_parse_int, 1),
    "idx_images": (_parse_str, None),
    "idx_labels": (_parse_str, None),
    "idx_test_images": (_parse_str, None),
    "idx_test_labels": (_parse_str, None),
    "aux_idx_images": (_parse_str, None),  # external probe data instead of resampling
    "aux_idx_labels": (_parse_str, None),
    "num_clients": (_parse_int, _REQUIRED),
    "rounds": (_parse_int, _REQUIRED),
    "selection_rate": (_parse_float, 0.3),
    "local_epochs": (_parse_int, 5),
    "batch_size": (_parse_int, 32),
    "lr": (_parse_float, 0.001),
    "momentum": (_parse_float, 0.9),
    "strategy": (_parse_str, "fedavg"),
    "prox_mu": (_parse_float, 0.0),
    "algorithm": (_parse_str, "fedimt"),
    "n_latest": (_parse_int, None),
    "drop_threshold": (_parse_float, 0.5),
    "beta": (_parse_float, 0.999),
    "baseline_loss": (_parse_str, "plain_ce"),
    "focal_gamma": (_parse_float, 2.0),
    "hidden_sizes": (_parse_int_list, [32]),
    "shards_per_client": (_parse_int, 3),
    "aux_per_class": (_parse_int, None),  # default 4 * batch_size
    "test_fraction": (_parse_float, 0.2),
    "seed": (_parse_int, 0),
    "seeds": (_parse_int_list, None),
    "csv_path": (_parse_str, None),
    "json_path": (_parse_str, None),
    "scale_cal": (_parse_float, 1.0),
    "denom_epsilon": (_parse_float, 1e-12),
    "confidence_floor": (_parse_float, 0.0),
}

_SYNTHETIC_KEYS = ("classes", "feature_dim", "class_counts")
_IDX_KEYS = ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels")


@dataclass
class ExperimentConfig:
    fl: FlConfig
    data_source: str
    synthetic: dict | None
    idx_images: str | None
    idx_labels: str | None
    idx_test_images: str | None
    idx_test_labels: str | None
    seed: int
    seeds: list[int] | None
    csv_path: str | None
    json_path: str | None
    shards_per_client: int
    aux_per_class: int
    test_fraction: float
    hidden_sizes: tuple[int, ...]
    estimator: EstimatorParams = field(default_factory=EstimatorParams)
    aux_idx_images: str | None = None
    aux_idx_labels: str | None = None
    skip_eval: bool = False

    def validate(self) -> None:
        self.fl.validate()
        self.estimator.validate()
        if self.data_source not in ("synthetic", "idx"):
            raise ConfigError(f"data must be 'synthetic' or 'idx', got {self.data_source!r}")
        if self.data_source == "synthetic":
            params = self.synthetic
            if params is None:
                raise ConfigError("synthetic data source needs classes/feature_dim/class_counts")
            if len(params["class_counts"]) != params["classes"]:
                raise ConfigError(
                    f"class_counts has {len(params['class_counts'])} entries "
                    f"for {params['classes']} classes"
                )
            if sum(params["class_counts"]) <= 0:
                raise ConfigError("class_counts must contain at least one sample")
        if not 0.0 < self.test_fraction <= 1.0:
            raise ConfigError("test_fraction must be in (0, 1]")
        if self.shards_per_client < 1:
            raise ConfigError("shards_per_client must be >= 1")
        if self.aux_per_class < 1:
            raise ConfigError("aux_per_class must be >= 1")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes must be positive")
        if (self.aux_idx_images is None) != (self.aux_idx_labels is None):
            raise ConfigError("aux_idx_images and aux_idx_labels must be set together")

    def to_dict(self) -> dict:
        out = {
            "data": self.data_source,
            "num_clients": self.fl.num_clients,
            "rounds": self.fl.rounds,
            "selection_rate": self.fl.selection_rate,
            "local_epochs": self.fl.local_epochs,
            "batch_size": self.fl.batch_size,
            "lr": self.fl.lr,
            "momentum": self.fl.momentum,
            "strategy": self.fl.strategy,
            "prox_mu": self.fl.prox_mu,
            "algorithm": self.fl.algorithm,
            "n_latest": self.fl.n_latest,
            "drop_threshold": self.fl.drop_threshold,
            "beta": self.fl.beta,
            "baseline_loss": self.fl.baseline_loss,
            "focal_gamma": self.fl.focal_gamma,
            "hidden_sizes": list(self.hidden_sizes),
            "shards_per_client": self.shards_per_client,
            "aux_per_class": self.aux_per_class,
            "test_fraction": self.test_fraction,
            "seed": self.seed,
            "seeds": self.seeds,
            "csv_path": self.csv_path,
            "json_path": self.json_path,
            "scale_cal": self.estimator.scale_cal,
            "denom_epsilon": self.estimator.denom_epsilon,
            "confidence_floor": self.estimator.confidence_floor,
            "aux_idx_images": self.aux_idx_images,
            "aux_idx_labels": self.aux_idx_labels,
            "skip_eval": self.skip_eval,
        }
        if self.data_source == "synthetic":
            out.update(self.synthetic)
        else:
            out.update(
                idx_images=self.idx_images,
                idx_labels=self.idx_labels,
                idx_test_images=self.idx_test_images,
                idx_test_labels=self.idx_test_labels,
            )
        return out


def _read_pairs(path: str) -> dict[str, tuple[str, int]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in pairs:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = (value, lineno)
    return pairs


def parse_config(path: str) -> ExperimentConfig:
    pairs = _read_pairs(path)
    values: dict = {}
    for key, (parser, default) in SCHEMA.items():
        if key in pairs:
            text, lineno = pairs[key]
            try:
                values[key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
        else:
            values[key] = default

    for key, value in values.items():
        if value is _REQUIRED:
            raise ConfigError(f"{path}: missing required key {key!r}")

    data = values["data"]
    if data not in ("synthetic", "idx"):
        lineno = pairs["data"][1]
        raise ConfigError(f"{path}:{lineno}: data must be 'synthetic' or 'idx'")

    synthetic = None
    if data == "synthetic":
        if values["preset"] is not None:
            if values["preset"] not in PRESETS:
                lineno = pairs["preset"][1]
                raise ConfigError(
                    f"{path}:{lineno}: unknown preset {values['preset']!r} "
                    f"(choose from {sorted(PRESETS)})"
                )
            preset = PRESETS[values["preset"]]
            for key, preset_value in preset.items():
                if key not in pairs:
                    values[key] = preset_value
        missing = [k for k in _SYNTHETIC_KEYS if values[k] is None]
        if missing:
            raise ConfigError(f"{path}: synthetic data source needs keys {missing}")
        synthetic = {
            "classes": values["classes"],
            "feature_dim": values["feature_dim"],
            "class_counts": values["class_counts"],
            "cluster_scale": values["cluster_scale"],
            "class_separation": values["class_separation"],
            "run_length": values["run_length"],
        }
        set_idx = [k for k in _IDX_KEYS if values[k] is not None]
        if set_idx:
            raise ConfigError(f"{path}: synthetic data source conflicts with keys {set_idx}")
    else:
        missing = [k for k in _IDX_KEYS if values[k] is None]
        if missing:
            raise ConfigError(f"{path}: idx data source needs keys {missing}")
        for key in _IDX_KEYS:
            if not os.path.exists(values[key]):
                lineno = pairs[key][1]
                raise ConfigError(f"{path}:{lineno}: file not found: {values[key]}")

    for key in ("aux_idx_images", "aux_idx_labels"):
        if values[key] is not None and not os.path.exists(values[key]):
            lineno = pairs[key][1]
            raise ConfigError(f"{path}:{lineno}: file not found: {values[key]}")

    # The latest-window scheme trains on fresher data; bump the default lr
    # unless the config pinned one explicitly.
    lr = values["lr"]
    if values["n_latest"] is not None and "lr" not in pairs:
        lr = 0.002

    fl = FlConfig(
        num_clients=values["num_clients"],
        rounds=values["rounds"],
        selection_rate=values["selection_rate"],
        local_epochs=values["local_epochs"],
        batch_size=values["batch_size"],
        lr=lr,
        momentum=values["momentum"],
        strategy=values["strategy"],
        prox_mu=values["prox_mu"],
        algorithm=values["algorithm"],
        n_latest=values["n_latest"],
        drop_threshold=values["drop_threshold"],
        beta=values["beta"],
        baseline_loss=values["baseline_loss"],
        focal_gamma=values["focal_gamma"],
    )
    if fl.strategy not in STRATEGIES:
        lineno = pairs["strategy"][1]
        raise ConfigError(f"{path}:{lineno}: unknown strategy {fl.strategy!r}")
    if fl.algorithm not in ALGORITHMS:
        lineno = pairs["algorithm"][1]
        raise ConfigError(f"{path}:{lineno}: unknown algorithm {fl.algorithm!r}")

    config = ExperimentConfig(
        fl=fl,
        data_source=data,
        synthetic=synthetic,
        idx_images=values["idx_images"],
        idx_labels=values["idx_labels"],
        idx_test_images=values["idx_test_images"],
        idx_test_labels=values["idx_test_labels"],
        seed=values["seed"],
        seeds=values["seeds"],
        csv_path=values["csv_path"],
        json_path=values["json_path"],
        shards_per_client=values["shards_per_client"],
        aux_per_class=(
            values["aux_per_class"]
            if values["aux_per_class"] is not None
            else 4 * values["batch_size"]
        ),
        test_fraction=values["test_fraction"],
        hidden_sizes=tuple(values["hidden_sizes"]),
        estimator=EstimatorParams(
            denom_epsilon=values["denom_epsilon"],
            confidence_floor=values["confidence_floor"],
            scale_cal=values["scale_cal"],
        ),
        aux_idx_images=values["aux_idx_images"],
        aux_idx_labels=values["aux_idx_labels"],
    )
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config
