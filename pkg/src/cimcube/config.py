"""Experiment configuration: one INI file drives every pipeline stage.

Unknown sections or keys are rejected; every run writes its resolved
configuration (plus a content hash) next to its outputs. Environment
overrides are limited to ``CIMCUBE_OUTPUT_DIR`` and ``CIMCUBE_THREADS``.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .device_models import (
    InvalidInputError,
    RramParams,
    TftParams,
    reference_rram,
    reference_tft,
)
from .nn.train import TrainConfig
from .periphery import QuantConfig
from .tile import TileGeometry
from .variation import VariationSpec

__all__ = ["ExperimentConfig", "load_config"]

_SCHEMA = {
    "device": {"tft_params", "rram_params"},
    "tile": {"n_rows", "n_cols", "n_layers", "r_wl", "r_bl", "r_sl"},
    "quant": {"act_bits", "weight_bits", "adc_full_scale", "levels_per_device"},
    "variation": {"sigma_d2d", "distribution"},
    "train": {"preset", "epochs", "batch_size", "lr", "momentum", "weight_decay",
              "lr_schedule", "dropout", "drop_per_tile", "quant_aware",
              "max_train_images"},
    "data": {"name", "path", "max_images"},
    "run": {"output_dir", "seed"},
}


@dataclass
class ExperimentConfig:
    tft: TftParams
    rram: RramParams
    geometry: TileGeometry
    quant: QuantConfig
    variation: VariationSpec
    train: TrainConfig
    preset: str = "vgg-mini"
    dataset_name: str = "fmnist"
    dataset_path: str = "data"
    max_images: int | None = None
    max_train_images: int | None = None
    output_dir: str = "runs"
    seed: int = 0
    raw_text: str = ""

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_text.encode()).hexdigest()[:16]

    def resolve_output_dir(self) -> Path:
        out = os.environ.get("CIMCUBE_OUTPUT_DIR", self.output_dir)
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_resolved(self, out_dir: Path) -> None:
        (out_dir / "resolved_config.ini").write_text(
            f"# config hash {self.config_hash}\n{self.raw_text}")


def _get(parser, section, key, cast, default):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def load_config(path, overrides: tuple = ()) -> ExperimentConfig:
    """Parse a config file, applying ``section.key=value`` overrides.

    Overrides participate in the config hash so a run with flag overrides is
    stamped distinctly from one without.
    """
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    parser.read_string(text)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise InvalidInputError(
                f"override {item!r} must look like section.key=value")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
        text += f"\n# override {item}"

    for section in parser.sections():
        if section not in _SCHEMA:
            raise InvalidInputError(f"unknown config section [{section}]")
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                raise InvalidInputError(f"unknown key {key!r} in [{section}]")

    tft_src = _get(parser, "device", "tft_params", str, "reference")
    rram_src = _get(parser, "device", "rram_params", str, "reference")
    tft = reference_tft(None if tft_src == "reference" else tft_src)
    rram = reference_rram(None if rram_src == "reference" else rram_src)

    geometry = TileGeometry(
        n_rows=_get(parser, "tile", "n_rows", int, 8),
        n_cols=_get(parser, "tile", "n_cols", int, 8),
        n_layers=_get(parser, "tile", "n_layers", int, 8),
        r_wl=_get(parser, "tile", "r_wl", float, 2.5),
        r_bl=_get(parser, "tile", "r_bl", float, 2.5),
        r_sl=_get(parser, "tile", "r_sl", float, 2.5),
    )
    quant = QuantConfig(
        act_bits=_get(parser, "quant", "act_bits", int, 8),
        weight_bits=_get(parser, "quant", "weight_bits", int, 4),
        adc_full_scale=_get(parser, "quant", "adc_full_scale", float, 1e-4),
        levels_per_device=_get(parser, "quant", "levels_per_device", int, 4),
    )
    seed = _get(parser, "run", "seed", int, 0)
    variation = VariationSpec(
        sigma_d2d=_get(parser, "variation", "sigma_d2d", float, 0.10),
        distribution=_get(parser, "variation", "distribution", str, "lognormal"),
        seed=seed,
    )
    train = TrainConfig(
        epochs=_get(parser, "train", "epochs", int, 20),
        batch_size=_get(parser, "train", "batch_size", int, 128),
        lr=_get(parser, "train", "lr", float, 0.05),
        momentum=_get(parser, "train", "momentum", float, 0.9),
        weight_decay=_get(parser, "train", "weight_decay", float, 5e-4),
        lr_schedule=_get(parser, "train", "lr_schedule", str, "cosine"),
        dropout=_get(parser, "train", "dropout", str, "off"),
        drop_per_tile=_get(parser, "train", "drop_per_tile", int, 1),
        quant_aware=_get(parser, "train", "quant_aware", bool, True),
        seed=seed,
    )
    max_images = _get(parser, "data", "max_images", int, 0) or None
    max_train = _get(parser, "train", "max_train_images", int, 0) or None
    return ExperimentConfig(
        tft=tft, rram=rram, geometry=geometry, quant=quant,
        variation=variation, train=train,
        preset=_get(parser, "train", "preset", str, "vgg-mini"),
        dataset_name=_get(parser, "data", "name", str, "fmnist"),
        dataset_path=_get(parser, "data", "path", str, "data"),
        max_images=max_images, max_train_images=max_train,
        output_dir=_get(parser, "run", "output_dir", str, "runs"),
        seed=seed, raw_text=text,
    )
