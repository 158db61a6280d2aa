"""INI experiment configuration with per-section content digests.

A run is described by one INI file; every key has a default, so a partial
file (or none at all) still yields a complete configuration.  The digest of
a section set is a hash of its canonicalized effective key/value text.
Artifacts record the digest they were built from, which is how reruns
decide between reusing and recomputing: same digest, same artifact.

Seed and output-directory overrides from the command line are folded into
the sections before any digest is taken, so they participate in cache
validity like every other setting.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "default_sections"]


class ConfigError(ValueError):
    """Configuration file is missing, malformed, or has bad values."""


def default_sections() -> dict[str, dict[str, str]]:
    return {
        "global": {
            "seed": "0",
            "out_dir": "runs/desk",
            "domain": "toy",
        },
        "dataset": {
            "train": "2000",
            "val": "500",
            "test": "500",
            "resolution": "32",
        },
        "generator": {
            "latent_dim": "64",
            "channel_base": "64",
            "channel_min": "16",
            "steps": "1200",
            "batch_size": "32",
            "lr": "0.002",
            "disc_lr": "0.002",
            "r1_gamma": "1.0",
        },
        "encoder": {
            "steps": "800",
            "batch_size": "32",
            "lr": "0.001",
            "lam": "1.0",
            "width": "32",
        },
        "projection": {
            "lam": "0.5",
            "steps": "500",
            "optimizer": "lbfgs",
            "init": "encoder",
            "batch_size": "16",
            "splits": "train, val, test",
        },
        "pca": {
            "num_samples": "10000",
            "count": "20",
        },
        "perturbation": {
            "method": "stylemix",
            "granularity": "fine",
            "sigma": "0.0",
            "sigma_grid": "0.1, 0.3, 0.5, 1.0",
        },
        "classifier": {
            "task": "shape_class",
            "width": "32",
            "lr": "0.001",
            "batch_size": "64",
            "max_epochs": "40",
            "patience": "5",
            "source": "real",
        },
        "finetune": {
            "lr": "0.000001",
            "mix_ratio": "0.5",
            "source": "reconstruction",
            "max_epochs": "4",
            "patience": "4",
        },
        "ensemble": {
            "alpha": "0.5",
            "views": "31",
            "alpha_grid": "0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0",
            "use_cutoff": "false",
            "cutoff_grid": "0.0, 0.2, 0.4, 0.6, 0.8, 1.0",
            "bootstrap_resamples": "20",
        },
        "sweep": {
            "sizes": "0, 1, 2, 4, 8, 16, 31",
            "steps_grid": "0, 50, 100, 150, 200, 250, 500",
            "steps_subset": "100",
        },
        "attack": {
            "kind": "pgd",
            "steps": "10",
            "step_size": "0.00784313725490196",
            "count": "100",
            "min_drop": "0.20",
            "corruption": "none",
            "corruption_sigma": "0.0",
            "crops": "16",
        },
    }


class ExperimentConfig:
    """Effective key/value view over defaults plus one INI file."""

    def __init__(self, sections: dict[str, dict[str, str]], path: Path | None = None) -> None:
        self.sections = sections
        self.path = path

    @classmethod
    def load(
        cls,
        path: str | Path | None,
        seed_override: int | None = None,
        out_override: str | None = None,
    ) -> "ExperimentConfig":
        sections = {name: dict(values) for name, values in default_sections().items()}
        real_path: Path | None = None
        if path is not None:
            real_path = Path(path)
            if not real_path.is_file():
                raise ConfigError(f"config file not found: {real_path}")
            parser = configparser.ConfigParser(interpolation=None)
            try:
                parser.read(real_path)
            except configparser.Error as err:
                raise ConfigError(f"cannot parse {real_path}: {err}") from err
            for name in parser.sections():
                if name not in sections:
                    raise ConfigError(f"unknown config section [{name}]")
                for key, value in parser[name].items():
                    if key not in sections[name]:
                        raise ConfigError(f"unknown key {key!r} in section [{name}]")
                    sections[name][key] = value.strip()
        if seed_override is not None:
            sections["global"]["seed"] = str(seed_override)
        if out_override is not None:
            sections["global"]["out_dir"] = out_override
        return cls(sections, real_path)

    def get(self, section: str, key: str) -> str:
        try:
            return self.sections[section][key]
        except KeyError as err:
            raise ConfigError(f"no config value for [{section}] {key}") from err

    def get_int(self, section: str, key: str) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError as err:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from err

    def get_float(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError as err:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from err

    def get_bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")

    def get_floats(self, section: str, key: str) -> tuple[float, ...]:
        raw = self.get(section, key)
        try:
            return tuple(float(tok) for tok in raw.split(",") if tok.strip())
        except ValueError as err:
            raise ConfigError(f"[{section}] {key} must be a number list, got {raw!r}") from err

    def get_ints(self, section: str, key: str) -> tuple[int, ...]:
        raw = self.get(section, key)
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError as err:
            raise ConfigError(f"[{section}] {key} must be an integer list, got {raw!r}") from err

    def get_strs(self, section: str, key: str) -> tuple[str, ...]:
        return tuple(tok.strip() for tok in self.get(section, key).split(",") if tok.strip())

    @property
    def seed(self) -> int:
        return self.get_int("global", "seed")

    @property
    def out_dir(self) -> Path:
        return Path(self.get("global", "out_dir"))

    def digest(self, *section_names: str) -> str:
        """Hex digest of the effective content of the named sections."""
        lines = []
        for name in sorted(section_names):
            if name not in self.sections:
                raise ConfigError(f"unknown config section [{name}]")
            for key in sorted(self.sections[name]):
                lines.append(f"{name}.{key}={self.sections[name][key]}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
