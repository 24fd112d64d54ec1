"""Pipeline configuration: an INI file checked against a fixed schema."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _names(text):
    return tuple(v for v in text.replace(",", " ").split())


def _settings(text):
    """``50:30, 55:30`` -> ((50.0, 30.0), (55.0, 30.0))."""
    out = []
    for item in text.replace(",", " ").split():
        h, s = item.split(":")
        out.append((float(h), float(s)))
    return tuple(out)


def _optional_float(text):
    return None if text.strip() in ("", "auto") else float(text)


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default text)
SCHEMA = {
    "design": {
        "designs": (_names, "D1, D2"),
        "d1_height": (float, "2.0"),
        "d2_height": (float, "2.0"),
        "pitch": (float, "0.05"),
        "printers": (_ints, "11, 21, 31"),
        "settings": (_settings, "50:30, 55:30, 60:30, 65:30, 70:30, 50:35"),
        "replicates": (int, "1"),
    },
    "defects": {
        "optimal_height_11": (float, "50"),
        "optimal_height_21": (float, "55"),
        "optimal_height_31": (float, "60"),
        "baseline_11": (float, "0.6"),
        "baseline_21": (float, "0.3"),
        "baseline_31": (float, "0.0"),
        "height_slope": (float, "0.025"),
        "speed_slope": (float, "0.1"),
        "distortion": (int, "1"),
        "noise_sigma": (float, "0.03"),
        "blur_radius": (int, "0"),
    },
    "segmentation": {
        "method": (str, "net"),
        "depth": (int, "2"),
        "base_channels": (int, "8"),
        "threshold": (float, "0.8"),
        "crops": (int, "200"),
        "crop_size": (int, "64"),
        "epochs": (int, "50"),
        "batch_size": (int, "10"),
        "learning_rate": (float, "0.05"),
        "train_fraction": (float, "0.9"),
    },
    "training": {
        "design": (str, "D1"),
        "hidden": (int, "4"),
        "epochs": (int, "5000"),
        "learning_rate": (float, "0.01"),
        "momentum": (float, "0.9"),
        "lr_increase": (float, "1.05"),
        "lr_decrease": (float, "0.7"),
        "max_perf_increase": (float, "1.04"),
        "fractions": (_floats, "0.70, 0.15, 0.15"),
        "restarts": (int, "5"),
        "restore_best": (_bool, "no"),
    },
    "space": {
        "layer_heights": (_floats, "50, 55, 60, 65, 70"),
        "nozzle_speeds": (_floats, "30, 35"),
        "infill_densities": (_floats, "100"),
        "printers": (_ints, "11, 21, 31"),
        "designed": (_optional_float, "auto"),
        "top_k": (int, "3"),
    },
    "histogram": {
        "edges": (_floats, "0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5"),
        "connectivity": (int, "26"),
    },
    "paths": {
        "out": (str, "run"),
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    sections: dict
    text: str

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def digest(self):
        """SHA-256 of the canonical, fully defaulted configuration."""
        return hashlib.sha256(self.text.encode()).hexdigest()


def _canonical(raw):
    # output location does not influence results, so it stays out of the hash
    lines = []
    for section in (s for s in SCHEMA if s != "paths"):
        lines.append(f"[{section}]")
        lines += [f"{k} = {raw[section][k]}" for k in SCHEMA[section]]
    return "\n".join(lines) + "\n"


def parse_config(text="", source="<config>", overrides=None):
    """Parse INI ``text`` over the defaults; errors name the section and key.

    ``overrides`` maps ``(section, key)`` to replacement text.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for (section, key), value in (overrides or {}).items():
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = str(value)
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{section}]")
    raw = {s: {k: (cp[s][k] if cp.has_option(s, k) else d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    parsed = {}
    for section, keys in SCHEMA.items():
        parsed[section] = {}
        for key, (conv, _) in keys.items():
            try:
                parsed[section][key] = conv(raw[section][key])
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
    _check(parsed, source)
    return PipelineConfig(parsed, _canonical(raw))


def load_config(path=None, overrides=None):
    if path is None:
        return parse_config("", "<defaults>", overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)


def _check(c, source):
    def bad(section, key, why):
        raise ConfigError(f"{source}: [{section}] {key}: {why}")

    for name in c["design"]["designs"]:
        if name not in ("D1", "D2"):
            bad("design", "designs", f"unknown design {name!r} (expected D1 or D2)")
    if not c["design"]["designs"]:
        bad("design", "designs", "no design selected")
    if c["design"]["replicates"] < 1:
        bad("design", "replicates", "must be >= 1")
    if c["segmentation"]["method"] not in ("net", "threshold"):
        bad("segmentation", "method", "must be 'net' or 'threshold'")
    if c["training"]["design"] not in c["design"]["designs"]:
        bad("training", "design", f"{c['training']['design']!r} is not among [design] designs")
    if len(c["training"]["fractions"]) != 3:
        bad("training", "fractions", "needs three values (train, val, test)")
    if c["training"]["restarts"] < 1:
        bad("training", "restarts", "must be >= 1")
    if c["histogram"]["connectivity"] not in (6, 26):
        bad("histogram", "connectivity", "must be 6 or 26")
    if c["space"]["top_k"] < 1:
        bad("space", "top_k", "must be >= 1")
    for key in ("layer_heights", "nozzle_speeds", "infill_densities", "printers"):
        if not c["space"][key]:
            bad("space", key, "empty list")
