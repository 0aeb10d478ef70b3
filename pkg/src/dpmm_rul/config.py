"""Plain-text key/value configuration for fleets and experiments.

Keys before the first section header are top-level settings.  Optional
sections: ``[mode.NAME]`` and ``[sensor.N]`` override the generator's modes
and sensors, ``[pipeline]`` sets any :class:`PipelineConfig` field.

Example::

    scenario = sim-stationary
    n_modes = 4
    seed = 7

    [pipeline]
    omega = 1e-3
    max_iters = 40
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from . import datagen
from .datagen import FleetConfig, ModeSpec, SensorSpec
from .errors import DataError, InvalidInputError
from .experiments import SCENARIOS, SIM_STATIONARY, SIM_NONSTATIONARY, CMAPSS, SIM_WINDOW, CMAPSS_WINDOW
from .pipeline import PipelineConfig
from .structure import BirthConfig, SCORE_VARIANTS, J_SCORE

_TOP = "__top__"


def read_kv(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string(f"[{_TOP}]\n" + fh.read(), source=str(path))
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _cast(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return None if value.lower() in ("", "none") else float(value)
    return value


def _parse_emergence(text: str) -> list[tuple[int, str]]:
    out = []
    for item in text.replace(",", " ").split():
        it, _, name = item.partition(":")
        if not name:
            raise ValueError(f"emergence entries look like ITER:MODE, got {item!r}")
        out.append((int(it), name))
    return out


def _mode(name: str, sec: dict) -> ModeSpec:
    cov = _floats(sec["gamma_cov"])
    if len(cov) != 4:
        raise ValueError("gamma_cov needs 4 numbers")
    return ModeSpec(name, tuple(_floats(sec["gamma_mean"])), ((cov[0], cov[1]), (cov[2], cov[3])),
                    tuple(int(v) for v in _floats(sec["trend_signs"])))


def _sensor(sec: dict) -> SensorSpec:
    d1, d2, d3 = _floats(sec["delta"])
    kind, *freq = sec.get("temporal", "none").split()
    return SensorSpec(d1, d2, d3, kind, float(freq[0]) if freq else 0.0)


def fleet_config(sections: dict[str, dict[str, str]]) -> FleetConfig:
    """Build a generator config; unspecified parts fall back to the canonical setup."""
    top = sections.get(_TOP, {})
    try:
        n_modes = int(top.get("n_modes", 4))
        modes = [_mode(s.split(".", 1)[1], v) for s, v in sections.items() if s.startswith("mode.")]
        sensors = [_sensor(v) for s, v in sorted(
            ((s, v) for s, v in sections.items() if s.startswith("sensor.")), key=lambda sv: int(sv[0].split(".")[1]))]
        base = datagen.default_config(n_modes)
        kwargs = dict(
            modes=modes or base.modes,
            sensors=sensors or base.sensors,
            systems_per_mode=int(top.get("systems_per_mode", base.systems_per_mode)),
            seed=int(top.get("seed", 0)),
            failure_threshold=float(top.get("failure_threshold", base.failure_threshold)),
            noise_sd=float(top.get("noise_sd", base.noise_sd)),
            uniform_hi=float(top.get("uniform_hi", base.uniform_hi)),
            emergence_schedule=_parse_emergence(top.get("emergence", "")),
            rejection_cap=int(float(top.get("rejection_cap", base.rejection_cap))),
        )
        return FleetConfig(**kwargs)
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad fleet configuration: {exc}") from None


def load_fleet_config(path) -> FleetConfig:
    return fleet_config(read_kv(path))


@dataclass
class ExperimentConfig:
    scenario: str = SIM_STATIONARY
    score: str = J_SCORE
    n_modes: int = 4
    seed: int = 0
    n_train: int = 40
    n_test: int = 10
    arrival: int = 10
    data_dir: str | None = None
    labels: str | None = None
    subset: str = "FD003"
    fleet: FleetConfig | None = None
    pipeline: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidInputError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if self.score not in SCORE_VARIANTS:
            raise InvalidInputError(f"unknown score {self.score!r}")

    def pipeline_config(self) -> PipelineConfig:
        window = CMAPSS_WINDOW if self.scenario == CMAPSS else SIM_WINDOW
        opts = dict(window=window, seed=self.seed, score=self.score)
        opts.update(self.pipeline)
        return PipelineConfig(**opts)


_PIPELINE_DEFAULTS = {f.name: f.default for f in dataclasses.fields(PipelineConfig)
                      if f.default is not dataclasses.MISSING}
_BIRTH_KEYS = {"r_threshold": 0.1, "k_prime": 2, "local_iters": 20}


def pipeline_overrides(sec: dict[str, str]) -> dict:
    out, birth = {}, {}
    for key, value in sec.items():
        if key in _BIRTH_KEYS:
            birth[key] = _cast(value, _BIRTH_KEYS[key])
        elif key in _PIPELINE_DEFAULTS:
            out[key] = _cast(value, _PIPELINE_DEFAULTS[key])
        else:
            raise DataError(f"unknown pipeline setting {key!r}")
    if birth:
        out["birth"] = BirthConfig(**birth)
    return out


def load_experiment_config(path) -> ExperimentConfig:
    sections = read_kv(path)
    top = sections.get(_TOP, {})
    try:
        cfg = ExperimentConfig(
            scenario=top.get("scenario", SIM_STATIONARY),
            score=top.get("score", J_SCORE),
            n_modes=int(top.get("n_modes", 4)),
            seed=int(top.get("seed", 0)),
            n_train=int(top.get("n_train", 40)),
            n_test=int(top.get("n_test", 10)),
            arrival=int(top.get("arrival", 10)),
            data_dir=top.get("data_dir") or None,
            labels=top.get("labels") or None,
            subset=top.get("subset", "FD003"),
            pipeline=pipeline_overrides(sections.get("pipeline", {})),
        )
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if any(s.startswith(("mode.", "sensor.")) for s in sections) or "systems_per_mode" in top:
        cfg.fleet = fleet_config(sections)
    return cfg
