"""Experiment configuration with desk-scale defaults.

The configuration is a JSON document. Every field has a default, so an
empty ``{}`` file is a complete configuration; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from ..dtp import DtpConfig
from ..errors import ConfigurationError
from ..impair import RxProfile, TxProfile, default_fleet, default_receiver


def _fleet_dicts(fleet):
    out = []
    for tx in fleet:
        d = asdict(tx)
        d["dc_offset"] = [d["dc_offset"].real, d["dc_offset"].imag]
        out.append(d)
    return out


@dataclass(frozen=True)
class RadioConfig:
    carrier_hz: float = 2.5e9          # nominal only; the model is at baseband
    shift_hz: float = 1e6              # deliberate transmitter offset f_cs
    fs: float = 8e6
    symbol_rate: float = 1e6
    sps: int = 8
    rolloff: float = 0.35
    span: int = 10
    n_symbols: int = 500               # payload length, equal to the reference length
    payload_seed: int = 2024
    frame_length: int = 8192           # capture length in samples
    cfo_jitter_hz: float = 200.0       # per-capture oscillator wander (uniform +-)
    floor_snr_db: float = 30.0         # receiver noise floor applied before synchronization

    def __post_init__(self):
        if abs(self.fs / self.symbol_rate - self.sps) > 1e-9:
            raise ConfigurationError("fs / symbol_rate must equal sps")
        if self.frame_length < self.n_symbols * self.sps + 2 * self.span * self.sps + 256:
            raise ConfigurationError("frame_length too short for the burst plus idle guard")


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "ideal"                # ideal | rician
    k_factor: float = 10.0

    def __post_init__(self):
        if self.kind not in ("ideal", "rician"):
            raise ConfigurationError(f"unknown channel {self.kind!r}")


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str = "cnn"                  # cnn | knn
    representation: str = "dtp"        # dtp | dctf | hos (knn only for hos)
    k: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 40
    patience: Optional[int] = None
    shuffle_labels: bool = False       # null control: train on permuted labels

    def __post_init__(self):
        if self.kind not in ("cnn", "knn"):
            raise ConfigurationError(f"unknown classifier {self.kind!r}")
        if self.representation not in ("dtp", "dctf", "hos"):
            raise ConfigurationError(f"unknown representation {self.representation!r}")
        if self.kind == "cnn" and self.representation == "hos":
            raise ConfigurationError("HOS vectors are classified with knn")


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    k_folds: int = 3
    train_snrs: tuple = (-10.0, 0.0, 10.0)

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        object.__setattr__(self, "train_snrs", tuple(float(s) for s in self.train_snrs))


_DTP_DEFAULTS = {"dtp_type": "constellation", "h": 100, "w": 100, "symbols_per_frame": None}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    fleet: tuple = field(default_factory=lambda: tuple(_fleet_dicts(default_fleet())))
    receiver: dict = field(default_factory=lambda: asdict(default_receiver()))
    schemes: tuple = ("qam4",)
    captures_per_device: int = 400
    snr_grid_db: tuple = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    report_snr_db: float = 10.0
    radio: RadioConfig = RadioConfig()
    channel: ChannelConfig = ChannelConfig()
    dtp: dict = field(default_factory=lambda: dict(_DTP_DEFAULTS))
    classifier: ClassifierConfig = ClassifierConfig()
    split: SplitConfig = SplitConfig()
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        object.__setattr__(self, "fleet", tuple(dict(d) for d in self.fleet))
        object.__setattr__(self, "dtp", {**_DTP_DEFAULTS, **self.dtp})
        if not set(self.split.train_snrs) <= set(self.snr_grid_db):
            raise ConfigurationError("train_snrs must be a subset of snr_grid_db")
        if self.report_snr_db not in self.snr_grid_db:
            raise ConfigurationError("report_snr_db must be on the SNR grid")
        if self.captures_per_device < 2:
            raise ConfigurationError("captures_per_device must be >= 2")
        if len(self.fleet) < 2:
            raise ConfigurationError("the fleet needs at least two devices")
        ids = [d["device_id"] for d in self.fleet]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("device ids must be unique")
        self.tx_profiles()
        self.rx_profile()
        self.dtp_config()

    def tx_profiles(self) -> list:
        out = []
        for d in self.fleet:
            d = dict(d)
            dc = d.get("dc_offset", 0)
            d["dc_offset"] = complex(*dc) if isinstance(dc, (list, tuple)) else complex(dc)
            out.append(TxProfile(**d))
        return out

    def rx_profile(self) -> RxProfile:
        return RxProfile(**self.receiver)

    def dtp_config(self) -> DtpConfig:
        d = dict(self.dtp)
        if d.get("bounds") is not None:
            d["bounds"] = tuple(d["bounds"])
        return DtpConfig(**d)

    @property
    def device_ids(self) -> list:
        return [d["device_id"] for d in self.fleet]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fleet"] = [dict(f) for f in self.fleet]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"radio": RadioConfig, "channel": ChannelConfig,
                  "classifier": ClassifierConfig, "split": SplitConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d:
                sub = dict(d[key])
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ConfigurationError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = typ(**sub)
        return cls(**d)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def identical_fleet(cfg: ExperimentConfig, template: int = 2) -> tuple:
    """Fleet in which every device shares one profile (a null control)."""
    base = dict(cfg.fleet[template])
    return tuple({**base, "device_id": d["device_id"]} for d in cfg.fleet)
