"""Versioned JSON run configuration with strict key checking."""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .network import NetworkConfig
from .pipeline import SceneConfig
from .training import TrainConfig

CONFIG_VERSION = 1
_SECTIONS = {"version", "train", "network", "loss", "camera", "paths"}
_PATH_KEYS = {"model"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    camera: SceneConfig = field(default_factory=SceneConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self):
        return {"version": CONFIG_VERSION, "train": self.train.to_dict(), "network": self.network.to_dict(),
                "loss": self.loss.to_dict(), "camera": self.camera.to_dict(), "paths": dict(self.paths)}

    @classmethod
    def from_dict(cls, d, base_dir=None):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r} (expected {CONFIG_VERSION})")
        paths = dict(d.get("paths", {}))
        bad = set(paths) - _PATH_KEYS
        if bad:
            raise ConfigError(f"unknown paths keys: {', '.join(sorted(bad))}")
        if base_dir is not None:
            paths = {k: str((Path(base_dir) / v).resolve()) for k, v in paths.items()}
        try:
            cfg = cls(train=TrainConfig.from_dict(d.get("train", {})),
                      network=NetworkConfig.from_dict(d.get("network", {})),
                      loss=LossWeights.from_dict(d.get("loss", {})),
                      camera=SceneConfig.from_dict(d.get("camera", {})),
                      paths=paths)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.network.input_size != cfg.camera.image_size:
            raise ConfigError(f"network input_size {cfg.network.input_size} differs from camera "
                              f"image_size {cfg.camera.image_size}")
        return cfg

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_run_config(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(d, base_dir=path.parent)
