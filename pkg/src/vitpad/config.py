"""Flat run-configuration files: `key = value` lines with `#` comments.

Unknown keys are rejected so typos fail loudly instead of silently
running with defaults.
"""

from .errors import FormatError, VitPadIOError
from .train import TrainConfig
from .vit import ViTConfig

_INT_KEYS = {
    "image_size": 224,
    "patch_size": 16,
    "channels": 3,
    "dim": 768,
    "depth": 12,
    "heads": 12,
    "mlp_dim": 3072,
    "num_outputs": 1,
    "batch_size": 16,
    "epochs": 20,
    "seed": 0,
}
_FLOAT_KEYS = {
    "learning_rate": 1e-4,
    "weight_decay": 1e-5,
    "flip_prob": 0.5,
    "dev_fraction": 0.2,
    "train_fraction": 0.6,
    "eval_fraction": 0.2,
    "eye_x": 0.35,
    "eye_y": 0.38,
    "target_bpcer": 0.01,
}
_STR_KEYS = {"policy": "FC"}

KNOWN_KEYS = {**_INT_KEYS, **_FLOAT_KEYS, **_STR_KEYS}


def default_run_config() -> dict:
    return dict(KNOWN_KEYS)


def load_run_config(path=None) -> dict:
    """Parse a config file over the defaults; None means defaults only."""
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise VitPadIOError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in KNOWN_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown key '{key}'")
        try:
            if key in _INT_KEYS:
                cfg[key] = int(raw)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(raw)
            else:
                cfg[key] = raw
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad value '{raw}' for key '{key}'") from None
    return cfg


def vit_config_from(cfg: dict) -> ViTConfig:
    return ViTConfig(
        image_size=cfg["image_size"],
        patch_size=cfg["patch_size"],
        channels=cfg["channels"],
        dim=cfg["dim"],
        depth=cfg["depth"],
        heads=cfg["heads"],
        mlp_dim=cfg["mlp_dim"],
        num_outputs=cfg["num_outputs"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        flip_prob=cfg["flip_prob"],
        policy=str(cfg["policy"]).upper(),
        seed=cfg["seed"],
    )
