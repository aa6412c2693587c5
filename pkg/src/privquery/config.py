"""JSON configuration, parity-check matrix files and database files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adversary import AnomalyConfig
from .bits import pack_bits, unpack_bits
from .codec import CodecError, H_25, H_35_6, ParityCheckMatrix, Thresholds
from .states import ChannelError, ChannelModel, StateGeometry

BUILTIN_MATRICES = {"H_35_6": H_35_6, "H_25": H_25}
SEED_ENV = "PRIVQUERY_SEED"
OUT_ENV = "PRIVQUERY_OUT"


class ConfigError(ValueError):
    pass


def load_database(path, N: int) -> np.ndarray:
    """First N bits of a packed file, most significant bit of each byte first."""
    if N < 0:
        raise ConfigError("N must be non-negative")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read database {path}: {exc}") from exc
    need = (N + 7) // 8
    if len(data) < need:
        raise ConfigError(f"database {path} has {len(data)} bytes, need {need} for {N} bits")
    return unpack_bits(data, N)


def store_database(path, bits) -> None:
    Path(path).write_bytes(pack_bits(bits))


def load_matrix(data: dict, base_dir=None) -> ParityCheckMatrix:
    """Matrix from ``matrix`` (inline rows or builtin name) or ``matrix_file``."""
    try:
        if "matrix" in data:
            spec = data["matrix"]
            if isinstance(spec, str) and spec in BUILTIN_MATRICES:
                return BUILTIN_MATRICES[spec]()
            rows = spec.split("/") if isinstance(spec, str) else spec
            return ParityCheckMatrix(np.array([[int(c) for c in row] for row in rows],
                                              dtype=np.uint8))
        if "matrix_file" in data:
            name = data["matrix_file"]
            if name in BUILTIN_MATRICES:
                return BUILTIN_MATRICES[name]()
            path = Path(name)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return ParityCheckMatrix.load(path)
    except (CodecError, OSError, ValueError) as exc:
        raise ConfigError(f"bad parity-check matrix: {exc}") from exc
    raise ConfigError("config needs 'matrix' or 'matrix_file'")


@dataclass
class RunConfig:
    params: object
    seed: int | None
    database_file: str | None
    query_index: int
    raw: dict
    base_dir: Path


def params_from_dict(data: dict, base_dir=None):
    from .protocol.engine import ProtocolParams

    try:
        theta = float(data["theta_deg"])
        N = int(data["N"])
        H = load_matrix(data, base_dir)
        if "k" in data and int(data["k"]) != H.k:
            raise ConfigError(f"k={data['k']} but the matrix has {H.k} columns")
        if "r" in data and int(data["r"]) != H.r:
            raise ConfigError(f"r={data['r']} but the matrix has {H.r} rows")
        channel = dict(data.get("channel") or {})
        if channel.get("mode", "direct") == "physical":
            channel.setdefault("theta_deg", theta)
        th = data.get("thresholds") or {}
        anomaly = data.get("anomaly", "default")
        if anomaly == "default":
            anomaly_cfg = AnomalyConfig.for_code(H.k, theta)
        elif anomaly is None or anomaly is False:
            anomaly_cfg = None
        else:
            anomaly_cfg = AnomalyConfig.from_dict(anomaly)
        return ProtocolParams(
            geometry=StateGeometry(theta), H=H, N=N,
            channel=ChannelModel.from_dict(channel),
            thresholds=Thresholds(**th),
            abort_after_failures=int(data.get("abort_after_failures", 3)),
            key_length=data.get("key_length"),
            max_pulses=data.get("max_pulses"),
            anomaly=anomaly_cfg,
            use_gate=bool(data.get("use_gate", False)))
    except ConfigError:
        raise
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc}") from exc
    except (TypeError, ValueError, ChannelError, CodecError) as exc:
        raise ConfigError(str(exc)) from exc


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def resolve_seed(cli_seed: int | None, config_seed) -> int | None:
    """Command line beats the environment, which beats the config file."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return None if config_seed is None else int(config_seed)


def resolve_out(cli_out: str | None, config_out: str | None) -> Path:
    return Path(cli_out or os.environ.get(OUT_ENV) or config_out or ".")


def load_run_config(path, seed: int | None = None) -> RunConfig:
    data = read_json(path)
    base = Path(path).resolve().parent
    params = params_from_dict(data, base)
    return RunConfig(params=params, seed=resolve_seed(seed, data.get("seed")),
                     database_file=data.get("database_file"),
                     query_index=int(data.get("query_index", 0)), raw=data, base_dir=base)
