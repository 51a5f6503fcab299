"""Shared helpers: errors, seed derivation, angles and artifact headers.

Every random consumer in the package draws from a generator derived from a
root seed plus string/integer labels, so that subcommands stay reproducible
no matter which order their consumers run in.
"""

import hashlib
import json
import math
from typing import Any, Dict, Optional, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class AutophotoError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(AutophotoError):
    """Malformed configuration or missing input files."""


class SceneOverlapError(ConfigError):
    """Training and evaluation scene sets share scene ids."""


class SceneError(AutophotoError, ValueError):
    """Degenerate scene parameters or a query at a non-navigable pose."""


class FormatError(AutophotoError):
    """A scene, checkpoint or transcript file could not be decoded."""


class NumericalError(AutophotoError, ArithmeticError):
    """Non-finite input, gradient or loss."""


class EpisodeError(AutophotoError):
    """Misuse of an episode: stepping after termination, wrong scene."""


class DemonstrationError(AutophotoError):
    """No demonstration survived filtering."""


def _label_code(label: Union[str, int]) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(seed: int, *labels: Union[str, int]) -> int:
    """Deterministically derive a 31-bit child seed from a root seed."""
    sequence = np.random.SeedSequence([seed & 0xFFFFFFFF, *map(_label_code, labels)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0] >> 1)


def rng_for(seed: int, *labels: Union[str, int]) -> np.random.Generator:
    """Generator for one named consumer of a root seed."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, *map(_label_code, labels)])
    )


def wrap_angle(angle: ArrayLike) -> Any:
    """Wrap radians to [-pi, pi); angles already in range come back bit-identical."""
    if isinstance(angle, np.ndarray):
        wrapped_arr = np.mod(angle + np.pi, 2.0 * np.pi) - np.pi
        # mod can round up to exactly 2*pi for tiny negative inputs
        wrapped_arr = np.where(wrapped_arr >= np.pi, wrapped_arr - 2.0 * np.pi, wrapped_arr)
        return np.where((angle >= -np.pi) & (angle < np.pi), angle, wrapped_arr)
    if -math.pi <= angle < math.pi:
        return float(angle)
    wrapped = math.fmod(float(angle) + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    wrapped -= math.pi
    return wrapped - 2.0 * math.pi if wrapped >= math.pi else wrapped


def require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} contains non-finite values")


def dumps_canonical(payload: Any) -> str:
    """JSON with sorted keys and no whitespace drift, for byte-stable files."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def tool_version() -> str:
    from autophoto import __version__

    return __version__ or "0+unknown"


def artifact_meta(run_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Metadata block embedded in every artifact the CLI writes."""
    return {"tool": "autophoto", "version": tool_version(), "run_config": run_config}


def csv_preamble(run_config: Optional[Dict[str, Any]] = None, **extra: Any) -> str:
    """Comment lines placed ahead of CSV reports (read back with comment='#')."""
    lines = [f"# autophoto {tool_version()}"]
    if run_config is not None:
        lines.append(f"# run_config {dumps_canonical(run_config)}")
    for key in sorted(extra):
        lines.append(f"# {key} {dumps_canonical(extra[key])}")
    return "\n".join(lines) + "\n"
