import os
import json
import logging
from typing import Any, Dict, Iterable, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Set up logging
logging.basicConfig(
    level=os.getenv("ELLIPTIC_TW_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(levelname)s - %(message)s'
)


class ComputationError(Exception):
    """Base exception for numerical and experiment errors."""
    pass


class DomainError(ComputationError):
    """Exception for arguments outside the domain of an operation."""
    pass


class InvalidStateError(ComputationError):
    """Exception for objects that cannot support the requested operation."""
    pass


class SolverError(ComputationError):
    """Exception for a self-consistent solve that did not converge."""

    def __init__(self, message: str, residual: float = float("nan"),
                 z: Optional[complex] = None, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.z = z
        self.iterations = iterations


class PoleError(ComputationError):
    """Exception for a vanishing denominator in F_p or F_{p,c}."""

    def __init__(self, message: str, index: int, kind: str):
        super().__init__(message)
        self.index = index
        self.kind = kind


class PersistenceError(ComputationError):
    """Exception for failures writing results to disk."""
    pass


def env_int(name: str, default: int) -> int:
    """
    Read a positive integer from the environment.

    Args:
        name: Environment variable name
        default: Value used when the variable is unset or empty

    Returns:
        The parsed integer

    Raises:
        ValueError: If the variable is set but not a positive integer
    """
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got: {raw}")
    if value < 1:
        raise ValueError(f"{name} must be positive, got: {value}")
    return value


def env_flag(name: str) -> bool:
    """Return True when the environment variable is set to a truthy value."""
    return os.getenv(name, "").strip().lower() in ("1", "true", "yes", "on")


def default_threads() -> int:
    return env_int("ELLIPTIC_TW_THREADS", 1)


def default_output_dir() -> str:
    return os.getenv("ELLIPTIC_TW_OUTPUT", "output")


def prepare_output_folder(output_dir: str, subdir: Optional[str] = None) -> str:
    """
    Create (if needed) and return the output folder for a subcommand.

    Args:
        output_dir: Base directory for outputs
        subdir: Optional subdirectory, e.g. the subcommand name

    Returns:
        Absolute path of the folder

    Raises:
        PersistenceError: If the directory cannot be created
    """
    folder = os.path.abspath(output_dir if subdir is None else os.path.join(output_dir, subdir))
    try:
        os.makedirs(folder, exist_ok=True)
    except OSError as e:
        raise PersistenceError(f"Cannot create output directory: {e}")
    return folder


def save_frame_to_csv(df: pd.DataFrame, output_path: str) -> pd.DataFrame:
    """
    Save a table to CSV and return it.

    Floats are written with their shortest round-trip representation so
    load_frame_from_csv gives back identical values.

    Args:
        df: Table to save
        output_path: Path of the CSV file

    Returns:
        The same DataFrame
    """
    try:
        df.to_csv(output_path, index=False)
        logging.info(f"CSV file saved to: {output_path} ({len(df)} rows)")
        return df
    except Exception as e:
        logging.error(f"Error saving CSV file: {e}")
        raise PersistenceError(f"Failed to save CSV file: {e}")


def load_frame_from_csv(path: str) -> pd.DataFrame:
    """Read a CSV written by save_frame_to_csv without losing float bits."""
    try:
        return pd.read_csv(path, float_precision='round_trip')
    except Exception as e:
        logging.error(f"Error reading CSV file {path}: {e}")
        raise PersistenceError(f"Failed to read CSV file: {e}")


def append_frame_to_csv(df: pd.DataFrame, output_path: str) -> None:
    """Append rows to a CSV ledger, writing the header only for a new file."""
    try:
        new_file = not os.path.exists(output_path)
        df.to_csv(output_path, mode='a', header=new_file, index=False)
    except Exception as e:
        logging.error(f"Error appending to ledger: {e}")
        raise PersistenceError(f"Failed to append to ledger: {e}")


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def save_json(payload: Dict[str, Any], output_path: str) -> None:
    """
    Save a flat dictionary as JSON with sorted keys.

    Args:
        payload: Dictionary to save
        output_path: Path of the JSON file
    """
    try:
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        logging.info(f"JSON file saved to: {output_path}")
    except Exception as e:
        logging.error(f"Error saving JSON file: {e}")
        raise PersistenceError(f"Failed to save JSON file: {e}")


def to_json_text(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default)


def check_finite(values: Iterable[float], name: str) -> np.ndarray:
    """
    Convert to a float array and reject NaN/inf entries.

    Raises:
        ValueError: If any entry is not finite
    """
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values.")
    return arr
