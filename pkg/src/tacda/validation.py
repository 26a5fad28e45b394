"""Input checks shared by the estimators."""
import numpy as np


def check_windows(X, name: str = "X", n_sensors=None, window=None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape ``(n, M, L)``."""
    if hasattr(X, "values") and hasattr(X, "unit_ids"):
        X = X.values
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (n_windows, n_sensors, n_timesteps), got {arr.shape}")
    if len(arr) == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n_sensors is not None and arr.shape[1] != n_sensors:
        raise ValueError(f"{name} has {arr.shape[1]} sensors, expected {n_sensors}")
    if window is not None and arr.shape[2] != window:
        raise ValueError(f"{name} has window length {arr.shape[2]}, expected {window}")
    return np.ascontiguousarray(arr)


def check_targets(y, n: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(arr) != n:
        raise ValueError(f"{name} has {len(arr)} entries for {n} windows")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
