"""Benchmark output functions and adapters for external models.

Built-ins cover the two-dimensional analytic benchmarks (a shifted
Rastrigin surface, four degraded low-fidelity variants of it, and a
cross-in-tray surface with an overflow-safe log-space evaluation).
External models plug in either as CSV datasets of precomputed runs or as
a line-oriented child process: one whitespace-separated input line in,
one numeric output line back.

Every handle counts its evaluations and carries a declared cost per
evaluation for budget accounting.
"""

from __future__ import annotations

import csv
import math
import os
import select
import subprocess
import threading
import time

import numpy as np

from .exceptions import DatasetLookupError, EvaluationError

__all__ = [
    "rastrigin",
    "rastrigin_lf",
    "cross_in_tray",
    "BUILTIN_MODELS",
    "ModelHandle",
    "BuiltinModel",
    "DatasetModel",
    "CommandModel",
    "external_evaluate",
    "evaluate_model",
]

_TWO_PI = 2.0 * math.pi


def rastrigin(x):
    """Inverted two-dimensional Rastrigin surface ``10 - sum(x_i^2 - 5 cos(2 pi x_i))``."""
    x = np.asarray(x, dtype=float)
    return 10.0 - np.sum(x * x - 5.0 * np.cos(_TWO_PI * x), axis=-1)


def rastrigin_lf(x, variant: int):
    """Degraded low-fidelity companions of :func:`rastrigin`.

    1. constant offset by 90, 2. magnification by 10, 3. cosine phases
    shifted by ``pi/2``, 4. cosine frequencies halved.  Variants 1-2 are
    perfectly correlated with the reference; 3-4 are only partially.
    """
    x = np.asarray(x, dtype=float)
    if variant == 1:
        return 100.0 - np.sum(x * x - 5.0 * np.cos(_TWO_PI * x), axis=-1)
    if variant == 2:
        return 100.0 - np.sum(10.0 * x * x - 50.0 * np.cos(_TWO_PI * x), axis=-1)
    if variant == 3:
        return 10.0 - np.sum(x * x - 5.0 * np.cos(_TWO_PI * x + math.pi / 2.0), axis=-1)
    if variant == 4:
        return 10.0 - np.sum(x * x - 5.0 * np.cos(math.pi * x), axis=-1)
    raise ValueError(f"low-fidelity variant must be 1..4, got {variant}")


def cross_in_tray(x):
    """Modified cross-in-tray surface, evaluated in log space.

    Mathematically ``-0.001 (|sin x1 sin x2 e^E| + 1)^0.1`` with
    ``E = |100 - sqrt((x1^2 + x2^2)/pi)|``; ``e^E`` alone can overflow a
    double far from the origin, so the product is carried as a log
    magnitude and the outer power becomes ``exp(0.1 * softplus(...))``.
    """
    x = np.asarray(x, dtype=float)
    exponent = np.abs(100.0 - np.sqrt(np.sum(x * x, axis=-1) / math.pi))
    sines = np.sin(x[..., 0]) * np.sin(x[..., 1])
    with np.errstate(divide="ignore"):
        log_magnitude = np.log(np.abs(sines)) + exponent
    softplus = np.maximum(log_magnitude, 0.0) + np.log1p(
        np.exp(-np.abs(log_magnitude))
    )
    return -0.001 * np.exp(0.1 * softplus)


BUILTIN_MODELS = {
    "rastrigin": rastrigin,
    "rastrigin_lf1": lambda x: rastrigin_lf(x, 1),
    "rastrigin_lf2": lambda x: rastrigin_lf(x, 2),
    "rastrigin_lf3": lambda x: rastrigin_lf(x, 3),
    "rastrigin_lf4": lambda x: rastrigin_lf(x, 4),
    "cross_in_tray": cross_in_tray,
}


class ModelHandle:
    """Base class: evaluation counting plus a declared per-call cost."""

    kind = "abstract"

    def __init__(self, name: str, cost: float = 1.0):
        self.name = name
        self.cost = float(cost)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def evaluations(self) -> int:
        return self._count

    def _charge(self, count: int = 1):
        with self._lock:
            self._count += count

    def evaluate(self, x) -> float:
        raise NotImplementedError

    def evaluate_batch(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.array([self.evaluate(row) for row in points])


class BuiltinModel(ModelHandle):
    """Handle over one of the vectorized built-in functions."""

    kind = "builtin"

    def __init__(self, name: str, cost: float = 1.0):
        if name not in BUILTIN_MODELS:
            raise ValueError(
                f"unknown builtin model {name!r}; available: {sorted(BUILTIN_MODELS)}"
            )
        super().__init__(name, cost)
        self._fn = BUILTIN_MODELS[name]

    def evaluate(self, x) -> float:
        self._charge()
        return float(self._fn(np.asarray(x, dtype=float)))

    def evaluate_batch(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self._charge(len(points))
        return np.asarray(self._fn(points), dtype=float)


def _dataset_key(x) -> str:
    """Canonical rendering of an input row at 15 significant digits."""
    return ",".join(format(float(v), ".15g") for v in np.atleast_1d(x))


class DatasetModel(ModelHandle):
    """Replay of precomputed runs stored as ``x1,...,xN,y`` CSV rows.

    Inputs are matched by their canonical 15-significant-digit rendering,
    so a design written out and read back hits exactly.  A miss raises
    :class:`DatasetLookupError` without charging the counter.
    """

    kind = "dataset"

    def __init__(self, path, cost: float = 1.0, name: str | None = None):
        super().__init__(name or str(path), cost)
        self._table = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 2 or header[-1] != "y":
                raise ValueError(
                    f"dataset {path} must have header x1,...,xN,y"
                )
            self.dimension = len(header) - 1
            for row in reader:
                if not row:
                    continue
                key = _dataset_key([float(v) for v in row[:-1]])
                self._table[key] = float(row[-1])

    def evaluate(self, x) -> float:
        key = _dataset_key(x)
        try:
            value = self._table[key]
        except KeyError:
            raise DatasetLookupError(
                f"no dataset row matches input {np.asarray(x).tolist()}"
            ) from None
        self._charge()
        return value


class CommandModel(ModelHandle):
    """One evaluation per line over a child process's stdin/stdout.

    The protocol: write one whitespace-separated input line, flush, read
    one numeric output line.  Timeouts, crashes, and non-numeric replies
    raise :class:`EvaluationError` with captured diagnostics.  A handle
    owns one child and serializes requests; use one handle per worker for
    concurrent evaluation.
    """

    kind = "command"

    def __init__(self, argv, timeout: float = 30.0, cost: float = 1.0, name=None):
        if isinstance(argv, (str, os.PathLike)):
            argv = [str(argv)]
        super().__init__(name or " ".join(map(str, argv)), cost)
        self.timeout = float(timeout)
        self._argv = [str(a) for a in argv]
        self._proc = None
        self._buffer = b""

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
            )
            self._buffer = b""

    def _read_line(self) -> str:
        fd = self._proc.stdout.fileno()
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise EvaluationError(
                    f"model command timed out after {self.timeout}s: {self.name}"
                )
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 4096)
            if not chunk:
                stderr = self._drain_stderr()
                raise EvaluationError(
                    f"model command closed its output (exit={self._proc.poll()}): {stderr}"
                )
            self._buffer += chunk
        line, _, self._buffer = self._buffer.partition(b"\n")
        return line.decode()

    def _drain_stderr(self) -> str:
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            return self._proc.stderr.read().decode(errors="replace").strip()
        except Exception:
            return ""

    def evaluate(self, x) -> float:
        with self._lock:
            self._ensure_started()
            line = " ".join(repr(float(v)) for v in np.atleast_1d(x)) + "\n"
            try:
                self._proc.stdin.write(line.encode())
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise EvaluationError(
                    f"model command rejected input: {self._drain_stderr()}"
                ) from exc
            reply = self._read_line()
            try:
                value = float(reply)
            except ValueError as exc:
                raise EvaluationError(
                    f"model command returned non-numeric output {reply!r}"
                ) from exc
            self._count += 1
            return value

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5.0)
            except Exception:
                self._proc.kill()
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def external_evaluate(handle: ModelHandle, x) -> float:
    """Evaluate a configured external model handle at one input point."""
    return handle.evaluate(x)


def evaluate_model(model, points) -> np.ndarray:
    """Evaluate a model at many points; accepts handles or plain callables."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(model, ModelHandle):
        return model.evaluate_batch(points)
    try:
        result = np.asarray(model(points), dtype=float)
    except Exception:
        result = None
    if result is None or result.shape != (len(points),):
        result = np.array([float(model(row)) for row in points])
    return result
