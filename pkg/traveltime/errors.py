"""Exception hierarchy for the travel-time estimator.

Every exception carries the process exit code the command line maps it to:
2 for configuration problems, 3 for bad input data, 4 for runtime failures.
"""
from __future__ import annotations

from typing import Any, Optional


class TravelTimeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


# --- configuration -----------------------------------------------------------

class ConfigError(TravelTimeError):
    """Invalid configuration. `field` is the dotted path of the offending key."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class GraphConfigError(ConfigError):
    """The streaming operator graph cannot be built as described."""


# --- input data ----------------------------------------------------------------

class DataError(TravelTimeError):
    exit_code = 3


class InvalidRecordError(DataError):
    """A record violates its type invariants."""


class UnknownLinkError(DataError):
    def __init__(self, link_id: str, record_id: Optional[str] = None) -> None:
        where = f" (record {record_id})" if record_id else ""
        super().__init__(f"unknown link id '{link_id}'{where}")
        self.link_id = link_id
        self.record_id = record_id


class DegenerateObservationError(DataError):
    """The trajectory covers no measurable part of the network."""


class FutureObservationError(DataError):
    def __init__(self, obs_time: float, current_time: float) -> None:
        super().__init__(f"observation time {obs_time} is after current time {current_time}")
        self.obs_time = obs_time
        self.current_time = current_time


class UnsortedInputError(DataError):
    def __init__(self, index: int, message: str = "records are not sorted by start_time") -> None:
        super().__init__(f"{message}; first offending index {index}")
        self.index = index


class NetworkFormatError(DataError):
    def __init__(self, message: str, line: Optional[int] = None, link_id: Optional[str] = None) -> None:
        parts = [message]
        if line is not None:
            parts.append(f"line {line}")
        if link_id is not None:
            parts.append(f"link '{link_id}'")
        super().__init__(", ".join(parts))
        self.line = line
        self.link_id = link_id


class BatchOverflowError(DataError):
    """A single interval holds more records than the configured cap."""


class MissingParametersError(DataError):
    def __init__(self, link: Any) -> None:
        super().__init__(f"no parameters for link {link!r}")
        self.link = link


# --- estimation ----------------------------------------------------------------

class EstimationError(TravelTimeError):
    exit_code = 4


class SeriesConvergenceError(EstimationError):
    """The Gamma-sum series did not reach its tolerance within max_terms."""

    def __init__(self, partial_sum: float, n_terms: int) -> None:
        super().__init__(f"series did not converge after {n_terms} terms (partial log-sum {partial_sum:.6g})")
        self.partial_sum = partial_sum
        self.n_terms = n_terms


class SamplingError(EstimationError):
    pass


class DegenerateSampleError(EstimationError):
    pass


class FitError(EstimationError):
    pass


# --- output --------------------------------------------------------------------

class OutputError(TravelTimeError):
    exit_code = 4
