from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .exceptions import FormatError, InvalidArgumentError
from .series import bits_for

FORMAT_VERSION = 1


@dataclass
class IndexConfig:
    """Every knob of an index. Defaults follow the reference parameter set."""

    n: int = 256
    w: int = 16
    c: int = 256
    th: int = 10000
    alpha: float = 0.2
    fill_low: float = 0.5
    fill_high: float = 3.0
    rho: float = 0.5
    fuzzy: float = 0.0
    max_replication: int = 3
    split: str = "adaptive"
    exhaustive_split: bool = False
    distance: str = "ed"
    window: float = 0.10
    batch_rows: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def b(self) -> int:
        return bits_for(self.c)

    @property
    def binary(self) -> bool:
        return self.split == "binary"

    def validate(self) -> "IndexConfig":
        if self.n < 1 or self.w < 1 or self.w > self.n:
            raise InvalidArgumentError(f"need 1 <= w <= n, got w={self.w}, n={self.n}")
        if self.n % self.w:
            raise InvalidArgumentError(f"w={self.w} must divide n={self.n}")
        if self.w > 32:
            raise InvalidArgumentError("at most 32 segments are supported")
        if bits_for(self.c) > 8:
            raise InvalidArgumentError("cardinality above 256 is not supported")
        if self.th < 1:
            raise InvalidArgumentError("leaf threshold th must be >= 1")
        if not 0 < self.fill_low <= self.fill_high:
            raise InvalidArgumentError("need 0 < fill_low <= fill_high")
        if self.rho < 0:
            raise InvalidArgumentError("rho must be >= 0")
        if not 0.0 <= self.fuzzy < 1.0:
            raise InvalidArgumentError("fuzzy boundary f must lie in [0, 1)")
        if self.max_replication < 1:
            raise InvalidArgumentError("max_replication must be >= 1")
        if self.split not in ("adaptive", "binary"):
            raise InvalidArgumentError(f"unknown split mode {self.split!r}")
        if self.distance not in ("ed", "dtw"):
            raise InvalidArgumentError(f"unknown distance {self.distance!r}")
        if not 0.0 < self.window <= 1.0:
            raise InvalidArgumentError("window must lie in (0, 1]")
        return self

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IndexConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from exc
        if raw.pop("format_version", None) != FORMAT_VERSION:
            raise FormatError("unsupported index format version")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)
