"""Run manifests recorded in every CLI output."""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dateutil import parser as date_parser
from dateutil import tz


logger = logging.getLogger(__name__)

TIMESTAMP_KEY = "timestamp"


def utc_timestamp() -> str:
    """Current UTC time as an ISO 8601 string."""
    return datetime.now(tz.tzutc()).isoformat(timespec="seconds")


def parse_timestamp(value: str) -> datetime:
    """Parse an ISO 8601 timestamp, assuming UTC when no offset is given."""
    try:
        parsed = date_parser.isoparse(value)
    except ValueError as e:
        logger.error(f"Failed to parse timestamp '{value}': {e}")
        raise
    return parsed if parsed.tzinfo is not None else parsed.replace(tzinfo=tz.tzutc())


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    output_dir: str
    tool_version: str
    scenario_path: Optional[str] = None
    overrides: Dict[str, Any] = field(default_factory=dict)
    timestamp: str = field(default_factory=utc_timestamp)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def started_at(self) -> datetime:
        return parse_timestamp(self.timestamp).astimezone(tz.tzutc())

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunManifest":
        parse_timestamp(doc[TIMESTAMP_KEY])
        return cls(**doc)


def load_manifest(path: Union[str, Path]) -> Optional[RunManifest]:
    """Manifest of an earlier summary.json, or None when there is none or it cannot be read."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        return RunManifest.from_dict(json.loads(path.read_text())["manifest"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        logger.warning(f"Ignoring unreadable manifest in {path}: {e}")
        return None


def without_clock_fields(doc: Any) -> Any:
    """Copy of a report document with ``timestamp`` and ``wall_time_ms`` removed at every depth."""
    if isinstance(doc, dict):
        return {k: without_clock_fields(v) for k, v in doc.items() if k not in (TIMESTAMP_KEY, "wall_time_ms")}
    if isinstance(doc, list):
        return [without_clock_fields(v) for v in doc]
    return doc
