import json
import os
from collections import deque
from functools import lru_cache
from pathlib import Path
from typing import Deque, Dict, Iterable, List

import aiofiles
import yaml

PACKAGE_DIR = Path(__file__).resolve().parent
SPECS_DIR = PACKAGE_DIR / "specs"
SCENARIOS_DIR = PACKAGE_DIR / "scenarios"
DEFAULT_LOG_DIR = "./mavguard-logs"


@lru_cache(maxsize=None)
def get_flight_modes() -> Dict[str, int]:
    """Load the custom_mode table shipped with the package."""
    with open(PACKAGE_DIR / "flight-modes.yaml", "r") as f:
        data = yaml.load(f, Loader=yaml.SafeLoader)
    return {str(k): int(v) for k, v in data["modes"].items()}


def mode_name(custom_mode: int) -> str:
    for name, number in get_flight_modes().items():
        if number == custom_mode:
            return name
    return str(custom_mode)


def resolve_spec_path(path: str) -> Path:
    """Find a spec file on disk, falling back to the specs shipped with the package."""
    candidate = Path(path)
    if candidate.exists():
        return candidate
    packaged = SPECS_DIR / candidate.name
    if packaged.exists():
        return packaged
    raise FileNotFoundError(f"spec file not found: {path}")


def resolve_scenario_path(name_or_path: str) -> Path:
    candidate = Path(name_or_path)
    if candidate.exists():
        return candidate
    name = candidate.name if candidate.suffix == ".json" else f"{candidate.name}.json"
    packaged = SCENARIOS_DIR / name
    if packaged.exists():
        return packaged
    raise FileNotFoundError(f"scenario not found: {name_or_path}")


def list_packaged_scenarios() -> List[str]:
    return sorted(p.stem for p in SCENARIOS_DIR.glob("*.json"))


async def save_json(path: str, data) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    async with aiofiles.open(path, mode="w", encoding="utf-8") as f:
        await f.write(json.dumps(data, indent=2))


async def save_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    async with aiofiles.open(path, mode="w", encoding="utf-8") as f:
        await f.write(text)


class JsonlWriter:
    """Append-only JSON Lines file fed from an in-memory queue.

    The producer appends from any thread; ``flush`` moves the queued records
    to disk and drops them from memory. ``read`` returns what has been flushed.
    """

    def __init__(self, path: str):
        self.path = path
        self._pending: Deque[dict] = deque()
        self.written = 0

    def append(self, record: dict) -> None:
        self._pending.append(record)

    @property
    def pending(self) -> List[dict]:
        return list(self._pending)

    async def flush(self) -> int:
        batch = []
        while True:
            try:
                batch.append(self._pending.popleft())
            except IndexError:
                break
        if not batch:
            return 0
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        lines = "".join(json.dumps(r) + "\n" for r in batch)
        async with aiofiles.open(self.path, mode="a", encoding="utf-8") as f:
            await f.write(lines)
        self.written += len(batch)
        return len(batch)

    def read(self) -> List[dict]:
        if not os.path.exists(self.path):
            return []
        return list(read_jsonl(self.path))


def read_jsonl(path: str) -> Iterable[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
