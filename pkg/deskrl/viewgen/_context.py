from __future__ import annotations
from typing import Any, Dict, IO, Iterator, List

import json
import logging
import os

import torch

from .errors import MissingStateError
from .util import to_record


class InternalContext:
    """File IO for run directories.

    For the public interface, see `context.RunContext`.
    """

    run_dir: str

    def __init__(self):
        self._streams: Dict[str, IO[str]] = {}

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def write_text(self, name: str, content: str):
        fullpath = self.path(name)
        os.makedirs(os.path.dirname(fullpath), exist_ok=True)
        tmp = fullpath + ".tmp"
        with open(tmp, "w", encoding="utf8") as fh:
            fh.write(content)
        os.replace(tmp, fullpath)

    def read_text(self, name: str) -> str:
        with open(self.path(name), encoding="utf8") as fh:
            return fh.read()

    def read_records(self, name: str) -> Iterator[dict]:
        """Parse a JSON-lines file, skipping a torn last line."""
        fullpath = self.path(name)
        if not os.path.exists(fullpath):
            return
        with open(fullpath, encoding="utf8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as err:
                    logging.getLogger("viewgen").warning(
                        f"Ignoring unreadable record {fullpath}:{lineno}: {err}"
                    )

    def append_record(self, name: str, record: dict):
        stream = self._streams.get(name)
        if stream is None:
            fullpath = self.path(name)
            os.makedirs(os.path.dirname(fullpath), exist_ok=True)
            stream = self._streams[name] = open(fullpath, "a", encoding="utf8")
        stream.write(to_record(record) + "\n")
        stream.flush()

    def truncate_records(self, name: str, step: int) -> int:
        """Keep the records with `step` <= `step`. Returns how many were dropped."""
        self.close_streams()
        records: List[dict] = list(self.read_records(name))
        kept = [r for r in records if r.get("step", 0) <= step]
        if os.path.exists(self.path(name)):
            self.write_text(name, "".join(to_record(r) + "\n" for r in kept))
        dropped = len(records) - len(kept)
        if dropped:
            logging.getLogger("viewgen").warning(
                f"Discarded {dropped} records of {name} after step {step}"
            )
        return dropped

    def close_streams(self):
        for stream in self._streams.values():
            stream.close()
        self._streams.clear()

    def save_object(self, name: str, obj: Any):
        fullpath = self.path(name)
        os.makedirs(os.path.dirname(fullpath), exist_ok=True)
        tmp = fullpath + ".tmp"
        torch.save(obj, tmp)
        os.replace(tmp, fullpath)

    def load_object(self, name: str, map_location="cpu") -> Any:
        return load_object(self.path(name), map_location)


def load_object(fullpath: str, map_location="cpu") -> Any:
    try:
        return torch.load(fullpath, map_location=map_location, weights_only=False)
    except FileNotFoundError:
        error_message = f"Missing checkpoint: {fullpath}"
        logging.getLogger("viewgen").error(error_message)
        raise MissingStateError(error_message)
