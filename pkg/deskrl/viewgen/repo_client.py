from __future__ import annotations

import logging
import os
from subprocess import run


def git(root: str, *args: str) -> str:
    """
    Wrapper for calling command-line git in the `root` directory.
    Raises an exception on any error, including a non-0 return code.
    Returns the command's stdout as a string.
    """
    git = ["git"]
    git.extend(args)
    proc = run(git, capture_output=True, cwd=root, encoding="utf-8")
    if proc.returncode != 0:
        raise Exception(proc.stderr or f"git command failed: {args}")
    return proc.stdout


class RepoClient:
    """Code version of the checkout a run was started from."""

    def __init__(self, root: str = None):
        self.root = root or os.path.dirname(os.path.abspath(__file__))

    def head(self) -> str:
        "Identifier for the most recent commit, or 'unknown' outside a checkout"
        try:
            return git(self.root, "rev-parse", "HEAD").strip()
        except Exception as err:
            logging.getLogger("viewgen").debug(f"No code version: {err}")
            return "unknown"

    def dirty(self) -> bool:
        try:
            return bool(git(self.root, "status", "--porcelain", "--untracked-files=no").strip())
        except Exception:
            return False

    def version(self) -> str:
        head = self.head()
        if head != "unknown" and self.dirty():
            head += "+dirty"
        return head
