"""
Artifact store for a run directory.

All stage outputs go through ArtifactStore so that paths are resolved against
one run root and every write is logged.
"""

import json
import logging
import os
from pathlib import Path as FilePath
from typing import Any, List, Optional

logger = logging.getLogger(__name__)


class ArtifactStore:
    """
    File access rooted at a run directory.

    ``directory`` arguments are relative to the root; an empty string means
    the root itself.
    """

    def __init__(self, root: str):
        """
        Initialize the store.

        Args:
            root: Run output directory; created if missing.
        """
        self.root = FilePath(root)
        self.root.mkdir(parents=True, exist_ok=True)
        logger.info(f"🔧 Artifact store rooted at {self.root}")

    def get_file_path(self, directory: str, filename: str) -> str:
        """
        Absolute-or-root-relative path of an artifact.

        Args:
            directory: Directory relative to the run root
            filename: Name of the file

        Returns:
            Path as string
        """
        return str(self.root / directory / filename)

    def _prepare(self, directory: str, filename: str) -> FilePath:
        path = self.root / directory / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def save_file(self, directory: str, filename: str, content: str) -> str:
        """
        Save text content to a file.

        Args:
            directory: Directory relative to the run root
            filename: Name of the file
            content: Text content to save

        Returns:
            File path
        """
        path = self._prepare(directory, filename)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)
        logger.debug(f"File saved: {path}")
        return str(path)

    def save_binary_file(self, directory: str, filename: str, content: bytes) -> str:
        """
        Save binary content to a file.

        Args:
            directory: Directory relative to the run root
            filename: Name of the file
            content: Binary content to save

        Returns:
            File path
        """
        path = self._prepare(directory, filename)
        with open(path, 'wb') as f:
            f.write(content)
        logger.debug(f"Binary file saved: {path}")
        return str(path)

    def save_json(self, directory: str, filename: str, payload: Any) -> str:
        """Save a JSON document with sorted keys (byte-stable for equal payloads)."""
        from utils.file_utils import stable_json_dumps
        return self.save_file(directory, filename, stable_json_dumps(payload))

    def load_file(self, directory: str, filename: str) -> str:
        path = self.root / directory / filename
        if not path.exists():
            raise FileNotFoundError(f"Expected artifact not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()

    def load_binary_file(self, directory: str, filename: str) -> bytes:
        path = self.root / directory / filename
        if not path.exists():
            raise FileNotFoundError(f"Expected artifact not found: {path}")
        with open(path, 'rb') as f:
            return f.read()

    def load_json(self, directory: str, filename: str) -> Any:
        return json.loads(self.load_file(directory, filename))

    def list_files(self, directory: str, suffix: Optional[str] = None) -> List[str]:
        """
        List file names in a directory, sorted.

        Args:
            directory: Directory relative to the run root
            suffix: Optional filter on the file extension

        Returns:
            Sorted file names; empty when the directory is missing
        """
        path = self.root / directory
        if not path.is_dir():
            return []
        names = [entry.name for entry in path.iterdir() if entry.is_file()]
        if suffix:
            names = [name for name in names if name.endswith(suffix)]
        return sorted(names)

    def file_exists(self, directory: str, filename: str) -> bool:
        return (self.root / directory / filename).is_file()

    def delete_file(self, directory: str, filename: str) -> bool:
        """
        Delete a file.

        Returns:
            True if a file was removed
        """
        path = self.root / directory / filename
        if path.is_file():
            os.remove(path)
            logger.info(f"File deleted: {path}")
            return True
        return False

    def checksum(self, directory: str, filename: str) -> str:
        from utils.file_utils import sha256_file
        return sha256_file(self.get_file_path(directory, filename))
