#!/usr/bin/env python3
"""
Dataset source client

Resolves table-oracle datasets and unlabeled pools from local paths or
http(s) URLs. Remote files are downloaded once into a cache directory.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import requests
from dotenv import load_dotenv

from .errors import DatasetFetchError, InputValidationError
from .synthfn import load_pool_csv

# Load environment variables
load_dotenv()


class DatasetClient:
    """Fetches CSV datasets and their metadata sidecars"""

    def __init__(self, cache_dir: Optional[str] = None, session: Optional[requests.Session] = None,
                 timeout: float = 30.0):
        """
        Initialize client

        Args:
            cache_dir: Download cache (defaults to EXPT_DATA_CACHE env var, then .cache/datasets)
            session: requests session to use (a new one by default)
            timeout: HTTP timeout in seconds
        """
        self.cache_dir = Path(cache_dir or os.getenv('EXPT_DATA_CACHE') or '.cache/datasets')
        self.session = session or requests.Session()
        self.timeout = timeout

    @staticmethod
    def is_remote(source: str) -> bool:
        return str(source).startswith(('http://', 'https://'))

    def _cache_path(self, url: str) -> Path:
        digest = hashlib.sha256(url.encode('utf-8')).hexdigest()[:16]
        name = url.rstrip('/').rsplit('/', 1)[-1] or 'dataset'
        return self.cache_dir / f"{digest}-{name}"

    def fetch(self, source: str, required: bool = True) -> Optional[Path]:
        """
        Local path for a source, downloading remote sources into the cache

        Args:
            source: file path or http(s) URL
            required: raise when the source does not exist (otherwise return None)

        Returns:
            Path to a readable local file
        """
        if not self.is_remote(source):
            path = Path(source)
            if path.exists():
                return path
            if required:
                raise DatasetFetchError(f"dataset file not found: {source}")
            return None

        target = self._cache_path(source)
        if target.exists():
            return target
        try:
            response = self.session.get(source, timeout=self.timeout)
        except requests.RequestException as exc:
            raise DatasetFetchError(f"download of {source} failed: {exc}") from exc
        if response.status_code == 404 and not required:
            return None
        if response.status_code != 200:
            raise DatasetFetchError(f"download of {source} failed: HTTP {response.status_code}")

        target.parent.mkdir(parents=True, exist_ok=True)
        partial = target.with_suffix(target.suffix + '.part')
        partial.write_bytes(response.content)
        os.replace(partial, target)
        return target

    @staticmethod
    def sidecar_source(source: str) -> str:
        """Metadata sidecar next to a table: data.csv -> data.json"""
        base, _, _ = str(source).rpartition('.')
        return f"{base or source}.json"

    def load_table(self, source: str) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
        """
        Load a table dataset (header x_0..x_{d-1},y) and its optional sidecar

        Returns:
            (x [S, d], y [S], metadata dict, empty when there is no sidecar)
        """
        path = self.fetch(source)
        frame = pd.read_csv(path)
        if 'y' not in frame.columns:
            raise InputValidationError(f"{source}: table has no 'y' column")
        x_columns = [c for c in frame.columns if c != 'y']
        if x_columns != [f"x_{i}" for i in range(len(x_columns))]:
            raise InputValidationError(f"{source}: design columns must be x_0..x_{{d-1}}, got {x_columns}")
        x = frame[x_columns].to_numpy(dtype=np.float64)
        y = frame['y'].to_numpy(dtype=np.float64)
        if len(y) == 0:
            raise InputValidationError(f"{source}: table has no rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InputValidationError(f"{source}: table contains non-finite values")

        metadata: Dict[str, Any] = {}
        sidecar = self.fetch(self.sidecar_source(source), required=False)
        if sidecar is not None:
            try:
                metadata = json.loads(Path(sidecar).read_text(encoding='utf-8'))
            except json.JSONDecodeError as exc:
                raise InputValidationError(f"{sidecar}: malformed metadata sidecar: {exc}") from exc
        return x, y, metadata

    def load_pool(self, source: str) -> np.ndarray:
        """Load an unlabeled pool CSV (header x_0..x_{d-1})"""
        return load_pool_csv(self.fetch(source))
