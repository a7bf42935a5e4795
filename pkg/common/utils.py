"""
Utility functions for Landmatch
Common functions used by the trainer and matcher modules
"""

import json
import logging
import os
import re
import tempfile
from typing import Any, List, Optional

import torch
from dotenv import load_dotenv

from common.config import APP_CONFIG, IMAGE_CONFIG, PATHS

logger = logging.getLogger(__name__)


def load_environment(env_file: Optional[str] = None) -> Optional[int]:
    """Load environment variables and apply the numeric thread cap"""
    load_dotenv(env_file or PATHS["env_file"])

    num_threads = os.getenv(APP_CONFIG["num_threads_env"])
    if not num_threads:
        return None

    try:
        count = int(num_threads)
    except ValueError:
        print_warning(f"Ignoring invalid {APP_CONFIG['num_threads_env']}={num_threads!r}")
        return None

    if count > 0:
        torch.set_num_threads(count)
        logger.debug("torch intra-op threads capped at %d", count)
        return count
    return None


def setup_logging(level: Optional[str] = None):
    """Configure the root logger once"""
    level = level or ("DEBUG" if APP_CONFIG["debug_mode"] else APP_CONFIG["log_level"])
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s: %(message)s"
    )


def list_image_files(directory: str) -> Optional[List[str]]:
    """Sorted paths of the supported images in a directory; None when it is not one"""
    if not directory or not os.path.isdir(directory):
        return None
    extensions = IMAGE_CONFIG["supported_extensions"]
    paths = []
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if os.path.isfile(path) and os.path.splitext(name)[1].lower() in extensions:
            paths.append(path)
        else:
            logger.debug("Ignoring %s", path)
    return paths


def atomic_write_bytes(path: str, data: bytes):
    """Write to a temp file in the target directory, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str, payload: Any):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def format_size(size_bytes: float) -> str:
    """Byte count with a binary unit, e.g. 2048 -> 2.0 KB"""
    if size_bytes <= 0:
        return "0 B"
    for unit in ("B", "KB", "MB"):
        if size_bytes < 1024.0:
            return f"{size_bytes:.1f} {unit}"
        size_bytes /= 1024.0
    return f"{size_bytes:.1f} GB"


def format_duration(seconds: float) -> str:
    """Format a duration in human readable format"""
    if seconds < 60:
        return f"{seconds:.1f} s"
    minutes, seconds = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)} min {int(seconds)} s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)} h {int(minutes)} min"


CONSOLE_MARKERS = {"success": "✅", "error": "❌", "warning": "⚠️", "info": "ℹ️"}


def console(kind: str, message: str):
    """One status line on stdout, prefixed with the marker for its kind"""
    print(f"{CONSOLE_MARKERS[kind]} {message}")


def print_section_header(title: str):
    print(f"\n=== {title} ===")


def print_success(message: str):
    console("success", message)


def print_error(message: str):
    console("error", message)


def print_warning(message: str):
    console("warning", message)


def print_info(message: str):
    console("info", message)


def sanitize_filename(filename: str) -> str:
    """Run name usable as a directory name: unsafe characters and whitespace collapse to one underscore"""
    sanitized = re.sub(r'[<>:"/\\|?*\s]+', "_", filename).strip("_ ")
    return sanitized or "untitled"
