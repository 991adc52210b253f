import os
from pathlib import Path


def atomic_write(path, payload):
    """Write ``payload`` (bytes or str) to a temp file, then rename over ``path``."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
