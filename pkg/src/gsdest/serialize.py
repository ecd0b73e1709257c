"""JSON/CSV writers with fixed 17-significant-digit floats and run manifests."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from datetime import datetime, timezone
from importlib import resources
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return "null" if not math.isfinite(obj) else fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [f"{pad}{_encode(v, indent, level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits; NaN becomes null."""
    return _encode(obj, indent, 0) + "\n"


def manifest(command: str, argv: Sequence[str], parameters: dict,
             seed: Optional[int] = None, generator: Optional[str] = None) -> dict:
    return {
        "tool": "gsdest",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "parameters": parameters,
        "seed": seed,
        "generator": generator,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def csv_text(rows: Iterable[dict], columns: Sequence[str], run_manifest: Optional[dict] = None) -> str:
    """CSV with a header row; the manifest, if any, goes on a leading ``#`` line."""
    buf = io.StringIO()
    if run_manifest is not None:
        buf.write("# manifest: " + json.dumps(run_manifest, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row.get(c)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                out.append("")
            elif isinstance(v, (float, np.floating)):
                out.append(fmt_float(v))
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()


def write_text(text: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def load_schema(name: str) -> dict:
    return json.loads(resources.files("gsdest").joinpath("schemas", name).read_text("utf-8"))
