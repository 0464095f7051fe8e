"""``.efc`` model files and run manifests.

File layout::

    EFC-MODEL\\n
    <header: one line of JSON>\\n
    <payload: little-endian float64 arrays, back to back>

The header lists hyperparameters, the preprocessor, and per class its
label, threshold, energy summary and the payload offsets (in float64
elements) of its local fields (m x Q) and couplings (D x D, row-major by
``i*(Q-1) + (a-1)``). ``payload_sha256`` covers the payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from efc.classifier import MultiClassModel
from efc.errors import DataFileError, ModelFormatError, ValidationError
from efc.potts import ClassModel, EnergySummary
from efc.preprocess import PreprocessorState

MAGIC = b"EFC-MODEL\n"
FORMAT_VERSION = 1
CONVENTIONS = {
    "pseudocount": "f_i=(1-alpha)*emp+alpha/Q; f_ij=(1-alpha)*emp+alpha/Q^2",
    "local_field_sum": "j != i",
    "threshold": "nearest-rank 95th percentile of training energies",
    "reference_symbol": "Q",
    "coupling_index": "row/col (i,a) -> i*(Q-1)+(a-1), i 0-based, a in 1..Q-1; row-major",
    "fields_layout": "m x Q row-major, column Q is zero",
    "payload": "little-endian float64",
    "tie_break": "lowest class index",
}
_LE_F64 = np.dtype("<f8")


def software_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _encode(model: MultiClassModel) -> bytes:
    chunks, classes, offset = [], [], 0
    for c in model.classes:
        fields = np.ascontiguousarray(c.fields, dtype=_LE_F64)
        coup = np.ascontiguousarray(c.couplings, dtype=_LE_F64)
        classes.append({
            "label": c.label,
            "threshold": c.threshold,
            "n_train": c.n_train,
            "energy_summary": vars(c.summary),
            "fields": {"offset": offset, "shape": list(fields.shape)},
            "couplings": {"offset": offset + fields.size, "shape": list(coup.shape)},
        })
        offset += fields.size + coup.size
        chunks += [fields.tobytes(), coup.tobytes()]
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "software_version": software_version(),
        "Q": model.Q,
        "m": model.m,
        "alpha": model.alpha,
        "hyperparameters": model.hyperparameters,
        "conventions": CONVENTIONS,
        "preprocessor": model.preprocessor.to_dict() if model.preprocessor else None,
        "classes": classes,
        "payload_float64": offset,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return MAGIC + line.encode("utf-8") + b"\n" + payload


def save(model: MultiClassModel, path: str | Path) -> None:
    """Write atomically: a temporary file in the target directory, then rename."""
    path = Path(path)
    data = _encode(model)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise DataFileError(f"cannot write model to {path}: {exc.strerror or exc}") from exc


def _section(payload: np.ndarray, entry: dict, expected: tuple[int, int], what: str) -> np.ndarray:
    shape = tuple(entry["shape"])
    if shape != expected:
        raise ModelFormatError(what, f"declared shape {shape}, expected {expected}")
    start = entry["offset"]
    size = shape[0] * shape[1]
    if start < 0 or start + size > len(payload):
        raise ModelFormatError(what, "offset/shape run past the end of the payload")
    return payload[start:start + size].astype(np.float64).reshape(shape)


def loads(data: bytes, source: str = "<bytes>") -> MultiClassModel:
    if not data.startswith(MAGIC):
        raise ModelFormatError("magic", f"{source} is not an EFC model file")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise ModelFormatError("header", f"{source}: header line is incomplete")
    try:
        header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError("header", f"{source}: unreadable header ({exc})") from exc

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError("format_version",
                               f"{source} has version {version}, this build reads {FORMAT_VERSION}")
    payload = data[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ModelFormatError("payload_sha256", f"{source}: checksum mismatch "
                               "(file truncated or corrupted)")
    declared = header.get("payload_float64")
    if declared is None or len(payload) != 8 * declared:
        raise ModelFormatError("payload_float64",
                               f"{source}: payload holds {len(payload)} bytes, "
                               f"header declares {declared} float64 values")
    values = np.frombuffer(payload, dtype=_LE_F64)

    try:
        Q, m, alpha = int(header["Q"]), int(header["m"]), float(header["alpha"])
        D = m * (Q - 1)
        classes = []
        for k, c in enumerate(header["classes"]):
            fields = _section(values, c["fields"], (m, Q), f"classes[{k}].fields")
            coup = _section(values, c["couplings"], (D, D), f"classes[{k}].couplings")
            if np.abs(coup - coup.T).max(initial=0.0) > 1e-8:
                raise ModelFormatError(f"classes[{k}].couplings", "matrix is not symmetric")
            summary = EnergySummary(**c["energy_summary"])
            if summary.p95 != c["threshold"]:
                raise ModelFormatError(f"classes[{k}].threshold",
                                       "does not equal the stored 95th-percentile energy")
            classes.append(ClassModel(c["label"], coup, fields, float(c["threshold"]), m, Q,
                                      alpha, summary, int(c.get("n_train", 0))))
        pre = header.get("preprocessor")
        state = PreprocessorState.from_dict(pre) if pre is not None else None
        return MultiClassModel(tuple(classes), state, Q, m, alpha,
                               dict(header.get("hyperparameters", {})))
    except KeyError as exc:
        raise ModelFormatError(str(exc.args[0]), f"{source}: required header field missing") from exc
    except ValidationError as exc:
        raise ModelFormatError("classes", f"{source}: {exc}") from exc


def load(path: str | Path) -> MultiClassModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataFileError(f"cannot read model {path}: {exc.strerror}") from exc
    return loads(data, str(path))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, inputs: dict[str, str | Path],
                   options: dict, extra: dict | None = None) -> dict:
    """Record what is needed to replay a run: input hashes, flags, seed, versions."""
    manifest = {
        "command": command,
        "software_version": software_version(),
        "model_format_version": FORMAT_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items()},
        "options": options,
        "conventions": CONVENTIONS,
    }
    manifest.update(extra or {})
    try:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                              encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot write manifest {path}: {exc.strerror}") from exc
    return manifest
