"""File formats: IDX datasets, measurement CSVs, parameter files, checkpoints.

Checkpoints are a custom deterministic binary layout (see README) so that two
identical seeded runs produce byte-identical files; npz archives embed
timestamps and cannot make that guarantee.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import struct
import sys
from importlib import resources

import numpy as np

from .converters import ConverterSpec
from .crossbar import DtaSpec, default_gain
from .devices import DeviceKind, FgParams, MeasurementSweep, ReRamParams
from .exceptions import ConfigError, IngestError
from .network import (
    AvgPool,
    Conv2d,
    FullyConnected,
    MvmLayer,
    NetworkModel,
    PoolLayer,
)
from .training import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def atomic_write_bytes(path, data: bytes):
    """Write a file completely or not at all."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


# --- IDX (MNIST-format) ingestion ------------------------------------------


def _read_idx(path, magic_expected: int):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IngestError(f"{path}: truncated header, {len(raw)} bytes")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != magic_expected:
        raise IngestError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{magic_expected:08x}"
        )
    ndim = 3 if magic_expected == IDX_IMAGES_MAGIC else 1
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IngestError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}i", raw[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise IngestError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)} "
            f"(payload starts at offset {header_len})"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def load_mnist(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair into [0, 1]-normalized (N, 1, H, W) arrays."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    imgs = images.astype(np.float64) / 255.0
    return Dataset(imgs[:, None, :, :], labels.astype(np.int64))


def save_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write (N, H, W) uint8 images and (N,) uint8 labels in IDX format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    atomic_write_bytes(
        images_path, struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes()
    )
    atomic_write_bytes(labels_path, struct.pack(">ii", IDX_LABELS_MAGIC, n) + labels.tobytes())


# --- measurement CSVs -------------------------------------------------------


def load_measurement_csv(path) -> list[MeasurementSweep]:
    """Read `voltage_v,current_a[,state_label]` rows, one sweep per label."""
    groups: dict = {}
    order = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["voltage_v", "current_a"]:
            raise IngestError(f"{path}: expected header voltage_v,current_a[,state_label]")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise IngestError(f"{path}:{ln}: need at least voltage and current")
            try:
                v, i = float(row[0]), float(row[1])
            except ValueError as exc:
                raise IngestError(f"{path}:{ln}: {exc}") from exc
            label = float(row[2]) if len(row) > 2 and row[2].strip() else None
            if label not in groups:
                groups[label] = ([], [])
                order.append(label)
            groups[label][0].append(v)
            groups[label][1].append(i)
    return [
        MeasurementSweep(np.array(groups[k][0]), np.array(groups[k][1]), label=k)
        for k in order
    ]


# --- parameter files (INI: one section per device kind, units in key names) --


def _section_floats(cp, section) -> dict:
    return {k: float(v) for k, v in cp[section].items()}


def default_params_path():
    return resources.files("cimsim.data") / "default_params.ini"


def default_reram_states_path():
    return resources.files("cimsim.data") / "reram_measured_states.txt"


def load_params(path=None) -> dict:
    """Parse a parameter file into device/DTA/converter objects.

    Returns keys: 'reram', 'fg', 'dta_reram', 'dta_fg', 'converter'.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = path if path is not None else default_params_path()
    with open(path) as fh:
        cp.read_file(fh)
    out = {}
    if cp.has_section("reram"):
        out["reram"] = ReRamParams(**_section_floats(cp, "reram"))
    if cp.has_section("fg"):
        out["fg"] = FgParams(**_section_floats(cp, "fg"))
    if cp.has_section("converter"):
        vals = _section_floats(cp, "converter")
        vals["bits"] = int(vals.get("bits", 8))
        out["converter"] = ConverterSpec(**vals)
    else:
        out["converter"] = ConverterSpec()
    for kind in ("reram", "fg"):
        section = f"dta_{kind}"
        if cp.has_section(section):
            vals = _section_floats(cp, section)
            if "gain_v_per_a" not in vals:
                vals["gain_v_per_a"] = default_gain(vals["v_max_volts"], vals["i_max_amps"])
            out[section] = DtaSpec(**vals)
    return out


def save_params(path, sections: dict):
    """Write device/DTA/converter objects back to the INI layout."""
    cp = configparser.ConfigParser()
    for name, obj in sections.items():
        cp[name] = {
            k: repr(v.item() if isinstance(v, np.generic) else v)
            for k, v in vars(obj).items()
        }
    buf = io.StringIO()
    cp.write(buf)
    atomic_write_text(path, buf.getvalue())


def load_measured_states(path=None) -> np.ndarray:
    """One weight-equivalent value per line, sorted ascending."""
    path = path if path is not None else default_reram_states_path()
    with open(path) as fh:
        vals = [float(line) for line in fh if line.strip() and not line.startswith("#")]
    if not vals:
        raise IngestError(f"{path}: no states found")
    arr = np.array(vals)
    if not np.all(np.diff(arr) >= 0):
        raise IngestError(f"{path}: states must be sorted ascending")
    return arr


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"CIMCKPT\x01"


def _spec_to_dict(spec) -> dict:
    d = {"type": type(spec).__name__}
    d.update(vars(spec))
    return d


def _spec_from_dict(d: dict):
    d = dict(d)
    cls = {"Conv2d": Conv2d, "AvgPool": AvgPool, "FullyConnected": FullyConnected}[d.pop("type")]
    return cls(**d)


def save_checkpoint(path, model: NetworkModel):
    header = {
        "format_version": 1,
        "device_kind": model.device_kind.value,
        "device_params": vars(model.device_params),
        "converter": vars(model.converter),
        "clip_lo_volts": model.clip_lo_volts,
        "clip_hi_volts": model.clip_hi_volts,
        "v_tun_volts": model.v_tun_volts,
        "input_shape": list(model.input_shape),
        "dtype": np.dtype(model.dtype).name,
        "layers": [
            {
                "name": l.name,
                "spec": _spec_to_dict(l.spec),
                "in_shape": list(l.in_shape),
                "out_shape": list(l.out_shape),
                **(
                    {"rows": l.rows, "cols": l.cols, "dta": vars(l.dta)}
                    if isinstance(l, MvmLayer) else {}
                ),
            }
            for l in model.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(l.weights, dtype="<f8").tobytes() for l in model.mvm_layers
    )
    atomic_write_bytes(
        path, CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + payload
    )


def load_checkpoint(path) -> NetworkModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IngestError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off: off + hlen])
    off += hlen
    kind = DeviceKind(header["device_kind"])
    params_cls = ReRamParams if kind is DeviceKind.RERAM else FgParams
    params = params_cls(**header["device_params"])
    layers = []
    for ld in header["layers"]:
        spec = _spec_from_dict(ld["spec"])
        if isinstance(spec, AvgPool):
            layers.append(PoolLayer(ld["name"], spec, tuple(ld["in_shape"]),
                                    tuple(ld["out_shape"])))
            continue
        rows, cols = ld["rows"], ld["cols"]
        n = rows * cols * 8
        w = np.frombuffer(raw[off: off + n], dtype="<f8").reshape(rows, cols).copy()
        off += n
        layers.append(MvmLayer(ld["name"], spec, tuple(ld["in_shape"]),
                               tuple(ld["out_shape"]), rows, cols, w,
                               DtaSpec(**ld["dta"])))
    if off != len(raw):
        raise IngestError(f"{path}: {len(raw) - off} trailing bytes")
    return NetworkModel(
        device_kind=kind,
        device_params=params,
        converter=ConverterSpec(**{k: (int(v) if k == "bits" else v)
                                   for k, v in header["converter"].items()}),
        layers=layers,
        input_shape=tuple(header["input_shape"]),
        clip_lo_volts=header["clip_lo_volts"],
        clip_hi_volts=header["clip_hi_volts"],
        v_tun_volts=header["v_tun_volts"],
        dtype=np.dtype(header["dtype"]).type,
    )


def write_manifest(path, config_text: str, seed: int, extra: dict | None = None):
    """Reproducibility manifest: config hash, seed, versions."""
    from . import __version__

    manifest = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "versions": {
            "cimsim": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
