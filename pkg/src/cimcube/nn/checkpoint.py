"""Versioned binary weight checkpoint (magic ``CIMW``).

Layout: magic, version byte, little-endian u32 JSON-header length, JSON
header (network spec, quant config, activation scales, flags, array table),
then raw little-endian array payloads in table order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..device_models import InvalidInputError
from ..periphery import QuantConfig
from .network import ConvSpec, DenseSpec, MaxPoolSpec, NetworkSpec

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"CIMW"
_VERSION = 1


def _spec_to_json(spec: NetworkSpec) -> dict:
    layers = []
    for l in spec.layers:
        if isinstance(l, ConvSpec):
            layers.append({"type": "conv", "out_channels": l.out_channels,
                           "kernel": l.kernel, "stride": l.stride, "pad": l.pad})
        elif isinstance(l, MaxPoolSpec):
            layers.append({"type": "maxpool", "size": l.size})
        else:
            layers.append({"type": "dense", "units": l.units})
    return {"name": spec.name, "input_shape": list(spec.input_shape),
            "layers": layers}


def _spec_from_json(d: dict) -> NetworkSpec:
    layers = []
    for l in d["layers"]:
        if l["type"] == "conv":
            layers.append(ConvSpec(l["out_channels"], l["kernel"], l["stride"], l["pad"]))
        elif l["type"] == "maxpool":
            layers.append(MaxPoolSpec(l["size"]))
        elif l["type"] == "dense":
            layers.append(DenseSpec(l["units"]))
        else:
            raise InvalidInputError(f"unknown layer record {l!r}")
    return NetworkSpec(d["name"], tuple(d["input_shape"]), tuple(layers))


def save_checkpoint(path, spec: NetworkSpec, weights: dict, act_scales: dict,
                    qcfg: QuantConfig, dropout_trained: bool = False,
                    meta: dict | None = None) -> None:
    arrays = {f"w{li}": np.asarray(w, dtype=np.float64) for li, w in weights.items()}
    table = [{"name": k, "shape": list(a.shape), "dtype": str(a.dtype)}
             for k, a in arrays.items()]
    header = {
        "spec": _spec_to_json(spec),
        "act_scales": {str(k): float(v) for k, v in act_scales.items()},
        "quant": {"act_bits": qcfg.act_bits, "weight_bits": qcfg.weight_bits,
                  "adc_full_scale": qcfg.adc_full_scale,
                  "levels_per_device": qcfg.levels_per_device},
        "dropout_trained": dropout_trained,
        "meta": meta or {},
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for entry in table:
            f.write(arrays[entry["name"]].astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise InvalidInputError(f"bad checkpoint magic {magic!r} at offset 0")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        weights = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"]))
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            weights[int(entry["name"][1:])] = data.reshape(entry["shape"]).copy()
    spec = _spec_from_json(header["spec"])
    act_scales = {int(k): v for k, v in header["act_scales"].items()}
    q = header["quant"]
    qcfg = QuantConfig(act_bits=q["act_bits"], weight_bits=q["weight_bits"],
                       adc_full_scale=q["adc_full_scale"],
                       levels_per_device=q["levels_per_device"])
    return spec, weights, act_scales, qcfg, header
