"""Bit-exact model serialization.

Layout (all integers little-endian, floats IEEE-754 binary64):

    magic        4 bytes  "FDIO"
    version      u8
    fingerprint  u64      architecture fingerprint of the producing config
    layer_count  u16
    per layer:   out_dim u32, in_dim u32
    per layer:   weights row-major f64[out*in], then bias f64[out]

Total length is derivable from the header alone. decode(encode(m)) == m
bit-exactly.
"""

import struct

import numpy as np

from fedanom import nn
from fedanom.errors import (BadMagicError, FingerprintMismatchError,
                            TruncatedPayloadError, VersionMismatchError,
                            WireFormatError)

MODEL_MAGIC = b"FDIO"
MODEL_VERSION = 1


def encode_model(model: nn.ModelParams) -> bytes:
    parts = [
        MODEL_MAGIC,
        struct.pack("<BQH", MODEL_VERSION, model.config_fingerprint,
                    len(model.layers)),
    ]
    for w, _ in model.layers:
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for w, b in model.layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_model(blob: bytes, config: nn.AutoencoderConfig) -> nn.ModelParams:
    """Inverse of encode_model; validates against the expected architecture."""
    if len(blob) < 4:
        raise TruncatedPayloadError("model blob shorter than magic")
    if blob[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad model magic {blob[:4]!r}")
    try:
        version, fingerprint, layer_count = struct.unpack_from("<BQH", blob, 4)
    except struct.error:
        raise TruncatedPayloadError("model header truncated") from None
    if version != MODEL_VERSION:
        raise VersionMismatchError(
            f"model format version {version}, expected {MODEL_VERSION}")
    if fingerprint != config.fingerprint():
        raise FingerprintMismatchError(
            f"model fingerprint {fingerprint:#x} does not match expected "
            f"architecture {config.fingerprint():#x}")

    offset = 4 + 11
    shapes = []
    for _ in range(layer_count):
        try:
            out_dim, in_dim = struct.unpack_from("<II", blob, offset)
        except struct.error:
            raise TruncatedPayloadError("layer shape table truncated") from None
        if out_dim == 0 or in_dim == 0:
            raise WireFormatError("zero-sized layer in shape table")
        shapes.append((out_dim, in_dim))
        offset += 8

    expected_dims = config.layer_dims()
    wire_dims = [shapes[0][1]] + [s[0] for s in shapes] if shapes else []
    if wire_dims != expected_dims or any(
            s[1] != expected_dims[i] for i, s in enumerate(shapes)):
        raise FingerprintMismatchError(
            f"layer shapes {wire_dims} do not match expected {expected_dims}")

    f8 = 8
    layers = []
    for out_dim, in_dim in shapes:
        w_end = offset + out_dim * in_dim * f8
        b_end = w_end + out_dim * f8
        if b_end > len(blob):
            raise TruncatedPayloadError(
                f"model data truncated: need {b_end} bytes, have {len(blob)}")
        # frombuffer views into bytes are read-only; hand out writable copies
        w = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim,
                          offset=offset).reshape(out_dim, in_dim)
        b = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=w_end)
        layers.append((w.copy(), b.copy()))
        offset = b_end
    if offset != len(blob):
        raise WireFormatError(
            f"{len(blob) - offset} trailing bytes after model data")
    return nn.ModelParams(
        layers=layers,
        config_fingerprint=fingerprint,
        activation=config.activation,
        activate_output=config.activate_output,
    )


def encoded_model_size(config: nn.AutoencoderConfig) -> int:
    """Byte length of any encoded model with this architecture."""
    dims = config.layer_dims()
    return 15 + 8 * (len(dims) - 1) + 8 * nn.param_count(config)
