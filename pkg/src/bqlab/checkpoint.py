"""Binary checkpoint container: magic "BQCK1", little-endian, CRC-checked sections.

A checkpoint stores everything needed to resume a trajectory bit-exactly:
grid shape, physical constants, step size, step index, stream identity, and
the full spectral + extended state.  Because per-step noise is a pure
function of (master_seed, stream_index, step), no generator state is needed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .lagrangian import ExtendedState
from .spectral import GridSpec, PhysicalParams, ScalarField, SpectralState

MAGIC = b"BQCK1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    grid: GridSpec
    params: PhysicalParams
    dt: float
    step_index: int
    master_seed: int
    stream_index: int
    state: SpectralState
    ext: ExtendedState | None = None
    extras: dict | None = None  # scalar accumulators (qr logs, integrals, ...)


def _sections(cp: Checkpoint) -> list[tuple[bytes, bytes]]:
    head = struct.pack(
        "<iiqqqd",
        cp.grid.n,
        cp.grid.dealias_cut,
        cp.step_index,
        cp.master_seed,
        cp.stream_index,
        cp.dt,
    )
    par = struct.pack("<7d", cp.params.nu1, cp.params.nu2, cp.params.g, *cp.params.alphas)
    out = [(b"HEAD\x00\x00\x00\x00", head), (b"PARAMS\x00\x00", par)]
    out.append((b"OMEGA\x00\x00\x00", np.ascontiguousarray(cp.state.omega.coeffs).tobytes()))
    out.append((b"THETA\x00\x00\x00", np.ascontiguousarray(cp.state.theta.coeffs).tobytes()))
    if cp.ext is not None:
        blob = np.concatenate(
            [cp.ext.x, cp.ext.tau, cp.ext.v, cp.ext.A.ravel()]
        ).astype(np.float64)
        out.append((b"EXTSTATE", blob.tobytes()))
    if cp.extras:
        keys = sorted(cp.extras)
        blob = b"".join(
            struct.pack("<32sd", k.encode().ljust(32, b"\x00"), float(cp.extras[k])) for k in keys
        )
        out.append((b"EXTRAS\x00\x00", blob))
    return out


def save_checkpoint(path: str, cp: Checkpoint) -> None:
    import os

    secs = _sections(cp)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(secs)))
        for name, payload in secs:
            if len(name) != 8:
                raise CheckpointError(f"section name must be 8 bytes: {name!r}")
            fh.write(name)
            fh.write(struct.pack("<QI", len(payload), zlib.crc32(payload) & 0xFFFFFFFF))
            fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, nsec = struct.unpack_from("<II", blob, 5)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported")
    pos = 13
    secs: dict[bytes, bytes] = {}
    for _ in range(nsec):
        if pos + 20 > len(blob):
            raise CheckpointError("truncated checkpoint (section header)")
        name = blob[pos : pos + 8]
        length, crc = struct.unpack_from("<QI", blob, pos + 8)
        pos += 20
        payload = blob[pos : pos + length]
        if len(payload) != length:
            raise CheckpointError("truncated checkpoint (payload)")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"checksum mismatch in section {name!r}")
        secs[name] = payload
        pos += length

    n, cut, step_index, master_seed, stream_index, dt = struct.unpack(
        "<iiqqqd", secs[b"HEAD\x00\x00\x00\x00"]
    )
    pvals = struct.unpack("<7d", secs[b"PARAMS\x00\x00"])
    grid = GridSpec(n, cut)
    params = PhysicalParams(pvals[0], pvals[1], pvals[2], tuple(pvals[3:]))
    shape = (n, n)
    omega = np.frombuffer(secs[b"OMEGA\x00\x00\x00"], dtype=np.complex128).reshape(shape).copy()
    theta = np.frombuffer(secs[b"THETA\x00\x00\x00"], dtype=np.complex128).reshape(shape).copy()
    state = SpectralState(
        ScalarField.from_coeffs(grid, omega, project=False),
        ScalarField.from_coeffs(grid, theta, project=False),
    )
    ext = None
    if b"EXTSTATE" in secs:
        vals = np.frombuffer(secs[b"EXTSTATE"], dtype=np.float64)
        ext = ExtendedState(
            vals[:2].copy(), vals[2:4].copy(), vals[4:6].copy(), vals[6:10].reshape(2, 2).copy()
        )
    extras = None
    if b"EXTRAS\x00\x00" in secs:
        extras = {}
        raw = secs[b"EXTRAS\x00\x00"]
        for off in range(0, len(raw), 40):
            key, val = struct.unpack_from("<32sd", raw, off)
            extras[key.rstrip(b"\x00").decode()] = val
    return Checkpoint(grid, params, dt, step_index, master_seed, stream_index, state, ext, extras)


def assert_compatible(cp: Checkpoint, grid: GridSpec) -> None:
    """Restoring across resolutions is an explicit error, never interpolation."""
    if cp.grid.n != grid.n or cp.grid.dealias_cut != grid.dealias_cut:
        raise CheckpointError(
            f"checkpoint grid n={cp.grid.n} (cut {cp.grid.dealias_cut}) does not match "
            f"configured n={grid.n} (cut {grid.dealias_cut})"
        )
