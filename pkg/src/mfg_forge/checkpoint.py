"""Binary run checkpoints.

Layout (all integers and reals little-endian)::

    magic      8 bytes  b"MFGFCKPT"
    version    u32
    n_fields   u32
    per field: name_len u16, name (ascii), kind u8 (0 = f64, 1 = i64, 2 = utf-8 bytes),
               ndim u8, shape (ndim x u64)
    payload    field data in header order
    crc32      u32 over everything before it

Fields are written in the fixed order of :data:`FIELDS`; a file missing one,
carrying an unknown one, or failing its checksum is rejected.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mfg_forge.autodiff.adam import AdamState
from mfg_forge.errors import CheckpointError

MAGIC = b"MFGFCKPT"
VERSION = 1
F64, I64, TEXT = 0, 1, 2

PHASES = ("running", "stopped", "finished")


@dataclass
class RunState:
    """Everything needed to resume or re-export a run."""

    config_text: str
    n_knots: int
    outer_step: int = 0
    j: int = 0
    phase: str = "running"
    eps: float = 0.0
    u: np.ndarray = None
    upsilon: np.ndarray = None
    theta: np.ndarray = None
    adam_inner: AdamState = None
    adam_u: AdamState = None
    adam_upsilon: AdamState = None
    fitted: bool = False
    buffer_u: np.ndarray = None
    buffer_loss: np.ndarray = None
    buffer_step: np.ndarray = None
    buffer_inserted: int = 0
    u_trajectory: np.ndarray = None
    principal_trajectory: np.ndarray = None
    fbsde_trajectory: np.ndarray = None
    final_fbsde_history: np.ndarray = None
    final_losses: np.ndarray = None
    phi0: float = float("nan")

    def __post_init__(self):
        n = self.n_knots
        empty = {
            "buffer_u": (0, n), "buffer_loss": (0,), "buffer_step": (0,),
            "u_trajectory": (0, n), "principal_trajectory": (0, 3), "fbsde_trajectory": (0, 4),
            "final_fbsde_history": (0,), "final_losses": (0,),
        }
        for name, shape in empty.items():
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.int64 if name == "buffer_step" else np.float64))
        if self.phase not in PHASES:
            raise CheckpointError(f"unknown run phase {self.phase!r}")


def _adam_fields(prefix: str, a: AdamState):
    return [
        (f"{prefix}.m", F64, a.m),
        (f"{prefix}.v", F64, a.v),
        (f"{prefix}.t", I64, np.array([a.t])),
        (f"{prefix}.hyper", F64, np.array([a.lr, a.beta1, a.beta2, a.eps])),
    ]


def _fields(s: RunState):
    out = [
        ("config", TEXT, s.config_text.encode("utf-8")),
        ("phase", TEXT, s.phase.encode("ascii")),
        ("counters", I64, np.array([s.n_knots, s.outer_step, s.j, int(s.fitted), s.buffer_inserted])),
        ("scalars", F64, np.array([s.eps, s.phi0])),
        ("u", F64, s.u),
        ("upsilon", F64, s.upsilon),
        ("theta", F64, s.theta),
    ]
    out += _adam_fields("adam_inner", s.adam_inner)
    out += _adam_fields("adam_u", s.adam_u)
    out += _adam_fields("adam_upsilon", s.adam_upsilon)
    out += [
        ("buffer_u", F64, s.buffer_u),
        ("buffer_loss", F64, s.buffer_loss),
        ("buffer_step", I64, s.buffer_step),
        ("u_trajectory", F64, s.u_trajectory),
        ("principal_trajectory", F64, s.principal_trajectory),
        ("fbsde_trajectory", F64, s.fbsde_trajectory),
        ("final_fbsde_history", F64, s.final_fbsde_history),
        ("final_losses", F64, s.final_losses),
    ]
    return out


FIELDS = (
    "config", "phase", "counters", "scalars", "u", "upsilon", "theta",
    *(f"{p}.{x}" for p in ("adam_inner", "adam_u", "adam_upsilon") for x in ("m", "v", "t", "hyper")),
    "buffer_u", "buffer_loss", "buffer_step", "u_trajectory", "principal_trajectory",
    "fbsde_trajectory", "final_fbsde_history", "final_losses",
)


def encode(state: RunState) -> bytes:
    head = [MAGIC, struct.pack("<II", VERSION, len(FIELDS))]
    body = []
    for name, kind, data in _fields(state):
        if kind == TEXT:
            shape = (len(data),)
            raw = bytes(data)
        else:
            arr = np.ascontiguousarray(data, dtype="<f8" if kind == F64 else "<i8")
            shape = arr.shape
            raw = arr.tobytes()
        nb = name.encode("ascii")
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(shape)))
        head.append(struct.pack(f"<{len(shape)}Q", *shape))
        body.append(raw)
    blob = b"".join(head + body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def checkpoint_save(state: RunState, path) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    data = encode(state)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc.strerror}") from None
    return path


def decode(blob: bytes, source: str = "<bytes>") -> RunState:
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{source}: checksum mismatch, file is corrupt")
    pos = len(MAGIC)
    version, n_fields = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads {VERSION}")
    specs = []
    try:
        for _ in range(n_fields):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos: pos + ln].decode("ascii")
            pos += ln
            kind, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            specs.append((name, kind, shape))
        names = tuple(s[0] for s in specs)
        if names != FIELDS:
            raise CheckpointError(f"{source}: unexpected field layout {names}")
        vals = {}
        for name, kind, shape in specs:
            if kind == TEXT:
                n = shape[0]
                vals[name] = blob[pos: pos + n].decode("utf-8")
                pos += n
            else:
                dt = "<f8" if kind == F64 else "<i8"
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(shape)
                vals[name] = arr.astype(np.float64 if kind == F64 else np.int64)
                pos += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: truncated or malformed checkpoint ({exc})") from None
    if pos != len(blob) - 4:
        raise CheckpointError(f"{source}: {len(blob) - 4 - pos} trailing bytes in checkpoint")

    def adam(prefix):
        lr, b1, b2, eps = vals[f"{prefix}.hyper"]
        return AdamState(vals[f"{prefix}.m"], vals[f"{prefix}.v"], int(vals[f"{prefix}.t"][0]), lr, b1, b2, eps)

    n_knots, outer, j, fitted, inserted = (int(x) for x in vals["counters"])
    eps, phi0 = (float(x) for x in vals["scalars"])
    return RunState(
        config_text=vals["config"],
        n_knots=n_knots,
        outer_step=outer,
        j=j,
        phase=vals["phase"],
        eps=eps,
        u=vals["u"],
        upsilon=vals["upsilon"],
        theta=vals["theta"],
        adam_inner=adam("adam_inner"),
        adam_u=adam("adam_u"),
        adam_upsilon=adam("adam_upsilon"),
        fitted=bool(fitted),
        buffer_u=vals["buffer_u"],
        buffer_loss=vals["buffer_loss"],
        buffer_step=vals["buffer_step"],
        buffer_inserted=inserted,
        u_trajectory=vals["u_trajectory"],
        principal_trajectory=vals["principal_trajectory"],
        fbsde_trajectory=vals["fbsde_trajectory"],
        final_fbsde_history=vals["final_fbsde_history"],
        final_losses=vals["final_losses"],
        phi0=phi0,
    )


def checkpoint_load(path) -> RunState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(blob, str(path))
