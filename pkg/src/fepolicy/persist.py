"""Binary dataset and checkpoint formats.

Both files share one framing::

    magic (4 bytes) | version u16 | header length u32 | header JSON (utf-8)
    | body (little-endian float64) | sha256 digest of everything before it

The header JSON is serialized canonically (sorted keys, no whitespace) so a
load followed by a save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dataset import TaskDataset
from .errors import ChecksumFailure, FormatVersionMismatch, HeaderMismatch, TruncatedFile
from .numerics.mlp import MlpParams
from .problems import TaskSpec, get_problem

DATASET_MAGIC = b"FEDS"
CHECKPOINT_MAGIC = b"FECK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST = 32


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _frame(magic: bytes, header: dict, body: np.ndarray) -> bytes:
    head = canonical_json(header)
    blob = _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head
    blob += np.ascontiguousarray(body, dtype="<f8").tobytes()
    return blob + hashlib.sha256(blob).digest()


def _unframe(raw: bytes, magic: bytes):
    if len(raw) < _PREFIX.size + _DIGEST:
        raise TruncatedFile("file shorter than its fixed header")
    got_magic, version, head_len = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise FormatVersionMismatch(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start + _DIGEST:
        raise TruncatedFile("file ends inside its header")
    try:
        header = json.loads(raw[_PREFIX.size : start])
    except ValueError as exc:
        raise TruncatedFile("header is not valid JSON") from exc
    body_len = len(raw) - start - _DIGEST
    expected = header.get("body_floats", -1) * 8
    if body_len < expected:
        raise TruncatedFile(f"body has {body_len} bytes, header promises {expected}")
    if body_len != expected:
        raise FormatVersionMismatch("body length disagrees with header")
    if hashlib.sha256(raw[:-_DIGEST]).digest() != raw[-_DIGEST:]:
        raise ChecksumFailure("sha256 digest mismatch")
    body = np.frombuffer(raw, dtype="<f8", count=body_len // 8, offset=start).astype(np.float64)
    return header, body


def _write(path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


# ---------------------------------------------------------------------------
# datasets


def dataset_bytes(ds: TaskDataset) -> bytes:
    n, m = ds.x.shape[1], ds.u.shape[1]
    header = {
        "kind": "dataset",
        "problem": ds.problem,
        "task": ds.task.to_dict(),
        "M": ds.M,
        "n": n,
        "m": m,
        "traj_len": ds.traj_len,
        "n_traj": ds.n_traj,
        "seed": list(ds.seed),
        "body_floats": ds.M * (n + 1 + m) + ds.n_traj,
    }
    if ds.problem:
        prob = get_problem(ds.problem)
        header["T"] = prob.horizon
        header["n_steps"] = ds.traj_len or prob.n_steps
    records = np.concatenate([ds.x, ds.t[:, None], ds.u], axis=1)
    return _frame(DATASET_MAGIC, header, np.concatenate([records.ravel(), ds.objectives]))


def save_dataset(ds: TaskDataset, path) -> Path:
    _write(path, dataset_bytes(ds))
    return Path(path)


def load_dataset(path) -> TaskDataset:
    header, body = _unframe(Path(path).read_bytes(), DATASET_MAGIC)
    n, m, M = header["n"], header["m"], header["M"]
    if header["problem"]:
        prob = get_problem(header["problem"])
        if (n, m) != (prob.state_dim, prob.control_dim):
            raise HeaderMismatch(
                f"header dims (n={n}, m={m}) do not match {prob.name} "
                f"(n={prob.state_dim}, m={prob.control_dim})"
            )
    width = n + 1 + m
    records = body[: M * width].reshape(M, width)
    return TaskDataset(
        task=TaskSpec.from_dict(header["task"]),
        x=records[:, :n].copy(),
        t=records[:, n].copy(),
        u=records[:, n + 1 :].copy(),
        objectives=body[M * width :].copy(),
        traj_len=header["traj_len"],
        problem=header["problem"],
        seed=tuple(header["seed"]),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_from(desc: dict, flat: np.ndarray) -> MlpParams:
    sizes = desc["sizes"]
    ws = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    shell = MlpParams(ws, bs, desc["activation"], desc["head_count"], desc["head_dim"])
    return shell.with_flat(flat)


def basis_bytes(basis, provenance: dict | None = None) -> bytes:
    header = {
        "kind": "basis",
        "architecture": basis.describe(),
        "checksum": basis.checksum(),
        "provenance": provenance or {},
        "body_floats": basis.params.n_params,
    }
    return _frame(CHECKPOINT_MAGIC, header, basis.params.flat())


def operator_bytes(net, provenance: dict | None = None) -> bytes:
    header = {
        "kind": "operator",
        "architecture": net.describe(),
        "basis_checksum": net.basis_checksum,
        "checksum": net.checksum(),
        "provenance": provenance or {},
        "body_floats": net.params.n_params,
    }
    return _frame(CHECKPOINT_MAGIC, header, net.params.flat())


def save_checkpoint(model, path, provenance: dict | None = None) -> Path:
    from .encoder import BasisSet

    blob = basis_bytes(model, provenance) if isinstance(model, BasisSet) else operator_bytes(model, provenance)
    _write(path, blob)
    return Path(path)


def load_checkpoint(path, with_header: bool = False):
    """Load a basis or operator checkpoint, verifying its model checksum."""
    from .encoder import BasisSet
    from .operator import OperatorNet

    header, body = _unframe(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    arch = header["architecture"]
    mlp = _mlp_from(arch["mlp"], body)
    if header["kind"] == "basis":
        model = BasisSet(
            mlp, arch["state_dim"], arch["control_dim"], arch["problem"],
            np.array(arch["input_shift"]), np.array(arch["input_scale"]),
        )
    elif header["kind"] == "operator":
        model = OperatorNet.from_description(mlp, arch, header["basis_checksum"])
    else:
        raise FormatVersionMismatch(f"unknown checkpoint kind {header['kind']!r}")
    if model.checksum() != header["checksum"]:
        raise ChecksumFailure("model checksum does not match architecture and parameters")
    return (model, header) if with_header else model
