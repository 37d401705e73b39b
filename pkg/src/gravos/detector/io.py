"""On-disk snapshot and loss-curve formats."""

import csv
import struct

import numpy as np

from .model import ArchConfig, DetectorParams, DetectorSnapshot

MAGIC = b"GRAVOSNP"
VERSION = 1
# magic, version, 8 architecture dims, stage, epoch, parameter count
_HEADER = struct.Struct("<8sH8IBIQ")
_STAGES = ("early", "late")


class SnapshotFormatError(ValueError):
    pass


def snapshot_bytes(snapshot):
    a = snapshot.params.arch
    header = _HEADER.pack(MAGIC, VERSION, a.point_hidden, a.feature, a.context, a.head_hidden,
                          a.n_classes, a.ctx_stride, a.ctx_radius, a.ctx_in, _STAGES.index(snapshot.stage),
                          snapshot.epoch, a.n_params())
    return header + np.asarray(snapshot.params.theta, dtype="<f8").tobytes()


def save_snapshot(snapshot, path):
    with open(path, "wb") as fh:
        fh.write(snapshot_bytes(snapshot))


def load_snapshot(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise SnapshotFormatError(f"{path}: truncated header")
    magic, version, *dims, stage, epoch, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotFormatError(f"{path}: unsupported version {version}")
    arch = ArchConfig(*dims)
    body = raw[_HEADER.size:]
    if n != arch.n_params() or len(body) != 8 * n:
        raise SnapshotFormatError(f"{path}: parameter block does not match the architecture")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return DetectorSnapshot(DetectorParams(arch, theta), _STAGES[stage], epoch)


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "cls_loss", "loc_loss", "total"])
        for epoch, cls, loc, total in curve:
            w.writerow([epoch, repr(cls), repr(loc), repr(total)])
