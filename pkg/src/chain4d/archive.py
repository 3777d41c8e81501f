"""On-disk interchange: tensor archives, OBJ meshes, track/pose text.

An archive is a directory: ``manifest.json`` plus one raw little-endian
row-major blob per tensor. Wire dtypes are float32/int32; accessors
upcast to float64 so everything downstream computes in double
precision. The round trip is byte-exact because arrays are held in wire
dtype from ingestion on.

Ground truth for synthetic scenes travels as a nested archive in a
``groundtruth/`` subdirectory so evaluation tooling can ride along with
the inputs without touching the main manifest.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geom import ROW_SUM_TOL, TriMesh

_MAGIC = "chain4d-archive"
_VERSION = 1

_WIRE_DTYPES = {
    "f32": np.dtype("<f4"),
    "i32": np.dtype("<i4"),
}

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

GROUNDTRUTH_DIR = "groundtruth"


def _wire_cast(name, array):
    """Cast an ingested array to its wire dtype, choosing by kind."""
    arr = np.asarray(array)
    if arr.dtype.kind in "iub":
        out = arr.astype("<i4")
        if not np.array_equal(out.astype(arr.dtype), arr):
            raise ValidationError(
                f"tensor {name!r}: integer values do not fit in int32")
        return out, "i32"
    if arr.dtype.kind != "f":
        raise ValidationError(
            f"tensor {name!r}: unsupported dtype {arr.dtype}")
    return arr.astype("<f4"), "f32"


def _check_row_stochastic(name, arr):
    """Validate a declared-attention tensor: finite, >=0, rows sum to 1."""
    data = np.asarray(arr)
    if data.ndim < 2:
        raise ValidationError(
            f"tensor {name!r}: declared row-stochastic but has ndim {data.ndim}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(
            f"tensor {name!r}: declared row-stochastic but contains non-finite values")
    if np.any(data < 0):
        raise ValidationError(
            f"tensor {name!r}: declared row-stochastic but contains negative values")
    sums = data.sum(axis=-1, dtype=np.float64)
    bad = np.abs(sums - 1.0) > ROW_SUM_TOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(
            f"tensor {name!r}: row {idx} sums to {sums[bad][0]!r}, expected 1"
        )


class ChainArchive:
    """Named wire-dtype tensors plus scene metadata.

    Tensors live in wire dtype (f32/i32); use :meth:`f64` at the
    compute boundary. ``row_stochastic`` flags trigger validation at
    both ingestion (:meth:`add`) and load (:func:`read_archive`).
    """

    def __init__(self, frames, tokens, meta=None):
        frames = int(frames)
        tokens = int(tokens)
        if frames < 1:
            raise ValidationError(f"archive frame count must be >= 1, got {frames}")
        if tokens < 1:
            raise ValidationError(f"archive token count must be >= 1, got {tokens}")
        self.frames = frames
        self.tokens = tokens
        self.meta = dict(meta) if meta else {}
        self._tensors = {}
        self._dtypes = {}
        self._stochastic = {}
        self.groundtruth = None

    # -- construction -------------------------------------------------

    def add(self, name, array, row_stochastic=False):
        if not _NAME_RE.match(name):
            raise ValidationError(f"tensor name {name!r} is not filesystem-safe")
        if name in self._tensors:
            raise ValidationError(f"tensor {name!r} already present")
        wire, code = _wire_cast(name, array)
        if row_stochastic:
            _check_row_stochastic(name, wire)
        wire.flags.writeable = False
        self._tensors[name] = wire
        self._dtypes[name] = code
        self._stochastic[name] = bool(row_stochastic)
        return self

    def attach_groundtruth(self, archive):
        if not isinstance(archive, ChainArchive):
            raise ValidationError("ground truth must be a ChainArchive")
        self.groundtruth = archive
        return self

    # -- access -------------------------------------------------------

    def names(self):
        return sorted(self._tensors)

    def __contains__(self, name):
        return name in self._tensors

    def wire(self, name):
        """The stored wire-dtype array (read-only)."""
        try:
            return self._tensors[name]
        except KeyError:
            raise ValidationError(f"tensor {name!r} not present in archive") from None

    def f64(self, name):
        """Tensor upcast to float64 (float tensors) for computation."""
        arr = self.wire(name)
        if self._dtypes[name] == "i32":
            return arr.astype(np.int64)
        return arr.astype(np.float64)

    def is_row_stochastic(self, name):
        self.wire(name)
        return self._stochastic[name]

    def frame_name(self, base, frame):
        frame = int(frame)
        if not 0 <= frame < self.frames:
            raise ValidationError(
                f"frame {frame} out of range for archive with {self.frames} frames")
        return f"{base}_{frame:04d}"

    def anchor_mesh(self):
        verts = self.f64("anchor_vertices")
        faces = self.f64("anchor_faces")
        return TriMesh(verts, faces)

    def add_anchor_mesh(self, mesh):
        self.add("anchor_vertices", mesh.vertices)
        self.add("anchor_faces", mesh.faces)
        return self

    # -- equality (tests) ---------------------------------------------

    def tensors_equal(self, other):
        """Byte-exact tensor equality against another archive."""
        if self.names() != other.names():
            return False
        for name in self.names():
            a, b = self.wire(name), other.wire(name)
            if a.shape != b.shape or self._dtypes[name] != other._dtypes[name]:
                return False
            if a.tobytes() != b.tobytes():
                return False
            if self._stochastic[name] != other._stochastic[name]:
                return False
        return True


def write_archive(archive, path):
    """Serialize to a directory; lossless, see :func:`read_archive`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in archive.names():
        arr = archive.wire(name)
        if archive.is_row_stochastic(name):
            _check_row_stochastic(name, arr)
        blob = f"{name}.bin"
        (root / blob).write_bytes(arr.tobytes(order="C"))
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": archive._dtypes[name],
            "file": blob,
            "row_stochastic": archive.is_row_stochastic(name),
        }
    manifest = {
        "format": _MAGIC,
        "version": _VERSION,
        "frames": archive.frames,
        "tokens": archive.tokens,
        "byte_order": "little",
        "layout": "row-major",
        "meta": archive.meta,
        "tensors": entries,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if archive.groundtruth is not None:
        write_archive(archive.groundtruth, root / GROUNDTRUTH_DIR)


def read_archive(path):
    """Load and validate a directory archive written by write_archive."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ValidationError(f"no manifest.json under {root}")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest.json does not parse: {exc}") from exc
    if manifest.get("format") != _MAGIC:
        raise ValidationError(
            f"manifest format is {manifest.get('format')!r}, expected {_MAGIC!r}")
    if manifest.get("version") != _VERSION:
        raise ValidationError(
            f"manifest version {manifest.get('version')!r} unsupported")

    archive = ChainArchive(manifest["frames"], manifest["tokens"],
                           manifest.get("meta") or {})
    for name, entry in sorted(manifest.get("tensors", {}).items()):
        dtype_code = entry.get("dtype")
        if dtype_code not in _WIRE_DTYPES:
            raise ValidationError(
                f"tensor {name!r}: unknown wire dtype {dtype_code!r}")
        dtype = _WIRE_DTYPES[dtype_code]
        shape = tuple(int(s) for s in entry["shape"])
        blob_path = root / entry["file"]
        if not blob_path.is_file():
            raise ValidationError(f"tensor {name!r}: blob file {entry['file']!r} missing")
        raw = blob_path.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise ValidationError(
                f"tensor {name!r}: blob is {len(raw)} bytes, expected {expected}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        stochastic = bool(entry.get("row_stochastic", False))
        if stochastic:
            _check_row_stochastic(name, arr)
        arr.flags.writeable = False
        archive._tensors[name] = arr
        archive._dtypes[name] = dtype_code
        archive._stochastic[name] = stochastic

    gt_dir = root / GROUNDTRUTH_DIR
    if (gt_dir / "manifest.json").is_file():
        archive.groundtruth = read_archive(gt_dir)
    return archive


# ---------------------------------------------------------------------------
# OBJ meshes
# ---------------------------------------------------------------------------

def write_obj_mesh(mesh, path):
    """ASCII OBJ, `v`/`f` records only, %.17g so float64 round-trips."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.17g %.17g %.17g" % (v[0], v[1], v[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj_mesh(path):
    """Parse the OBJ subset written by write_obj_mesh.

    Accepts `v` and triangular `f` records, blank lines, and `#`
    comments; anything else is rejected with its line number, as are
    quad faces and out-of-range (OBJ is 1-based) indices.
    """
    verts = []
    faces = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "v":
                if len(parts) != 4:
                    raise ValidationError(
                        f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ValidationError(
                        f"{path}:{lineno}: bad vertex coordinate ({exc})") from None
            elif kind == "f":
                if len(parts) != 4:
                    raise ValidationError(
                        f"{path}:{lineno}: only triangular faces are supported "
                        f"(got {len(parts) - 1} indices)")
                idx = []
                for tok in parts[1:]:
                    # reject v/vt/vn compounds: the subset is plain indices
                    if "/" in tok:
                        raise ValidationError(
                            f"{path}:{lineno}: compound face indices not supported")
                    try:
                        i = int(tok)
                    except ValueError:
                        raise ValidationError(
                            f"{path}:{lineno}: bad face index {tok!r}") from None
                    if i < 1:
                        raise ValidationError(
                            f"{path}:{lineno}: face index {i} (OBJ indices are 1-based)")
                    if i > len(verts):
                        raise ValidationError(
                            f"{path}:{lineno}: face index {i} but only "
                            f"{len(verts)} vertices seen")
                    idx.append(i - 1)
                faces.append(idx)
            else:
                raise ValidationError(
                    f"{path}:{lineno}: unsupported record {kind!r} "
                    "(subset is v/f only)")
    if not verts:
        raise ValidationError(f"{path}: no vertices")
    return TriMesh(np.asarray(verts, dtype=np.float64),
                   np.asarray(faces, dtype=np.int64).reshape(len(faces), 3))


# ---------------------------------------------------------------------------
# track / pose text exports
# ---------------------------------------------------------------------------

def write_tracks(path, query_ids, positions, confidence, visible=None,
                 units="pixels"):
    """One record per (query, frame): `query frame coords... conf vis`."""
    pos = np.asarray(positions, dtype=np.float64)
    conf = np.asarray(confidence, dtype=np.float64)
    ids = [int(q) for q in query_ids]
    if pos.ndim != 3 or pos.shape[2] not in (2, 3):
        raise ValidationError(
            f"track positions must be (queries, frames, 2|3), got {pos.shape}")
    n_q, n_f, dims = pos.shape
    if len(ids) != n_q:
        raise ValidationError(
            f"{len(ids)} query ids for {n_q} position rows")
    if conf.shape != (n_q, n_f):
        raise ValidationError(
            f"confidence shape {conf.shape} != {(n_q, n_f)}")
    if visible is None:
        vis = np.ones((n_q, n_f), dtype=np.int64)
    else:
        vis = np.asarray(visible).astype(np.int64)
        if vis.shape != (n_q, n_f):
            raise ValidationError(
                f"visibility shape {vis.shape} != {(n_q, n_f)}")
    lines = [
        f"# chain4d-tracks units={units} dims={dims} queries={n_q} frames={n_f}",
        "# columns: query frame " + " ".join("xyz"[:dims]) + " confidence visible",
    ]
    for qi, q in enumerate(ids):
        for f in range(n_f):
            coords = " ".join("%.17g" % c for c in pos[qi, f])
            lines.append(f"{q} {f} {coords} %.17g {int(vis[qi, f])}" % conf[qi, f])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tracks(path):
    """Inverse of write_tracks -> (ids, positions, confidence, visible, units)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# chain4d-tracks"):
        raise ValidationError(f"{path}: not a track export")
    header = dict(kv.split("=") for kv in text[0].split()[2:])
    dims = int(header["dims"])
    n_q = int(header["queries"])
    n_f = int(header["frames"])
    units = header["units"]
    ids = []
    pos = np.zeros((n_q, n_f, dims))
    conf = np.zeros((n_q, n_f))
    vis = np.zeros((n_q, n_f), dtype=np.int64)
    row = 0
    id_to_slot = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 + dims + 2:
            raise ValidationError(f"{path}:{lineno}: malformed track record")
        q = int(parts[0])
        f = int(parts[1])
        if q not in id_to_slot:
            if len(id_to_slot) >= n_q:
                raise ValidationError(
                    f"{path}:{lineno}: more query ids than declared ({n_q})")
            id_to_slot[q] = len(id_to_slot)
            ids.append(q)
        slot = id_to_slot[q]
        if not 0 <= f < n_f:
            raise ValidationError(f"{path}:{lineno}: frame {f} out of range")
        pos[slot, f] = [float(x) for x in parts[2:2 + dims]]
        conf[slot, f] = float(parts[2 + dims])
        vis[slot, f] = int(parts[3 + dims])
        row += 1
    if row != n_q * n_f:
        raise ValidationError(
            f"{path}: {row} records, expected {n_q * n_f}")
    return ids, pos, conf, vis, units


def write_poses(path, rotations, translations, extras=None):
    """Per-frame rigid camera pose: `frame r00..r22 tx ty tz [key=val...]`."""
    R = np.asarray(rotations, dtype=np.float64)
    t = np.asarray(translations, dtype=np.float64)
    if R.ndim != 3 or R.shape[1:] != (3, 3):
        raise ValidationError(f"rotations must be (frames, 3, 3), got {R.shape}")
    if t.shape != (R.shape[0], 3):
        raise ValidationError(f"translations shape {t.shape} != {(R.shape[0], 3)}")
    lines = [
        f"# chain4d-poses frames={R.shape[0]}",
        "# columns: frame r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz",
    ]
    for f in range(R.shape[0]):
        nums = " ".join("%.17g" % x for x in np.concatenate([R[f].ravel(), t[f]]))
        suffix = ""
        if extras is not None and extras[f]:
            suffix = " " + " ".join(
                f"{k}={extras[f][k]:.17g}" if isinstance(extras[f][k], float)
                else f"{k}={extras[f][k]}"
                for k in sorted(extras[f]))
        lines.append(f"{f} {nums}{suffix}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_poses(path):
    """Inverse of write_poses -> (rotations, translations, extras)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# chain4d-poses"):
        raise ValidationError(f"{path}: not a pose export")
    n_f = int(text[0].split("frames=")[1])
    R = np.zeros((n_f, 3, 3))
    t = np.zeros((n_f, 3))
    extras = [dict() for _ in range(n_f)]
    seen = np.zeros(n_f, dtype=bool)
    for lineno, line in enumerate(text[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 13:
            raise ValidationError(f"{path}:{lineno}: malformed pose record")
        f = int(parts[0])
        if not 0 <= f < n_f:
            raise ValidationError(f"{path}:{lineno}: frame {f} out of range")
        nums = [float(x) for x in parts[1:13]]
        R[f] = np.asarray(nums[:9]).reshape(3, 3)
        t[f] = nums[9:12]
        for tok in parts[13:]:
            k, _, v = tok.partition("=")
            try:
                extras[f][k] = float(v)
            except ValueError:
                extras[f][k] = v
        seen[f] = True
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise ValidationError(f"{path}: missing pose for frame {missing}")
    return R, t, extras
