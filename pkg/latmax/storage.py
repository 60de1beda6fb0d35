"""Binary containers (JSON header line + f64le payload) and CSV tables.

Layouts are documented in FORMATS.md. Every writer goes through a temporary
file in the target directory followed by a rename.
"""

import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .covariance import NeighborhoodCov
from .errors import FileFormatError
from .lattice import Field, Neighborhood, build_neighborhood
from .lookup import LookupTable
from .mcdlm import PeakSampleSet
from .schemas import LatticeSpec, PeakRecord, SampleSetHeader, TableHeader, VolumeHeader

logger = logging.getLogger(__name__)

H = TypeVar("H", bound=BaseModel)
_F64 = np.dtype("<f8")
FLOAT_FORMAT = "%.17g"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_container(path, header: BaseModel, payload: np.ndarray) -> None:
    head = header.model_dump_json().encode("utf-8") + b"\n"
    atomic_write_bytes(path, head + np.ascontiguousarray(payload, dtype=_F64).tobytes())


def _read_container(path, header_cls: Type[H]) -> "tuple[H, np.ndarray]":
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise FileFormatError(f"{path}: missing header line")
    try:
        header = header_cls.model_validate_json(raw[:cut])
    except ValidationError as e:
        raise FileFormatError(f"{path}: invalid header: {e.errors()[0]['msg']}") from None
    body = raw[cut + 1 :]
    if len(body) % 8:
        raise FileFormatError(f"{path}: payload is not a whole number of f64 values")
    return header, np.frombuffer(body, dtype=_F64).astype(np.float64)


# --- volumes --------------------------------------------------------------


def write_volume(path, field: Field) -> None:
    lat = field.lattice
    _write_container(path, VolumeHeader(D=lat.dim, sizes=lat.sizes, steps=lat.steps), field.values)


def read_volume(path) -> Field:
    header, payload = _read_container(path, VolumeHeader)
    lattice = LatticeSpec(dim=header.D, sizes=header.sizes, steps=header.steps)
    if payload.size != lattice.n_voxels:
        raise FileFormatError(f"{path}: payload has {payload.size} values, header declares {lattice.n_voxels}")
    return Field(lattice, payload)


def read_volumes(paths: Iterable) -> List[Field]:
    return [read_volume(p) for p in paths]


# --- sample sets ----------------------------------------------------------


def write_samples(path, samples: PeakSampleSet) -> None:
    header = SampleSetHeader(
        kind=samples.kind,
        count=samples.n_accepted,
        n_accepted=samples.n_accepted,
        n_attempted=samples.n_attempted,
        seed=samples.seed,
        model=samples.model,
        cov_fingerprint=samples.cov_fingerprint,
    )
    _write_container(path, header, samples.heights)


def read_samples(path) -> PeakSampleSet:
    header, payload = _read_container(path, SampleSetHeader)
    if payload.size != header.count:
        raise FileFormatError(f"{path}: payload has {payload.size} heights, header declares {header.count}")
    return PeakSampleSet(
        heights=payload,
        n_attempted=header.n_attempted,
        seed=header.seed,
        model=header.model,
        cov_fingerprint=header.cov_fingerprint,
        kind=header.kind,
    )


# --- lookup tables --------------------------------------------------------


def write_table(path, table: LookupTable) -> None:
    header = TableHeader(
        D=table.dim,
        rho_grid=tuple(float(r) for r in table.rho_grid),
        n_u=table.u_grid.size,
        seed=table.seed,
        samples_per_rho=table.samples_per_rho,
        smoothed=table.smoothed,
        lam_rho=table.lam_rho,
        lam_u=table.lam_u,
    )
    _write_container(path, header, np.concatenate([table.u_grid, table.cdf.reshape(-1)]))


def read_table(path) -> LookupTable:
    header, payload = _read_container(path, TableHeader)
    n_rho, n_u = len(header.rho_grid), header.n_u
    if payload.size != n_u * (n_rho + 1):
        raise FileFormatError(f"{path}: payload has {payload.size} values, expected {n_u * (n_rho + 1)}")
    return LookupTable(
        dim=header.D,
        rho_grid=np.asarray(header.rho_grid),
        u_grid=payload[:n_u],
        cdf=payload[n_u:].reshape(n_rho, n_u),
        seed=header.seed,
        samples_per_rho=header.samples_per_rho,
        smoothed=header.smoothed,
        lam_rho=header.lam_rho,
        lam_u=header.lam_u,
    )


# --- CSV ------------------------------------------------------------------


def write_csv(path, frame: pd.DataFrame, index: bool = False) -> None:
    buf = io.StringIO()
    frame.to_csv(buf, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FileFormatError(f"{path}: cannot parse CSV: {e}") from None


def read_pvalue_column(path, column: Optional[str] = None) -> np.ndarray:
    """One numeric column; defaults to ``p`` if present, else the last column"""
    frame = read_csv(path)
    if column is None:
        column = "p" if "p" in frame.columns else frame.columns[-1]
    if column not in frame.columns:
        raise FileFormatError(f"{path}: no column '{column}'")
    return frame[column].to_numpy(dtype=np.float64)


def _offset_label(offset: Sequence[int]) -> str:
    return ":".join(str(int(x)) for x in offset)


def cov_frame(cov: NeighborhoodCov) -> pd.DataFrame:
    labels = [_offset_label(o) for o in cov.nbhd.with_center()]
    return pd.DataFrame(cov.matrix, index=pd.Index(labels, name="offset"), columns=labels)


def write_cov(path, cov: NeighborhoodCov) -> None:
    write_csv(path, cov_frame(cov), index=True)


def read_cov(path, provenance: str = "empirical") -> NeighborhoodCov:
    """Covariance CSV with offset labels; the first row/column must be the centre"""
    frame = read_csv(path, index_col=0)
    try:
        offsets = [tuple(int(x) for x in str(label).split(":")) for label in frame.columns]
    except ValueError:
        raise FileFormatError(f"{path}: column labels must be ':'-joined offsets") from None
    if not offsets or any(offsets[0]):
        raise FileFormatError(f"{path}: first slot must be the centre offset")
    nbhd = Neighborhood("custom", np.array(offsets[1:], dtype=np.int64))
    for kind in ("pc", "fc"):
        candidate = build_neighborhood(kind, nbhd.dim)
        if candidate == nbhd:
            nbhd = candidate
    # the file may list neighbours in any order; map onto the canonical one
    order = [0] + [offsets.index(o) for o in nbhd.key]
    matrix = frame.to_numpy(dtype=np.float64)[np.ix_(order, order)]
    return NeighborhoodCov(nbhd, matrix, provenance)


def peaks_frame(peaks: Sequence[PeakRecord], dim: int) -> pd.DataFrame:
    methods: Dict[str, None] = {}
    for peak in peaks:
        for name in peak.pvalues:
            methods.setdefault(name)
    rows = []
    for peak in peaks:
        row = {f"x{d}": peak.location[d] for d in range(dim)}
        row.update(height=peak.height, kind=peak.kind, boundary=peak.boundary)
        for name in methods:
            row[f"p_{name}"] = peak.pvalues.get(name, np.nan)
            row[f"censored_{name}"] = peak.censored.get(name, False)
        rows.append(row)
    columns = [f"x{d}" for d in range(dim)] + ["height", "kind", "boundary"]
    for name in methods:
        columns += [f"p_{name}", f"censored_{name}"]
    return pd.DataFrame(rows, columns=columns)


def write_peaks(path, peaks: Sequence[PeakRecord], dim: int) -> None:
    write_csv(path, peaks_frame(peaks, dim))


def read_peaks(path) -> List[PeakRecord]:
    frame = read_csv(path)
    coords = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    methods = [c[2:] for c in frame.columns if c.startswith("p_")]
    out = []
    for row in frame.to_dict(orient="records"):
        pvalues = {m: float(row[f"p_{m}"]) for m in methods if pd.notna(row[f"p_{m}"])}
        censored = {m: bool(row.get(f"censored_{m}", False)) for m in pvalues}
        out.append(
            PeakRecord(
                location=tuple(int(row[c]) for c in coords),
                height=float(row["height"]),
                kind=str(row.get("kind", "")),
                boundary=bool(row.get("boundary", False)),
                pvalues=pvalues,
                censored=censored,
            )
        )
    return out
