"""Binary model container.

Layout (little-endian): magic "GRFM", u32 format version, u32 header length
and UTF-8 header text ("key=value" lines, canonical order preserved on
load), then length-prefixed channel-bank and patch-pool text sections, then
per engine a projection section and a classifier section:

* projection: u32 patch count, per patch u32 d, u32 p, u8 quantized flag,
  then either d*p float32 (column-major) or per column f32 scale, f32
  offset and d u8 codes;
* classifier: u32 D, u8 representation kind, f64 exponent, f64 C, D float32.

Loaded files keep raw float32/quantized payloads so save(load(x)) is
byte-identical to x. Engine order and header text are canonical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grfbank import ChannelBank, bank_from_text, bank_to_text
from .lda import ProjectionEntry, ProjectionModel
from .pairengine import REP_KINDS, SvmModel
from .patchpool import PatchPool, pool_from_text, pool_to_text

MAGIC = b"GRFM"
FORMAT_VERSION = 1

ENGINE_ORDER = ("max", "mu", "sigma", "moment")


@dataclass
class QuantizedMatrix:
    """Per-column affine 8-bit encoding of a (d, p) projection matrix."""

    scales: np.ndarray  # (p,) float32
    offsets: np.ndarray  # (p,) float32
    codes: np.ndarray  # (d, p) uint8

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return (
            self.codes.astype(np.float64) * self.scales.astype(np.float64)
            + self.offsets.astype(np.float64)
        )

    @property
    def nbytes(self) -> int:
        return self.codes.size + self.scales.nbytes + self.offsets.nbytes


def quantize_matrix(matrix: np.ndarray) -> QuantizedMatrix:
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=0)
    hi = m.max(axis=0)
    scales = ((hi - lo) / 255.0).astype(np.float32)
    offsets = lo.astype(np.float32)
    safe = np.where(scales == 0, 1.0, scales.astype(np.float64))
    codes = np.clip(np.round((m - offsets.astype(np.float64)) / safe), 0, 255)
    return QuantizedMatrix(scales, offsets, codes.astype(np.uint8))


@dataclass
class Engine:
    kind: str
    projection: list  # per patch: float32 ndarray (d, p) or QuantizedMatrix
    svm: SvmModel
    threshold: float = 0.0

    def projection_model(self) -> ProjectionModel:
        entries = []
        for mat in self.projection:
            dense = mat.dequantize() if isinstance(mat, QuantizedMatrix) else np.asarray(mat, dtype=np.float64)
            entries.append(ProjectionEntry(dense, np.zeros(dense.shape[1])))
        return ProjectionModel(entries)

    @property
    def total_p(self) -> int:
        return sum(m.shape[1] for m in self.projection)

    def projection_bytes(self) -> int:
        total = 0
        for m in self.projection:
            total += m.nbytes if isinstance(m, QuantizedMatrix) else m.size * 4
        return total


@dataclass
class ModelFile:
    header: dict[str, str]
    bank: ChannelBank
    pool: PatchPool
    engines: dict[str, Engine] = field(default_factory=dict)

    @property
    def face_size(self) -> int:
        return int(self.header["face_size"])

    @property
    def fused_threshold(self) -> float:
        return float(self.header.get("threshold_fused", "0.0"))

    def check_consistent(self) -> None:
        for kind, eng in self.engines.items():
            if eng.total_p != eng.svm.dim:
                raise ValueError(
                    f"dim-mismatch: engine {kind} projects to {eng.total_p} "
                    f"dims but its classifier expects {eng.svm.dim}"
                )
            if len(eng.projection) != self.pool.Q:
                raise ValueError(
                    f"dim-mismatch: engine {kind} has {len(eng.projection)} "
                    f"projections for {self.pool.Q} active patches"
                )


def _pack_section(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _write_projection(out: list, projection) -> None:
    out.append(struct.pack("<I", len(projection)))
    for mat in projection:
        d, p = mat.shape
        quant = isinstance(mat, QuantizedMatrix)
        out.append(struct.pack("<IIB", d, p, int(quant)))
        if quant:
            for col in range(p):
                out.append(struct.pack("<ff", mat.scales[col], mat.offsets[col]))
                out.append(mat.codes[:, col].tobytes())
        else:
            arr = np.ascontiguousarray(np.asarray(mat, dtype="<f4").T)  # column-major
            out.append(arr.tobytes())


def _write_svm(out: list, svm: SvmModel) -> None:
    out.append(
        struct.pack("<IBdd", svm.dim, REP_KINDS.index(svm.kind), svm.p_rep, svm.C)
    )
    out.append(np.ascontiguousarray(svm.w, dtype="<f4").tobytes())


def save_model(path, model: ModelFile) -> None:
    header_text = "".join(f"{k}={v}\n" for k, v in model.header.items())
    out: list[bytes] = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    out.append(_pack_section(header_text.encode("utf-8")))
    out.append(_pack_section(bank_to_text(model.bank).encode("ascii")))
    out.append(_pack_section(pool_to_text(model.pool).encode("ascii")))
    kinds = [k for k in ENGINE_ORDER if k in model.engines]
    out.append(struct.pack("<B", len(kinds)))
    for kind in kinds:
        eng = model.engines[kind]
        out.append(struct.pack("<B", ENGINE_ORDER.index(kind)))
        _write_projection(out, eng.projection)
        _write_svm(out, eng.svm)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated model file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def section(self) -> bytes:
        (length,) = self.unpack("<I")
        return self.take(length)


def load_model(path) -> ModelFile:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MAGIC:
        raise ValueError("not a model file")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    header: dict[str, str] = {}
    for line in rd.section().decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    bank = bank_from_text(rd.section().decode("ascii"))
    pool = pool_from_text(rd.section().decode("ascii"))
    (n_engines,) = rd.unpack("<B")
    engines: dict[str, Engine] = {}
    for _ in range(n_engines):
        (kind_code,) = rd.unpack("<B")
        kind = ENGINE_ORDER[kind_code]
        (n_patches,) = rd.unpack("<I")
        projection = []
        for _ in range(n_patches):
            d, p, quant = rd.unpack("<IIB")
            if quant:
                scales = np.empty(p, dtype=np.float32)
                offsets = np.empty(p, dtype=np.float32)
                codes = np.empty((d, p), dtype=np.uint8)
                for col in range(p):
                    scales[col], offsets[col] = rd.unpack("<ff")
                    codes[:, col] = np.frombuffer(rd.take(d), dtype=np.uint8)
                projection.append(QuantizedMatrix(scales, offsets, codes))
            else:
                raw = np.frombuffer(rd.take(4 * d * p), dtype="<f4")
                projection.append(raw.reshape(p, d).T.copy())  # stored column-major
        dim, rep_code, p_rep, c_val = rd.unpack("<IBdd")
        w = np.frombuffer(rd.take(4 * dim), dtype="<f4").astype(np.float64)
        svm = SvmModel(w=w, C=c_val, kind=REP_KINDS[rep_code], p_rep=p_rep)
        threshold = float(header.get(f"threshold_{kind}", "0.0"))
        engines[kind] = Engine(kind, projection, svm, threshold)
    model = ModelFile(header, bank, pool, engines)
    model.check_consistent()
    return model
