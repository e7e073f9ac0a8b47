"""Closed-form training-memory model for a uniform linear-layer stack.

The model: a stack of n_layers layers, each features -> features, applied
pointwise over a spatial grid. Per layer that is features^2 + features
parameters, and the forward pass saves one input activation of
batch * prod(spatial) * features elements. Hence

  n_params          = n_layers * (features^2 + features)
  weight_bytes      = bytes_per_element * n_params
  optimizer_bytes   = optimizer_multiplier * weight_bytes
  activation_bytes  = batch * prod(spatial) * features
                      * bytes_per_element * n_layers

Activations scale with the spatial volume (quadratic in resolution for 2-D
grids, cubic for 3-D) while weights do not, which is the whole reason to
shard the domain rather than the batch. scaling_fit recovers that exponent
from measured (resolution, bytes) series. The ActivationLedger measures the
same quantity the closed form predicts, by recording what a forward pass
actually saves; for the plain linear stack the two agree to the byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dense
from .errors import FitError, UnsupportedConfigError

MIB = 2 ** 20


@dataclass(frozen=True)
class LayerStackSpec:
    """Shape of the modeled network and data."""

    n_layers: int
    features: int
    spatial: tuple[int, ...]
    batch: int = 1
    bytes_per_element: int = 4
    optimizer_multiplier: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if self.n_layers < 1 or self.features < 1 or self.batch < 1:
            raise UnsupportedConfigError(
                f"n_layers, features, batch must be >= 1, got "
                f"{self.n_layers}, {self.features}, {self.batch}"
            )
        if not self.spatial or any(s < 1 for s in self.spatial):
            raise UnsupportedConfigError(
                f"spatial must be non-empty positive extents, got {self.spatial}"
            )
        if self.bytes_per_element not in (4, 8):
            raise UnsupportedConfigError(
                f"bytes_per_element must be 4 or 8, got {self.bytes_per_element}"
            )
        if self.optimizer_multiplier < 0:
            raise UnsupportedConfigError(
                f"optimizer_multiplier must be >= 0, got {self.optimizer_multiplier}"
            )


def param_count(spec: LayerStackSpec) -> int:
    return spec.n_layers * (spec.features ** 2 + spec.features)


def weight_bytes(spec: LayerStackSpec) -> int:
    return spec.bytes_per_element * param_count(spec)


def optimizer_bytes(spec: LayerStackSpec) -> float:
    return spec.optimizer_multiplier * weight_bytes(spec)


def activation_bytes(spec: LayerStackSpec) -> int:
    return (
        spec.batch
        * math.prod(spec.spatial)
        * spec.features
        * spec.bytes_per_element
        * spec.n_layers
    )


def per_rank_activation_bytes(spec: LayerStackSpec, shards, shard_dim: int = 0
                              ) -> list[int]:
    """Activation bytes per rank when spatial[shard_dim] is split.

    shards is a rank count (split with default_chunk semantics) or an
    explicit extent list summing to the dim. Computed by substituting each
    rank's extent into the integer product, so the shares sum to the total
    exactly, uneven and zero-extent shards included.
    """
    from .sharding import default_chunk  # local import, sharding pulls mesh

    if not 0 <= shard_dim < len(spec.spatial):
        raise UnsupportedConfigError(
            f"shard_dim {shard_dim} out of range for spatial {spec.spatial}"
        )
    dim_extent = spec.spatial[shard_dim]
    if isinstance(shards, int):
        extents = default_chunk(dim_extent, shards)
    else:
        extents = [int(e) for e in shards]
        if any(e < 0 for e in extents) or sum(extents) != dim_extent:
            raise UnsupportedConfigError(
                f"shard extents {extents} do not tile spatial dim of "
                f"{dim_extent}"
            )
    other = math.prod(
        s for i, s in enumerate(spec.spatial) if i != shard_dim
    )
    per_unit = (
        spec.batch * other * spec.features * spec.bytes_per_element * spec.n_layers
    )
    return [per_unit * e for e in extents]


@dataclass(frozen=True)
class MemoryReport:
    spec: LayerStackSpec
    n_params: int
    weight_bytes: int
    optimizer_bytes: float
    activation_bytes: int

    @property
    def weight_mib(self) -> float:
        return self.weight_bytes / MIB

    @property
    def optimizer_mib(self) -> float:
        return self.optimizer_bytes / MIB

    @property
    def activation_mib(self) -> float:
        return self.activation_bytes / MIB


def memory_report(spec: LayerStackSpec) -> MemoryReport:
    return MemoryReport(
        spec=spec,
        n_params=param_count(spec),
        weight_bytes=weight_bytes(spec),
        optimizer_bytes=optimizer_bytes(spec),
        activation_bytes=activation_bytes(spec),
    )


# ---------------------------------------------------------------------------
# reference table

# Six canonical rows: 1-D/2-D/3-D grids of side 256, 20 layers, float32,
# features 1024 then 8192 within each grid. Weight footprints stay flat per
# features count while activations grow by the grid volume.
TABLE_SPECS = tuple(
    LayerStackSpec(n_layers=20, features=f, spatial=sp)
    for sp in ((256,), (256, 256), (256, 256, 256))
    for f in (1024, 8192)
)


def format_param_count(n: int) -> str:
    """21.0M-style: scale to M or B, one decimal place."""
    if n >= 10 ** 9:
        return f"{n / 10 ** 9:.1f}B"
    if n >= 10 ** 6:
        return f"{n / 10 ** 6:.1f}M"
    return str(n)


def _fmt_mib_1dp(bytes_) -> str:
    return f"{bytes_ / MIB:.1f}"


def _fmt_mib_count(bytes_) -> str:
    v = bytes_ / MIB
    if v == int(v):
        return f"{int(v):,}"
    return f"{v:,.1f}"


def reference_table_reports() -> list[MemoryReport]:
    return [memory_report(spec) for spec in TABLE_SPECS]


def format_table(reports: list[MemoryReport]) -> str:
    headers = ("spatial", "layers", "features", "params", "weights_mib",
               "activations_mib")
    rows = [headers]
    for r in reports:
        spatial = ",".join(str(s) for s in r.spec.spatial)
        if len(r.spec.spatial) == 1:
            spatial += ","
        rows.append((
            "(" + spatial + ")",
            str(r.spec.n_layers),
            str(r.spec.features),
            format_param_count(r.n_params),
            _fmt_mib_1dp(r.weight_bytes),
            _fmt_mib_count(r.activation_bytes),
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def table_csv(reports: list[MemoryReport]) -> str:
    lines = ["spatial,layers,features,n_params,weights_mib,activations_mib"]
    for r in reports:
        spatial = "x".join(str(s) for s in r.spec.spatial)
        lines.append(
            f"{spatial},{r.spec.n_layers},{r.spec.features},{r.n_params},"
            f"{r.weight_mib:.6g},{r.activation_mib:.10g}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# scaling fit


@dataclass(frozen=True)
class ScalingFit:
    degree: int
    coefficient: float
    residual: float  # relative l2 residual of the winning monomial


def scaling_fit(resolutions, values, degrees=(1, 2, 3)) -> ScalingFit:
    """Least-squares single-monomial fit value ~ c * resolution^degree.

    Tries each candidate degree and keeps the smallest relative residual.
    Needs at least 4 points; constant or non-positive-size data is a
    FitError (no exponent is identifiable).
    """
    x = np.asarray(resolutions, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise FitError(f"mismatched series: {x.shape} vs {y.shape}")
    if x.size < 4:
        raise FitError(f"need at least 4 points, got {x.size}")
    if (x <= 0).any():
        raise FitError("resolutions must be positive")
    if y.max() == y.min():
        raise FitError("constant series has no identifiable scaling degree")
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        raise FitError("all-zero series has no identifiable scaling degree")
    best = None
    for d in degrees:
        basis = x ** d
        c = float((basis * y).sum() / (basis * basis).sum())
        residual = float(np.linalg.norm(y - c * basis) / y_norm)
        if best is None or residual < best.residual:
            best = ScalingFit(degree=int(d), coefficient=c, residual=residual)
    return best


# ---------------------------------------------------------------------------
# measured activations


class ActivationLedger:
    """Byte counter for saved activations.

    save() takes an ndarray or a byte count. Nothing modeled here is ever
    released before the (hypothetical) backward pass, so peak equals total;
    both names exist because benchmark records report peaks.
    """

    def __init__(self):
        self.total_bytes = 0
        self.n_saved = 0

    def save(self, value) -> None:
        nbytes = value.nbytes if isinstance(value, np.ndarray) else int(value)
        if nbytes < 0:
            raise UnsupportedConfigError(f"negative byte count {nbytes}")
        self.total_bytes += nbytes
        self.n_saved += 1

    @property
    def peak_bytes(self) -> int:
        return self.total_bytes

    def reset(self) -> None:
        self.total_bytes = 0
        self.n_saved = 0


def linear_stack_forward(x: np.ndarray, weights, biases,
                         ledger: ActivationLedger | None = None) -> np.ndarray:
    """Run the modeled stack for real: n_layers linears, saving each input.

    With x of shape [batch * prod(spatial), features] and square weights,
    the ledger total lands exactly on activation_bytes of the matching
    LayerStackSpec."""
    out = x
    for w, b in zip(weights, biases):
        if ledger is not None:
            ledger.save(out)
        out = dense.linear_forward(out, w, b)
    return out
