"""Neural packets: a loss function normalized to unit L2 mass on a
low-dimensional grid, and the statistics of the pixel operator (multiply by
x_i) and attack operator (d/dx_i) acting on it.

Integrals use the tensor-product trapezoid rule on uniform grids; derivatives
use central differences with one-sided differences at the edges.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import ComputationRecord, scalar_mul, softmax_cross_entropy
from .tensor.ops import cross_entropy_per_sample
from .tensor.rng import rng_stream

MIN_NODES = 64
BOUNDARY_DECAY = 1e-3
NORMALIZATION_TOL = 1e-6


class PacketError(ValueError):
    pass


class QuadratureError(RuntimeError):
    """Internal inconsistency, e.g. a clearly negative variance."""


class BoundaryDecayWarning(UserWarning):
    pass


# grids and quadrature -------------------------------------------------------

def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


def tukey_window(n: int, taper: float) -> np.ndarray:
    """1 in the middle, sin^2 ramps over ``taper / 2`` of the axis at each
    end, exactly 0 at both end nodes."""
    if not 0.0 < taper <= 1.0:
        raise PacketError("taper fraction must lie in (0, 1]")
    t = np.linspace(0.0, 1.0, n)
    w = np.ones(n)
    ramp = taper / 2
    lo, hi = t < ramp, t > 1.0 - ramp
    w[lo] = np.sin(np.pi * t[lo] / taper) ** 2
    w[hi] = np.sin(np.pi * (1.0 - t[hi]) / taper) ** 2
    return w


@dataclass
class PacketGrid:
    """psi sampled on a uniform tensor-product grid.

    ``psi[i0, i1, ...]`` is the value at ``(axes[0][i0], axes[1][i1], ...)``.
    """

    axes: list[np.ndarray]
    psi: np.ndarray
    beta: float
    label: int | None = None
    window_taper: float | None = None
    boundary_ratio: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return len(self.axes)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def domain(self) -> list[tuple[float, float]]:
        return [(float(a[0]), float(a[-1])) for a in self.axes]

    def weights(self) -> np.ndarray:
        w = np.ones(())
        for a, h in zip(self.axes, self.h):
            w = np.multiply.outer(w, trapezoid_weights(len(a), h))
        return w

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights() * values))

    def coordinate(self, i: int) -> np.ndarray:
        shape = [1] * self.dimension
        shape[i] = -1
        return self.axes[i].reshape(shape)

    def derivative(self, i: int, values: np.ndarray | None = None) -> np.ndarray:
        values = self.psi if values is None else values
        return np.gradient(values, self.h[i], axis=i, edge_order=1)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def make_axes(domain: Sequence[tuple[float, float]], nodes_per_axis: int | Sequence[int]) -> list[np.ndarray]:
    if isinstance(nodes_per_axis, (int, np.integer)):
        nodes_per_axis = [int(nodes_per_axis)] * len(domain)
    if not 1 <= len(domain) <= 3:
        raise PacketError("packets are restricted to dimension 1, 2 or 3")
    axes = []
    for (a, b), n in zip(domain, nodes_per_axis):
        if not b > a:
            raise PacketError(f"empty interval [{a}, {b}]")
        axes.append(np.linspace(a, b, n))
    return axes


def packet_from_values(axes: list[np.ndarray], loss_values: np.ndarray, label: int | None = None,
                       window_taper: float | None = None, warn: bool = True) -> PacketGrid:
    """Normalize nonnegative grid values ``l`` into ``psi = l / sqrt(beta)``.

    With ``window_taper`` set, ``l`` is first multiplied by a separable Tukey
    window so that it vanishes on the boundary of the domain.
    """
    values = np.asarray(loss_values, dtype=np.float64).reshape([len(a) for a in axes])
    if (values < 0).any() or not np.isfinite(values).all():
        raise PacketError("loss values must be finite and nonnegative")
    if window_taper is not None:
        win = np.ones(())
        for a in axes:
            win = np.multiply.outer(win, tukey_window(len(a), window_taper))
        values = values * win
    grid = PacketGrid(axes, values, 1.0, label, window_taper)
    beta = grid.integrate(values ** 2)
    if beta == 0.0:
        raise PacketError("loss is identically zero on the grid (beta = 0)")
    grid.psi = values / math.sqrt(beta)
    grid.beta = beta
    grid.boundary_ratio = boundary_ratio(grid.psi)
    if warn and grid.boundary_ratio > BOUNDARY_DECAY:
        warnings.warn(f"packet does not decay at the domain boundary: boundary/interior psi^2 ratio "
                      f"{grid.boundary_ratio:.3g} > {BOUNDARY_DECAY:g}; enlarge the domain or use a window",
                      BoundaryDecayWarning, stacklevel=2)
    return grid


def boundary_ratio(psi: np.ndarray) -> float:
    """max psi^2 on boundary nodes over max psi^2 on interior nodes."""
    sq = psi ** 2
    interior = sq[tuple(slice(1, -1) for _ in range(sq.ndim))]
    mask = np.ones(sq.shape, dtype=bool)
    mask[tuple(slice(1, -1) for _ in range(sq.ndim))] = False
    peak = interior.max() if interior.size else 0.0
    edge = sq[mask].max()
    if peak == 0.0:
        return math.inf if edge > 0 else 0.0
    return float(edge / peak)


def packet_from_function(fn: Callable[[np.ndarray], np.ndarray], domain, nodes_per_axis,
                         label: int | None = None, window_taper: float | None = None,
                         warn: bool = True) -> PacketGrid:
    """Evaluate ``fn`` on all grid points (rows of an ``(n, d)`` array)."""
    axes = make_axes(domain, nodes_per_axis)
    grid_points = PacketGrid(axes, np.zeros(0), 1.0).points()
    return packet_from_values(axes, fn(grid_points), label, window_taper, warn)


def model_loss(model, label: int, batch_size: int = 4096) -> Callable[[np.ndarray], np.ndarray]:
    """Per-point cross-entropy ``l(f(X), label)`` of a classifier."""
    def fn(points: np.ndarray) -> np.ndarray:
        logits = model.predict(points, batch_size)
        return cross_entropy_per_sample(logits, np.full(len(points), label, dtype=np.int64))
    return fn


def build_packet(model, label: int, domain, nodes_per_axis, window_taper: float | None = None,
                 warn: bool = True) -> PacketGrid:
    """Neural packet of ``model`` for class ``label`` on a box ``domain``."""
    counts = [nodes_per_axis] * len(domain) if np.isscalar(nodes_per_axis) else list(nodes_per_axis)
    if min(counts) < MIN_NODES:
        raise PacketError(f"need at least {MIN_NODES} nodes per axis")
    if len(model.spec.input_shape) != 1 or model.spec.input_shape[0] != len(domain):
        raise PacketError(f"model input {model.spec.input_shape} does not match a "
                          f"{len(domain)}-d domain")
    return packet_from_function(model_loss(model, label), domain, counts, label, window_taper, warn)


# operator statistics --------------------------------------------------------

@dataclass
class OperatorStats:
    axis: int
    mean_x: float
    mean_p: float
    sigma_x: float
    sigma_p: float
    product: float
    tol: float
    passed: bool
    approximate: bool = False

    def row(self) -> dict:
        return {"axis": self.axis, "mean_x": self.mean_x, "mean_p": self.mean_p,
                "sigma_x": self.sigma_x, "sigma_p": self.sigma_p, "product": self.product,
                "pass": self.passed}


def _variance(second: float, first: float, what: str) -> float:
    var = second - first * first
    if var < -1e-12:
        raise QuadratureError(f"negative {what} variance {var:.3g}")
    return max(var, 0.0)


def expectation_x(packet: PacketGrid, i: int) -> float:
    return packet.integrate(packet.psi ** 2 * packet.coordinate(i))


def expectation_p(packet: PacketGrid, i: int) -> float:
    return packet.integrate(packet.psi * packet.derivative(i))


def sigma_x(packet: PacketGrid, i: int) -> float:
    second = packet.integrate(packet.psi ** 2 * packet.coordinate(i) ** 2)
    return math.sqrt(_variance(second, expectation_x(packet, i), "position"))


def sigma_p(packet: PacketGrid, i: int) -> float:
    """Uses <p^2> = integral of (d psi / dx_i)^2, the squared norm of p psi."""
    second = packet.integrate(packet.derivative(i) ** 2)
    return math.sqrt(_variance(second, expectation_p(packet, i), "attack"))


def grid_tolerance(h: float) -> float:
    return max(1e-3, 10.0 * h * h)


def uncertainty_product(packet: PacketGrid, i: int) -> OperatorStats:
    sx, sp = sigma_x(packet, i), sigma_p(packet, i)
    tol = grid_tolerance(packet.h[i])
    prod = sx * sp
    return OperatorStats(i, expectation_x(packet, i), expectation_p(packet, i), sx, sp, prod, tol,
                         prod >= 0.5 - tol)


def all_stats(packet: PacketGrid) -> list[OperatorStats]:
    return [uncertainty_product(packet, i) for i in range(packet.dimension)]


@dataclass
class CommutatorReport:
    max_residual: float
    bound: float
    passed: bool


def commutator_check(packet: PacketGrid) -> CommutatorReport:
    """Max over axes and interior nodes of ``|d(x psi) - x d(psi) - psi|``.

    The central-difference residual equals ``h^2/2`` times the discrete second
    derivative, so the bound ``10 h^2 max|psi''|`` (plus a rounding allowance)
    holds for smooth packets.
    """
    worst, bound = 0.0, 0.0
    psi = packet.psi
    eps = np.finfo(np.float64).eps
    for i in range(packet.dimension):
        x = packet.coordinate(i)
        h = packet.h[i]
        comm = packet.derivative(i, x * psi) - x * packet.derivative(i)
        inner = [slice(None)] * psi.ndim
        inner[i] = slice(1, -1)
        inner = tuple(inner)
        worst = max(worst, float(np.abs(comm[inner] - psi[inner]).max()))
        second = np.diff(psi, n=2, axis=i) / (h * h)
        rounding = 64 * eps * (np.abs(x * psi).max() + np.abs(psi).max()) / h
        bound = max(bound, 10.0 * h * h * float(np.abs(second).max()) + rounding)
    return CommutatorReport(worst, bound, worst <= bound)


# attack-operator bridge -----------------------------------------------------

@dataclass
class Alignment:
    """Cosine between grad l and grad psi at one point, and ``|grad l| / |grad psi|``
    (the factor turning a budget on psi into one on l).  Both are None when
    the gradient vanishes."""

    cosine: float | None
    eps_ratio: float | None
    grad_norm: float

    @property
    def defined(self) -> bool:
        return self.cosine is not None


def packet_gradient_alignment(model, x0: np.ndarray, label, beta: float) -> list[Alignment]:
    """Compare ``grad_X l(f(X), Y)`` with ``grad_X psi`` at each row of ``x0``."""
    if beta <= 0:
        raise PacketError("beta must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (len(x0),)).copy()
    n = float(len(x0))

    def grad(scale: float) -> np.ndarray:
        with ComputationRecord() as rec:
            leaf = rec.leaf(x0)
            total = scalar_mul(softmax_cross_entropy(model.forward(leaf), labels), n * scale)
            return rec.backward(total)[leaf].reshape(len(x0), -1)

    gl, gp = grad(1.0), grad(1.0 / math.sqrt(beta))
    out = []
    for a, b in zip(gl, gp):
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            out.append(Alignment(None, None, na))
        else:
            out.append(Alignment(float(a @ b) / (na * nb), na / nb, na))
    return out


# Monte-Carlo estimate -------------------------------------------------------

MIN_MC_SAMPLES = 1000


def mc_sigma_estimate(model, label: int, inputs: np.ndarray, axis: int, samples: int,
                      seed: int) -> OperatorStats:
    """Approximate operator statistics with the given points as sampling measure.

    Points are resampled with replacement; ``psi^2`` is proportional to
    ``l^2`` under that measure and ``d psi / dx`` to the autodiff gradient of
    ``l``.  The result depends on the measure and carries no pass/fail
    verdict.
    """
    if samples < MIN_MC_SAMPLES:
        raise PacketError(f"need at least {MIN_MC_SAMPLES} samples")
    inputs = np.asarray(inputs, dtype=np.float64)
    stream = rng_stream(seed, 40)
    idx = np.array([stream.below(len(inputs)) for _ in range(samples)])
    x = inputs[idx]
    labels = np.full(samples, label, dtype=np.int64)
    with ComputationRecord() as rec:
        leaf = rec.leaf(x)
        logits = model.forward(leaf)
        total = scalar_mul(softmax_cross_entropy(logits, labels), float(samples))
        g = rec.backward(total)[leaf].reshape(samples, -1)[:, axis]
    ell = cross_entropy_per_sample(logits.data, labels)
    coord = x.reshape(samples, -1)[:, axis]
    mass = float(np.sum(ell ** 2))
    if mass == 0.0:
        raise PacketError("loss vanishes on every sample")
    mx = float(np.sum(ell ** 2 * coord)) / mass
    mp = float(np.sum(ell * g)) / mass
    sx = math.sqrt(_variance(float(np.sum(ell ** 2 * coord ** 2)) / mass, mx, "position"))
    sp = math.sqrt(_variance(float(np.sum(g ** 2)) / mass, mp, "attack"))
    return OperatorStats(axis, mx, mp, sx, sp, sx * sp, math.nan, False, approximate=True)


# persistence ----------------------------------------------------------------

PACKET_FORMAT = "robustlab-packet"


def save_packet(path, packet: PacketGrid) -> None:
    """``<path>.json`` header plus ``<path>.bin`` little-endian f8 psi (C order)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": PACKET_FORMAT,
        "version": 1,
        "domain": [list(d) for d in packet.domain],
        "nodes": [len(a) for a in packet.axes],
        "h": list(packet.h),
        "beta": packet.beta,
        "label": packet.label,
        "window_taper": packet.window_taper,
        "boundary_ratio": packet.boundary_ratio,
        "meta": packet.meta,
    }
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(packet.psi, dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_packet(path) -> PacketGrid:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("format") != PACKET_FORMAT:
        raise PacketError(f"{path}: not a packet dump")
    axes = make_axes([tuple(d) for d in header["domain"]], header["nodes"])
    psi = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    return PacketGrid(axes, psi.reshape(header["nodes"]), header["beta"], header["label"],
                      header["window_taper"], header["boundary_ratio"], header["meta"])


def stats_table(stats: Sequence[OperatorStats]) -> list[dict]:
    return [s.row() for s in stats]

