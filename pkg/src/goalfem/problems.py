"""Model problem definitions.

Two manufactured heat-equation cases on the unit square (a separable
polynomial and a rotating hill) and a two-component reaction-diffusion
system (temperature + species) in a cooled channel.  Problems are
immutable bundles of coefficient callbacks, boundary classification, and
coarse-mesh factories; all assembly lives in the solver.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, ClassVar, Mapping, Optional, Tuple

import numpy as np

from .mesh import SpatialMesh

_POLE_TOL = 1e-12
_GEOM_TOL = 1e-9


class ProblemError(RuntimeError):
    """Problem data evaluated outside its admissible range."""


# ---------------------------------------------------------------------------
# reaction kinetics


@dataclasses.dataclass(frozen=True)
class CombustionParams:
    """Arrhenius-law parameters for the two-component system."""

    lewis: float = 1.0
    alpha: float = 0.8
    beta: float = 10.0
    kappa: float = 0.1


def _arrhenius_factor(theta, p: CombustionParams):
    theta = np.asarray(theta, dtype=float)
    den = 1.0 + p.alpha * (theta - 1.0)
    if np.any(np.abs(den) < _POLE_TOL):
        raise ProblemError(
            "reaction-rate pole: 1 + alpha*(theta - 1) vanished")
    return np.exp(p.beta * (theta - 1.0) / den), den


def omega(theta, Y, p: CombustionParams):
    """Reaction rate  beta^2/(2 Le) * Y * exp(beta(theta-1)/(1+alpha(theta-1)))."""
    E, _ = _arrhenius_factor(theta, p)
    return p.beta**2 / (2.0 * p.lewis) * np.asarray(Y, dtype=float) * E


def omega_derivatives(theta, Y, p: CombustionParams):
    """Partial derivatives (d omega/d theta, d omega/d Y).

    d/dY is omega/Y extended continuously across Y = 0.
    """
    E, den = _arrhenius_factor(theta, p)
    dY = p.beta**2 / (2.0 * p.lewis) * E
    dtheta = dY * np.asarray(Y, dtype=float) * p.beta / den**2
    return dtheta, dY


# ---------------------------------------------------------------------------
# scalar heat-equation cases


@dataclasses.dataclass(frozen=True)
class HeatProblem:
    """du/dt - Laplace(u) = f on the unit square with Dirichlet walls."""

    name: str
    time_final: float
    f: Callable[..., np.ndarray]          # f(x, y, t)
    initial: Callable[..., np.ndarray]    # initial(x, y)
    exact: Optional[Callable[..., np.ndarray]] = None  # exact(x, y, t)
    inhomogeneous: bool = False
    coarse_dims: Tuple[int, int] = (4, 4)
    dirichlet: Mapping[str, tuple] = dataclasses.field(
        default_factory=lambda: {"boundary": (0,)})

    kind: ClassVar[str] = "heat"
    ncomp: ClassVar[int] = 1
    boundary_tag: ClassVar[None] = None      # every wall gets the default tag
    robin: ClassVar[Mapping[str, tuple]] = {}
    diffusion: ClassVar[Tuple[float, ...]] = (1.0,)

    def coarse_mesh(self) -> SpatialMesh:
        nx, ny = self.coarse_dims
        return SpatialMesh.structured(nx, ny, extent=(1.0, 1.0))

    def initial_mesh(self, level: int = 0) -> SpatialMesh:
        # one setup refinement so the mesh is patch-structured
        mesh = self.coarse_mesh()
        for _ in range(1 + level):
            mesh = mesh.refine_all()
        return mesh

    def dirichlet_value(self, comp, x, y, t):
        if self.inhomogeneous:
            return self.exact(x, y, t)
        return np.zeros_like(np.asarray(x, dtype=float))

    def initial_fn(self, comp):
        return self.initial


def heat_polynomial_case() -> HeatProblem:
    """Separable polynomial solution u = -(x^2-x)(y^2-y) t / 4.

    Homogeneous Dirichlet walls, zero initial value; the space-time
    average of u over the unit square and unit time span is -1/288.
    """

    def exact(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return -(x * x - x) * (y * y - y) * t / 4.0

    def f(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        px = x * x - x
        py = y * y - y
        return -px * py / 4.0 + px * t / 2.0 + py * t / 2.0

    def initial(x, y):
        return np.zeros_like(np.asarray(x, dtype=float))

    return HeatProblem(
        name="heat_polynomial",
        time_final=1.0,
        f=f,
        initial=initial,
        exact=exact,
        inhomogeneous=False,
    )


def heat_rotating_hill_case() -> HeatProblem:
    """Hill 1/(1+50 r^2) circling the unit square's center once per unit time.

    Dirichlet data is the trace of the exact solution; the initial value
    is its time-zero snapshot.
    """

    def center(t):
        ang = 2.0 * math.pi * t
        return 0.5 + 0.25 * np.cos(ang), 0.5 + 0.25 * np.sin(ang)

    def exact(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x0, y0 = center(t)
        r2 = (x - x0) ** 2 + (y - y0) ** 2
        return 1.0 / (1.0 + 50.0 * r2)

    def f(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ang = 2.0 * math.pi * t
        x0 = 0.5 + 0.25 * np.cos(ang)
        y0 = 0.5 + 0.25 * np.sin(ang)
        dx0 = -0.5 * math.pi * np.sin(ang)
        dy0 = 0.5 * math.pi * np.cos(ang)
        r2 = (x - x0) ** 2 + (y - y0) ** 2
        D = 1.0 + 50.0 * r2
        D2 = D * D
        # time derivative of the moving hill ...
        ft = 100.0 / D2 * ((x - x0) * dx0 + (y - y0) * dy0)
        # ... minus its Laplacian
        return ft + 200.0 / D2 - 20000.0 * r2 / (D2 * D)

    def initial(x, y):
        return exact(x, y, 0.0)

    return HeatProblem(
        name="heat_rotating_hill",
        time_final=1.0,
        f=f,
        initial=initial,
        exact=exact,
        inhomogeneous=True,
    )


# ---------------------------------------------------------------------------
# two-component combustion channel


@dataclasses.dataclass(frozen=True)
class CombustionProblem:
    """Temperature/species system in a channel with two cooled rods.

    Channel [0, L] x [0, H] minus rods [L/4, L/2] x [0, H/4] and
    [L/4, L/2] x [3H/4, H].  Component 0 is the temperature theta,
    component 1 the species Y; theta diffuses with unit coefficient,
    Y with 1/Le.  Inflow wall x=0 is Dirichlet (theta=1, Y=0), the rod
    walls carry a Robin cooling term for theta, all other walls are
    insulated.
    """

    params: CombustionParams = CombustionParams()
    length: float = 60.0
    height: float = 16.0
    time_final: float = 60.0
    front_position: float = 9.0
    coarse_dims: Tuple[int, int] = (32, 8)
    name: str = "combustion_channel"

    kind: ClassVar[str] = "combustion"
    ncomp: ClassVar[int] = 2
    dirichlet: ClassVar[Mapping[str, tuple]] = {"inflow": (0, 1)}

    @property
    def diffusion(self) -> Tuple[float, float]:
        return (1.0, 1.0 / self.params.lewis)

    @property
    def robin(self) -> Mapping[str, tuple]:
        # cooling acts on the temperature component only
        return {"rod": ((0, self.params.kappa),)}

    # -- geometry -----------------------------------------------------------

    def _rod_boxes(self):
        L, H = self.length, self.height
        return (
            (L / 4.0, L / 2.0, 0.0, H / 4.0),
            (L / 4.0, L / 2.0, 3.0 * H / 4.0, H),
        )

    def coarse_mesh(self) -> SpatialMesh:
        nx, ny = self.coarse_dims
        dx = self.length / nx
        dy = self.height / ny
        inactive = []
        for (x0, x1, y0, y1) in self._rod_boxes():
            ix0, ix1 = round(x0 / dx), round(x1 / dx)
            iy0, iy1 = round(y0 / dy), round(y1 / dy)
            if not (
                math.isclose(ix0 * dx, x0) and math.isclose(ix1 * dx, x1)
                and math.isclose(iy0 * dy, y0) and math.isclose(iy1 * dy, y1)
            ):
                raise ProblemError("rod boxes must align with the coarse grid")
            inactive.extend(
                (ix, iy)
                for ix in range(ix0, ix1)
                for iy in range(iy0, iy1)
            )
        return SpatialMesh.structured(
            nx, ny, extent=(self.length, self.height), inactive=inactive)

    def initial_mesh(self, level: int = 0) -> SpatialMesh:
        mesh = self.coarse_mesh()
        for _ in range(1 + level):
            mesh = mesh.refine_all()
        return mesh

    def domain_area(self) -> float:
        rods = sum((x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in self._rod_boxes())
        return self.length * self.height - rods

    def boundary_tag(self, x: float, y: float) -> str:
        if abs(x) < _GEOM_TOL:
            return "inflow"
        for (x0, x1, y0, y1) in self._rod_boxes():
            on_vertical = (
                (abs(x - x0) < _GEOM_TOL or abs(x - x1) < _GEOM_TOL)
                and y0 - _GEOM_TOL < y < y1 + _GEOM_TOL
            )
            inner_y = y0 if y0 > _GEOM_TOL else y1  # rod face inside the channel
            on_horizontal = (
                abs(y - inner_y) < _GEOM_TOL
                and x0 - _GEOM_TOL < x < x1 + _GEOM_TOL
            )
            if on_vertical or on_horizontal:
                return "rod"
        return "outer"

    # -- data ---------------------------------------------------------------

    def initial(self, comp: int, x, y):
        x = np.asarray(x, dtype=float)
        behind = x <= self.front_position
        decay = np.exp(
            np.minimum(self.front_position - x, 0.0)
            * (1.0 if comp == 0 else self.params.lewis))
        if comp == 0:
            return np.where(behind, 1.0, decay)
        return np.where(behind, 0.0, 1.0 - decay)

    def initial_fn(self, comp: int):
        return lambda x, y: self.initial(comp, x, y)

    def dirichlet_value(self, comp, x, y, t):
        value = 1.0 if comp == 0 else 0.0
        return np.full_like(np.asarray(x, dtype=float), value)

    def f(self, x, y, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def omega(self, theta, Y):
        return omega(theta, Y, self.params)

    def omega_derivatives(self, theta, Y):
        return omega_derivatives(theta, Y, self.params)


def combustion_channel_problem() -> CombustionProblem:
    """The cooled-channel flame problem with its standard parameters."""
    return CombustionProblem()
