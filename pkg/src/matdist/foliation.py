"""Leaf tracing, grade fields over grids, and stratum labelling.

The base distribution is known only through null spaces, so the "vector
field" fed to the integrator projects a reference direction onto the
current base basis and normalizes; this yields a well-defined unit-speed
curve inside the leaf without choosing a global frame (none exists on a
sphere).
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distribution import DEFAULT_SAMPLER, GERM_CLOUD, GERM_RADIUS, base_basis_at, material_fibre
from .errors import DomainError, MatdistError
from .numkit import DEFAULT_TOL, rk4_step

__all__ = [
    "GridSpec",
    "GradeField",
    "LeafTrace",
    "RegularityReport",
    "grade_map",
    "leaf_trace",
    "regularity_report",
    "grade_field_csv",
    "grade_field_json_dict",
    "leaf_trace_csv",
    "leaf_trace_json_dict",
    "grade_slice_svg",
    "leaf_trace_svg",
    "GRADE_COLORS",
]

GRADE_COLORS = {0: "black", 1: "blue", 2: "orange", 3: "green", -1: "gray"}

_MAX_GRID_NODES = 10**6
_ALIGN_EPS = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned box with a per-axis node count."""

    lo: tuple
    hi: tuple
    shape: tuple

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3 or len(self.shape) != 3:
            raise ValueError("grid lo/hi/shape must have three entries")
        if any(int(n) < 1 for n in self.shape):
            raise ValueError("grid shape entries must be positive")
        if int(np.prod([int(n) for n in self.shape])) > _MAX_GRID_NODES:
            raise ValueError(f"grid exceeds {_MAX_GRID_NODES} nodes")

    def axes(self):
        return [
            np.linspace(self.lo[i], self.hi[i], int(self.shape[i]))
            if self.shape[i] > 1
            else np.array([0.5 * (self.lo[i] + self.hi[i])])
            for i in range(3)
        ]

    def points(self):
        ax = self.axes()
        nx, ny, nz = (len(a) for a in ax)
        pts = np.empty((nx, ny, nz, 3))
        pts[..., 0] = ax[0][:, None, None]
        pts[..., 1] = ax[1][None, :, None]
        pts[..., 2] = ax[2][None, None, :]
        return pts

    def cell_volume(self):
        ax = self.axes()
        spans = [a[1] - a[0] if len(a) > 1 else 1.0 for a in ax]
        return float(np.prod(spans))


@dataclass
class GradeField:
    """Grades, rank gaps and stratum labels on a grid.

    Grade -1 marks nodes without a computed grade (outside the model
    domain, or failed); they are excluded from strata but keep the output
    rectangular for plotting.
    """

    grid: GridSpec
    mode: str
    grade: np.ndarray  # (nx,ny,nz) int
    rank_gap: np.ndarray  # (nx,ny,nz) float
    stratum: np.ndarray  # (nx,ny,nz) int, -1 for unknown
    validated: np.ndarray  # (nx,ny,nz) bool
    errors: list = field(default_factory=list)  # (index triple, message)

    @property
    def known(self):
        return self.grade >= 0

    def stratum_count(self):
        return int(self.stratum.max()) + 1 if self.stratum.size else 0

    def tolerance_sensitive(self, threshold=10.0):
        """Indices of known nodes whose rank decision was marginal."""
        mask = self.known & (self.rank_gap < threshold)
        return [tuple(int(v) for v in idx) for idx in np.argwhere(mask)]


@dataclass
class RegularityReport:
    """Summary of a grade field: regular iff one grade covers all known nodes."""

    regular: bool
    grades: list
    node_counts: dict
    volumes: dict
    stratum_count: int
    unknown_nodes: int


@dataclass
class LeafTrace:
    """Polyline traced inside one leaf of the body-material foliation."""

    seed: np.ndarray
    direction_hint: np.ndarray
    step: float
    mode: str
    points: np.ndarray  # (n,3)
    grades: np.ndarray  # (n,)
    directions: np.ndarray  # (n-1,3) unit step directions
    leaf_residuals: np.ndarray  # (n,), NaN when no leaf predicate
    stop_reason: str  # "completed" | "domain_boundary" | "grade_lost" | "alignment_lost"
    tie_breaks: list  # step indices where the alignment tie-break fired

    @property
    def n_points(self):
        return len(self.points)


class _GradeLost(MatdistError):
    pass


def _normalize(v):
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("zero direction")
    return v / n


def _lex_oriented(column):
    """Fix the sign of a basis column by its first significant component."""
    for value in column:
        if abs(value) > 1e-12:
            return column if value > 0 else -column
    return column


def _project_direction(basis, reference):
    """Unit vector in span(basis) closest in angle to ``reference``.

    Returns ``(direction, ambiguous)``; when the projection nearly
    vanishes every span direction is equally close, and the
    lexicographically oriented first basis column is the deterministic
    tie-break.
    """
    p = basis @ (basis.T @ reference)
    n = float(np.linalg.norm(p))
    if n <= _ALIGN_EPS:
        return _lex_oriented(basis[:, 0].copy()), True
    return p / n, False


def leaf_trace(model, seed, dir_select, steps, h, sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL,
               mode="pointwise"):
    """Trace a leaf of the body-material foliation by projected flow.

    At each step the previous direction is projected onto the current base
    basis and normalized; the step itself is a classical Runge-Kutta update
    of that projected field.  The trace stops early at the domain boundary
    or when the grade drops below one.
    """
    if h > 0.05:
        raise ValueError("step size h must be at most 0.05")
    seed = np.asarray(seed, dtype=float)
    if not model.in_domain(seed):
        raise DomainError(f"seed {seed.tolist()} is outside the model domain")

    basis, grade, _ = base_basis_at(model, seed, sampler, tol)
    if grade < 1:
        raise ValueError(f"grade at the seed is {grade}; need at least 1 to trace")

    points = [seed]
    grades = [grade]
    directions = []
    tie_breaks = []
    stop_reason = "completed"
    direction = _normalize(dir_select)

    current = seed
    current_basis = basis
    for step_index in range(int(steps)):
        direction, ambiguous = _project_direction(current_basis, direction)
        if ambiguous:
            tie_breaks.append(step_index)

        def flow(y, _d=direction):
            b, g, _ = base_basis_at(model, y, sampler, tol)
            if g < 1:
                raise _GradeLost()
            q = b @ (b.T @ _d)
            n = float(np.linalg.norm(q))
            if n <= _ALIGN_EPS:
                raise _GradeLost("alignment")
            return q / n

        try:
            nxt = rk4_step(flow, current, h)
        except _GradeLost as stop:
            stop_reason = "alignment_lost" if stop.args else "grade_lost"
            break
        except DomainError:
            stop_reason = "domain_boundary"
            break
        if not model.in_domain(nxt):
            stop_reason = "domain_boundary"
            break
        directions.append(direction)
        current = nxt
        points.append(nxt)
        current_basis, grade, _ = base_basis_at(model, nxt, sampler, tol)
        if grade < 1:
            grades.append(grade)
            stop_reason = "grade_lost"
            break
        grades.append(grade)
        direction = _normalize(nxt - points[-2])

    points = np.asarray(points)
    residuals = np.full(len(points), np.nan)
    if model.leaf is not None:
        residuals = np.array([model.leaf.residual(seed, p) for p in points])
    return LeafTrace(
        seed=seed,
        direction_hint=np.asarray(dir_select, dtype=float),
        step=float(h),
        mode=mode,
        points=points,
        grades=np.asarray(grades, dtype=int),
        directions=np.asarray(directions) if directions else np.zeros((0, 3)),
        leaf_residuals=residuals,
        stop_reason=stop_reason,
        tie_breaks=tie_breaks,
    )


# ---------------------------------------------------------------------------
# grade maps


def _grade_node(args):
    model, point, sampler, tol, mode, germ_radius, germ_cloud = args
    try:
        result = material_fibre(model, point, sampler=sampler, tol=tol, mode=mode,
                                germ_radius=germ_radius, germ_cloud=germ_cloud)
        return result.grade, result.rank_gap, result.validated, None
    except DomainError:
        return -1, np.nan, True, None
    except MatdistError as exc:
        return -1, np.nan, True, str(exc)


def grade_map(model, grid, mode="pointwise", sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL,
              threads=1, germ_radius=GERM_RADIUS, germ_cloud=GERM_CLOUD):
    """Grade of uniformity at every grid node, with stratum labels.

    Nodes outside the model domain are skipped (grade -1); per-node solver
    failures are recorded in ``errors`` and marked the same way.  Results
    do not depend on ``threads``: every node draws its own generator state
    from the base seed and the node coordinates.
    """
    if not isinstance(grid, GridSpec):
        grid = GridSpec(*grid)
    pts = grid.points()
    shape = pts.shape[:3]
    flat = pts.reshape(-1, 3)

    jobs = [(model, p, sampler, tol, mode, germ_radius, germ_cloud) for p in flat]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            outputs = list(pool.map(_grade_node, jobs,
                                    chunksize=max(1, len(jobs) // (8 * int(threads)))))
    else:
        outputs = [_grade_node(j) for j in jobs]

    grade = np.array([o[0] for o in outputs], dtype=int).reshape(shape)
    gap = np.array([o[1] for o in outputs], dtype=float).reshape(shape)
    validated = np.array([o[2] for o in outputs], dtype=bool).reshape(shape)
    errors = []
    for i, o in enumerate(outputs):
        if o[3] is not None:
            errors.append((tuple(int(v) for v in np.unravel_index(i, shape)), o[3]))

    stratum = _label_strata(grade)
    return GradeField(grid=grid, mode=mode, grade=grade, rank_gap=gap,
                      stratum=stratum, validated=validated, errors=errors)


def _label_strata(grade):
    """6-connected flood fill over nodes of equal grade."""
    shape = grade.shape
    labels = np.full(shape, -1, dtype=int)
    next_label = 0
    offsets = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
    for start in np.argwhere(grade >= 0):
        start = tuple(start)
        if labels[start] != -1:
            continue
        value = grade[start]
        stack = [start]
        labels[start] = next_label
        while stack:
            node = stack.pop()
            for off in offsets:
                nb = (node[0] + off[0], node[1] + off[1], node[2] + off[2])
                if any(c < 0 or c >= shape[i] for i, c in enumerate(nb)):
                    continue
                if labels[nb] == -1 and grade[nb] == value:
                    labels[nb] = next_label
                    stack.append(nb)
        next_label += 1
    return labels


def regularity_report(field):
    """Is the computed foliation regular, and how is volume split by grade?"""
    known = field.grade[field.known]
    values = sorted(int(g) for g in np.unique(known)) if known.size else []
    counts = {g: int(np.sum(known == g)) for g in values}
    cell = field.grid.cell_volume()
    return RegularityReport(
        regular=len(values) == 1,
        grades=values,
        node_counts=counts,
        volumes={g: counts[g] * cell for g in values},
        stratum_count=field.stratum_count(),
        unknown_nodes=int(np.sum(~field.known)),
    )


# ---------------------------------------------------------------------------
# serialization

_FLOAT_FMT = "%.17g"


def _fmt(value):
    if isinstance(value, float) and np.isnan(value):
        return "nan"
    return _FLOAT_FMT % value


def grade_field_csv(field, fh):
    """Write ``x,y,z,grade,rank_gap,stratum`` rows."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["x", "y", "z", "grade", "rank_gap", "stratum"])
    pts = field.grid.points()
    nx, ny, nz = field.grade.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x, y, z = pts[i, j, k]
                writer.writerow([
                    _fmt(float(x)), _fmt(float(y)), _fmt(float(z)),
                    int(field.grade[i, j, k]),
                    _fmt(float(field.rank_gap[i, j, k])),
                    int(field.stratum[i, j, k]),
                ])


def grade_field_json_dict(field):
    report = regularity_report(field)
    return {
        "grid": {
            "lo": [float(v) for v in field.grid.lo],
            "hi": [float(v) for v in field.grid.hi],
            "shape": [int(v) for v in field.grid.shape],
        },
        "mode": field.mode,
        "grade": field.grade.tolist(),
        "rank_gap": np.where(np.isfinite(field.rank_gap), np.minimum(field.rank_gap, 1e18), -1.0).tolist(),
        "stratum": field.stratum.tolist(),
        "regular": report.regular,
        "grades_present": report.grades,
        "node_counts": {str(k): v for k, v in report.node_counts.items()},
        "stratum_count": report.stratum_count,
        "unknown_nodes": report.unknown_nodes,
        "tolerance_sensitive": [list(idx) for idx in field.tolerance_sensitive()],
        "n_errors": len(field.errors),
    }


def leaf_trace_csv(trace, fh):
    """Write ``step,x,y,z,grade`` rows."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["step", "x", "y", "z", "grade"])
    for n, (p, g) in enumerate(zip(trace.points, trace.grades)):
        writer.writerow([n, _fmt(float(p[0])), _fmt(float(p[1])), _fmt(float(p[2])), int(g)])


def leaf_trace_json_dict(trace):
    residuals = [None if np.isnan(r) else float(r) for r in trace.leaf_residuals]
    return {
        "seed": [float(v) for v in trace.seed],
        "direction_hint": [float(v) for v in trace.direction_hint],
        "step": float(trace.step),
        "mode": trace.mode,
        "stop_reason": trace.stop_reason,
        "n_points": int(trace.n_points),
        "points": [[float(v) for v in p] for p in trace.points],
        "grades": [int(g) for g in trace.grades],
        "leaf_residuals": residuals,
        "tie_breaks": [int(i) for i in trace.tie_breaks],
    }


# ---------------------------------------------------------------------------
# SVG emitters (fixed 720x720 viewBox, fixed grade colors)

_SVG_SIZE = 720.0


def _svg_header():
    return (
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {_SVG_SIZE:g} {_SVG_SIZE:g}">\n'
        f'<rect width="{_SVG_SIZE:g}" height="{_SVG_SIZE:g}" fill="white"/>\n'
    )


def grade_slice_svg(field, axis, value):
    """Orthographic slice of a grade field perpendicular to ``axis`` (0-2).

    The grid plane nearest to ``value`` is drawn as colored cells.
    """
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    coords = field.grid.axes()[axis]
    index = int(np.argmin(np.abs(coords - value)))
    slicer = [slice(None)] * 3
    slicer[axis] = index
    plane = field.grade[tuple(slicer)]
    u_axis, v_axis = [a for a in (0, 1, 2) if a != axis]

    nu, nv = plane.shape
    cw, ch = _SVG_SIZE / nu, _SVG_SIZE / nv
    parts = [_svg_header()]
    parts.append(f"<!-- slice axis={axis} at {coords[index]!r}; "
                 f"horizontal=axis{u_axis} vertical=axis{v_axis} -->\n")
    for i in range(nu):
        for j in range(nv):
            color = GRADE_COLORS.get(int(plane[i, j]), "gray")
            x = i * cw
            y = _SVG_SIZE - (j + 1) * ch  # second in-plane axis increases upward
            parts.append(
                f'<rect x="{x:.3f}" y="{y:.3f}" width="{cw:.3f}" height="{ch:.3f}" '
                f'fill="{color}"/>\n'
            )
    parts.append("</svg>\n")
    return "".join(parts)


def leaf_trace_svg(trace, drop_axis=2):
    """Orthographic projection of a trace onto a coordinate plane.

    Consecutive same-grade runs become one polyline in that grade's color.
    """
    drop_axis = int(drop_axis)
    keep = [a for a in (0, 1, 2) if a != drop_axis]
    pts = trace.points[:, keep]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    margin = 36.0
    scale = (_SVG_SIZE - 2 * margin) / span

    def map_xy(p):
        x = margin + (p[0] - lo[0]) * scale
        y = _SVG_SIZE - margin - (p[1] - lo[1]) * scale
        return x, y

    parts = [_svg_header()]
    start = 0
    for i in range(1, len(pts)):
        boundary = trace.grades[i] != trace.grades[start]
        if boundary or i == len(pts) - 1:
            end = i if boundary else i + 1
            seg = pts[start:end]
            if len(seg) >= 2:
                color = GRADE_COLORS.get(int(trace.grades[start]), "gray")
                coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in map(map_xy, seg))
                parts.append(
                    f'<polyline points="{coords}" fill="none" stroke="{color}" '
                    f'stroke-width="2"/>\n'
                )
            start = end - 1 if boundary else end
    sx, sy = map_xy(pts[0])
    parts.append(f'<circle cx="{sx:.3f}" cy="{sy:.3f}" r="4" fill="red"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)
