"""Material-distribution fibres, grades of uniformity and symmetry algebras.

A germ candidate is a 12-vector ``(dX1, dX2, dX3, dP11, dP12, ..., dP33)``
pairing a base velocity ``dX`` with a fibre coefficient matrix ``dP`` (the
vertical part of the candidate field at a jet with gradient ``F`` is
``F @ dP``).  The admissibility system collects, over many sampled
gradients, the rows

    sum_m dX_m dW_c/dX_m + sum_{l,i} (sum_j dW_c/dF_ji F_jl) dP_li = 0

and the fibre is its null space.  "For every gradient" is realized by
sampling to rank saturation followed by validation on held-out samples:
the constraints are polynomial in F, so generic finite samples determine
the kernel, and validation catches unlucky draws.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FibreInstabilityError, NonFiniteError, SingularMatrixError
from .numkit import DEFAULT_TOL, rank_split
from .response import derivatives_at_samples, evaluate_at_samples

__all__ = [
    "SamplerConfig",
    "DEFAULT_SAMPLER",
    "FibreResult",
    "IsoCheck",
    "admissibility_block",
    "material_fibre",
    "base_basis_at",
    "symmetry_algebra",
    "is_material_isomorphism",
    "GERM_RADIUS",
    "GERM_CLOUD",
]

GERM_RADIUS = 1e-2
GERM_CLOUD = 20

_DEFAULT_ANCHORS = (
    ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    ((1.0, 0.0, 0.0), (0.0, 2.0, 0.0), (0.0, 0.0, 3.0)),
    ((2.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.5)),
)


@dataclass(frozen=True)
class SamplerConfig:
    """Gradient-sampling policy for the admissibility system.

    Random gradients are accepted only when ``|det| >= det_min`` and the
    2-norm condition number is at most ``cond_max``, which keeps the
    admissibility rows well scaled; the fixed anchors make the first rank
    estimate reproducible.
    """

    seed: int = 0
    k_init: int = 8
    k_max: int = 128
    det_min: float = 0.1
    cond_max: float = 50.0
    anchors: tuple = field(default=_DEFAULT_ANCHORS)

    def __post_init__(self):
        if self.k_init < 4:
            raise ValueError("k_init must be at least 4")
        if self.k_max < 2 * self.k_init:
            raise ValueError("k_max must be at least 2*k_init")

    def anchor_matrices(self):
        return np.asarray(self.anchors, dtype=float)


DEFAULT_SAMPLER = SamplerConfig()


@dataclass
class FibreResult:
    """Fibre of the material distribution at one body point."""

    point: np.ndarray
    mode: str
    fibre_basis: np.ndarray  # (n_unknowns, fibre_dim), orthonormal columns
    base_basis: np.ndarray  # (3, grade), orthonormal columns
    grade: int
    sym_basis: list  # of 3x3 arrays
    samples_used: int
    rank_gap: float
    validated: bool
    heldout_residual: float
    dim_history: list

    @property
    def fibre_dim(self):
        return self.fibre_basis.shape[1]

    @property
    def sym_dim(self):
        return len(self.sym_basis)

    def to_json_dict(self):
        return {
            "point": [float(v) for v in self.point],
            "grade": int(self.grade),
            "fibre_dim": int(self.fibre_dim),
            "sym_dim": int(self.sym_dim),
            "rank_gap": _finite_gap(self.rank_gap),
            "mode": self.mode,
            "base_basis": [[float(v) for v in self.base_basis[:, j]] for j in range(self.grade)],
            "validated": bool(self.validated),
        }


_GAP_CAP = 1e18


def _finite_gap(gap):
    # JSON has no infinity; saturate the diagnostic instead
    return float(min(gap, _GAP_CAP))


@dataclass
class IsoCheck:
    """Outcome of a material-isomorphism test between two points."""

    residual: float
    verdict: bool
    worst_gradient: np.ndarray
    samples_used: int


# ---------------------------------------------------------------------------
# sampling


def _point_rng(sampler, key_values, salt):
    data = np.ascontiguousarray(np.asarray(key_values, dtype=float))
    words = np.frombuffer(data.tobytes(), dtype=np.uint32)
    entropy = [int(sampler.seed) & 0xFFFFFFFF, int(salt)] + [int(w) for w in words]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sample_gradients(rng, count, sampler):
    """Draw accepted random gradients (finite |det| and condition bounds)."""
    out = []
    guard = 0
    while sum(len(b) for b in out) < count:
        batch = rng.standard_normal((max(8, 2 * count), 3, 3))
        keep = (np.abs(np.linalg.det(batch)) >= sampler.det_min) & (
            np.linalg.cond(batch) <= sampler.cond_max
        )
        out.append(batch[keep])
        guard += 1
        if guard > 200:
            raise RuntimeError("gradient sampler failed to find acceptable samples")
    return np.concatenate(out)[:count]


def _solve_set(rng, k, sampler):
    return np.concatenate([sampler.anchor_matrices(), sample_gradients(rng, k, sampler)])


# ---------------------------------------------------------------------------
# admissibility rows


def _blocks(model, X, Fs, tol):
    """Stacked admissibility rows for a batch of gradients: (k*d, 12)."""
    dWdX, dWdF = derivatives_at_samples(model, X, Fs, tol)
    k, d = dWdF.shape[0], dWdF.shape[1]
    G = dWdF.reshape(k, d, 3, 3)
    BP = np.einsum("kcji,kjl->kcli", G, np.asarray(Fs, dtype=float)).reshape(k, d, 9)
    return np.concatenate([dWdX, BP], axis=2).reshape(k * d, 12)


def admissibility_block(model, X, F, tol=DEFAULT_TOL):
    """Single admissibility block (d x 12) at one jet."""
    X = np.asarray(X, dtype=float)
    F = np.asarray(F, dtype=float)
    if not model.in_domain(X):
        raise DomainError(f"point {X.tolist()} is outside the domain of model {model.name!r}")
    if abs(float(np.linalg.det(F))) < 1e-12:
        raise SingularMatrixError("F is numerically singular")
    return _blocks(model, X, F[None], tol)


# ---------------------------------------------------------------------------
# fibre computation

_DX_SLICE = {"pointwise": slice(0, 3), "germ1": slice(0, 3)}
_DP_SLICE = {"pointwise": slice(3, 12), "germ1": slice(12, 21)}


class _PointwiseSystem:
    n_unknowns = 12

    def __init__(self, model, X, tol):
        self.model = model
        self.X = X
        self.tol = tol

    def rows(self, rng, k, sampler):
        Fs = _solve_set(rng, k, sampler)
        return _blocks(self.model, self.X, Fs, self.tol), len(Fs)

    def heldout_rows(self, rng, k, sampler):
        Fs = sample_gradients(rng, k, sampler)
        return _blocks(self.model, self.X, Fs, self.tol)


class _GermSystem:
    """First-order field ansatz over a small point cloud.

    Unknowns (48): base value dX0, base slope A (dX(X') = dX0 + A(X'-X)),
    fibre value dP0 and fibre slope Q (dP(X') = dP0 + Q(X'-X), contraction
    on the third index of Q).
    """

    n_unknowns = 48

    def __init__(self, model, X, tol, radius, count):
        self.model = model
        self.X = X
        self.tol = tol
        self.cloud = _cloud_points(model, X, radius, count)

    def _lift(self, rows, delta):
        BX = rows[:, :3]
        BP = rows[:, 3:]
        cols_a = np.einsum("ri,j->rij", BX, delta).reshape(len(rows), 9)
        cols_q = np.einsum("rp,m->rpm", BP, delta).reshape(len(rows), 27)
        return np.concatenate([BX, cols_a, BP, cols_q], axis=1)

    def _assemble(self, rng, k, sampler, with_anchors):
        parts = []
        total = 0
        for point in self.cloud:
            if with_anchors:
                Fs = _solve_set(rng, k, sampler)
            else:
                Fs = sample_gradients(rng, k, sampler)
            total += len(Fs)
            rows = _blocks(self.model, point, Fs, self.tol)
            parts.append(self._lift(rows, point - self.X))
        return np.concatenate(parts), total

    def rows(self, rng, k, sampler):
        return self._assemble(rng, k, sampler, with_anchors=True)

    def heldout_rows(self, rng, k, sampler):
        return self._assemble(rng, k, sampler, with_anchors=False)[0]


def _cloud_points(model, X, radius, count):
    """Centre plus low-discrepancy directions at two radial scalings."""
    ndir = (count + 1) // 2
    dirs = _fibonacci_directions(ndir)
    pts = [np.asarray(X, dtype=float)]
    for j in range(count):
        u = dirs[j // 2]
        rad = radius if j % 2 == 0 else 0.5 * radius
        for _ in range(7):
            candidate = X + rad * u
            if model.in_domain(candidate):
                pts.append(candidate)
                break
            rad *= 0.5
    return np.asarray(pts)


def _fibonacci_directions(n):
    idx = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * idx / n)
    azim = np.pi * (1.0 + 5.0**0.5) * idx
    return np.column_stack(
        [np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)]
    )


def _saturate(system, rng, sampler):
    """Double the sample count until the null dimension repeats."""
    dims = []
    k = sampler.k_init
    while True:
        M, used = system.rows(rng, k, sampler)
        _, s, vh = np.linalg.svd(M)
        rank, gap = rank_split(s, system.tol.rank_rel)
        basis = vh[rank:].T.copy()
        dims.append(basis.shape[1])
        if len(dims) >= 2 and dims[-1] == dims[-2]:
            return basis, gap, dims, k, used
        if 2 * k > sampler.k_max:
            raise FibreInstabilityError(
                f"null dimension did not stabilize within k_max={sampler.k_max}", dims
            )
        k *= 2


def _grade_and_base(basis, rank_rel, dx):
    rows = basis[dx, :]
    if basis.shape[1] == 0:
        return 0, np.zeros((3, 0)), np.inf
    U, s, _ = np.linalg.svd(rows)
    # basis columns are unit vectors, so 1 is the natural scale; anchoring
    # the cutoff there keeps pure-noise rows from faking base directions
    grade, gap = rank_split(s, rank_rel, scale=max(float(s[0]) if s.size else 0.0, 1.0))
    return grade, U[:, :grade].copy(), gap


def _symmetry_basis(basis, rank_rel, dx, dp):
    if basis.shape[1] == 0:
        return []
    rows = basis[dx, :]
    _, s, vh = np.linalg.svd(rows)
    rank, _ = rank_split(s, rank_rel, scale=max(float(s[0]) if s.size else 0.0, 1.0))
    coeff = vh[rank:].T
    if coeff.shape[1] == 0:
        return []
    S = (basis @ coeff)[dp, :]
    U, s2, _ = np.linalg.svd(S, full_matrices=False)
    keep, _ = rank_split(s2, rank_rel, scale=max(float(s2[0]) if s2.size else 0.0, 1.0))
    return [U[:, j].reshape(3, 3).copy() for j in range(keep)]


def material_fibre(model, X, sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL, mode="pointwise",
                   germ_radius=GERM_RADIUS, germ_cloud=GERM_CLOUD):
    """Compute the fibre of the material distribution at a body point.

    ``mode="pointwise"`` solves the admissibility system at ``X`` alone;
    ``mode="germ1"`` extends the unknowns to a first-order field over a
    small neighbourhood cloud, which removes spurious solutions at singular
    strata (an isolated degenerate point constrains nearby field values,
    not just the value at the point itself).
    """
    X = np.asarray(X, dtype=float)
    if not model.in_domain(X):
        raise DomainError(f"point {X.tolist()} is outside the domain of model {model.name!r}")
    if mode == "pointwise":
        system = _PointwiseSystem(model, X, tol)
    elif mode == "germ1":
        system = _GermSystem(model, X, tol, germ_radius, germ_cloud)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    rng = _point_rng(sampler, X, salt=0 if mode == "pointwise" else 1)
    basis, gap_fibre, dims, k_final, used = _saturate(system, rng, sampler)

    # held-out validation on fresh samples disjoint from the solve set
    if basis.shape[1] > 0:
        H = system.heldout_rows(rng, k_final, sampler)
        per_vector = np.abs(H @ basis).max(axis=0)
        heldout = float(per_vector.max())
        validated = bool(np.all(per_vector <= tol.residual_tol))
    else:
        heldout = 0.0
        validated = True

    dx = _DX_SLICE[mode]
    dp = _DP_SLICE[mode]
    grade, base, gap_grade = _grade_and_base(basis, tol.rank_rel, dx)
    sym = _symmetry_basis(basis, tol.rank_rel, dx, dp)
    return FibreResult(
        point=X,
        mode=mode,
        fibre_basis=basis,
        base_basis=base,
        grade=grade,
        sym_basis=sym,
        samples_used=used,
        rank_gap=min(gap_fibre, gap_grade),
        validated=validated,
        heldout_residual=heldout,
        dim_history=dims,
    )


def base_basis_at(model, X, sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL):
    """Lightweight base projection at ``X``: ``(basis (3,grade), grade, gap)``.

    Skips held-out validation and symmetry extraction; used by the flow
    tracer, which queries many intermediate points.
    """
    X = np.asarray(X, dtype=float)
    if not model.in_domain(X):
        raise DomainError(f"point {X.tolist()} is outside the domain of model {model.name!r}")
    system = _PointwiseSystem(model, X, tol)
    rng = _point_rng(sampler, X, salt=0)
    basis, gap_fibre, _, _, _ = _saturate(system, rng, sampler)
    grade, base, gap_grade = _grade_and_base(basis, tol.rank_rel, slice(0, 3))
    return base, grade, min(gap_fibre, gap_grade)


def symmetry_algebra(model, X, sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL):
    """Basis of the material symmetry algebra at ``X`` (list of 3x3 arrays)."""
    return material_fibre(model, X, sampler=sampler, tol=tol, mode="pointwise").sym_basis


def is_material_isomorphism(model, X, Y, P, sampler=DEFAULT_SAMPLER, tol=DEFAULT_TOL):
    """Test whether the jet ``P`` from ``X`` to ``Y`` is a material isomorphism.

    The residual is ``max_F |W(X, F P) - W(Y, F)|`` over the anchor set and
    ``k_init`` random gradients; the verdict is ``residual <= residual_tol``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    P = np.asarray(P, dtype=float)
    if P.shape != (3, 3) or not np.all(np.isfinite(P)):
        raise ValueError("P must be a finite 3x3 matrix")
    if abs(float(np.linalg.det(P))) < 1e-12:
        raise SingularMatrixError("P is numerically singular")
    for name, point in (("X", X), ("Y", Y)):
        if not model.in_domain(point):
            raise DomainError(f"{name}={point.tolist()} is outside the domain of model {model.name!r}")
    rng = _point_rng(sampler, np.concatenate([X, Y]), salt=2)
    Fs = _solve_set(rng, sampler.k_init, sampler)
    WX = evaluate_at_samples(model, np.broadcast_to(X, (len(Fs), 3)), Fs @ P)
    WY = evaluate_at_samples(model, np.broadcast_to(Y, (len(Fs), 3)), Fs)
    diffs = np.abs(WX - WY).max(axis=1)
    worst = int(np.argmax(diffs))
    residual = float(diffs[worst])
    if not np.isfinite(residual):
        raise NonFiniteError("non-finite residual in material-isomorphism test")
    return IsoCheck(
        residual=residual,
        verdict=bool(residual <= tol.residual_tol),
        worst_gradient=Fs[worst].copy(),
        samples_used=len(Fs),
    )
