"""Dense multipartite density-matrix toolkit.

Conventions
-----------
* A state lives on a :class:`SystemLayout`: an ordered tuple of tensor
  factors, each tagged with an owning party id and a local dimension.
  Factor 0 is the most significant index, i.e. a product state is
  ``kron(factor0, factor1, ...)``.
* All entropies are base 2.
* Everything is dense ``complex128``.  The practical cap is
  ``DIM_CAP = 4096`` for the total dimension; operations that can blow
  past it check explicitly.

Numerical tolerances
--------------------
Hermiticity and trace are enforced at 1e-10.  States failing positivity
by less than 1e-9 (smallest eigenvalue in ``[-1e-9, -1e-10)``) are
clipped to the PSD cone and renormalized with a :class:`StateClipWarning`;
anything worse is rejected.  Eigenvalues below 1e-12 contribute nothing
to entropies.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import _io
from .errors import LayoutMismatchError, NotPureError, StateInvariantError

DIM_CAP = 4096
HERM_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-10
PSD_CLIP_TOL = 1e-9
EIG_CUTOFF = 1e-12
PURITY_TOL = 1e-9

STATE_FORMAT = "catent-state-v1"


class StateClipWarning(UserWarning):
    """A state was projected back onto the PSD cone."""


class Factor(NamedTuple):
    party: int
    dim: int


class SystemLayout:
    """Ordered list of ``(party, dim)`` tensor factors."""

    __slots__ = ("factors",)

    def __init__(self, factors: Iterable[tuple[int, int] | Factor]):
        fs = tuple(Factor(int(p), int(d)) for p, d in factors)
        if not fs:
            raise ValueError("layout needs at least one factor")
        for f in fs:
            if f.dim < 1:
                raise ValueError(f"factor dimension must be >= 1, got {f.dim}")
            if f.party < 0:
                raise ValueError(f"party id must be >= 0, got {f.party}")
        self.factors = fs

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.dim for f in self.factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))

    @property
    def parties(self) -> tuple[int, ...]:
        return tuple(sorted({f.party for f in self.factors}))

    def party_factors(self, party: int) -> tuple[int, ...]:
        """Indices of the factors owned by ``party``, in layout order."""
        return tuple(i for i, f in enumerate(self.factors) if f.party == party)

    def subset(self, indices: Sequence[int]) -> "SystemLayout":
        return SystemLayout(self.factors[i] for i in indices)

    def power(self, n: int) -> "SystemLayout":
        if n < 1:
            raise ValueError("tensor power needs n >= 1")
        return SystemLayout(self.factors * n)

    def __add__(self, other: "SystemLayout") -> "SystemLayout":
        return SystemLayout(self.factors + other.factors)

    def __len__(self) -> int:
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SystemLayout(self.factors[i])
        return self.factors[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, SystemLayout) and self.factors == other.factors

    def __hash__(self) -> int:
        return hash(self.factors)

    def __repr__(self) -> str:
        inner = ", ".join(f"{f.party}:{f.dim}" for f in self.factors)
        return f"SystemLayout({inner})"


def _validate_density(matrix: np.ndarray, dim: int) -> np.ndarray:
    m = np.ascontiguousarray(matrix, dtype=complex)
    if m.shape != (dim, dim):
        raise StateInvariantError(f"matrix shape {m.shape} does not match layout dim {dim}")
    herm_err = float(np.max(np.abs(m - m.conj().T))) if dim else 0.0
    if herm_err > HERM_TOL:
        raise StateInvariantError(f"matrix is not hermitian (max asymmetry {herm_err:.3e})")
    m = (m + m.conj().T) / 2.0
    tr = float(m.trace().real)
    if abs(tr - 1.0) > TRACE_TOL:
        raise StateInvariantError(f"trace is {tr!r}, not 1 within {TRACE_TOL}")
    eigs = np.linalg.eigvalsh(m)
    min_eig = float(eigs[0])
    if min_eig < -PSD_CLIP_TOL:
        raise StateInvariantError(f"matrix is not PSD (min eigenvalue {min_eig:.3e})")
    if min_eig < -PSD_TOL:
        # small negative dust from long channel compositions: project and renormalize
        warnings.warn(
            f"clipping negative eigenvalue {min_eig:.3e} to the PSD cone",
            StateClipWarning,
            stacklevel=3,
        )
        vals, vecs = np.linalg.eigh(m)
        vals = np.clip(vals, 0.0, None)
        vals /= vals.sum()
        m = (vecs * vals) @ vecs.conj().T
        m = (m + m.conj().T) / 2.0
    m.setflags(write=False)
    return m


class QState:
    """Immutable density matrix on a :class:`SystemLayout`."""

    __slots__ = ("layout", "matrix")

    def __init__(self, layout: SystemLayout, matrix: np.ndarray):
        if not isinstance(layout, SystemLayout):
            layout = SystemLayout(layout)
        self.layout = layout
        self.matrix = _validate_density(matrix, layout.total_dim)

    @property
    def total_dim(self) -> int:
        return self.layout.total_dim

    def marginal(self, keep: Sequence[int]) -> "QState":
        return partial_trace(self, keep)

    def __repr__(self) -> str:
        return f"QState({self.layout!r}, dim={self.total_dim})"


# ---------------------------------------------------------------------------
# construction helpers


def pure_state(layout: SystemLayout, amplitudes: Sequence[complex]) -> QState:
    """Rank-one state |v><v| from an amplitude vector (normalized internally).

    Raises StateInvariantError when the vector norm is not within 1e-8
    of 1, to catch silently wrong inputs while allowing float dust.
    """
    v = np.asarray(amplitudes, dtype=complex).reshape(-1)
    if v.size != layout.total_dim:
        raise LayoutMismatchError(f"vector length {v.size} != layout dim {layout.total_dim}")
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > 1e-8:
        raise StateInvariantError(f"amplitude vector has norm {norm!r}")
    v = v / norm
    return QState(layout, np.outer(v, v.conj()))


def basis_state(layout: SystemLayout, indices: Sequence[int]) -> QState:
    """Computational basis state |i_0 i_1 ...><...| on the layout."""
    if len(indices) != len(layout):
        raise LayoutMismatchError("need one basis index per factor")
    flat = int(np.ravel_multi_index(tuple(indices), layout.dims))
    v = np.zeros(layout.total_dim, dtype=complex)
    v[flat] = 1.0
    return QState(layout, np.outer(v, v.conj()))


def maximally_mixed(layout: SystemLayout) -> QState:
    d = layout.total_dim
    return QState(layout, np.eye(d, dtype=complex) / d)


def singlet() -> QState:
    """Two-qubit singlet (|01> - |10>)/sqrt(2) on layout [(0,2),(1,2)]."""
    v = np.array([0, 1, -1, 0], dtype=complex) / math.sqrt(2)
    return pure_state(SystemLayout([(0, 2), (1, 2)]), v)


def maximally_entangled(dim: int) -> QState:
    """sum_i |ii>/sqrt(d) on layout [(0,d),(1,d)]."""
    v = np.zeros(dim * dim, dtype=complex)
    v[:: dim + 1] = 1.0 / math.sqrt(dim)
    return pure_state(SystemLayout([(0, dim), (1, dim)]), v)


def random_state(layout: SystemLayout, ensemble: str = "haar_pure", seed: int = 0) -> QState:
    """Seeded random state.

    ensemble = 'haar_pure': Haar-random pure state (normalized complex
    Gaussian vector).  ensemble = 'ginibre_mixed': full-rank mixed state
    G G^dag / tr from a square complex Ginibre matrix.
    """
    rng = np.random.default_rng(seed)
    d = layout.total_dim
    if ensemble == "haar_pure":
        v = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        return pure_state(layout, v / np.linalg.norm(v))
    if ensemble == "ginibre_mixed":
        g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
        m = g @ g.conj().T
        return QState(layout, m / m.trace())
    raise ValueError(f"unknown ensemble {ensemble!r}")


# ---------------------------------------------------------------------------
# tensor algebra


def tensor(a: QState, b: QState) -> QState:
    return QState(a.layout + b.layout, np.kron(a.matrix, b.matrix))


def tensor_all(states: Sequence[QState]) -> QState:
    if not states:
        raise ValueError("need at least one state")
    out = states[0]
    for s in states[1:]:
        out = tensor(out, s)
    return out


def n_copies(state: QState, n: int) -> QState:
    return tensor_all([state] * n)


def partial_trace(state: QState, keep: Sequence[int]) -> QState:
    """Reduce to the factors in ``keep`` (set semantics, original order kept)."""
    n = len(state.layout)
    keep = sorted(set(int(i) for i in keep))
    if not keep:
        raise ValueError("cannot trace out every factor")
    if keep[0] < 0 or keep[-1] >= n:
        raise LayoutMismatchError(f"keep indices {keep} out of range for {n} factors")
    if len(keep) == n:
        return state
    drop = [i for i in range(n) if i not in keep]
    dims = state.layout.dims
    t = state.matrix.reshape(dims + dims)
    perm = keep + drop + [i + n for i in keep] + [i + n for i in drop]
    t = t.transpose(perm)
    dk = int(np.prod([dims[i] for i in keep]))
    dd = int(np.prod([dims[i] for i in drop]))
    t = t.reshape(dk, dd, dk, dd)
    reduced = np.einsum("abcb->ac", t)
    return QState(state.layout.subset(keep), reduced)


def permute_factors(state: QState, order: Sequence[int]) -> QState:
    """Relabel factors so new factor t is old factor order[t] (bookkeeping only)."""
    n = len(state.layout)
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(n)):
        raise LayoutMismatchError(f"order {order} is not a permutation of 0..{n - 1}")
    dims = state.layout.dims
    t = state.matrix.reshape(dims + dims)
    perm = list(order) + [i + n for i in order]
    t = t.transpose(perm)
    d = state.total_dim
    return QState(state.layout.subset(order), t.reshape(d, d))


# ---------------------------------------------------------------------------
# metrics and entropies


def trace_norm_dist(a: QState, b: QState) -> float:
    """Trace norm ||a - b||_1 (sum of singular values), in [0, 2]."""
    if a.layout.dims != b.layout.dims:
        raise LayoutMismatchError(f"dims {a.layout.dims} vs {b.layout.dims}")
    eigs = np.linalg.eigvalsh(a.matrix - b.matrix)
    return float(np.abs(eigs).sum())


def fidelity(a: QState, b: QState) -> float:
    """Uhlmann fidelity tr sqrt(sqrt(a) b sqrt(a)), computed as ||sqrt(a) sqrt(b)||_1."""
    if a.layout.dims != b.layout.dims:
        raise LayoutMismatchError(f"dims {a.layout.dims} vs {b.layout.dims}")
    sa = _psd_sqrt(a.matrix)
    sb = _psd_sqrt(b.matrix)
    sv = np.linalg.svd(sa @ sb, compute_uv=False)
    return float(min(1.0, sv.sum()))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def _entropy_from_probs(probs: np.ndarray) -> float:
    p = probs[probs > EIG_CUTOFF]
    if p.size == 0:
        return 0.0
    return float(max(0.0, -(p * np.log2(p)).sum()))


def von_neumann_entropy(state: QState) -> float:
    """S(rho) = -tr rho log2 rho, eigenvalues below 1e-12 dropped."""
    return _entropy_from_probs(np.linalg.eigvalsh(state.matrix))


def is_pure(state: QState, tol: float = PURITY_TOL) -> bool:
    top = float(np.linalg.eigvalsh(state.matrix)[-1])
    return top >= 1.0 - tol


def dominant_eigvector(state: QState) -> np.ndarray:
    vals, vecs = np.linalg.eigh(state.matrix)
    return np.ascontiguousarray(vecs[:, -1])


def _check_bipartition(layout: SystemLayout, parties_a: Sequence[int]) -> tuple[int, ...]:
    pa = tuple(sorted(set(int(p) for p in parties_a)))
    all_parties = set(layout.parties)
    if not pa or not set(pa) <= all_parties or set(pa) == all_parties:
        raise LayoutMismatchError(
            f"parties_a={pa} must be a nonempty proper subset of parties {layout.parties}"
        )
    return pa


def _schmidt_probs(state: QState, parties_a: Sequence[int]) -> np.ndarray:
    """Squared Schmidt coefficients of a (tolerance-)pure state across a party cut."""
    pa = _check_bipartition(state.layout, parties_a)
    vals, vecs = np.linalg.eigh(state.matrix)
    if float(vals[-1]) < 1.0 - PURITY_TOL:
        raise NotPureError(f"state is not pure (largest eigenvalue {vals[-1]:.12f})")
    v = np.ascontiguousarray(vecs[:, -1])
    dims = state.layout.dims
    side_a = [i for i, f in enumerate(state.layout) if f.party in pa]
    side_b = [i for i in range(len(dims)) if i not in side_a]
    t = v.reshape(dims).transpose(side_a + side_b)
    da = int(np.prod([dims[i] for i in side_a]))
    sv = np.linalg.svd(t.reshape(da, -1), compute_uv=False)
    probs = np.clip(sv**2, 0.0, None)
    return probs / probs.sum()


def entanglement_entropy(state: QState, parties_a: Sequence[int] = (0,)) -> float:
    """Entropy of entanglement of a pure state across the given party cut."""
    return _entropy_from_probs(_schmidt_probs(state, parties_a))


@dataclass(frozen=True)
class SchmidtVector:
    """Descending Schmidt probability vector (sums to 1 within 1e-12)."""

    probs: tuple[float, ...]

    def __post_init__(self):
        p = self.probs
        if not p:
            raise ValueError("empty Schmidt vector")
        if any(x < 0.0 for x in p):
            raise ValueError("Schmidt probabilities must be nonnegative")
        if any(p[i] < p[i + 1] for i in range(len(p) - 1)):
            raise ValueError("Schmidt probabilities must be descending")
        if abs(sum(p) - 1.0) > 1e-12:
            raise ValueError(f"Schmidt probabilities sum to {sum(p)!r}")

    @classmethod
    def of(cls, probs: Iterable[float]) -> "SchmidtVector":
        """Sort descending, clip float dust, renormalize exactly."""
        arr = np.asarray(list(probs), dtype=float)
        if arr.size == 0:
            raise ValueError("empty Schmidt vector")
        if arr.min() < -1e-12:
            raise ValueError(f"negative Schmidt probability {arr.min()!r}")
        arr = np.clip(arr, 0.0, None)
        total = arr.sum()
        if not math.isfinite(total) or total <= 0.0:
            raise ValueError("Schmidt probabilities must have positive finite sum")
        arr = np.sort(arr / total)[::-1]
        return cls(tuple(float(x) for x in arr))

    def entropy(self) -> float:
        return _entropy_from_probs(np.asarray(self.probs))

    def padded(self, length: int) -> "SchmidtVector":
        if length < len(self.probs):
            raise ValueError(f"cannot pad length {len(self.probs)} down to {length}")
        return SchmidtVector(self.probs + (0.0,) * (length - len(self.probs)))

    def tensor(self, other: "SchmidtVector") -> "SchmidtVector":
        prod = np.outer(np.asarray(self.probs), np.asarray(other.probs)).ravel()
        return SchmidtVector.of(prod)

    def __len__(self) -> int:
        return len(self.probs)

    def __iter__(self):
        return iter(self.probs)


def schmidt_decompose(state: QState, parties_a: Sequence[int] = (0,)) -> SchmidtVector:
    """Schmidt probabilities of a pure state across a party cut, descending."""
    return SchmidtVector.of(_schmidt_probs(state, parties_a))


def purify(state: QState) -> QState:
    """Standard purification; the reference factor gets a fresh party id.

    The reference dimension is the eigenvalue rank of the input at the
    1e-12 cutoff, so pure inputs get a trivial dim-1 reference.
    """
    vals, vecs = np.linalg.eigh(state.matrix)
    sel = vals > EIG_CUTOFF
    vals = vals[sel]
    vecs = vecs[:, sel]
    coeffs = np.sqrt(vals / vals.sum())
    rank = len(vals)
    d = state.total_dim
    v = np.zeros(d * rank, dtype=complex)
    for i in range(rank):
        v += coeffs[i] * np.kron(vecs[:, i], _unit(rank, i))
    ref_party = max(state.layout.parties) + 1
    layout = state.layout + SystemLayout([(ref_party, rank)])
    return pure_state(layout, v)


def _unit(dim: int, i: int) -> np.ndarray:
    e = np.zeros(dim, dtype=complex)
    e[i] = 1.0
    return e


# ---------------------------------------------------------------------------
# serialization (bit-exact round-trip)


def state_to_dict(state: QState) -> dict:
    return {
        "format": STATE_FORMAT,
        "factors": [[f.party, f.dim] for f in state.layout],
        "matrix": _io.encode_matrix(state.matrix),
    }


def state_from_dict(doc: dict) -> QState:
    if doc.get("format") != STATE_FORMAT:
        raise ValueError(f"unsupported state format {doc.get('format')!r}")
    layout = SystemLayout([(int(p), int(d)) for p, d in doc["factors"]])
    return QState(layout, _io.decode_matrix(doc["matrix"]))


def save_state(state: QState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_dict(state), fh, indent=1)
        fh.write("\n")


def load_state(path) -> QState:
    with open(path, "r", encoding="utf-8") as fh:
        return state_from_dict(json.load(fh))
