"""Pure-state LOCC convertibility and explicit protocol synthesis.

Convertibility between bipartite pure states is decided by partial-sum
domination of their Schmidt probability vectors; a catalyst enters by
tensoring both sides with its spectrum.  When a conversion is possible,
an explicit one-round protocol (one measurement by the first party, a
permutation correction by the second) is synthesized from a chain of
two-outcome mixing steps.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DivergingRateError, NotConvertibleError
from .locc import LocalInstrument, Instrument, LoccProtocol, local_unitary
from .measures import EdBounds, hashing_bounds
from .qstate import QState, SchmidtVector, SystemLayout, pure_state

__all__ = [
    "MajorizationReport",
    "majorizes",
    "catalytic_convertible",
    "canonical_pure",
    "synthesize_pure_protocol",
    "PureRate",
    "pure_target_rate",
]

SUM_TOL = 1e-12


class MajorizationReport(NamedTuple):
    convertible: bool
    violated_index: int | None
    partial_sums_target: tuple[float, ...]
    partial_sums_source: tuple[float, ...]


def _padded_pair(a: SchmidtVector, b: SchmidtVector) -> tuple[np.ndarray, np.ndarray]:
    d = max(len(a), len(b))
    return (
        np.asarray(a.padded(d).probs, dtype=float),
        np.asarray(b.padded(d).probs, dtype=float),
    )


def majorizes(target: SchmidtVector, source: SchmidtVector) -> MajorizationReport:
    """Partial-sum domination decision: convertible iff every target prefix
    sum reaches the corresponding source prefix sum.

    violated_index is the first (1-based) prefix length where domination
    fails, or None.
    """
    t, s = _padded_pair(target, source)
    ct = np.cumsum(t)
    cs = np.cumsum(s)
    bad = np.where(ct < cs - SUM_TOL)[0]
    idx = int(bad[0]) + 1 if bad.size else None
    return MajorizationReport(
        convertible=bad.size == 0,
        violated_index=idx,
        partial_sums_target=tuple(float(x) for x in ct),
        partial_sums_source=tuple(float(x) for x in cs),
    )


def catalytic_convertible(
    source: SchmidtVector, target: SchmidtVector, catalyst: SchmidtVector
) -> MajorizationReport:
    """Domination check after tensoring both spectra with the catalyst."""
    return majorizes(target.tensor(catalyst), source.tensor(catalyst))


def canonical_pure(probs: SchmidtVector) -> QState:
    """The diagonal-amplitude pure state with the given Schmidt spectrum."""
    d = len(probs)
    amps = np.zeros(d * d, dtype=complex)
    for i, p in enumerate(probs):
        amps[i * d + i] = math.sqrt(p)
    return pure_state(SystemLayout([(0, d), (1, d)]), amps)


def _mixing_chain(
    target: np.ndarray, source: np.ndarray
) -> list[tuple[tuple[int, ...], float]]:
    """Write source = sum_m w_m P_m target with w_m >= 0 summing to 1.

    Repeatedly applies a two-coordinate mixing step moving the current
    vector (starting at target) toward source; each step fixes at least
    one coordinate, so the loop runs at most len - 1 times.  Permutations
    are returned as index arrays sigma with (P x)[i] = x[sigma[i]].
    """
    d = len(target)
    w = target.astype(float).copy()
    terms: dict[tuple[int, ...], float] = {tuple(range(d)): 1.0}
    for _ in range(d):
        over = np.where(w > source + SUM_TOL)[0]
        if over.size == 0:
            break
        j = int(over[-1])
        under = np.where((np.arange(d) > j) & (w < source - SUM_TOL))[0]
        if under.size == 0:  # pragma: no cover - only if domination was violated
            raise NotConvertibleError("mixing chain failed: spectra not dominated")
        k = int(under[0])
        delta = min(w[j] - source[j], source[k] - w[k])
        frac = delta / (w[j] - w[k])
        swap = list(range(d))
        swap[j], swap[k] = k, j
        new_terms: dict[tuple[int, ...], float] = {}
        for sigma, weight in terms.items():
            # keep branch
            new_terms[sigma] = new_terms.get(sigma, 0.0) + weight * (1.0 - frac)
            # swap branch: compose the transposition after sigma
            comp = tuple(sigma[swap[i]] for i in range(d))
            new_terms[comp] = new_terms.get(comp, 0.0) + weight * frac
        terms = new_terms
        w[j] -= delta
        w[k] += delta
    if np.max(np.abs(w - source)) > 1e-9:  # pragma: no cover - internal consistency
        raise NotConvertibleError("mixing chain did not converge")
    return [(sigma, wt) for sigma, wt in terms.items() if wt > 1e-15]


def synthesize_pure_protocol(
    source: SchmidtVector,
    target: SchmidtVector,
    layout: SystemLayout | None = None,
) -> LoccProtocol:
    """Explicit one-round protocol converting the canonical source state to
    the canonical target state.

    The first party measures with operators built from a permutation-mixture
    decomposition of the source spectrum; each outcome is corrected by a
    permutation unitary on the second party's side.  By default the protocol
    lives on the two-factor canonical layout; a custom bipartite layout with
    equal total dimensions per party may be supplied (the canonical basis is
    then each party's joint computational basis).
    """
    report = majorizes(target, source)
    if not report.convertible:
        raise NotConvertibleError(
            f"target does not dominate source (first violation at prefix "
            f"{report.violated_index})"
        )
    t, s = _padded_pair(target, source)
    d = len(t)

    if layout is None:
        layout = SystemLayout([(0, d), (1, d)])
        a_factors: tuple[int, ...] = (0,)
        b_factors: tuple[int, ...] = (1,)
        da = db = d
    else:
        a_idx = [i for i, f in enumerate(layout) if f.party == 0]
        b_idx = [i for i, f in enumerate(layout) if f.party == 1]
        if len(a_idx) + len(b_idx) != len(layout) or not a_idx or not b_idx:
            raise ValueError("layout must contain exactly parties 0 and 1")
        a_factors = tuple(a_idx)
        b_factors = tuple(b_idx)
        da = int(np.prod([layout[i].dim for i in a_idx]))
        db = int(np.prod([layout[i].dim for i in b_idx]))
        if da != db or da < d:
            raise ValueError(
                f"party dimensions ({da}, {db}) cannot hold a length-{d} spectrum"
            )
        if da > d:
            t = np.pad(t, (0, da - d))
            s = np.pad(s, (0, da - d))
            d = da

    terms = _mixing_chain(t, s)

    # completeness identity: the mixture of permuted targets is the source
    recon = np.zeros(d)
    for sigma, wt in terms:
        recon += wt * t[list(sigma)]
    if np.max(np.abs(recon - s)) > 1e-10:  # pragma: no cover - internal consistency
        raise NotConvertibleError("permutation mixture does not reproduce the source")

    outcomes = []
    cases = {}
    for m, (sigma, wt) in enumerate(terms):
        k = np.zeros((d, d), dtype=complex)
        for i in range(d):
            si = sigma[i]
            if s[i] > SUM_TOL:
                k[si, i] = math.sqrt(wt * t[si] / s[i])
            else:
                # source has no weight here; any isometric completion works
                k[si, i] = math.sqrt(wt)
        lab = f"m{m}"
        outcomes.append((lab, [k]))
        corr = np.zeros((d, d), dtype=complex)
        for i in range(d):
            corr[sigma[i], i] = 1.0
        cases[lab] = (local_unitary(layout, 1, b_factors, corr),)

    sub = layout.subset(a_factors)
    instrument = Instrument.from_kraus(sub, outcomes)
    step = LocalInstrument(0, a_factors, instrument, tuple(cases.items()))
    return LoccProtocol(layout, (step,))


class PureRate(NamedTuple):
    lower: float
    upper: float


def pure_target_rate(rho: QState, phi: SchmidtVector) -> PureRate:
    """Asymptotic conversion-rate interval toward a pure target.

    The distillable entanglement of the source, sandwiched by the hashing
    bounds, is divided by the target's entanglement entropy.  For a pure
    source the interval collapses to the exact reversible rate.  A product
    target makes the rate diverge, which is reported as an error rather
    than a number.
    """
    s_phi = phi.entropy()
    if s_phi < 1e-12:
        raise DivergingRateError(
            "target carries no entanglement; the conversion rate diverges"
        )
    bounds: EdBounds = hashing_bounds(rho)
    return PureRate(lower=bounds.lower / s_phi, upper=bounds.upper / s_phi)
