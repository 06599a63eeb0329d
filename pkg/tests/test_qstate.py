import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catent.errors import LayoutMismatchError, NotPureError, StateInvariantError
from catent.qstate import (
    QState,
    SchmidtVector,
    StateClipWarning,
    SystemLayout,
    basis_state,
    entanglement_entropy,
    fidelity,
    load_state,
    maximally_entangled,
    maximally_mixed,
    n_copies,
    partial_trace,
    permute_factors,
    pure_state,
    purify,
    random_state,
    save_state,
    schmidt_decompose,
    singlet,
    state_from_dict,
    state_to_dict,
    tensor,
    trace_norm_dist,
    von_neumann_entropy,
)

QUBIT_PAIR = SystemLayout([(0, 2), (1, 2)])


def _pt_oracle(matrix, dims, keep):
    # independent reduction: trace one axis pair at a time
    dims = list(dims)
    m = np.array(matrix)
    for idx in sorted([i for i in range(len(dims)) if i not in keep], reverse=True):
        n = len(dims)
        t = m.reshape(dims + dims)
        t = np.trace(t, axis1=idx, axis2=idx + n)
        dims.pop(idx)
        d = int(np.prod(dims)) if dims else 1
        m = t.reshape(d, d)
    return m


# ---------------------------------------------------------------------------
# layouts


def test_layout_basics():
    lay = SystemLayout([(0, 2), (1, 3), (0, 4)])
    assert lay.total_dim == 24
    assert lay.dims == (2, 3, 4)
    assert lay.parties == (0, 1)
    assert lay.party_factors(0) == (0, 2)
    assert (lay + lay).total_dim == 24 * 24
    assert lay.power(2) == lay + lay
    assert lay.subset([2, 0]).dims == (4, 2)
    with pytest.raises(ValueError):
        SystemLayout([])
    with pytest.raises(ValueError):
        SystemLayout([(0, 0)])


# ---------------------------------------------------------------------------
# construction and invariants


def test_tensor_singlet_trace_and_rank():
    s = tensor(singlet(), singlet())
    assert abs(s.matrix.trace() - 1.0) < 1e-12
    eigs = np.linalg.eigvalsh(s.matrix)
    assert np.sum(eigs > 1e-10) == 1


def test_not_hermitian_rejected():
    m = np.eye(2, dtype=complex) / 2
    m[0, 1] = 0.5
    with pytest.raises(StateInvariantError, match="hermitian"):
        QState(SystemLayout([(0, 2)]), m)


def test_wrong_trace_rejected():
    with pytest.raises(StateInvariantError, match="trace"):
        QState(SystemLayout([(0, 2)]), np.eye(2, dtype=complex))


def test_negative_eigenvalue_clip_and_reject():
    d = np.diag([1.0 + 5e-10, -5e-10]).astype(complex)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(StateClipWarning):
            QState(SystemLayout([(0, 2)]), d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = QState(SystemLayout([(0, 2)]), d)
    assert np.linalg.eigvalsh(s.matrix)[0] >= 0.0
    bad = np.diag([1.0 + 5e-8, -5e-8]).astype(complex)
    with pytest.raises(StateInvariantError, match="PSD"):
        QState(SystemLayout([(0, 2)]), bad)


def test_pure_state_norm_check():
    with pytest.raises(StateInvariantError, match="norm"):
        pure_state(SystemLayout([(0, 2)]), [1.0, 1.0])


def test_basis_state():
    s = basis_state(QUBIT_PAIR, (1, 0))
    assert s.matrix[2, 2] == 1.0


# ---------------------------------------------------------------------------
# partial trace


def test_singlet_marginals_maximally_mixed():
    s = singlet()
    for keep in ((0,), (1,)):
        red = partial_trace(s, keep)
        assert np.max(np.abs(red.matrix - np.eye(2) / 2)) < 1e-12


def test_partial_trace_keeps_original_order():
    a = random_state(SystemLayout([(0, 2)]), "ginibre_mixed", seed=1)
    b = random_state(SystemLayout([(1, 3)]), "ginibre_mixed", seed=2)
    c = random_state(SystemLayout([(0, 2)]), "ginibre_mixed", seed=3)
    s = tensor(tensor(a, b), c)
    red = partial_trace(s, (2, 0))
    assert red.layout.dims == (2, 2)
    assert np.max(np.abs(red.matrix - np.kron(a.matrix, c.matrix))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 6))
def test_partial_trace_matches_oracle(seed, keep_code):
    lay = SystemLayout([(0, 2), (1, 2), (0, 3)])
    s = random_state(lay, "ginibre_mixed", seed=seed)
    keep = [k for k in range(3) if keep_code & (1 << k)] or [0]
    got = partial_trace(s, keep)
    want = _pt_oracle(s.matrix, list(lay.dims), sorted(set(keep)))
    assert np.max(np.abs(got.matrix - want)) < 1e-12


def test_partial_trace_errors():
    s = singlet()
    with pytest.raises(ValueError):
        partial_trace(s, ())
    with pytest.raises(LayoutMismatchError):
        partial_trace(s, (5,))


def test_permute_factors_matches_kron():
    a = random_state(SystemLayout([(0, 2)]), "ginibre_mixed", seed=7)
    b = random_state(SystemLayout([(1, 3)]), "ginibre_mixed", seed=8)
    s = tensor(a, b)
    p = permute_factors(s, (1, 0))
    assert p.layout.dims == (3, 2)
    assert np.max(np.abs(p.matrix - np.kron(b.matrix, a.matrix))) < 1e-12


# ---------------------------------------------------------------------------
# metrics


def test_trace_norm_frozen_value():
    ket0 = basis_state(SystemLayout([(0, 2)]), (0,))
    mixed = maximally_mixed(SystemLayout([(0, 2)]))
    # eigenvalues of the difference are +-1/2, so the trace norm is exactly 1
    assert abs(trace_norm_dist(ket0, mixed) - 1.0) < 1e-12


def test_fidelity_frozen_value():
    ket0 = basis_state(SystemLayout([(0, 2)]), (0,))
    mixed = maximally_mixed(SystemLayout([(0, 2)]))
    assert abs(fidelity(ket0, mixed) - 1.0 / math.sqrt(2.0)) < 1e-12


def test_fidelity_pure_pure_is_overlap():
    rng = np.random.default_rng(5)
    lay = SystemLayout([(0, 4)])
    for _ in range(20):
        u = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        v = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        f = fidelity(pure_state(lay, u), pure_state(lay, v))
        assert abs(f - abs(np.vdot(u, v))) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_metric_properties(seed):
    lay = SystemLayout([(0, 3)])
    a = random_state(lay, "ginibre_mixed", seed=seed)
    b = random_state(lay, "ginibre_mixed", seed=seed + 1)
    c = random_state(lay, "ginibre_mixed", seed=seed + 2)
    dab = trace_norm_dist(a, b)
    assert 0.0 <= dab <= 2.0
    assert abs(dab - trace_norm_dist(b, a)) < 1e-12
    assert dab <= trace_norm_dist(a, c) + trace_norm_dist(c, b) + 1e-12
    assert trace_norm_dist(a, a) < 1e-12
    f = fidelity(a, b)
    assert 0.0 <= f <= 1.0
    assert abs(f - fidelity(b, a)) < 1e-10
    assert fidelity(a, a) > 1.0 - 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_fuchs_van_de_graaf(seed):
    lay = SystemLayout([(0, 3)])
    a = random_state(lay, "ginibre_mixed", seed=seed)
    b = random_state(lay, "haar_pure", seed=seed + 1)
    t = trace_norm_dist(a, b)
    f = fidelity(a, b)
    # lower form against a pure second argument; upper form for any pair
    assert f >= math.sqrt(max(0.0, 1.0 - t / 2.0)) - 1e-10
    assert t / 2.0 <= math.sqrt(max(0.0, 1.0 - f * f)) + 1e-10
    # the weak lower bound holds for arbitrary pairs
    c = random_state(lay, "ginibre_mixed", seed=seed + 2)
    assert 1.0 - fidelity(a, c) <= trace_norm_dist(a, c) / 2.0 + 1e-10


def test_data_processing_partial_trace():
    lay = SystemLayout([(0, 2), (1, 2)])
    for seed in range(15):
        a = random_state(lay, "ginibre_mixed", seed=seed)
        b = random_state(lay, "ginibre_mixed", seed=seed + 100)
        full = trace_norm_dist(a, b)
        red = trace_norm_dist(partial_trace(a, (0,)), partial_trace(b, (0,)))
        assert red <= full + 1e-12


# ---------------------------------------------------------------------------
# entropies


def test_entropy_frozen_binary_value():
    s = QState(SystemLayout([(0, 2)]), np.diag([0.9, 0.1]).astype(complex))
    oracle = -(0.9 * math.log2(0.9) + 0.1 * math.log2(0.1))
    got = von_neumann_entropy(s)
    assert abs(got - oracle) < 1e-12
    assert abs(got - 0.4690) < 1e-3


def test_entropy_edge_cases():
    assert von_neumann_entropy(singlet()) < 1e-10
    assert abs(von_neumann_entropy(maximally_mixed(SystemLayout([(0, 4)]))) - 2.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_entropy_additivity(seed):
    a = random_state(SystemLayout([(0, 2)]), "ginibre_mixed", seed=seed)
    b = random_state(SystemLayout([(1, 3)]), "ginibre_mixed", seed=seed + 1)
    lhs = von_neumann_entropy(tensor(a, b))
    rhs = von_neumann_entropy(a) + von_neumann_entropy(b)
    assert abs(lhs - rhs) < 1e-8


def test_entanglement_entropy_singlet():
    assert abs(entanglement_entropy(singlet()) - 1.0) < 1e-10


def test_entanglement_entropy_product_state():
    a = random_state(SystemLayout([(0, 2)]), "haar_pure", seed=3)
    b = random_state(SystemLayout([(1, 2)]), "haar_pure", seed=4)
    assert entanglement_entropy(tensor(a, b)) < 1e-8


def test_entanglement_entropy_rejects_mixed():
    with pytest.raises(NotPureError):
        entanglement_entropy(maximally_mixed(QUBIT_PAIR))


def test_entanglement_entropy_bad_bipartition():
    with pytest.raises(LayoutMismatchError):
        entanglement_entropy(singlet(), parties_a=(0, 1))


# ---------------------------------------------------------------------------
# Schmidt machinery


def test_schmidt_singlet():
    sv = schmidt_decompose(singlet())
    assert np.max(np.abs(np.array(sv.probs) - 0.5)) < 1e-12


def test_schmidt_matches_marginal_spectrum():
    for seed in range(10):
        s = random_state(SystemLayout([(0, 2), (1, 3)]), "haar_pure", seed=seed)
        sv = schmidt_decompose(s)
        # oracle: eigenvalues of the A marginal, descending
        eigs = np.sort(np.linalg.eigvalsh(partial_trace(s, (0,)).matrix))[::-1]
        want = np.pad(eigs, (0, len(sv) - len(eigs)))
        assert np.max(np.abs(np.array(sv.probs) - want)) < 1e-10


def test_schmidt_vector_validation():
    sv = SchmidtVector.of([0.1, 0.9])
    assert sv.probs == (0.9, 0.1)
    assert abs(sv.entropy() - 0.4689955935892812) < 1e-12
    assert sv.padded(4).probs == (0.9, 0.1, 0.0, 0.0)
    prod = SchmidtVector.of([0.5, 0.5]).tensor(SchmidtVector.of([0.6, 0.4]))
    assert np.allclose(prod.probs, (0.3, 0.3, 0.2, 0.2), atol=1e-12)
    with pytest.raises(ValueError):
        SchmidtVector((0.1, 0.9))
    with pytest.raises(ValueError):
        SchmidtVector.of([0.5, -0.5])
    with pytest.raises(ValueError):
        SchmidtVector.of([])


# ---------------------------------------------------------------------------
# purification


def test_purify_roundtrip():
    for seed in range(6):
        s = random_state(SystemLayout([(0, 2), (1, 2)]), "ginibre_mixed", seed=seed)
        psi = purify(s)
        assert np.linalg.eigvalsh(psi.matrix)[-1] > 1.0 - 1e-10
        back = partial_trace(psi, (0, 1))
        assert trace_norm_dist(back, s) < 1e-10
        assert psi.layout[-1].party == 2


def test_purify_pure_input_trivial_reference():
    psi = purify(singlet())
    assert psi.layout[-1].dim == 1


# ---------------------------------------------------------------------------
# random states


def test_random_state_deterministic():
    lay = SystemLayout([(0, 2), (1, 2)])
    a = random_state(lay, "ginibre_mixed", seed=42)
    b = random_state(lay, "ginibre_mixed", seed=42)
    c = random_state(lay, "ginibre_mixed", seed=43)
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)


def test_random_ensembles():
    lay = SystemLayout([(0, 3)])
    p = random_state(lay, "haar_pure", seed=0)
    assert np.linalg.eigvalsh(p.matrix)[-1] > 1.0 - 1e-12
    g = random_state(lay, "ginibre_mixed", seed=0)
    assert np.linalg.eigvalsh(g.matrix)[0] > 0.0
    with pytest.raises(ValueError):
        random_state(lay, "bogus", seed=0)


def test_maximally_entangled():
    s = maximally_entangled(3)
    assert abs(entanglement_entropy(s) - math.log2(3)) < 1e-10


# ---------------------------------------------------------------------------
# serialization


def test_state_serialization_bit_exact(tmp_path):
    s = random_state(SystemLayout([(0, 2), (1, 3)]), "ginibre_mixed", seed=9)
    path = tmp_path / "state.json"
    save_state(s, path)
    loaded = load_state(path)
    assert loaded.layout == s.layout
    assert np.array_equal(loaded.matrix, s.matrix)


def test_state_dict_format_guard():
    doc = state_to_dict(singlet())
    doc["format"] = "nope"
    with pytest.raises(ValueError):
        state_from_dict(doc)


def test_n_copies():
    s = n_copies(singlet(), 3)
    assert s.total_dim == 64
    assert len(s.layout) == 6
