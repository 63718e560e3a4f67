import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from motlab.attention import build_mask, global_attention, mask_from_spans
from motlab.core import MixedSequence


def brute_attention(q, k, v, allowed, n_heads):
    n, D = q.shape
    dk = D // n_heads
    out = np.zeros((n, D))
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            s = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dk) if allowed[i, j] else -math.inf for j in range(n)]
            m = max(s)
            w = [math.exp(x - m) if x > -math.inf else 0.0 for x in s]
            z = sum(w)
            for j in range(n):
                out[i, sl] += w[j] / z * v[j, sl].numpy()
    return out


def test_causal_lower_triangular():
    m = mask_from_spans("causal", 3)
    assert (m.allowed == np.tril(np.ones((3, 3), bool))).all()


def test_hybrid_example():
    a = mask_from_spans("hybrid", 5, [(2, 4)]).allowed
    assert a[2, 3] and not a[1, 3] and a[4, 2]
    assert a[3, 2] and a[2, 1] and not a[2, 4]


def test_hybrid_no_spans_is_causal():
    assert (mask_from_spans("hybrid", 6, []).allowed == mask_from_spans("causal", 6).allowed).all()


def test_overlapping_spans_rejected():
    with pytest.raises(ValueError, match="overlap"):
        mask_from_spans("hybrid", 8, [(1, 4), (3, 6)])


def test_build_mask_from_sequence():
    seq = MixedSequence(np.zeros(5), np.zeros(5), image_spans=((2, 4, 1, 4),))
    assert build_mask("hybrid", seq).allowed[2, 3]


def test_single_token_returns_value():
    v = torch.randn(1, 4)
    out = global_attention(torch.randn(1, 4), torch.randn(1, 4), v, torch.ones(1, 1, dtype=torch.bool), 2)
    assert torch.allclose(out, v, atol=1e-15)


def test_identical_keys_average_values():
    k = torch.ones(2, 4)
    v = torch.randn(2, 4)
    out = global_attention(torch.randn(2, 4), k, v, torch.ones(2, 2, dtype=torch.bool), 1)
    assert torch.allclose(out, v.mean(0).expand(2, 4), atol=1e-14)


@pytest.mark.parametrize("n_heads", [1, 2])
def test_brute_force_oracle(n_heads):
    g = torch.Generator().manual_seed(n_heads)
    q, k, v = (torch.randn(4, 4, generator=g) for _ in range(3))
    allowed = torch.from_numpy(mask_from_spans("hybrid", 4, [(1, 3)]).allowed)
    out = global_attention(q, k, v, allowed, n_heads)
    assert np.abs(out.numpy() - brute_attention(q, k, v, allowed.numpy(), n_heads)).max() < 1e-12


def test_rows_sum_to_one():
    from motlab.numerics import masked_softmax
    allowed = torch.from_numpy(mask_from_spans("hybrid", 7, [(2, 5)]).allowed)
    w = masked_softmax(torch.randn(7, 7), allowed)
    assert torch.all((w.sum(-1) - 1).abs() < 1e-12)


# ---------------------------------------------------------------------------
# Properties over random span layouts


@st.composite
def layouts(draw):
    n = draw(st.integers(2, 14))
    spans, i = [], 0
    while i < n - 1:
        if draw(st.booleans()):
            length = draw(st.integers(1, max(1, min(4, n - i - 1))))
            spans.append((i + 1, i + 1 + length))
            i += length + 2
        else:
            i += 1
    spans = [s for s in spans if s[1] <= n]
    return n, spans


def perturbed_outputs(n, spans, j, seed):
    g = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(n, 4, generator=g) for _ in range(3))
    allowed = mask_from_spans("hybrid", n, spans).tensor()
    base = global_attention(q, k, v, allowed, 2)
    q2, k2, v2 = q.clone(), k.clone(), v.clone()
    for t in (q2, k2, v2):
        t[j] += torch.randn(4, generator=g)
    return allowed, base, global_attention(q2, k2, v2, allowed, 2)


@given(layouts(), st.integers(0, 10 ** 6), st.data())
def test_future_perturbation_invariance(layout, seed, data):
    n, spans = layout
    j = data.draw(st.integers(0, n - 1))
    allowed, base, pert = perturbed_outputs(n, spans, j, seed)
    for i in range(n):
        if i != j and not allowed[i, j]:
            assert torch.equal(base[i], pert[i])


@given(layouts(), st.integers(0, 10 ** 6))
def test_hybrid_intra_image_bidirectional(layout, seed):
    n, spans = layout
    for start, end in spans:
        # perturbing the last patch moves the first patch when the image has two or more patches
        allowed, base, pert = perturbed_outputs(n, spans, end - 1, seed)
        for i in range(start):
            assert torch.equal(base[i], pert[i])
        if end - start >= 2:
            assert not torch.equal(base[start], pert[start])
