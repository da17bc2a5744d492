"""Hypothesis strategies shared by the property tests."""

import numpy as np
from hypothesis import strategies as st


@st.composite
def gradient_problems(draw, min_k=2, max_k=6, max_extra_dim=6, max_cond=1e3):
    """(G as d x K, p on the simplex) with a well-conditioned Gram."""
    seed = draw(st.integers(0, 2**31 - 1))
    K = draw(st.integers(min_k, max_k))
    d = K + draw(st.integers(0, max_extra_dim))
    rng = np.random.default_rng(seed)
    while True:
        G = rng.standard_normal((d, K)) * rng.uniform(0.3, 3.0, size=K)
        if np.linalg.cond(G.T @ G) < max_cond:
            break
    logits = rng.normal(scale=draw(st.floats(0.0, 2.0)), size=K)
    p = np.exp(logits - logits.max())
    return G, p / p.sum()
