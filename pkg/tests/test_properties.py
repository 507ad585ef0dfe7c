"""Property-based checks over randomly drawn shapes and values."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptfill.evaluation import recall_at_k
from promptfill.numerics import precision
from promptfill.prompts import PromptPool, select_prompts, top_k
from promptfill.training.checkpoint import Checkpoint, decode, encode
from promptfill.training.optim import lr_schedule

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@st.composite
def square_scores(draw):
    n = draw(st.integers(1, 8))
    return draw(arrays(np.float64, (n, n), elements=st.integers(-3, 3).map(float) | finite))


@given(square_scores())
def test_recall_monotone_in_k(scores):
    n = len(scores)
    values = [recall_at_k(scores, k) for k in range(1, n + 1)]
    assert values == sorted(values)
    assert values[-1] == 1.0


@given(square_scores(), st.data())
def test_recall_invariant_under_joint_permutation_without_ties(scores, data):
    n = len(scores)
    scores = scores + np.arange(n * n).reshape(n, n) * 1e-6  # break ties so the index rule cannot matter
    perm = np.array(data.draw(st.permutations(range(n))))
    k = data.draw(st.integers(1, n))
    assert recall_at_k(scores, k) == recall_at_k(scores[np.ix_(perm, perm)], k)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=finite), st.data())
def test_top_k_is_sorted_prefix(scores, data):
    k = data.draw(st.integers(1, scores.shape[1]))
    idx = top_k(scores, k)
    picked = np.take_along_axis(scores, idx, axis=1)
    assert (np.diff(picked, axis=1) <= 0).all()
    rest = np.ones_like(scores, dtype=bool)
    np.put_along_axis(rest, idx, False, axis=1)
    for row in range(len(scores)):
        if rest[row].any():
            assert picked[row, -1] >= scores[row, rest[row]].max()


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.integers(1, 16), st.integers(1, 6))
def test_selection_counts_add_up(seed, size, d):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, size + 1))
    with precision("float64"):
        pool = PromptPool(size, d, "language", rng)
        select_prompts(pool, rng.standard_normal((3, d)), k)
    assert pool.selection_counts.sum() == 3 * k


@given(st.integers(1, 10_000), st.floats(1e-6, 1.0), st.floats(0.0, 0.9), st.data())
def test_schedule_bounded_by_peak(total, peak, warmup, data):
    step = data.draw(st.integers(0, total))
    assert 0.0 <= lr_schedule(step, total, peak, warmup) <= peak


@settings(max_examples=50)
@given(st.dictionaries(st.text("abcdef/._", min_size=1, max_size=8),
                       st.sampled_from([np.float32, np.float64]).flatmap(
                           lambda dt: arrays(dt, st.tuples(st.integers(0, 3), st.integers(1, 3)))),
                       max_size=4),
       st.integers(0, 10**6))
def test_checkpoint_roundtrip_is_bitwise(tensors, step):
    back = decode(encode(Checkpoint({"d": 4}, tensors, None, step)))
    assert back.step == step and back.config == {"d": 4}
    assert set(back.tensors) == set(tensors)
    for name, arr in tensors.items():
        assert back.tensors[name].dtype == arr.dtype
        assert back.tensors[name].tobytes() == arr.tobytes()
