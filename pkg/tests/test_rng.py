import numpy as np
from hypothesis import given, settings, strategies as st

from kinfilter import rng


def test_chunked_draws_match_full_stream():
    full = rng.normals(7, 3, 1, 101)
    parts = np.concatenate([rng.normals(7, 3, 1, 13, start=0), rng.normals(7, 3, 1, 50, start=13),
                            rng.normals(7, 3, 1, 38, start=63)])
    assert np.array_equal(full, parts)


@given(seed=st.integers(0, 2**63), step=st.integers(0, 10**6), start=st.integers(0, 1000),
       count=st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_variate_depends_only_on_its_key(seed, step, start, count):
    whole = rng.normals(seed, step, 2, start + count)
    assert np.array_equal(whole[start:], rng.normals(seed, step, 2, count, start=start))


def test_streams_steps_channels_are_distinct():
    a = rng.normals(1, 0, 0, 64)
    assert not np.array_equal(a, rng.normals(1, 1, 0, 64))
    assert not np.array_equal(a, rng.normals(1, 0, 1, 64))
    assert not np.array_equal(a, rng.normals(1, 0, 0, 64, stream=rng.STREAM_REFERENCE))
    assert not np.array_equal(a, rng.normals(2, 0, 0, 64))


def test_gaussian_moments():
    z = rng.normals(11, 0, 0, 200000)
    assert abs(z.mean()) < 3 * 1 / np.sqrt(2e5)
    assert abs(z.var() - 1.0) < 3 * np.sqrt(2 / 2e5)
    # kurtosis close to 3
    assert abs(np.mean(z ** 4) - 3.0) < 0.05
