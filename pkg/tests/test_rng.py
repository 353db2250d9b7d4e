from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from randomgen import Philox

from smallnoise import rng

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF, 0xFFFFFFFF), (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = rng.philox4x32([ctr], key)[0]
    assert tuple(int(v) for v in out) == expected


def _randomgen_block(ctr, key):
    value = ctr[0] | ctr[1] << 32 | ctr[2] << 64 | ctr[3] << 96
    # randomgen increments the counter before producing its first block
    bg = Philox(key=key, counter=(value - 1) % (1 << 128), number=4, width=32)
    return tuple(int(v) for v in bg.random_raw(4))


@given(st.tuples(*[st.integers(0, 2**32 - 1)] * 4), st.integers(0, 2**64 - 1))
def test_philox_matches_randomgen(ctr, key):
    assert tuple(int(v) for v in rng.philox4x32([ctr], key)[0]) == _randomgen_block(ctr, key)


def test_uniforms_open_interval_and_shape():
    u = rng.uniforms(3, np.arange(1000), 7, 5)
    assert u.shape == (1000, 5)
    assert np.all((u > 0) & (u < 1))


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**40))
def test_uniforms_pure_function_of_counter(seed, step, stream):
    a = rng.uniforms(seed, [stream], step, 3)
    batch = rng.uniforms(seed, [stream + 1, stream, 0], step, 3)
    np.testing.assert_array_equal(a[0], batch[1])


def test_domains_and_levels_are_disjoint():
    base = rng.uniforms(0, np.arange(64), 0, 2)
    for kw in ({"domain": rng.DOMAIN_INITIAL}, {"domain": rng.DOMAIN_AUX}, {"level": 1}):
        assert not np.any(base == rng.uniforms(0, np.arange(64), 0, 2, **kw))


def test_normals_moments():
    z = rng.normals(11, np.arange(200_000), 0, 1).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / z.size)


@pytest.mark.parametrize("kw", [{"step": -1}, {"step": 2**32}, {"level": 64}])
def test_counter_range_errors(kw):
    args = {"step": 0, "level": 0} | kw
    with pytest.raises(ValueError):
        rng.uniforms(0, [0], args["step"], 1, level=args["level"])


def test_negative_stream_rejected():
    with pytest.raises(ValueError):
        rng.uniforms(0, np.array([-1]), 0, 1)
