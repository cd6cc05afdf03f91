import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.seeding import generator, replica_seeds


@given(master=st.integers(0, 2**64 - 1), n=st.integers(1, 2000))
def test_replica_seeds_distinct(master, n):
    s = replica_seeds(master, n, "x")
    assert len(np.unique(s)) == n


def test_prefix_stable():
    # growing the replica count does not change existing seeds
    a = replica_seeds(7, 10, "exp")
    b = replica_seeds(7, 20, "exp")
    assert np.array_equal(a, b[:10])


def test_streams_depend_on_experiment_and_purpose():
    assert not np.array_equal(replica_seeds(1, 5, "a"), replica_seeds(1, 5, "b"))
    assert not np.array_equal(replica_seeds(1, 5, "a"), replica_seeds(1, 5, "a", "environment"))
    assert generator(3, "a").random() == generator(3, "a").random()
