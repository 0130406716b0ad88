import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logomarl import container
from logomarl import dataset as ds_io
from logomarl.container import (BadFormatError, EnvMismatchError, SectionMismatchError, TruncatedFileError,
                                VersionMismatchError)
from logomarl.dataset import BehaviorSpec, collect, concat, split
from logomarl.envs import EnvSpec, ParticleEnv

SPEC = EnvSpec()


def test_collect_counts():
    d = collect(SPEC, "medium", 10, 0)
    assert len(d) == 250
    assert d.n_episodes == 10
    assert d.obs.shape == (250, 2, SPEC.obs_dim)
    assert d.done.sum() == 10


def test_tier_monotonicity():
    means = {tier: np.mean([collect(SPEC, tier, 10, s).episode_returns().mean() for s in range(5)])
             for tier in ("random", "medium", "expert")}
    assert means["random"] < means["medium"] < means["expert"]


def test_collect_deterministic_file(tmp_path):
    ds_io.save(collect(SPEC, "medium", 3, 4), tmp_path / "a.logo")
    ds_io.save(collect(SPEC, "medium", 3, 4), tmp_path / "b.logo")
    assert (tmp_path / "a.logo").read_bytes() == (tmp_path / "b.logo").read_bytes()


def test_transitions_replay_exactly():
    d = collect(SPEC, "medium-replay", 5, 1)
    env = ParticleEnv(SPEC)
    s_next = env.transition(d.state, np.clip(d.action, -1, 1))
    assert s_next.tobytes() == d.next_state.tobytes()
    np.testing.assert_array_equal(env.reward(d.next_state).astype(np.float32), d.reward)
    np.testing.assert_array_equal(env.observe_all(d.next_state), d.next_obs)


def test_mixed_preserves_provenance():
    d = collect(SPEC, "mixed", 4, 0)
    assert set(d.source.astype(int)) == {1, 2}
    replay = collect(SPEC, "medium-replay", 10, 0)
    assert np.mean(replay.source == 0) == pytest.approx(0.2)


def test_concat_renumbers_and_rejects_other_spec():
    a, b = collect(SPEC, "random", 2, 0), collect(SPEC, "expert", 2, 0)
    c = concat([a, b], "mixed")
    assert c.n_episodes == 4 and len(c) == len(a) + len(b)
    other = collect(EnvSpec(n_agents=3), "random", 1, 0)
    with pytest.raises(EnvMismatchError):
        concat([a, other], "mixed")


def test_transition_view():
    d = collect(SPEC, "expert", 1, 0)
    t = d[3]
    assert t.o_t.shape == (2, SPEC.obs_dim) and t.priority is None
    assert isinstance(t.done, bool)


def test_unknown_tier():
    with pytest.raises(ValueError):
        BehaviorSpec("great")


def test_save_load_round_trip(tmp_path):
    d = collect(SPEC, "medium", 2, 0)
    d.priority = np.linspace(0, 1, len(d)).astype(np.float32)
    ds_io.save(d, tmp_path / "d.logo")
    back = ds_io.load(tmp_path / "d.logo", expect_spec=SPEC)
    assert back.equals(d)
    ds_io.save(back, tmp_path / "e.logo")
    assert (tmp_path / "d.logo").read_bytes() == (tmp_path / "e.logo").read_bytes()


def test_load_errors(tmp_path):
    d = collect(SPEC, "medium", 1, 0)
    path = tmp_path / "d.logo"
    ds_io.save(d, path)
    blob = path.read_bytes()
    (tmp_path / "magic.logo").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(BadFormatError, match="bad format"):
        ds_io.load(tmp_path / "magic.logo")
    (tmp_path / "trunc.logo").write_bytes(blob[:-7])
    with pytest.raises(TruncatedFileError):
        ds_io.load(tmp_path / "trunc.logo")
    (tmp_path / "ver.logo").write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(VersionMismatchError):
        ds_io.load(tmp_path / "ver.logo")
    with pytest.raises(EnvMismatchError, match="env mismatch"):
        ds_io.load(path, expect_spec=EnvSpec(n_agents=3))
    container.save(tmp_path / "w.logo", "WMDL", {"x": np.zeros(2)})
    with pytest.raises(SectionMismatchError):
        ds_io.load(tmp_path / "w.logo")


def test_split_counts_and_partition():
    d = collect(SPEC, "random", 100, 0)
    train, val = split(d, 0.1, 0)
    assert train.n_episodes == 90 and val.n_episodes == 10
    assert not set(np.unique(train.episode)) & set(np.unique(val.episode))
    assert len(train) + len(val) == len(d)
    merged = np.sort(np.concatenate([train.state[:, 0], val.state[:, 0]]))
    np.testing.assert_array_equal(merged, np.sort(d.state[:, 0]))
    _, val2 = split(d, 0.1, 1)
    assert not np.array_equal(np.unique(val.episode), np.unique(val2.episode))
    with pytest.raises(ValueError):
        split(d, 0.5, 0)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcdefgh/_", min_size=1, max_size=12),
                       st.lists(st.integers(0, 3), min_size=0, max_size=3), max_size=5),
       st.integers(0, 1000))
def test_container_round_trip_bitwise(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {k: rng.normal(size=tuple(v)).astype(np.float32) for k, v in shapes.items()}
    blob = container.encode("PLCY", tensors)
    tag, back = container.decode(blob, "PLCY")
    assert tag == "PLCY" and list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert container.encode(tag, back) == blob


def test_container_rejects_trailing_bytes_and_bad_tag():
    blob = container.encode("DATA", {"a": np.ones(2)})
    with pytest.raises(BadFormatError):
        container.decode(blob + b"\0")
    with pytest.raises(ValueError):
        container.encode("TOOLONG", {})
