"""Container format: round trips, header policing, fault detection."""
import numpy as np
import pytest

from lpb import artifacts as art
from lpb import barrier as barmod
from lpb import data as datamod
from lpb import dynamics as dynmod
from lpb import harness as har
from lpb import policy as polmod
from lpb.env import VECTOR
from lpb.errors import ContractError


def _tiny_policy(seed=0):
    return polmod.make_policy(VECTOR, seed=seed, enc_hidden=(16,), nn_hidden=(32,), latent_dim=8)


def _tiny_report():
    return har.SuccessReport(
        method="EXPERT_BC", init_mode="IN_DIST", episodes=4, seed_base=7,
        perturb_p=0.1, perturb_sigma=0.3, checkpoint_epochs=[5, 10],
        rates=[0.5, 0.75], mean=0.625, std=0.125,
        outcomes=np.array([[1, 0, 1, 0], [1, 1, 1, 0]], dtype=np.float32),
        seeds=np.arange(7, 11), wall_clock_s=3.25)


def _make(kind, tmp_path):
    path = str(tmp_path / f"obj_{kind.lower()}.lpbf")
    if kind == art.DATASET:
        obj = datamod.gen_demos(2, seed_base=0)
    elif kind == art.POLICY:
        obj = _tiny_policy()
    elif kind == art.DYNAMICS:
        obj = dynmod.make_dynamics(_tiny_policy(), seed=1, hidden=(16,))
    elif kind == art.INDEX:
        pts = np.random.default_rng(0).normal(size=(50, 8))
        obj = barmod.build_index(pts, barmod.KDTREE)
    elif kind == art.REPORT:
        obj = _tiny_report()
    else:
        raise AssertionError(kind)
    return obj, path


@pytest.mark.parametrize("kind", art.KINDS)
def test_round_trip_by_kind(kind, tmp_path):
    obj, path = _make(kind, tmp_path)
    digest = art.save_artifact(obj, kind, path)
    back = art.load_artifact(path, expect_kind=kind)
    assert digest == art.checksum_of(path)

    if kind == art.DATASET:
        assert back.source == obj.source
        assert len(back.trajectories) == len(obj.trajectories)
        for a, b in zip(obj.trajectories, back.trajectories):
            np.testing.assert_array_equal(a.obs.astype(np.float32), b.obs)
            np.testing.assert_array_equal(a.actions.astype(np.float32), b.actions)
            assert (a.success, a.seed, a.init_mode) == (b.success, b.seed, b.init_mode)
        assert back.provenance == obj.provenance
    elif kind == art.POLICY:
        x = np.random.default_rng(3).normal(size=(5, obj.t_o * obj.obs_dim)).astype(np.float32)
        np.testing.assert_array_equal(polmod.encode_stack(obj, x), polmod.encode_stack(back, x))
        assert back.schedule.K == obj.schedule.K
        assert (back.t_o, back.t_p, back.t_a) == (obj.t_o, obj.t_p, obj.t_a)
    elif kind == art.DYNAMICS:
        z = np.random.default_rng(4).normal(size=8).astype(np.float32)
        a = np.random.default_rng(5).uniform(-1, 1, size=(16, 2)).astype(np.float32)
        np.testing.assert_array_equal(
            dynmod.predict(obj, z, a).data, dynmod.predict(back, z, a).data)
        assert back.encoder_checksum == obj.encoder_checksum
    elif kind == art.INDEX:
        assert back.backend == obj.backend
        q = np.random.default_rng(6).normal(size=8)
        i0, d0 = barmod.nearest(obj, q)
        i1, d1 = barmod.nearest(back, q)
        assert i0 == i1
        assert d1 == pytest.approx(d0, rel=1e-6)
    elif kind == art.REPORT:
        assert back.method == obj.method
        np.testing.assert_array_equal(back.outcomes, obj.outcomes)
        np.testing.assert_array_equal(back.seeds, obj.seeds)
        assert back.rates == obj.rates


def test_save_is_deterministic(tmp_path):
    obj = _tiny_policy()
    p1, p2 = str(tmp_path / "a.lpbf"), str(tmp_path / "b.lpbf")
    art.save_artifact(obj, art.POLICY, p1)
    art.save_artifact(obj, art.POLICY, p2)
    assert (tmp_path / "a.lpbf").read_bytes() == (tmp_path / "b.lpbf").read_bytes()


def test_report_wall_clock_zeroed_on_disk(tmp_path):
    rep = _tiny_report()
    assert rep.wall_clock_s == 3.25
    path = str(tmp_path / "r.lpbf")
    art.save_artifact(rep, art.REPORT, path)
    back = art.load_artifact(path)
    assert back.wall_clock_s == 0.0
    _, meta = art.peek(path)
    assert meta["wall_clock_s"] == 0.0


def test_extra_meta_lands_in_provenance_info(tmp_path):
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path, extra_meta={"seed": 12, "note": "x"})
    kind, meta = art.peek(path)
    assert kind == art.POLICY
    assert meta["provenance_info"] == {"seed": 12, "note": "x"}


def test_kind_of_recognizes_objects():
    assert art.kind_of(_tiny_policy()) == art.POLICY
    assert art.kind_of(_tiny_report()) == art.REPORT
    with pytest.raises(ContractError):
        art.kind_of(object())


def test_save_rejects_kind_object_mismatch(tmp_path):
    with pytest.raises(ContractError):
        art.save_artifact(_tiny_policy(), art.REPORT, str(tmp_path / "x.lpbf"))
    with pytest.raises(ContractError):
        art.save_artifact(_tiny_policy(), "NOPE", str(tmp_path / "x.lpbf"))


def test_load_expect_kind_mismatch(tmp_path):
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    with pytest.raises(art.KindError) as e:
        art.load_artifact(path, expect_kind=art.INDEX)
    assert e.value.offset == 6


def _saved_policy_bytes(tmp_path):
    path = str(tmp_path / "v.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    return path, bytearray((tmp_path / "v.lpbf").read_bytes())


def _rewrite(path, data):
    with open(path, "wb") as fh:
        fh.write(bytes(data))


def test_bad_magic(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    data[0] = ord("X")
    _rewrite(path, data)
    with pytest.raises(art.MagicError) as e:
        art.load_artifact(path)
    assert e.value.offset == 0


def test_unsupported_version(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    data[4] = 99
    _rewrite(path, data)
    with pytest.raises(art.VersionError) as e:
        art.load_artifact(path)
    assert e.value.offset == 4


def test_unknown_kind_byte(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    data[6] = 200
    _rewrite(path, data)
    with pytest.raises(art.KindError) as e:
        art.load_artifact(path)
    assert e.value.offset == 6


def test_truncation_reports_expected_bytes(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    _rewrite(path, data[: len(data) // 2])
    with pytest.raises(art.TruncationError) as e:
        art.load_artifact(path)
    assert e.value.offset == len(data) // 2
    assert "expected" in str(e.value)


def test_payload_flip_fails_checksum(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    data[len(data) // 2] ^= 0xFF
    _rewrite(path, data)
    with pytest.raises(art.ChecksumError) as e:
        art.load_artifact(path)
    assert e.value.offset == len(data) - 8


def test_trailing_garbage_detected(tmp_path):
    path, data = _saved_policy_bytes(tmp_path)
    _rewrite(path, data + b"\x00" * 5)
    with pytest.raises(art.TruncationError):
        art.load_artifact(path)


def test_shape_mismatch_between_meta_and_blocks(tmp_path):
    # reassemble with a consistent checksum but a lying shape declaration
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    with open(path, "rb") as fh:
        kind, meta, blocks = art._parse(fh.read())
    meta["encoder"]["widths"][0] += 1
    _rewrite(path, art._assemble(kind, meta, blocks))
    with pytest.raises(art.ShapeMismatchError) as e:
        art.load_artifact(path)
    assert e.value.offset == 11


def test_missing_block_detected(tmp_path):
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    with open(path, "rb") as fh:
        kind, meta, blocks = art._parse(fh.read())
    _rewrite(path, art._assemble(kind, meta, blocks[:-1]))
    with pytest.raises(art.ShapeMismatchError):
        art.load_artifact(path)


def test_extra_block_detected(tmp_path):
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    with open(path, "rb") as fh:
        kind, meta, blocks = art._parse(fh.read())
    _rewrite(path, art._assemble(kind, meta, blocks + [np.zeros(3, dtype=np.float32)]))
    with pytest.raises(art.ShapeMismatchError):
        art.load_artifact(path)


def test_checksum_of_short_file(tmp_path):
    path = tmp_path / "short.lpbf"
    path.write_bytes(b"abc")
    with pytest.raises(art.TruncationError):
        art.checksum_of(str(path))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    art.save_artifact(_tiny_policy(), art.POLICY, str(tmp_path / "p.lpbf"))
    leftovers = [p.name for p in tmp_path.iterdir() if p.name.startswith(".lpbf-tmp-")]
    assert leftovers == []


def test_peek_does_not_decode_payload(tmp_path):
    path = str(tmp_path / "p.lpbf")
    art.save_artifact(_tiny_policy(), art.POLICY, path)
    kind, meta = art.peek(path)
    assert kind == art.POLICY
    assert meta["latent_dim"] == 8
    assert meta["encoder"]["widths"] == [14, 16, 8]
