import numpy as np
import pytest

from stagenet.checkpoint import (
    IntegrityError,
    PseudoLogitStore,
    StageCheckpoint,
    checkpoint_hash,
    load_checkpoint,
    load_pseudo_logits,
    save_checkpoint,
    save_pseudo_logits,
)
from stagenet.engine import ParamSet, ShapeError, Tensor, ValidationError
from stagenet.network import BackboneSpec, HeadSpec, InverseSpec, build_network


def make_ckpt(seed=3, with_fisher=False):
    net, params = build_network(
        BackboneSpec(input_hw=(8, 8, 1), widths=(4, 8, 16)),
        [HeadSpec(classes=4)], inverse=InverseSpec(widths=(8, 16)), seed=seed)
    params.freeze("inverse")
    fisher = anchor = None
    if with_fisher:
        fisher = {name: [np.abs(t.data) for t in params.group(name)]
                  for name in ("shared", "new_head")}
        anchor = {name: [t.data.copy() for t in params.group(name)]
                  for name in ("shared", "new_head")}
    return StageCheckpoint(stage=2, params=params, val_error=0.125, seed=seed,
                           fisher=fisher, anchor=anchor, config_hash="abc123")


class TestCheckpointRoundTrip:
    def test_bit_identical_params(self, tmp_path):
        ckpt = make_ckpt()
        p = tmp_path / "s2.ckpt"
        save_checkpoint(str(p), ckpt)
        back = load_checkpoint(str(p))
        assert back.stage == 2 and back.seed == 3 and back.config_hash == "abc123"
        assert back.val_error == 0.125
        assert list(back.params.groups) == list(ckpt.params.groups)
        for name in ckpt.params.groups:
            for a, b in zip(ckpt.params.group(name), back.params.group(name)):
                assert a.data.tobytes() == b.data.tobytes()

    def test_frozen_groups_survive(self, tmp_path):
        ckpt = make_ckpt()
        p = tmp_path / "s.ckpt"
        save_checkpoint(str(p), ckpt)
        back = load_checkpoint(str(p))
        assert back.params.frozen == {"inverse"}
        assert all(not t.requires_grad for t in back.params.group("inverse"))

    def test_fisher_and_anchor_roundtrip(self, tmp_path):
        ckpt = make_ckpt(with_fisher=True)
        p = tmp_path / "f.ckpt"
        save_checkpoint(str(p), ckpt)
        back = load_checkpoint(str(p))
        for name in ("shared", "new_head"):
            for a, b in zip(ckpt.fisher[name], back.fisher[name]):
                assert a.astype(np.float32).tobytes() == b.tobytes()
            for a, b in zip(ckpt.anchor[name], back.anchor[name]):
                assert a.astype(np.float32).tobytes() == b.tobytes()

    def test_corruption_detected(self, tmp_path):
        ckpt = make_ckpt()
        p = tmp_path / "c.ckpt"
        save_checkpoint(str(p), ckpt)
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0xFF  # flip a payload byte
        p.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_checkpoint(str(p))

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"hello world")
        with pytest.raises(IntegrityError):
            load_checkpoint(str(p))

    def test_checkpoint_hash_changes_with_content(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(a), make_ckpt(seed=1))
        save_checkpoint(str(b), make_ckpt(seed=2))
        assert checkpoint_hash(str(a)) != checkpoint_hash(str(b))

    def test_stage_index_validated(self):
        ps = ParamSet()
        ps.add_group("g", [Tensor([1.0], requires_grad=True)])
        with pytest.raises(ValidationError):
            StageCheckpoint(stage=0, params=ps, val_error=0.0, seed=0)

    def test_fisher_alignment_validated(self):
        ps = ParamSet()
        ps.add_group("shared", [Tensor(np.zeros((2, 2)), requires_grad=True)])
        with pytest.raises(ShapeError):
            StageCheckpoint(stage=1, params=ps, val_error=0.0, seed=0,
                            fisher={"shared": [np.zeros(3)]})
        with pytest.raises(ValidationError):
            StageCheckpoint(stage=1, params=ps, val_error=0.0, seed=0,
                            fisher={"shared": [np.full((2, 2), -1.0)]})


class TestPseudoLogitStore:
    def _store(self):
        rng = np.random.default_rng(7)
        logits = {i: {"old_head_1": rng.standard_normal(4).astype(np.float32)}
                  for i in (3, 11, 0)}
        return PseudoLogitStore(stage=2, checkpoint_hash="deadbeef", logits=logits)

    def test_roundtrip_bit_identical(self, tmp_path):
        store = self._store()
        p = tmp_path / "pl.csv"
        save_pseudo_logits(str(p), store)
        back = load_pseudo_logits(str(p))
        assert back.stage == 2 and back.checkpoint_hash == "deadbeef"
        assert sorted(back.logits) == sorted(store.logits)
        for eid in store.logits:
            assert back.get(eid, "old_head_1").tobytes() == store.get(eid, "old_head_1").tobytes()

    def test_extreme_values_roundtrip(self, tmp_path):
        vals = np.array([1e-30, -1e30, 1.0000001, np.float32(1/3), 0.0], dtype=np.float32)
        store = PseudoLogitStore(stage=1, checkpoint_hash="x",
                                 logits={0: {"old_head_1": vals}})
        p = tmp_path / "pl.csv"
        save_pseudo_logits(str(p), store)
        back = load_pseudo_logits(str(p))
        assert back.get(0, "old_head_1").tobytes() == vals.tobytes()

    def test_batch_and_missing(self):
        store = self._store()
        batch = store.batch([11, 3], "old_head_1")
        assert batch.shape == (2, 4)
        with pytest.raises(ValidationError):
            store.get(99, "old_head_1")
        with pytest.raises(ValidationError):
            store.get(3, "nope")

    def test_header_required(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("example_id,head_id,logits...\n")
        with pytest.raises(IntegrityError):
            load_pseudo_logits(str(p))
