import struct

import numpy as np
import pytest

from trajcap.nn import (
    Adam, CheckpointError, CrossAttentionBlock, Linear, MLP, Module, MultiHeadAttention, Parameter,
    SelfAttentionBlock, load_checkpoint, save_checkpoint,
)
from trajcap.tensor import Tensor, backward, grad_check, tsum


class Pair(Module):
    def __init__(self, rng):
        self.a = Linear(rng, 3, 2)
        self.blocks = [Linear(rng, 2, 2, bias=False)]


def block_error(block, x_shape, seed, memory=None):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=x_shape), requires_grad=True)
    r = Tensor(rng.normal(size=x_shape))
    if memory is None:
        f = lambda t: tsum(block(t) * r)
    else:
        f = lambda t: tsum(block(t, memory) * r)
    return grad_check(f, x)


class TestModule:
    def test_named_parameters_walk_lists(self):
        names = [n for n, _ in Pair(np.random.default_rng(0)).named_parameters()]
        assert names == ["a.weight", "a.bias", "blocks.0.weight"]

    def test_init_is_seeded(self):
        a = Pair(np.random.default_rng(7)).state_dict()
        b = Pair(np.random.default_rng(7)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_init_statistics(self):
        w = Linear(np.random.default_rng(0), 400, 200).weight.data
        assert abs(w.std() - 0.05) < 1e-3
        assert not Linear(np.random.default_rng(0), 4, 4).bias.data.any()
        assert not Linear(np.random.default_rng(0), 4, 4, zero=True).weight.data.any()

    def test_load_state_dict_rejects_mismatch(self):
        m = Pair(np.random.default_rng(0))
        state = m.state_dict()
        del state["a.bias"]
        with pytest.raises(KeyError, match="a.bias"):
            m.load_state_dict(state)


class TestBlocks:
    def test_self_attention_block(self):
        blk = SelfAttentionBlock(np.random.default_rng(0), 8, 2)
        assert block_error(blk, (2, 4, 8), 1) < 1e-5

    def test_cross_attention_block(self):
        rng = np.random.default_rng(2)
        blk = CrossAttentionBlock(rng, 8, 2)
        assert block_error(blk, (2, 3, 8), 3, memory=Tensor(rng.normal(size=(2, 5, 8)))) < 1e-5

    def test_cross_attention_memory_grad(self):
        rng = np.random.default_rng(4)
        blk = CrossAttentionBlock(rng, 8, 2)
        x = Tensor(rng.normal(size=(1, 3, 8)))
        r = Tensor(rng.normal(size=(1, 3, 8)))
        mem = Tensor(rng.normal(size=(1, 5, 8)), requires_grad=True)
        assert grad_check(lambda t: tsum(blk(x, t) * r), mem) < 1e-5

    def test_mlp(self):
        assert block_error(MLP(np.random.default_rng(5), 4, 16), (3, 4), 6) < 1e-5

    def test_attention_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(np.random.default_rng(0), 10, 4)

    def test_cross_attention_output_follows_query_count(self):
        rng = np.random.default_rng(0)
        out = CrossAttentionBlock(rng, 8, 2)(Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.normal(size=(2, 7, 8))))
        assert out.shape == (2, 3, 8)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = Adam([("p", p)], lr=0.1)
        backward(tsum(p * Tensor([3.0, -0.5])))
        opt.step()
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_frozen_parameters_untouched(self):
        rng = np.random.default_rng(0)
        m = Pair(rng)
        m.a.set_frozen(True)
        before = m.state_dict()
        opt = Adam(m.named_parameters(), lr=0.1)
        for _ in range(3):
            opt.zero_grad()
            backward(tsum(m.blocks[0](m.a(Tensor(rng.normal(size=(4, 3)))))))
            opt.step()
        after = m.state_dict()
        assert np.array_equal(before["a.weight"], after["a.weight"])
        assert np.array_equal(before["a.bias"], after["a.bias"])
        assert not np.array_equal(before["blocks.0.weight"], after["blocks.0.weight"])
        # gradients still flow through frozen parameters
        assert m.a.weight.grad.any()

    def test_minimises_quadratic(self):
        p = Parameter(np.array([5.0, -3.0]))
        opt = Adam([("p", p)], lr=0.05)
        for _ in range(2000):
            opt.zero_grad()
            backward(tsum(p * p))
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestCheckpoint:
    def state(self):
        rng = np.random.default_rng(0)
        return {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5), "cube": rng.normal(size=(2, 2, 2))}

    def test_round_trip_bit_exact(self, tmp_path):
        st = self.state()
        save_checkpoint(st, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert list(back) == list(st)
        for k in st:
            assert back[k].shape == st[k].shape
            assert back[k].tobytes() == st[k].tobytes()

    def test_layout(self, tmp_path):
        save_checkpoint({"ab": np.array([1.5])}, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw == b"T2CK" + struct.pack("<III", 1, 1, 2) + b"ab" + struct.pack("<II", 1, 1) + struct.pack("<d", 1.5)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(self.state(), tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(self.state(), tmp_path / "m.ckpt")
        with open(tmp_path / "m.ckpt", "ab") as fh:
            fh.write(b"x")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_unsupported_version(self, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(b"T2CK" + struct.pack("<II", 9, 0))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(tmp_path / "m.ckpt")
