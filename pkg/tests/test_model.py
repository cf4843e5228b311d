import math

import numpy as np
import pytest

from dansnr import numcore as nc
from dansnr.instances import _History
from dansnr.model import (
    Activations,
    AttentionTrace,
    ModelConfig,
    ModelParams,
    attention_block,
    build_trace,
    candidate_repr,
    embed_checkins,
    export_trace,
    forward,
    init_params,
    make_batch,
    position_encoding,
    score_batch,
    score_instances,
    time_bucket,
    vanilla_attention,
)
from dansnr.numcore import Tensor

from factory import oracle_score, random_instance, tiny_params


class TestTimeBucket:
    @pytest.mark.parametrize(
        "hours,bucket",
        [(0.0, 0), (0.5, 0), (0.999, 0), (1.0, 1), (1.9, 1), (2.0, 2), (3.0, 2), (4.0, 3), (7.99, 3), (8.0, 4), (1000.0, 10)],
    )
    def test_table(self, hours, bucket):
        assert time_bucket(hours) == bucket

    def test_clamp(self):
        assert time_bucket(2.0**14, 16) == 15
        assert time_bucket(2.0**40, 16) == 15
        assert time_bucket(100.0, 4) == 3

    def test_negative_errors(self):
        with pytest.raises(ValueError):
            time_bucket(-0.1)

    def test_vectorised(self):
        np.testing.assert_array_equal(time_bucket(np.array([0.5, 3.0, 4.0])), [0, 2, 3])


class TestPositionEncoding:
    def test_spot_value(self):
        assert position_encoding(1, 4)[0] == pytest.approx(0.841471, abs=1e-6)

    def test_position_zero(self):
        pe = position_encoding(0, 8)
        assert np.all(pe[0::2] == 0.0) and np.all(pe[1::2] == 1.0)

    def test_formula(self):
        for d in (4, 8, 256):
            for p in (1, 2, 7, 50, 201):
                pe = position_encoding(p, d)
                for i in range(d // 2):
                    assert abs(pe[2 * i] - math.sin(p / 10000 ** (2 * i / d))) <= 1e-12
                    assert abs(pe[2 * i + 1] - math.cos(p / 10000 ** (2 * i / d))) <= 1e-12

    def test_pythagorean(self):
        pe = position_encoding(np.arange(1, 30), 16)
        np.testing.assert_allclose(pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2, 1.0, atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(d=10, heads=3), dict(stc_len=60, ltsc_len=50), dict(layers=0), dict(variant="nope"), dict(scale="odd")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_defaults(self):
        c = ModelConfig()
        assert (c.d, c.heads, c.layers, c.stc_len, c.ltsc_len, c.time_buckets) == (256, 8, 6, 50, 200, 16)


class TestEmbedding:
    def test_all_zero_gives_half(self, rng):
        p = tiny_params(rng, d=4, heads=2)
        for t in p.tensors.values():
            t.data[...] = 0.0
        p.user_table[...] = 0.0
        p.loc_table[...] = 0.0
        out = embed_checkins(p, np.array([0, 1]), np.array([2, 3]), np.array([0, 5]), np.array([1, 2])).data
        assert np.all(out == 0.5)

    def test_stc_and_ltsc_forms_differ(self, rng):
        p = tiny_params(rng, d=4, heads=2)
        args = (np.array([1]), np.array([2]), np.array([3]))
        a = embed_checkins(p, *args, np.array([2])).data
        b = embed_checkins(p, *args).data
        assert not np.allclose(a, b)
        assert np.all((a > 0) & (a < 1))

    def test_oracle_d4(self, rng):
        p = tiny_params(rng, d=4, heads=2)
        T = {k: v.data for k, v in p.tensors.items()}
        u, v, b, pos = 2, 5, 3, 4
        z = T["W_u"] @ p.user_table[u] + T["W_v"] @ T["poi_table"][v] + T["W_l"] @ p.loc_table[v] + T["W_t"] @ T["time_table"][b]
        z = z + T["W_p"] @ np.array([math.sin(pos), math.cos(pos), math.sin(pos / 100), math.cos(pos / 100)])
        want = 1 / (1 + np.exp(-z))
        got = embed_checkins(p, np.array([u]), np.array([v]), np.array([b]), np.array([pos])).data[0]
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_unknown_indices(self, rng):
        p = tiny_params(rng)
        with pytest.raises(IndexError):
            embed_checkins(p, np.array([0]), np.array([99]), np.array([0]))
        with pytest.raises(IndexError):
            embed_checkins(p, np.array([99]), np.array([0]), np.array([0]))


class TestCandidate:
    def test_equals_checkin_at_same_time_and_position(self, rng):
        p = tiny_params(rng)
        users = np.array([1, 3])
        cands = np.array([[4, 7], [2, 2]])
        nxt = np.array([3, 6])
        cs, cl = candidate_repr(p, users, cands, nxt)
        for b in range(2):
            for c in range(2):
                e_s = embed_checkins(p, users[b : b + 1], cands[b, c : c + 1], np.array([0]), nxt[b : b + 1]).data[0]
                e_l = embed_checkins(p, users[b : b + 1], cands[b, c : c + 1], np.array([0])).data[0]
                np.testing.assert_allclose(cs.data[b, c], e_s, atol=1e-15)
                np.testing.assert_allclose(cl.data[b, c], e_l, atol=1e-15)

    def test_poi_embedding_dependence(self, rng):
        p = tiny_params(rng)
        p["poi_table"].data[1] = p["poi_table"].data[0] + 1.0
        p.loc_table[1] = p.loc_table[0]
        _, cl = candidate_repr(p, np.array([0]), np.array([[0, 1]]), None)
        assert not np.allclose(cl.data[0, 0], cl.data[0, 1])
        p["W_v"].data[...] = 0.0
        _, cl = candidate_repr(p, np.array([0]), np.array([[0, 1]]), None)
        np.testing.assert_array_equal(cl.data[0, 0], cl.data[0, 1])


class TestAttentionBlock:
    def run(self, p, C, mask):
        rec = []
        out = attention_block(p, Tensor(C), mask, "s", 1, rec)
        return out.data, rec[0]

    def test_single_position(self, rng):
        p = tiny_params(rng)
        _, A = self.run(p, rng.random((1, 1, 8)), np.ones((1, 1), bool))
        np.testing.assert_array_equal(A, np.ones((1, 2, 1, 1)))

    def test_identical_rows(self, rng):
        p = tiny_params(rng)
        row = rng.random(8)
        _, A = self.run(p, np.tile(row, (1, 3, 1)), np.ones((1, 3), bool))
        np.testing.assert_allclose(A, 1 / 3, atol=1e-15)

    def test_mask_contract(self, rng):
        p = tiny_params(rng)
        mask = np.array([[True, False, True, True, False]])
        out, A = self.run(p, rng.random((1, 5, 8)), mask)
        assert np.all(A[..., ~mask[0]] == 0.0)
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-12)
        # masked positions also do not affect real outputs
        C2 = rng.random((1, 5, 8))
        C = rng.random((1, 5, 8))
        C2[:, mask[0]] = C[:, mask[0]]
        o1, _ = self.run(p, C, mask)
        o2, _ = self.run(p, C2, mask)
        np.testing.assert_allclose(o1[:, mask[0]], o2[:, mask[0]], atol=1e-13)

    def test_all_masked_errors(self, rng):
        p = tiny_params(rng)
        with pytest.raises(ValueError):
            self.run(p, rng.random((1, 3, 8)), np.zeros((1, 3), bool))

    def test_head_output_is_head_slice_for_singleton(self, rng):
        p = tiny_params(rng, jitter=False)
        C = rng.random((1, 1, 8))
        # with W_att = I the residual doubles C before the norm
        p["s1.W_att"].data[...] = np.eye(8)
        p["s1.W_2"].data[...] = 0.0
        out, _ = self.run(p, C, np.ones((1, 1), bool))
        x = 2 * C[0, 0]
        ln = (x - x.mean()) / np.sqrt(x.var() + 1e-6)
        ln2 = (ln - ln.mean()) / np.sqrt(ln.var() + 1e-6)
        np.testing.assert_allclose(out[0, 0], ln2, atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 8])
    def test_head_count_extremes(self, rng, heads):
        p = tiny_params(rng, heads=heads)
        mask = np.array([[True, True, True, False]])
        out, A = self.run(p, rng.random((1, 4, 8)), mask)
        assert out.shape == (1, 4, 8) and A.shape == (1, heads, 4, 4)
        np.testing.assert_allclose(A[0][:, mask[0]].sum(-1), 1.0, atol=1e-12)


class TestVanilla:
    def test_single(self, rng):
        C = rng.random((1, 1, 8))
        h, a = vanilla_attention(Tensor(C), Tensor(rng.random((1, 1, 8))), np.ones((1, 1), bool), 8)
        assert a.data[0, 0, 0] == 1.0
        np.testing.assert_array_equal(h.data[0, 0], C[0, 0])

    def test_identical_rows_divided_by_n(self, rng):
        row = rng.random(8)
        C = np.tile(row, (1, 4, 1))
        h, a = vanilla_attention(Tensor(C), Tensor(rng.random((1, 2, 8))), np.ones((1, 4), bool), 8)
        np.testing.assert_allclose(a.data, 0.25, atol=1e-15)
        np.testing.assert_allclose(h.data[0, 0], row / 4, atol=1e-15)

    def test_sum_to_one_with_padding(self, rng):
        for n in range(1, 12):
            mask = np.zeros((1, 12), bool)
            mask[0, :n] = True
            _, a = vanilla_attention(Tensor(rng.random((1, 12, 8))), Tensor(rng.random((1, 3, 8))), mask, 8)
            np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)
            assert np.all(a.data[..., n:] == 0.0)

    def test_plain_mean_flag(self, rng):
        C = Tensor(rng.random((1, 5, 8)))
        cv = Tensor(rng.random((1, 1, 8)))
        m = np.ones((1, 5), bool)
        h1, _ = vanilla_attention(C, cv, m, 8, literal_mean=True)
        h0, _ = vanilla_attention(C, cv, m, 8, literal_mean=False)
        np.testing.assert_allclose(h1.data * 5, h0.data, atol=1e-15)


class TestScore:
    def test_zero_channels_leave_uv(self, rng):
        p = tiny_params(rng)
        for ch in ("s", "l"):
            p[f"{ch}1.ln2_gain"].data[...] = 0.0
            p[f"{ch}1.ln2_bias"].data[...] = 0.0
        inst = random_instance(rng)
        s, _ = forward(inst, 3, p)
        assert s == pytest.approx(p.user_table[inst.user] @ p["poi_table"].data[3], abs=1e-14)

    @pytest.mark.parametrize("layers", [1, 2])
    @pytest.mark.parametrize("variant", ["full", "self-only", "social-only", "long-only", "short-only"])
    def test_loop_oracle(self, rng, layers, variant):
        p = tiny_params(rng, layers=layers, variant=variant)
        for trial in range(3):
            inst = random_instance(rng, n_stc=int(rng.integers(1, 6)), n_ltsc=int(rng.integers(1, 11)))
            if variant == "self-only" or variant == "long-only":
                if len(inst.own_pois) == 0:
                    continue
            for cand in (inst.positive, int(inst.negatives[0])):
                s, _ = forward(inst, cand, p)
                assert abs(s - oracle_score(p, inst, cand)) < 1e-10

    def test_per_head_scale_oracle(self, rng):
        p = tiny_params(rng, scale="per-head", literal_mean=False)
        inst = random_instance(rng)
        s, _ = forward(inst, 2, p)
        assert abs(s - oracle_score(p, inst, 2)) < 1e-10

    def test_batch_equals_single(self, rng):
        p = tiny_params(rng)
        insts = [random_instance(rng, n_stc=int(rng.integers(1, 5)), n_ltsc=int(rng.integers(1, 9)), iid=i) for i in range(6)]
        cands = np.array([np.concatenate([[i.positive], i.negatives]) for i in insts])
        batch = score_instances(p, insts, cands)
        for b, inst in enumerate(insts):
            for c, v in enumerate(cands[b]):
                assert abs(batch[b, c] - forward(inst, int(v), p)[0]) < 1e-12

    def test_padding_invariance(self, rng):
        p = tiny_params(rng)
        insts = [random_instance(rng, n_stc=2, n_ltsc=3, iid=i) for i in range(3)]
        cands = np.array([np.concatenate([[i.positive], i.negatives]) for i in insts])
        a = score_batch(p, make_batch(insts, p.cfg), cands).data
        b = score_batch(p, make_batch(insts, p.cfg, pad_stc=4, pad_ltsc=8), cands).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_no_friends_full_equals_self(self, rng):
        full = tiny_params(rng, seed=3)
        rng2 = np.random.default_rng(1234)
        self_only = tiny_params(rng2, seed=3, variant="self-only")
        for name, t in full.tensors.items():
            self_only[name].data[...] = t.data
        self_only.user_table[...] = full.user_table
        self_only.loc_table[...] = full.loc_table
        inst = random_instance(rng, friends=False)
        for cand in range(5):
            assert forward(inst, cand, full)[0] == forward(inst, cand, self_only)[0]

    def test_social_only_ignores_own_history_and_stc(self, rng):
        p = tiny_params(rng, variant="social-only")
        assert "s1.W_att" not in p.tensors
        inst = random_instance(rng)
        if not np.any(inst.ltsc_users != inst.user):
            inst.ltsc_users[0] = 1
        s0 = forward(inst, 1, p)[0]
        inst.stc_pois[:] = (inst.stc_pois + 1) % 15
        own = inst.ltsc_users == inst.user
        inst.ltsc_pois[own] = (inst.ltsc_pois[own] + 3) % 15
        assert forward(inst, 1, p)[0] == s0

    def test_social_only_falls_back_to_own(self, rng):
        p = tiny_params(rng, variant="social-only")
        inst = random_instance(rng, friends=False)
        assert abs(forward(inst, 2, p)[0] - oracle_score(p, inst, 2)) < 1e-10

    def test_storage_order_canonical(self, rng):
        users = rng.integers(0, 5, size=30)
        pois = rng.integers(0, 9, size=30)
        times = rng.integers(0, 10, size=30)  # many ties
        base = _History(users, pois, times)
        for _ in range(5):
            perm = rng.permutation(30)
            h = _History(users[perm], pois[perm], times[perm])
            for a, b in zip(base.before(8, 20), h.before(8, 20)):
                np.testing.assert_array_equal(a, b)

    def test_empty_stc_errors(self, rng):
        p = tiny_params(rng)
        inst = random_instance(rng)
        inst.stc_pois = inst.stc_pois[:0]
        with pytest.raises(ValueError):
            forward(inst, 0, p)

    def test_empty_history_errors(self, rng):
        p = tiny_params(rng)
        inst = random_instance(rng)
        for f in ("ltsc_users", "ltsc_pois", "ltsc_times", "own_pois", "own_times"):
            setattr(inst, f, getattr(inst, f)[:0])
        with pytest.raises(ValueError):
            forward(inst, 0, p)
        short = tiny_params(rng, variant="short-only")
        assert math.isfinite(forward(inst, 0, short)[0])

    def test_candidate_shape_errors(self, rng):
        p = tiny_params(rng)
        inst = random_instance(rng)
        with pytest.raises(ValueError):
            score_batch(p, make_batch([inst], p.cfg), np.array([1, 2]))
        with pytest.raises(IndexError):
            score_batch(p, make_batch([inst], p.cfg), np.array([[99]]))


class TestTrace:
    def test_single_checkin(self, rng):
        p = tiny_params(rng)
        inst = random_instance(rng, n_stc=1)
        _, tr = forward(inst, 0, p, trace=True)
        assert tr.stc_self == [[[[1.0]], [[1.0]]]]
        assert tr.stc_vanilla == [1.0]

    def test_weights_and_owner_groups(self, rng):
        p = tiny_params(rng, layers=2)
        inst = random_instance(rng, n_ltsc=8)
        s, tr = forward(inst, 4, p, trace=True)
        assert s == tr.score and len(tr.stc_self) == 2
        w = np.array(tr.ltsc_vanilla)
        assert np.all((w >= 0) & (w <= 1)) and abs(w.sum() - 1) < 1e-12
        assert sorted(x for v in tr.by_owner.values() for x in v) == sorted(tr.ltsc_vanilla)
        for owner, ws in tr.by_owner.items():
            if int(owner) != inst.user:
                assert tr.friend_means[owner] == pytest.approx(np.mean(ws), abs=1e-15)
        assert str(inst.user) not in tr.friend_means

    def test_friend_mean_arithmetic(self, rng):
        p = tiny_params(rng)
        inst = random_instance(rng, n_ltsc=2, friends=False)
        inst.ltsc_users[:] = 1
        batch = make_batch([inst], p.cfg)
        acts = Activations()
        score_batch(p, batch, np.array([[0]]), acts)
        acts.ltsc_vanilla = np.array([[[0.2, 0.4]]])
        tr = build_trace(inst, 0, 0.0, batch, acts, p.cfg)
        assert tr.friend_means == {"1": pytest.approx(0.3, abs=1e-15)}

    def test_round_trip_bit_exact(self, rng):
        p = tiny_params(rng, layers=2)
        _, tr = forward(random_instance(rng), 1, p, trace=True)
        back = AttentionTrace.from_json(export_trace(tr))
        assert back == tr
        assert export_trace(back) == export_trace(tr)


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        p = tiny_params(rng, layers=2)
        p.save(tmp_path / "a.ckpt", {"user_table": "u.json"})
        q = ModelParams.load(tmp_path / "a.ckpt")
        assert q.cfg == p.cfg
        for k, t in p.tensors.items():
            assert q[k].data.tobytes() == t.data.tobytes()
        assert q.user_table.tobytes() == p.user_table.tobytes()
        q.save(tmp_path / "b.ckpt", {"user_table": "u.json"})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes().startswith(b"DANSNR-CKPT 1\n")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello\n")
        with pytest.raises(ValueError):
            ModelParams.load(tmp_path / "x")

    def test_frozen_tables_not_trainable(self, rng):
        p = tiny_params(rng)
        assert all(t.shape != p.user_table.shape or k == "poi_table" for k, t in p.trainable().items())
        assert "user_table" not in p.trainable() and "loc_table" not in p.trainable()

    def test_only_used_channels_created(self, rng):
        assert not any(k.startswith("s") for k in tiny_params(rng, variant="long-only").tensors)
        assert not any(k.startswith("l") for k in tiny_params(rng, variant="short-only").tensors)

    def test_init_is_glorot_and_seeded(self, rng):
        ut, lt = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
        cfg = ModelConfig(d=8, heads=2, layers=1, stc_len=4, ltsc_len=8)
        a, b = init_params(cfg, 5, ut, lt, seed=7), init_params(cfg, 5, ut, lt, seed=7)
        for k in a.tensors:
            assert a[k].data.tobytes() == b[k].data.tobytes()
        assert np.abs(a["W_u"].data).max() <= math.sqrt(6 / 16)
        assert np.all(a["s1.ln1_gain"].data == 1.0) and np.all(a["s1.ln1_bias"].data == 0.0)
