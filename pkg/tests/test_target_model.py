import numpy as np
import pytest

from cascade_draft.layers import causal_mask
from cascade_draft.target_model import (CacheRangeError, CapacityError, KVCache, MaskError, ModelConfig,
                                        TargetModel, ancestor_mask)

from conftest import TINY


class TestConfig:
    def test_default_taps(self):
        assert ModelConfig(num_layers=4).taps == (1, 2, 4)
        assert ModelConfig(num_layers=5).taps == (1, 3, 5)

    def test_two_layers_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(num_layers=2)

    def test_duplicate_taps_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(num_layers=4, tap_low=2, tap_mid=2)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=10, num_heads=4)


class TestForwardEquivalence:
    def test_prefill_matches_batched_training_pass(self, tiny_target, rng):
        toks = rng.integers(0, TINY.vocab_size, size=12)
        ref, _, _, high = tiny_target.forward_train(toks[None])
        logits, feats = tiny_target.forward_prefill(toks.tolist(), tiny_target.new_cache())
        np.testing.assert_allclose(logits, ref.data[0], atol=1e-5)
        np.testing.assert_allclose(feats.high, high.data[0], atol=1e-5)

    def test_incremental_matches_prefill(self, tiny_target, rng):
        toks = rng.integers(0, TINY.vocab_size, size=10).tolist()
        full, _ = tiny_target.forward_prefill(toks, tiny_target.new_cache())
        cache = tiny_target.new_cache()
        tiny_target.forward_prefill(toks[:4], cache)
        rows = [tiny_target.forward_extend([t], cache)[0][0] for t in toks[4:]]
        np.testing.assert_allclose(np.stack(rows), full[4:], atol=1e-5)

    def test_tree_matches_path_replay(self, tiny_target, rng):
        prefix = rng.integers(0, TINY.vocab_size, size=5).tolist()
        parents = [-1, 0, 0, 1, 3, 2]
        tokens = rng.integers(0, TINY.vocab_size, size=len(parents)).tolist()
        cache = tiny_target.new_cache(extra=8)
        tiny_target.forward_prefill(prefix, cache)
        logits, feats = tiny_target.forward_tree(tokens, ancestor_mask(parents), parents, cache)
        assert cache.speculative_len == len(parents)
        for i in range(len(parents)):
            path, j = [], i
            while j >= 0:
                path.append(tokens[j])
                j = parents[j]
            ref, ref_feats = tiny_target.forward_prefill(prefix + path[::-1], tiny_target.new_cache())
            np.testing.assert_allclose(logits[i], ref[-1], atol=1e-5)
            np.testing.assert_allclose(feats.mid[i], ref_feats.mid[-1], atol=1e-5)

    def test_commit_along_path_continues_like_plain_decoding(self, tiny_target, rng):
        prefix = rng.integers(0, TINY.vocab_size, size=4).tolist()
        parents, tokens = [-1, 0, 0, 2], [3, 7, 9, 11]
        cache = tiny_target.new_cache(extra=8)
        tiny_target.forward_prefill(prefix, cache)
        tiny_target.forward_tree(tokens, ancestor_mask(parents), parents, cache)
        cache.commit(3, [0, 2, 3])
        nxt, _ = tiny_target.forward_extend([5], cache)
        ref, _ = tiny_target.forward_prefill(prefix + [3, 9, 11, 5], tiny_target.new_cache())
        np.testing.assert_allclose(nxt[0], ref[-1], atol=1e-5)

    def test_forward_calls_counted(self, tiny_target):
        cache = tiny_target.new_cache()
        tiny_target.forward_prefill([1, 2, 3], cache)
        tiny_target.forward_extend([4], cache)
        assert tiny_target.forward_calls == 2

    def test_empty_extend(self, tiny_target):
        logits, feats = tiny_target.forward_extend([], tiny_target.new_cache())
        assert logits.shape == (0, TINY.vocab_size) and len(feats) == 0


class TestCacheAndMasks:
    def test_ancestor_mask_chain_is_causal(self):
        np.testing.assert_array_equal(ancestor_mask([-1, 0, 1, 2]), causal_mask(4))

    def test_ancestor_mask_rejects_forward_parent(self):
        with pytest.raises(MaskError):
            ancestor_mask([-1, 2, 0])

    def test_bad_tree_mask_rejected(self, tiny_target):
        cache = tiny_target.new_cache(extra=4)
        tiny_target.forward_prefill([1, 2], cache)
        with pytest.raises(MaskError):
            tiny_target.forward_tree([1, 2], np.ones((2, 2), bool), [-1, -1], cache)

    def test_commit_and_rollback(self):
        c = KVCache(1, 2, 8)
        c.write(0, np.arange(6.0).reshape(3, 2), np.zeros((3, 2)))
        c.advance(3)
        c.commit(2, [0, 2])
        assert c.committed_len == 2 and c.speculative_len == 0
        np.testing.assert_array_equal(c.keys[0, :2], [[0, 1], [4, 5]])
        c.advance(1)
        c.rollback()
        assert c.length == 2

    def test_commit_out_of_range(self):
        c = KVCache(1, 2, 8)
        c.advance(2)
        with pytest.raises(CacheRangeError):
            c.commit(3)
        with pytest.raises(CacheRangeError):
            c.commit(1, [5])

    def test_capacity_overflow(self):
        with pytest.raises(CapacityError):
            KVCache(1, 2, 3).reserve(4)

    def test_prefill_needs_empty_cache(self, tiny_target):
        cache = tiny_target.new_cache()
        tiny_target.forward_prefill([1], cache)
        with pytest.raises(CapacityError):
            tiny_target.forward_prefill([1], cache)


class TestWeights:
    def test_same_seed_same_digest(self):
        assert TargetModel.init(TINY, 3).parameter_digest() == TargetModel.init(TINY, 3).parameter_digest()
        assert TargetModel.init(TINY, 3).parameter_digest() != TargetModel.init(TINY, 4).parameter_digest()

    def test_round_trip(self, tmp_path, tiny_target):
        tiny_target.save_weights(tmp_path / "t.fegl")
        back = TargetModel.load_weights(tmp_path / "t.fegl", TINY)
        assert back.parameter_digest() == tiny_target.parameter_digest()

    def test_shape_mismatch(self, tmp_path, tiny_target):
        tiny_target.save_weights(tmp_path / "t.fegl")
        with pytest.raises(ValueError):
            TargetModel.load_weights(tmp_path / "t.fegl", ModelConfig(vocab_size=32, hidden_dim=32, num_layers=3,
                                                                      num_heads=2, max_positions=96))

    def test_missing_tensor(self, tmp_path, tiny_target):
        from cascade_draft.serialization import save_tensors
        arrays = {k: t.data for k, t in tiny_target.params.items() if k != "final_norm"}
        save_tensors(tmp_path / "t.fegl", arrays)
        with pytest.raises(ValueError, match="missing"):
            TargetModel.load_weights(tmp_path / "t.fegl", TINY)
