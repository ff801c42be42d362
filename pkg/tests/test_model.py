import json

import numpy as np
import pytest

from slotcap import autodiff as ad
from slotcap import (ModelConfig, init_params, attend, refine, step,
                     save_checkpoint, load_checkpoint)
from slotcap.model import (AttentionParams, build_region_features,
                           initial_state, region_feature, run_step_on_record)
from slotcap.training import sequence_loss

from conftest import make_box, make_proposal, make_record


def run_step(params, record, vocab, token=0):
    return run_step_on_record(record, params, initial_state(params.config),
                              token)


class TestAttend:
    def _attn(self, seed, df, d, m):
        rng = np.random.default_rng(seed)
        return AttentionParams(
            feat_proj=ad.Param("f", rng.normal(size=(df, m))),
            query_proj=ad.Param("q", rng.normal(size=(d, m))),
            score=ad.Param("s", rng.normal(size=m)))

    def test_identical_rows_give_uniform_weights(self):
        attn = self._attn(0, 4, 3, 5)
        feats = np.tile(np.array([1.0, -1.0, 0.5, 2.0]), (6, 1))
        weights, _ = attend(feats, ad.const(np.ones(3)), attn)
        assert np.allclose(weights.value, 1 / 6)

    def test_single_row(self):
        attn = self._attn(1, 4, 3, 5)
        feats = np.array([[1.0, 2.0, 3.0, 4.0]])
        weights, context = attend(feats, ad.const(np.ones(3)), attn)
        assert np.allclose(weights.value, [1.0])
        assert np.allclose(context.value, feats[0])

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        attn = self._attn(2, 4, 3, 5)
        weights, _ = attend(rng.normal(size=(7, 4)),
                            ad.const(rng.normal(size=3)), attn)
        assert weights.value.sum() == pytest.approx(1.0, abs=1e-12)

    def test_empty_features_error(self):
        attn = self._attn(3, 4, 3, 5)
        with pytest.raises(ValueError):
            attend(np.zeros((0, 4)), ad.const(np.ones(3)), attn)


class TestRegionFeature:
    def test_shape_and_blocks(self, tiny_setup):
        params, record, _, _ = tiny_setup
        config = params.config
        v = region_feature(record.proposals[0], record, params)
        assert v.value.shape == (config.d_r,)
        assert np.array_equal(v.value[:config.d_p],
                              record.proposals[0].pooled_feature)

    def test_same_category_and_box_share_blocks(self, tiny_setup):
        params, record, _, _ = tiny_setup
        config = params.config
        a = record.proposals[0]
        b = make_proposal(a.box, a.category, 0.5, config.d_p,
                          np.zeros(config.d_p))
        va = region_feature(a, record, params).value
        vb = region_feature(b, record, params).value
        assert np.array_equal(va[config.d_p:], vb[config.d_p:])
        assert np.array_equal(vb[:config.d_p], np.zeros(config.d_p))

    def test_unknown_category_errors(self, tiny_setup):
        params, record, _, _ = tiny_setup
        bad = make_proposal(make_box(0, 0, 5, 5), "submarine", 0.9,
                            params.config.d_p)
        with pytest.raises(ValueError):
            region_feature(bad, record, params)


class TestStep:
    def test_distributions_sum_to_one(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        out, _ = run_step(params, record, vocab)
        assert out.region_dist.value.sum() == pytest.approx(1.0, abs=1e-9)
        assert out.textual_dist.value.sum() == pytest.approx(1.0, abs=1e-9)
        for row in out.plurality.value:
            assert row.sum() == pytest.approx(1.0, abs=1e-9)
        for dist in out.finegrained:
            assert dist.value.sum() == pytest.approx(1.0, abs=1e-9)

    def test_zero_score_vector_gives_uniform_region_dist(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        params.ptr_score.value[:] = 0.0
        out, _ = run_step(params, record, vocab)
        n = out.n_regions + 1
        assert np.allclose(out.region_dist.value, 1.0 / n)
        assert np.allclose(out.pointer_logits.value, 0.0)
        assert float(out.sentinel_logit.value) == 0.0

    def test_identical_region_features_get_equal_probs(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        d_p = params.config.d_p
        feat = np.ones(d_p)
        box = make_box(10, 10, 40, 40)
        rec = make_record(
            proposals=[make_proposal(box, "dog", 0.9, d_p, feat)] * 3,
            gt_boxes=[(box, "dog")], grid=record.grid_features)
        out, _ = run_step(params, rec, vocab)
        probs = out.region_dist.value[:-1]
        assert np.allclose(probs, probs[0])

    def test_sentinel_is_last_and_block_renormalizes(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        out, _ = run_step(params, record, vocab)
        dist = out.region_dist.value
        assert out.sentinel_prob == dist[-1]
        # the first N entries, renormalized, must equal softmax(u) exactly
        u = out.pointer_logits.value
        block = dist[:-1] / dist[:-1].sum()
        expect = np.exp(u - u.max())
        expect /= expect.sum()
        assert np.allclose(block, expect, atol=1e-12)

    def test_permuting_regions_permutes_region_dist(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        out, _ = run_step(params, record, vocab)
        rec_swapped = make_record(
            proposals=[record.proposals[1], record.proposals[0]],
            gt_boxes=record.gt_boxes, grid=record.grid_features)
        out2, _ = run_step(params, rec_swapped, vocab)
        assert np.allclose(out2.region_dist.value,
                           out.region_dist.value[[1, 0, 2]], atol=1e-12)
        assert np.allclose(out2.textual_dist.value, out.textual_dist.value,
                           atol=1e-12)

    def test_zero_proposal_image_is_sentinel_only(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        rec = make_record(proposals=[], gt_boxes=[], grid=record.grid_features)
        out, _ = run_step(params, rec, vocab)
        assert out.n_regions == 0
        assert np.allclose(out.region_dist.value, [1.0])
        assert out.plurality is None and out.finegrained == []

    def test_missing_grid_defaults_to_zeros(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        rec = make_record(proposals=record.proposals, gt_boxes=record.gt_boxes,
                          grid=None)
        out, _ = run_step(params, rec, vocab)
        assert np.isfinite(out.region_dist.value).all()


class TestRefine:
    def test_single_class_category(self, tiny_setup):
        params, record, vocab, toy_map = tiny_setup
        v = region_feature(record.proposals[0], record, params)
        h = ad.const(np.zeros(params.config.d))
        _, fg = refine(v, h, "bus", params)
        assert np.allclose(fg.value, [1.0])

    def test_plurality_shape(self, tiny_setup):
        params, record, _, _ = tiny_setup
        v = region_feature(record.proposals[0], record, params)
        h = ad.const(np.zeros(params.config.d))
        plur, fg = refine(v, h, "dog", params)
        assert plur.value.shape == (2,)
        assert plur.value.sum() == pytest.approx(1.0, abs=1e-9)
        assert fg.value.shape == (3,)

    def test_matches_step_output(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        out, _ = run_step(params, record, vocab)
        v = region_feature(record.proposals[0], record, params)
        plur, fg = refine(v, out.h, record.proposals[0].category, params)
        assert np.allclose(plur.value, out.plurality.value[0], atol=1e-12)
        assert np.allclose(fg.value, out.finegrained[0].value, atol=1e-12)


class TestParameterSharing:
    def test_query_proj_feeds_pointer_and_sentinel(self, tiny_setup):
        params, record, vocab, _ = tiny_setup
        before, _ = run_step(params, record, vocab)
        params.ptr_query_proj.value += 0.05
        after, _ = run_step(params, record, vocab)
        assert not np.allclose(before.pointer_logits.value,
                               after.pointer_logits.value)
        assert float(before.sentinel_logit.value) != float(after.sentinel_logit.value)

    def test_single_param_object(self, tiny_setup):
        params, _, _, _ = tiny_setup
        names = [p.name for p in params.all().values()]
        assert names.count("ptr_query_proj") == 1
        assert names.count("ptr_score") == 1
        assert params.all()["ptr_query_proj"] is params.ptr_query_proj


class TestGradients:
    def test_step_loss_matches_finite_differences(self, tiny_setup):
        """Spot check at tiny dims; the acceptance suite runs the full one."""
        params, record, vocab, toy_map = tiny_setup
        from slotcap.corpus import annotate_record
        annotate_record(record, toy_map, vocab)
        tokens = record.annotated[0]
        assert any(t.kind == "visual" for t in tokens)

        def loss():
            return sequence_loss(record, tokens, params, vocab).node

        subset = [params.all()[n] for n in
                  ("ptr_query_proj", "ptr_score", "sentinel_proj",
                   "lstm1_in_w", "word_embed", "fg_embed", "plur_out",
                   "loc_proj_w", "cat_embed", "txt_out")]
        err = ad.grad_check(loss, subset, eps=2e-4)
        assert err < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_setup, tmp_path):
        params, _, vocab, _ = tiny_setup
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, vocab.words())
        loaded, config, words = load_checkpoint(path)
        assert words == vocab.words()
        assert config == params.config
        for name, p in params.all().items():
            assert np.array_equal(p.value, loaded.all()[name].value)
        path2 = tmp_path / "ckpt2.json"
        save_checkpoint(path2, loaded, words)
        assert path.read_bytes() == path2.read_bytes()

    def test_missing_param_rejected(self, tiny_setup, tmp_path):
        params, _, vocab, _ = tiny_setup
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, vocab.words())
        obj = json.loads(path.read_text())
        del obj["params"]["txt_out"]
        path.write_text(json.dumps(obj))
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=0)
    config = ModelConfig(d=8, m=4, d_p=3, d_l=2, d_g=3, vocab_size=10,
                         embed_dim=4, grid_count=2, k_max=2)
    assert config.d_r == 8
