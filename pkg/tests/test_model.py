import numpy as np
import pytest

from alignfuse.data import (
    CLS_ID,
    PatchGrid,
    TokenSequence,
    build_vocab,
    patchify,
    tokenize,
)
from alignfuse.errors import ConfigError, DimensionError, VocabError
from alignfuse.model import AlignFuseModel, ModelConfig
from alignfuse.tensor import RngStream, Tensor, finite_diff_check


def tiny_config(**kw):
    defaults = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                    patch_size=2, volume_side=4, vocab_size=12, l_max=8,
                    n_classes=3)
    defaults.update(kw)
    return ModelConfig(**defaults)


def tiny_inputs(cfg, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    vol = rng.uniform(0, 1, (cfg.volume_side,) * 3)
    patches = patchify(vol, cfg.patch_size)
    ids = np.zeros(cfg.l_max, dtype=np.int64)
    ids[0] = CLS_ID
    n_real = 5
    ids[1:n_real] = rng.integers(4, cfg.vocab_size, n_real - 1)
    mask = np.zeros(cfg.l_max, dtype=bool)
    mask[:n_real] = True
    return patches, TokenSequence(ids=ids, pad_mask=mask, length=n_real)


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_mask_ratio_range(self):
        with pytest.raises(ConfigError):
            ModelConfig(mask_ratio=1.0)

    def test_roundtrip(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbedImage:
    def test_row_count(self):
        cfg = tiny_config(patch_size=8, volume_side=16)
        model = AlignFuseModel(cfg, seed=0)
        patches = patchify(np.zeros((16, 16, 16)), 8)
        assert model.embed_image(patches).shape == (9, cfg.d_model)

    def test_zero_patches_zero_lp_gives_pe_plus_cls(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        model.params["img.lp.w"].data[:] = 0.0
        patches = patchify(np.zeros((4, 4, 4)), 2)
        h = model.embed_image(patches)
        pe = model.params["img.pe"].data
        cls = model.params["img.cls"].data
        assert np.allclose(h.data[0], cls + pe[0])
        assert np.allclose(h.data[1:], pe[1:])

    def test_differs_only_where_patches_differ(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        p1, _ = tiny_inputs(cfg, seed=1)
        p2 = PatchGrid(patches=p1.patches.copy(), side=p1.side,
                       patch_size=p1.patch_size)
        p2.patches[3] += 1.0
        h1 = model.embed_image(p1).data
        h2 = model.embed_image(p2).data
        diff_rows = np.where(np.abs(h1 - h2).sum(axis=1) > 0)[0]
        assert np.array_equal(diff_rows, [4])  # row 0 is [CLS]

    def test_shape_mismatch(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        with pytest.raises(DimensionError):
            model.embed_image(patchify(np.zeros((8, 8, 8)), 2))


class TestEmbedText:
    def test_identical_inputs_identical_output(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        _, toks = tiny_inputs(cfg)
        assert np.array_equal(model.embed_text(toks).data,
                              model.embed_text(toks).data)

    def test_pad_rows_carry_pad_embedding(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        toks = TokenSequence(ids=np.array([CLS_ID] + [0] * 7),
                             pad_mask=np.array([True] + [False] * 7),
                             length=1)
        h = model.embed_text(toks).data
        pad_emb = model.params["txt.emb"].data[0]
        pe = model.params["txt.pe"].data
        assert np.allclose(h[1:], pad_emb + pe[1:])

    def test_swapping_tokens_permutes_lookup(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        _, toks = tiny_inputs(cfg, seed=2)
        ids2 = toks.ids.copy()
        ids2[1], ids2[2] = ids2[2], ids2[1]
        toks2 = TokenSequence(ids=ids2, pad_mask=toks.pad_mask, length=toks.length)
        pe = model.params["txt.pe"].data
        h1 = model.embed_text(toks).data - pe
        h2 = model.embed_text(toks2).data - pe
        assert np.allclose(h1[1], h2[2]) and np.allclose(h1[2], h2[1])

    def test_out_of_range_id(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        toks = TokenSequence(ids=np.array([CLS_ID, 99] + [0] * 6),
                             pad_mask=np.array([True, True] + [False] * 6),
                             length=2)
        with pytest.raises(VocabError):
            model.embed_text(toks)


class TestApplyMask:
    def setup_method(self):
        self.cfg = tiny_config(patch_size=2, volume_side=6)  # 27 patches
        self.model = AlignFuseModel(self.cfg, seed=0)
        self.h = self.model.embed_image(tiny_inputs(self.cfg)[0])

    def test_ratio_zero_is_identity(self):
        h2, idx = self.model.apply_mask(self.h, "img", RngStream(0), ratio=0.0)
        assert h2 is self.h and idx.size == 0

    def test_exact_mask_count(self):
        h2, idx = self.model.apply_mask(self.h, "img", RngStream(1), ratio=0.5)
        assert idx.size == 13  # floor(0.5 * 27)

    def test_seed_determinism(self):
        _, i1 = self.model.apply_mask(self.h, "img", RngStream(7))
        _, i2 = self.model.apply_mask(self.h, "img", RngStream(7))
        assert np.array_equal(i1, i2)

    @pytest.mark.parametrize("seed", range(20))
    def test_cls_never_masked(self, seed):
        _, idx = self.model.apply_mask(self.h, "img", RngStream(seed), ratio=0.9)
        assert 0 not in idx

    def test_masked_rows_are_mask_embedding_plus_pe(self):
        h2, idx = self.model.apply_mask(self.h, "img", RngStream(3))
        expected = (self.model.params["img.mask"].data
                    + self.model.params["img.pe"].data[idx])
        assert np.allclose(h2.data[idx], expected)
        kept = np.setdiff1d(np.arange(self.h.shape[0]), idx)
        assert np.array_equal(h2.data[kept], self.h.data[kept])


class TestEncoders:
    def test_empty_stack_is_identity(self):
        cfg = tiny_config(n_enc_layers=0)
        model = AlignFuseModel(cfg, seed=0)
        patches, _ = tiny_inputs(cfg)
        h = model.embed_image(patches)
        z = model.encode_unimodal(h, "img")
        assert np.array_equal(z.data, h.data)

    def test_attention_rows_sum_to_one(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        _, toks = tiny_inputs(cfg)
        rec = []
        model.encode_unimodal(model.embed_text(toks), "txt",
                              pad_mask=toks.pad_mask, record_attn=rec)
        for att in rec:
            assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-9)

    def test_pad_keys_get_exactly_zero(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        _, toks = tiny_inputs(cfg)
        rec = []
        model.encode_unimodal(model.embed_text(toks), "txt",
                              pad_mask=toks.pad_mask, record_attn=rec)
        for att in rec:
            assert np.all(att[:, :, ~toks.pad_mask] == 0.0)

    def test_grounded_with_zero_ca_output_equals_unimodal(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        h = model.embed_image(patches)
        z_other = model.encode_unimodal(model.embed_text(toks), "txt",
                                        pad_mask=toks.pad_mask)
        for i in range(cfg.n_enc_layers):
            model.params[f"img.ca.{i}.wo.w"].data[:] = 0.0
            model.params[f"img.ca.{i}.wo.b"].data[:] = 0.0
        zg = model.encode_grounded(h, z_other, "img", other_pad_mask=toks.pad_mask)
        zu = model.encode_unimodal(h, "img")
        assert np.allclose(zg.data, zu.data)

    def test_grounded_sensitive_to_other_modality(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        h = model.embed_image(patches)
        z_other = model.encode_unimodal(model.embed_text(toks), "txt",
                                        pad_mask=toks.pad_mask)
        z1 = model.encode_grounded(h, z_other, "img",
                                   other_pad_mask=toks.pad_mask).data
        bumped = Tensor(z_other.data + np.eye(1, z_other.shape[0], 2).T * 0.5)
        z2 = model.encode_grounded(h, bumped, "img",
                                   other_pad_mask=toks.pad_mask).data
        assert not np.array_equal(z1, z2)


class TestWeightSharing:
    def _outputs(self, model, patches, toks):
        h = model.embed_image(patches)
        z_txt = model.encode_unimodal(model.embed_text(toks), "txt",
                                      pad_mask=toks.pad_mask)
        zu = model.encode_unimodal(h, "img").data.copy()
        zg = model.encode_grounded(h, z_txt, "img",
                                   other_pad_mask=toks.pad_mask).data.copy()
        return zu, zg

    def test_sa_weight_touches_both_paths(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        zu0, zg0 = self._outputs(model, patches, toks)
        model.params["img.enc.0.sa.wq.w"].data[0, 0] += 0.25
        zu1, zg1 = self._outputs(model, patches, toks)
        assert not np.array_equal(zu0, zu1)
        assert not np.array_equal(zg0, zg1)

    def test_ca_weight_touches_only_grounded(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        zu0, zg0 = self._outputs(model, patches, toks)
        model.params["img.ca.0.wq.w"].data[0, 0] += 0.25
        zu1, zg1 = self._outputs(model, patches, toks)
        assert np.array_equal(zu0, zu1)
        assert not np.array_equal(zg0, zg1)

    def test_text_side_sharing(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        h_txt = model.embed_text(toks)
        z_img = model.encode_unimodal(model.embed_image(patches), "img")

        def outs():
            zu = model.encode_unimodal(h_txt, "txt", pad_mask=toks.pad_mask)
            zg = model.encode_grounded(h_txt, z_img, "txt", pad_mask=toks.pad_mask)
            return zu.data.copy(), zg.data.copy()

        zu0, zg0 = outs()
        model.params["txt.enc.0.ffn.l1.w"].data[0, 0] += 0.25
        zu1, zg1 = outs()
        assert not np.array_equal(zu0, zu1) and not np.array_equal(zg0, zg1)
        model.params["txt.ca.0.wv.w"].data[0, 0] += 0.25
        zu2, zg2 = outs()
        assert np.array_equal(zu1, zu2) and not np.array_equal(zg1, zg2)


class TestDecode:
    def test_image_head_shape(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        z = model.encode_unimodal(model.embed_image(patches), "img")
        out = model.decode_modality(z, "img")
        assert out.shape == (cfg.n_patches, cfg.patch_voxels)

    def test_zero_blocks_is_linear_head(self):
        cfg = tiny_config(n_dec_layers=0)
        model = AlignFuseModel(cfg, seed=0)
        patches, _ = tiny_inputs(cfg)
        z = model.embed_image(patches)
        out = model.decode_modality(z, "img")
        w = model.params["img.dec.head.w"].data
        b = model.params["img.dec.head.b"].data
        assert np.allclose(out.data, (z.data @ w + b)[1:])

    def test_text_logits_make_distributions(self):
        from alignfuse.tensor import softmax as sm

        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        _, toks = tiny_inputs(cfg)
        z = model.encode_unimodal(model.embed_text(toks), "txt",
                                  pad_mask=toks.pad_mask)
        logits = model.decode_modality(z, "txt", pad_mask=toks.pad_mask)
        assert logits.shape == (cfg.l_max, cfg.vocab_size)
        probs = sm(logits, axis=-1).data
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)


class TestFuseClassify:
    def test_zero_weights_give_zero_logits(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        for name in ("fusion.l1.w", "fusion.l1.b", "fusion.l2.w", "fusion.l2.b"):
            model.params[name].data[:] = 0.0
        logits = model.fuse_classify(Tensor(np.ones(8)), Tensor(np.ones(8)))
        assert np.all(logits.data == 0.0)

    def test_concat_order_matters(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        zi = Tensor(np.linspace(-1, 1, 8))
        zt = Tensor(np.linspace(1, -1, 8) * 0.5)
        a = model.fuse_classify(zi, zt).data
        b = model.fuse_classify(zt, zi).data
        assert not np.allclose(a, b)

    def test_hand_computed_mlp(self):
        cfg = tiny_config(d_model=2, n_heads=1, fusion_hidden=2, n_classes=2)
        model = AlignFuseModel(cfg, seed=0)
        model.params["fusion.l1.w"].data = np.array(
            [[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.5, 0.5]])
        model.params["fusion.l1.b"].data = np.array([0.1, -0.2])
        model.params["fusion.l2.w"].data = np.array([[1.0, 2.0], [3.0, -1.0]])
        model.params["fusion.l2.b"].data = np.array([0.0, 1.0])
        zi, zt = Tensor([1.0, 2.0]), Tensor([3.0, -1.0])
        # hidden = relu([1,2,3,-1] @ w1 + b1) = relu([3.6, -1.7]) = [3.6, 0]
        # logits = [3.6*1 + 0*3, 3.6*2 - 0] + [0, 1] = [3.6, 8.2]
        logits = model.fuse_classify(zi, zt)
        assert np.allclose(logits.data, [3.6, 8.2])


class TestForwardTrainingPass:
    def test_mask_ratio_zero_convention(self):
        cfg = tiny_config(mask_ratio=0.0)
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        out = model.forward_training_pass(patches, toks, RngStream(0))
        assert out.masked_patch_idx.size == 0
        assert out.masked_token_idx.size == 0
        assert out.recon_image.shape == (cfg.n_patches, cfg.patch_voxels)

    def test_bitwise_determinism(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        o1 = model.forward_training_pass(patches, toks, RngStream(5))
        o2 = model.forward_training_pass(patches, toks, RngStream(5))
        assert np.array_equal(o1.class_logits.data, o2.class_logits.data)
        assert np.array_equal(o1.recon_image.data, o2.recon_image.data)
        assert np.array_equal(o1.recon_text_logits.data, o2.recon_text_logits.data)
        assert np.array_equal(o1.masked_patch_idx, o2.masked_patch_idx)

    def test_masked_token_positions_are_real(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        out = model.forward_training_pass(patches, toks, RngStream(9))
        assert out.masked_token_idx.min() >= 1
        assert toks.pad_mask[out.masked_token_idx].all()

    def test_shared_weight_gets_grad_from_either_pass(self):
        from alignfuse.losses import (
            LossWeights,
            classification_loss,
            image_recon_loss,
            itc_loss,
            text_recon_loss,
        )

        cfg = tiny_config()
        patches, toks = tiny_inputs(cfg)
        name = "img.enc.0.sa.wv.w"

        def grad_norm(w_contrast, w_recon):
            model = AlignFuseModel(cfg, seed=0)
            out = model.forward_training_pass(patches, toks, RngStream(0))
            contrast = itc_loss(out.z_image_cls.reshape(1, -1),
                                out.z_text_cls.reshape(1, -1),
                                model.temperature())
            recon = image_recon_loss(patches.patches, out.recon_image,
                                     out.masked_patch_idx) \
                + text_recon_loss(toks, out.recon_text_logits,
                                  out.masked_token_idx)
            cls = classification_loss(out.class_logits, 1)
            loss = w_contrast * (contrast + cls) + w_recon * recon
            loss.backward()
            return float(np.abs(model.params[name].grad).sum())

        # either pass alone reaches the shared SA weight
        assert grad_norm(1.0, 0.0) > 0.0
        assert grad_norm(0.0, 1.0) > 0.0


class TestAttentionMap:
    def test_single_patch_heat(self):
        cfg = tiny_config(patch_size=4, volume_side=4)
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        heat, _ = model.extract_attention_map(patches, toks)
        assert heat.shape == (1, 1, 1)
        assert np.allclose(heat, 1.0)

    def test_heat_sums_to_one_and_grid_shape(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        heat, txt = model.extract_attention_map(patches, toks)
        assert heat.shape == (cfg.grid_side,) * 3
        assert np.isclose(heat.sum(), 1.0, atol=1e-6)
        assert np.isclose(txt.sum(), 1.0, atol=1e-6)
        assert txt.shape == (cfg.l_max,)
        assert np.all(heat >= 0) and np.all(txt >= 0)
        assert txt[0] == 0.0
        assert np.all(txt[~toks.pad_mask] == 0.0)

    def test_matches_recorded_attention(self):
        cfg = tiny_config()
        model = AlignFuseModel(cfg, seed=0)
        patches, toks = tiny_inputs(cfg)
        rec = []
        model.encode_unimodal(model.embed_image(patches), "img", record_attn=rec)
        row = rec[-1][:, 0, 1:].mean(axis=0)
        heat, _ = model.extract_attention_map(patches, toks)
        assert np.allclose(heat.reshape(-1), row / row.sum())


class TestFullModelGradient:
    def test_full_loss_finite_difference(self):
        from alignfuse.losses import LossWeights
        from alignfuse.train import batch_loss, Example

        cfg = tiny_config()  # d_model=8, N_e=1, N_d=1, P=8, L_max=8
        model = AlignFuseModel(cfg, seed=3)
        exs = [Example(*tiny_inputs(cfg, seed=s), label=s % 3) for s in (1, 2)]

        checked = ["img.enc.0.sa.wq.w", "txt.ca.0.wk.w", "fusion.l1.w",
                   "img.mask", "txt.emb", "log_tau", "img.dec.head.w"]
        for name in checked:
            p = model.params[name]

            def f(t):
                for q in model.params.values():
                    q.grad = None
                return batch_loss(model, exs, LossWeights(),
                                  RngStream(11)).total

            err = finite_diff_check(f, p, max_elements=6, rng=RngStream(1))
            assert err < 1e-4, f"{name}: {err}"
