"""The alignment/fusion network.

Two unimodal transformer encoders (volumetric patches, clinical text tokens),
two cross-modal-grounded encoders that reuse the unimodal SA/FFN weights and
add per-block cross-attention into the other modality, two lightweight
decoders that reconstruct masked inputs, and a concat+MLP fusion classifier.

All parameters live in a flat name -> Tensor dict so the optimizer and the
checkpoint writer can treat them uniformly; weight sharing between the
unimodal and grounded encoders is by construction (same Tensor objects).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CLS_ID, PatchGrid, TokenSequence
from .errors import ConfigError, DimensionError
from .tensor import (
    NEG_MASK_BIAS,
    RngStream,
    Tensor,
    concat,
    layer_norm,
    softmax,
)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    patch_size: int = 8
    volume_side: int = 32
    vocab_size: int = 64
    l_max: int = 70
    n_classes: int = 3
    mask_ratio: float = 0.5
    ffn_mult: int = 4
    fusion_hidden: int | None = None
    recon_masked_only: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.volume_side % self.patch_size != 0:
            raise ConfigError("patch_size must divide volume_side")
        if self.fusion_hidden is None:
            self.fusion_hidden = self.d_model

    @property
    def grid_side(self) -> int:
        return self.volume_side // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 3

    @property
    def patch_voxels(self) -> int:
        return self.patch_size ** 3

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers, "n_dec_layers": self.n_dec_layers,
            "patch_size": self.patch_size, "volume_side": self.volume_side,
            "vocab_size": self.vocab_size, "l_max": self.l_max,
            "n_classes": self.n_classes, "mask_ratio": self.mask_ratio,
            "ffn_mult": self.ffn_mult, "fusion_hidden": self.fusion_hidden,
            "recon_masked_only": self.recon_masked_only,
            "layer_norm_eps": self.layer_norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutputs:
    z_image: Tensor            # (P+1, d) unimodal image features
    z_text: Tensor             # (L_max, d) unimodal text features
    z_image_cls: Tensor        # (d,)
    z_text_cls: Tensor         # (d,)
    class_logits: Tensor       # (n_classes,)
    recon_image: Tensor        # (P, V)
    recon_text_logits: Tensor  # (L_max, vocab); row 0 unused by the loss
    masked_patch_idx: np.ndarray  # patch indices (0-based into P)
    masked_token_idx: np.ndarray  # sequence positions (>= 1, real tokens)


def _attn_bias(pad_mask: np.ndarray | None) -> np.ndarray | None:
    """Additive key bias excluding pad positions from attention."""
    if pad_mask is None:
        return None
    return np.where(pad_mask, 0.0, NEG_MASK_BIAS)


class AlignFuseModel:
    """Config + parameter store + every forward-path operation."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(RngStream(seed))

    # -- parameter construction ----------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_linear(self, name: str, d_in: int, d_out: int, rng: RngStream) -> None:
        # fan-scaled init: std 0.02 everywhere stalls small models
        std = math.sqrt(2.0 / (d_in + d_out))
        self._add(f"{name}.w", rng.truncated_normal((d_in, d_out), std=std))
        self._add(f"{name}.b", np.zeros(d_out))

    def _add_ln(self, name: str, d: int) -> None:
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _add_block(self, name: str, rng: RngStream) -> None:
        d, f = self.config.d_model, self.config.ffn_mult * self.config.d_model
        self._add_ln(f"{name}.ln1", d)
        for proj in ("wq", "wk", "wv", "wo"):
            self._add_linear(f"{name}.sa.{proj}", d, d, rng)
        self._add_ln(f"{name}.ln2", d)
        self._add_linear(f"{name}.ffn.l1", d, f, rng)
        self._add_linear(f"{name}.ffn.l2", f, d, rng)

    def _add_ca(self, name: str, rng: RngStream) -> None:
        d = self.config.d_model
        self._add_ln(f"{name}.ln", d)
        for proj in ("wq", "wk", "wv", "wo"):
            self._add_linear(f"{name}.{proj}", d, d, rng)

    def _init_params(self, rng: RngStream) -> None:
        cfg = self.config
        d = cfg.d_model
        self._add_linear("img.lp", cfg.patch_voxels, d, rng.child(1))
        self._add("img.pe", rng.child(2).truncated_normal((cfg.n_patches + 1, d)))
        self._add("img.cls", rng.child(3).truncated_normal((d,)))
        self._add("img.mask", rng.child(4).truncated_normal((d,)))
        self._add("txt.emb", rng.child(5).truncated_normal((cfg.vocab_size, d)))
        self._add("txt.pe", rng.child(6).truncated_normal((cfg.l_max, d)))
        self._add("txt.mask", rng.child(7).truncated_normal((d,)))
        for m, base in (("img", 10), ("txt", 20)):
            for i in range(cfg.n_enc_layers):
                self._add_block(f"{m}.enc.{i}", rng.child(base * 100 + i))
                self._add_ca(f"{m}.ca.{i}", rng.child(base * 100 + 50 + i))
            for i in range(cfg.n_dec_layers):
                self._add_block(f"{m}.dec.{i}", rng.child(base * 100 + 70 + i))
        self._add_linear("img.dec.head", d, cfg.patch_voxels, rng.child(31))
        self._add_linear("txt.dec.head", d, cfg.vocab_size, rng.child(32))
        self._add_linear("fusion.l1", 2 * d, cfg.fusion_hidden, rng.child(33))
        self._add_linear("fusion.l2", cfg.fusion_hidden, cfg.n_classes, rng.child(34))
        self._add("log_tau", np.array(math.log(0.07)))

    # -- primitives -----------------------------------------------------------

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"],
                          eps=self.config.layer_norm_eps)

    def _attention(self, name: str, x_q: Tensor, x_kv: Tensor,
                   key_bias: np.ndarray | None,
                   record: list | None = None) -> Tensor:
        h = self.config.n_heads
        d = self.config.d_model
        dh = d // h
        n_q, n_kv = x_q.shape[0], x_kv.shape[0]
        q = self._linear(f"{name}.wq", x_q).reshape(n_q, h, dh).transpose(1, 0, 2)
        k = self._linear(f"{name}.wk", x_kv).reshape(n_kv, h, dh).transpose(1, 0, 2)
        v = self._linear(f"{name}.wv", x_kv).reshape(n_kv, h, dh).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = scores + Tensor(key_bias.reshape(1, 1, n_kv))
        att = softmax(scores, axis=-1)
        if record is not None:
            record.append(att.data)
        out = (att @ v).transpose(1, 0, 2).reshape(n_q, d)
        return self._linear(f"{name}.wo", out)

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        return self._linear(f"{name}.l2", self._linear(f"{name}.l1", x).gelu())

    # -- embedding ------------------------------------------------------------

    def embed_image(self, patches: PatchGrid) -> Tensor:
        """[CLS] row followed by LP(patch) rows, plus position embeddings."""
        cfg = self.config
        if patches.patches.shape != (cfg.n_patches, cfg.patch_voxels):
            raise DimensionError(
                f"patch grid {patches.patches.shape} does not match config "
                f"({cfg.n_patches}, {cfg.patch_voxels})")
        projected = self._linear("img.lp", Tensor(patches.patches))
        rows = concat([self.params["img.cls"].reshape(1, -1), projected], axis=0)
        return rows + self.params["img.pe"]

    def embed_text(self, tokens: TokenSequence) -> Tensor:
        cfg = self.config
        from .data import validate_ids

        validate_ids(tokens, cfg.vocab_size)
        looked_up = self.params["txt.emb"].gather_rows(tokens.ids)
        return looked_up + self.params["txt.pe"]

    # -- masking --------------------------------------------------------------

    def apply_mask(self, h: Tensor, modality: str, rng: RngStream,
                   maskable: np.ndarray | None = None,
                   ratio: float | None = None) -> tuple[Tensor, np.ndarray]:
        """Replace floor(ratio * n_maskable) rows by the modality's mask
        embedding (position embedding retained); position 0 ([CLS]) is never
        maskable. Returns the masked tensor and the chosen row indices."""
        n = h.shape[0]
        if maskable is None:
            maskable = np.arange(1, n)
        maskable = np.asarray(maskable, dtype=np.int64)
        assert 0 not in maskable, "[CLS] position is not maskable"
        ratio = self.config.mask_ratio if ratio is None else ratio
        n_mask = int(math.floor(ratio * len(maskable)))
        if n_mask == 0:
            return h, np.empty(0, dtype=np.int64)
        chosen = np.sort(maskable[rng.permutation(len(maskable))[:n_mask]])
        keep = np.ones((n, 1))
        keep[chosen] = 0.0
        pe = self.params["img.pe" if modality == "img" else "txt.pe"]
        replacement = self.params[f"{modality}.mask"].reshape(1, -1) + pe
        return h * keep + replacement * (1.0 - keep), chosen

    # -- encoders / decoders ---------------------------------------------------

    def encode_unimodal(self, h: Tensor, modality: str,
                        pad_mask: np.ndarray | None = None,
                        record_attn: list | None = None) -> Tensor:
        """Pre-norm SA + FFN stack with residuals; pads excluded as keys."""
        bias = _attn_bias(pad_mask)
        x = h
        for i in range(self.config.n_enc_layers):
            blk = f"{modality}.enc.{i}"
            x = x + self._attention(f"{blk}.sa", self._ln(f"{blk}.ln1", x),
                                    self._ln(f"{blk}.ln1", x), bias,
                                    record=record_attn)
            x = x + self._ffn(f"{blk}.ffn", self._ln(f"{blk}.ln2", x))
        return x

    def encode_grounded(self, h_masked: Tensor, z_other: Tensor, modality: str,
                        pad_mask: np.ndarray | None = None,
                        other_pad_mask: np.ndarray | None = None) -> Tensor:
        """Per block: shared SA, then cross-attention into the other
        modality's features, then shared FFN. Only the CA weights are
        specific to this path."""
        bias = _attn_bias(pad_mask)
        other_bias = _attn_bias(other_pad_mask)
        x = h_masked
        for i in range(self.config.n_enc_layers):
            blk = f"{modality}.enc.{i}"
            ca = f"{modality}.ca.{i}"
            x = x + self._attention(f"{blk}.sa", self._ln(f"{blk}.ln1", x),
                                    self._ln(f"{blk}.ln1", x), bias)
            x = x + self._attention(ca, self._ln(f"{ca}.ln", x), z_other, other_bias)
            x = x + self._ffn(f"{blk}.ffn", self._ln(f"{blk}.ln2", x))
        return x

    def decode_modality(self, z_grounded: Tensor, modality: str,
                        pad_mask: np.ndarray | None = None) -> Tensor:
        """SA + FFN decoder stack and linear head.

        Image: the [CLS] row is dropped, giving a (P, V) reconstruction.
        Text: all rows are kept so logits row j matches sequence position j
        (row 0 is never a reconstruction target).
        """
        bias = _attn_bias(pad_mask)
        x = z_grounded
        for i in range(self.config.n_dec_layers):
            blk = f"{modality}.dec.{i}"
            x = x + self._attention(f"{blk}.sa", self._ln(f"{blk}.ln1", x),
                                    self._ln(f"{blk}.ln1", x), bias)
            x = x + self._ffn(f"{blk}.ffn", self._ln(f"{blk}.ln2", x))
        out = self._linear(f"{modality}.dec.head", x)
        return out[1:] if modality == "img" else out

    # -- fusion ---------------------------------------------------------------

    def fuse_classify(self, z_image_cls: Tensor, z_text_cls: Tensor) -> Tensor:
        z_cat = concat([z_image_cls, z_text_cls], axis=0).reshape(1, -1)
        hidden = self._linear("fusion.l1", z_cat).relu()
        return self._linear("fusion.l2", hidden).reshape(-1)

    def temperature(self) -> Tensor:
        return self.params["log_tau"].reshape(1).exp()

    def clamp_temperature(self, lo: float = 0.01, hi: float = 1.0) -> None:
        """Project log-temperature back into [log lo, log hi] after a step."""
        self.params["log_tau"].data = np.clip(
            self.params["log_tau"].data, math.log(lo), math.log(hi))

    # -- full passes -----------------------------------------------------------

    def forward_training_pass(self, patches: PatchGrid, tokens: TokenSequence,
                              rng: RngStream) -> ForwardOutputs:
        """Pass 1: unimodal encodings for contrast + fusion. Pass 2: masked
        inputs through the grounded encoders and decoders for restoration.
        Shared weights receive gradient from both passes."""
        pad = tokens.pad_mask
        h_img = self.embed_image(patches)
        h_txt = self.embed_text(tokens)

        z_img = self.encode_unimodal(h_img, "img")
        z_txt = self.encode_unimodal(h_txt, "txt", pad_mask=pad)

        z_img_cls = z_img[0]
        z_txt_cls = z_txt[0]
        class_logits = self.fuse_classify(z_img_cls, z_txt_cls)

        h_img_masked, img_idx = self.apply_mask(h_img, "img", rng.child(0))
        txt_maskable = np.arange(1, tokens.length)
        h_txt_masked, txt_idx = self.apply_mask(h_txt, "txt", rng.child(1),
                                                maskable=txt_maskable)

        zg_img = self.encode_grounded(h_img_masked, z_txt, "img",
                                      other_pad_mask=pad)
        zg_txt = self.encode_grounded(h_txt_masked, z_img, "txt", pad_mask=pad)

        recon_image = self.decode_modality(zg_img, "img")
        recon_text = self.decode_modality(zg_txt, "txt", pad_mask=pad)

        return ForwardOutputs(
            z_image=z_img, z_text=z_txt,
            z_image_cls=z_img_cls, z_text_cls=z_txt_cls,
            class_logits=class_logits,
            recon_image=recon_image, recon_text_logits=recon_text,
            masked_patch_idx=img_idx - 1,  # sequence row i is patch i-1
            masked_token_idx=txt_idx,
        )

    def classify(self, patches: PatchGrid, tokens: TokenSequence) -> tuple[Tensor, Tensor, Tensor]:
        """Deterministic inference path: no masking. Returns
        (class_logits, z_image_cls, z_text_cls)."""
        z_img = self.encode_unimodal(self.embed_image(patches), "img")
        z_txt = self.encode_unimodal(self.embed_text(tokens), "txt",
                                     pad_mask=tokens.pad_mask)
        return self.fuse_classify(z_img[0], z_txt[0]), z_img[0], z_txt[0]

    def extract_attention_map(self, patches: PatchGrid,
                              tokens: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
        """[CLS]-query self-attention of the last unimodal encoder block,
        averaged over heads; [CLS] (and pad) keys removed, renormalized.

        Returns (image heat on the (S/p)^3 grid, text weights of length L_max
        with zeros at [CLS] and pads)."""
        g = self.config.grid_side
        rec_img: list = []
        rec_txt: list = []
        self.encode_unimodal(self.embed_image(patches), "img", record_attn=rec_img)
        self.encode_unimodal(self.embed_text(tokens), "txt",
                             pad_mask=tokens.pad_mask, record_attn=rec_txt)
        img_row = rec_img[-1][:, 0, 1:].mean(axis=0)  # drop [CLS] key
        img_heat = (img_row / img_row.sum()).reshape(g, g, g)
        txt_row = rec_txt[-1][:, 0, :].mean(axis=0)
        txt_row = txt_row.copy()
        txt_row[0] = 0.0
        txt_row[~tokens.pad_mask] = 0.0
        total = txt_row.sum()
        if total > 0:
            txt_row = txt_row / total
        else:
            txt_row[0] = 1.0  # only [CLS] present; all weight on it
        return img_heat, txt_row
