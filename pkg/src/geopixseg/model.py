"""End-to-end model: image + instruction -> binary target mask.

Pipeline: hierarchical encoder -> token compression connector -> causal LM
over the assembled multimodal sequence -> description embeddings ->
D-Projector query -> pixel decoder + masked-attention query decoder ->
per-layer mask logits and the full-resolution probability map. The
reasoning task additionally decodes an answer string from the LM.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import install_state, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .connector import TokenCompressor
from .data import ImageSample, PreprocessedSample, preprocess, restore_mask
from .encoder import FeaturePyramid, HierarchicalEncoder
from .errors import DataError
from .lm import (
    ByteTokenizer,
    CausalLM,
    MultimodalSequence,
    PromptTemplate,
    assemble,
    build_prompt,
    extract_description_embeddings,
    generate_answer,
)
from .mask_decoder import (
    DProjector,
    MaskPrediction,
    PixelDecoder,
    QueryDecoder,
    predict_mask,
)

IGNORE_INDEX = -100


@dataclass
class ModelOutput:
    mask_layers: list[torch.Tensor]  # per-layer (B, 1, S/4, S/4) logits
    text_logits: torch.Tensor  # (B, T, V)
    text_targets: torch.Tensor  # (B, T) long, IGNORE_INDEX outside answer spans
    queries: torch.Tensor  # (B, mask_dim)
    mask_features: torch.Tensor  # (B, mask_dim, S/4, S/4)
    pyramid: FeaturePyramid
    sequences: list[MultimodalSequence]

    @property
    def mask_logits(self) -> torch.Tensor:
        return self.mask_layers[-1]


class GeoPixSegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tokenizer = ByteTokenizer()
        self.templates = {
            task: PromptTemplate(task=task, text=text) for task, text in config.templates.items()
        }
        self.encoder = HierarchicalEncoder(config.encoder)
        self.connector = TokenCompressor(config.connector, expected_side=config.image_size // 32)
        self.lm = CausalLM(config.lm)
        dims = config.encoder.stage_dims
        md = config.mask_decoder
        self.d_projector = DProjector(
            lm_dim=config.lm.hidden_size,
            mask_dim=md.mask_dim,
            heads=md.heads,
            in_channels=dims[1:],
        )
        self.pixel_decoder = PixelDecoder(dims, md.mask_dim)
        self.query_decoder = QueryDecoder(md)

    # ---------------------------------------------------------------- data
    def prepare(self, sample: ImageSample) -> PreprocessedSample:
        return preprocess(
            sample,
            target_size=self.config.image_size,
            pixel_mean=self.config.pixel_mean,
            pixel_std=self.config.pixel_std,
        )

    def collate(
        self, samples: list[ImageSample], train: bool
    ) -> tuple[torch.Tensor, torch.Tensor, list]:
        """Preprocess a batch into image/mask tensors plus tokenized prompts."""
        pres = [self.prepare(s) for s in samples]
        images = torch.from_numpy(np.stack([p.image for p in pres]))
        masks = torch.from_numpy(np.stack([p.mask for p in pres])).float()
        prompts = []
        for s in samples:
            template = self.templates.get(s.task)
            if template is None:
                raise DataError(f"sample {s.id}: no template for task {s.task!r}")
            include_answer = train and s.task == "reasoning"
            prompts.append(
                build_prompt(
                    s.instruction,
                    template,
                    self.tokenizer,
                    answer=s.answer,
                    include_answer=include_answer,
                )
            )
        return images, masks, prompts

    # -------------------------------------------------------------- forward
    def forward(self, images: torch.Tensor, prompts: list) -> ModelOutput:
        pyramid = self.encoder(images)
        visual = self.connector(pyramid.v4)  # (B, N, D)

        sequences = [assemble(self.lm, prompt, visual[i]) for i, prompt in enumerate(prompts)]
        t_max = max(len(seq) for seq in sequences)
        d = self.lm.config.hidden_size
        embeddings = visual.new_zeros(len(sequences), t_max, d)
        targets = torch.full((len(sequences), t_max), IGNORE_INDEX, dtype=torch.long)
        for i, seq in enumerate(sequences):
            embeddings[i, : len(seq)] = seq.embeddings
            if seq.answer_span is not None:
                a0, a1 = seq.answer_span
                targets[i, a0:a1] = seq.token_ids[a0:a1]

        hidden, text_logits = self.lm(embeddings)
        descriptions = [
            extract_description_embeddings(hidden[i], seq.description_span)
            for i, seq in enumerate(sequences)
        ]

        queries = self.d_projector(descriptions, pyramid)
        mask_features, memories = self.pixel_decoder(pyramid)
        refined, mask_layers = self.query_decoder(queries, memories, mask_features)

        return ModelOutput(
            mask_layers=mask_layers,
            text_logits=text_logits,
            text_targets=targets,
            queries=refined,
            mask_features=mask_features,
            pyramid=pyramid,
            sequences=sequences,
        )

    def forward_samples(
        self, samples: list[ImageSample], train: bool
    ) -> tuple[ModelOutput, torch.Tensor]:
        images, masks, prompts = self.collate(samples, train=train)
        return self(images, prompts), masks

    def downsample_gt(self, masks: torch.Tensor) -> torch.Tensor:
        """Full-resolution {0,1} masks -> stride-4 supervision targets.

        Center-aligned nearest sampling; the top-left convention would shift
        supervision ~2 px against the bilinear upsampling grid used at
        inference."""
        h = self.config.image_size // 4
        return F.interpolate(masks[:, None], size=(h, h), mode="nearest-exact")[:, 0]

    # ------------------------------------------------------------ inference
    @torch.no_grad()
    def predict(self, samples: list[ImageSample]) -> MaskPrediction:
        """Batched mask prediction at model resolution (S x S)."""
        self.eval()
        images, _, prompts = self.collate(samples, train=False)
        output = self(images, prompts)
        return predict_mask(
            output.queries,
            output.mask_features,
            self.query_decoder.head,
            out_size=self.config.image_size,
            threshold=self.config.mask_decoder.threshold,
        )

    @torch.no_grad()
    def infer(
        self, sample: ImageSample, generate_text: bool | None = None
    ) -> tuple[np.ndarray, str | None]:
        """Single-sample pipeline: binary mask at the source resolution plus
        the generated answer for the reasoning task."""
        self.eval()
        pre = self.prepare(sample)
        prediction = self.predict([sample])
        mask = restore_mask(
            prediction.probabilities[0].numpy(),
            pre.valid_region,
            sample.image.shape[:2],
            threshold=self.config.mask_decoder.threshold,
        )
        answer = None
        if generate_text is None:
            generate_text = sample.task == "reasoning"
        if generate_text:
            images, _, prompts = self.collate([sample], train=False)
            pyramid = self.encoder(images)
            visual = self.connector(pyramid.v4)
            seq = assemble(self.lm, prompts[0], visual[0])
            answer = generate_answer(self.lm, seq, self.tokenizer)
        return mask, answer

    # ----------------------------------------------------------- checkpoint
    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, dataclasses.asdict(self.config), self.state_dict(), extra=extra)


def load_model(path) -> GeoPixSegModel:
    payload = load_checkpoint(path)
    from .config import _build  # shared dataclass-tree builder

    config = _build(ModelConfig, payload["config"], context="model config")
    model = GeoPixSegModel(config)
    install_state(model, payload["state_dict"])
    return model
