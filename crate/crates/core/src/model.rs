//! The assembled segmenter: fusion encoder, frozen text encoder, main and
//! auxiliary decoders, plus per-subset band statistics for normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data_synth::{BandStats, MultispectralImage};
use crate::error::{invalid, Result};
use crate::fusion_encoder::{BackboneConfig, EncoderConfig, EncoderFeatures, EncoderVars, FusionEncoder};
use crate::kv::{join_list, KvFile};
use crate::params::{Binder, Builder, Checkpoint, Group, ParamStore};
use crate::seg_decoder::{predict_probs, Decoder, DecoderConfig, ProbabilityStack};
use crate::spectral_embed::SpectralConfig;
use crate::taxonomy::ClassTaxonomy;
use crate::text_prompter::{PromptSet, TextConfig, TextEncoder};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub decoder_heads: usize,
    pub aux_decoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), text: TextConfig::default(), decoder_heads: 4, aux_decoder: true, seed: 0 }
    }
}

impl ModelConfig {
    /// Narrow model for CPU smoke runs; inputs must be multiples of 16.
    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig {
                backbone: BackboneConfig { widths: [16, 16, 32, 32], layers_per_block: 1, stem_stride: 2, heads: 2 },
                spectral: SpectralConfig { embed_dim: 8, patch_size: 4, depth: 4, output_layers: [0, 1, 2, 3], heads: 2, wave_freqs: 4, hidden: 16, pos_embed: true },
                d_model: 16,
                ..EncoderConfig::default()
            },
            text: TextConfig { dim: 16, layers: 1, heads: 2 },
            decoder_heads: 2,
            ..Self::default()
        }
    }

    /// Smallest sensible model, used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                backbone: BackboneConfig { widths: [4, 4, 8, 8], layers_per_block: 1, stem_stride: 2, heads: 2 },
                spectral: SpectralConfig { embed_dim: 4, patch_size: 4, depth: 4, output_layers: [0, 1, 2, 3], heads: 1, wave_freqs: 2, hidden: 4, pos_embed: true },
                d_model: 8,
                gate_kernel: 3,
                ..EncoderConfig::default()
            },
            text: TextConfig { dim: 8, layers: 1, heads: 2 },
            decoder_heads: 2,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "small" => Ok(Self::small()),
            "micro" => Ok(Self::micro()),
            _ => Err(invalid(format!("unknown model preset `{name}` (expected default, small or micro)"))),
        }
    }

    /// Reads `model.*`, `spectral.*`, `text.*`, `hf.mask_ratio` and
    /// `train.aux_decoder`, starting from `model.preset`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::preset(kv.get("model.preset").unwrap_or("default"))?;
        let e = &mut c.encoder;
        if let Some(w) = kv.list::<usize>("model.widths")? {
            e.backbone.widths = w.try_into().map_err(|_| invalid("model.widths needs four entries"))?;
        }
        e.backbone.layers_per_block = kv.parsed_or("model.layers_per_block", e.backbone.layers_per_block)?;
        e.backbone.stem_stride = kv.parsed_or("model.stem_stride", e.backbone.stem_stride)?;
        e.backbone.heads = kv.parsed_or("model.heads", e.backbone.heads)?;
        e.afm_enabled = kv.parsed_or("model.afm", e.afm_enabled)?;
        e.hf_mask_ratio = kv.parsed_or("hf.mask_ratio", e.hf_mask_ratio)?;
        e.d_model = kv.parsed_or("model.d_model", e.d_model)?;
        e.gate_kernel = kv.parsed_or("model.gate_kernel", e.gate_kernel)?;
        let s = &mut e.spectral;
        s.embed_dim = kv.parsed_or("spectral.embed_dim", s.embed_dim)?;
        s.patch_size = kv.parsed_or("spectral.patch_size", s.patch_size)?;
        s.depth = kv.parsed_or("spectral.depth", s.depth)?;
        if let Some(l) = kv.list::<usize>("spectral.output_layers")? {
            s.output_layers = l.try_into().map_err(|_| invalid("spectral.output_layers needs four entries"))?;
        }
        s.heads = kv.parsed_or("spectral.heads", s.heads)?;
        s.wave_freqs = kv.parsed_or("spectral.wave_freqs", s.wave_freqs)?;
        s.hidden = kv.parsed_or("spectral.hidden", s.hidden)?;
        s.pos_embed = kv.parsed_or("spectral.pos_embed", s.pos_embed)?;
        c.text.dim = kv.parsed_or("text.dim", c.text.dim)?;
        c.text.layers = kv.parsed_or("text.layers", c.text.layers)?;
        c.text.heads = kv.parsed_or("text.heads", c.text.heads)?;
        c.decoder_heads = kv.parsed_or("model.decoder_heads", c.decoder_heads)?;
        c.aux_decoder = kv.parsed_or("train.aux_decoder", c.aux_decoder)?;
        c.seed = kv.parsed_or("model.seed", c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        let e = &self.encoder;
        kv.set("model.widths", join_list(&e.backbone.widths));
        kv.set("model.layers_per_block", e.backbone.layers_per_block);
        kv.set("model.stem_stride", e.backbone.stem_stride);
        kv.set("model.heads", e.backbone.heads);
        kv.set("model.afm", e.afm_enabled);
        kv.set("hf.mask_ratio", e.hf_mask_ratio);
        kv.set("model.d_model", e.d_model);
        kv.set("model.gate_kernel", e.gate_kernel);
        let s = &e.spectral;
        kv.set("spectral.embed_dim", s.embed_dim);
        kv.set("spectral.patch_size", s.patch_size);
        kv.set("spectral.depth", s.depth);
        kv.set("spectral.output_layers", join_list(&s.output_layers));
        kv.set("spectral.heads", s.heads);
        kv.set("spectral.wave_freqs", s.wave_freqs);
        kv.set("spectral.hidden", s.hidden);
        kv.set("spectral.pos_embed", s.pos_embed);
        kv.set("text.dim", self.text.dim);
        kv.set("text.layers", self.text.layers);
        kv.set("text.heads", self.text.heads);
        kv.set("model.decoder_heads", self.decoder_heads);
        kv.set("train.aux_decoder", self.aux_decoder);
        kv.set("model.seed", self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        e.spectral.validate()?;
        if e.d_model == 0 || e.d_model % 4 != 0 || e.d_model % self.decoder_heads != 0 {
            return Err(invalid(format!("model.d_model = {} must be a positive multiple of 4 and of the decoder heads", e.d_model)));
        }
        if !(0.0..1.0).contains(&e.hf_mask_ratio) {
            return Err(invalid(format!("hf.mask_ratio = {} must lie in [0, 1)", e.hf_mask_ratio)));
        }
        if self.text.dim % self.text.heads != 0 || e.backbone.widths.iter().any(|w| w % e.backbone.heads != 0) {
            return Err(invalid("widths must be divisible by their head counts"));
        }
        if e.gate_kernel % 2 == 0 {
            return Err(invalid("model.gate_kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LandSegmenter {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: FusionEncoder,
    pub text: TextEncoder,
    pub decoder: Decoder,
    pub decoder_aux: Option<Decoder>,
    /// Band statistics keyed by subset id.
    pub norm: Vec<(String, BandStats)>,
}

impl LandSegmenter {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = FusionEncoder::new(&mut store, &mut rng, config.encoder.clone());
        let text = TextEncoder::new(&mut store, &mut rng, config.text.clone());
        let dc = DecoderConfig {
            d_model: config.encoder.d_model,
            text_dim: config.text.dim,
            heads: config.decoder_heads,
            skip_widths: [config.encoder.backbone.widths[0], config.encoder.backbone.widths[1]],
        };
        let decoder = Decoder::new(&mut Builder::new(&mut store, &mut rng, Group::Decoder, "decoder"), dc.clone());
        let decoder_aux = config.aux_decoder.then(|| Decoder::new(&mut Builder::new(&mut store, &mut rng, Group::DecoderAux, "decoder_aux"), dc));
        Ok(Self { config, store, encoder, text, decoder, decoder_aux, norm: Vec::new() })
    }

    pub fn size_multiple(&self) -> usize {
        self.encoder.config.size_multiple()
    }

    pub fn set_norm(&mut self, id: &str, stats: BandStats) {
        match self.norm.iter_mut().find(|(k, _)| k == id) {
            Some(slot) => slot.1 = stats,
            None => self.norm.push((id.to_string(), stats)),
        }
    }

    /// Normalises with the stored statistics of the image's subset, falling
    /// back to the image's own statistics for unseen sources.
    pub fn normalize(&self, image: &MultispectralImage) -> Result<MultispectralImage> {
        let stored = self.norm.iter().find(|(k, s)| k == image.subset_id() && s.mean.len() == image.dims().0);
        match stored {
            Some((_, s)) => image.normalized(s),
            None => image.normalized(&BandStats::from_images([image])?),
        }
    }

    pub fn prompts(&self, taxonomy: &ClassTaxonomy) -> Result<PromptSet> {
        self.text.embed_names(&self.store, taxonomy)
    }

    pub fn decoder_for(&self, aux: bool) -> &Decoder {
        match (&self.decoder_aux, aux) {
            (Some(d), true) => d,
            _ => &self.decoder,
        }
    }

    /// Logits `(K,H,W)` for a normalised image.
    pub fn logits<'g>(&self, p: &Binder<'g, '_>, image: &MultispectralImage, prompts: Var<'g>, aux: bool) -> Result<Var<'g>> {
        let enc: EncoderVars<'g> = self.encoder.encode(p, image)?;
        let (_, h, w) = image.dims();
        self.decoder_for(aux).decode(p, &enc, prompts, h, w)
    }

    /// Zero-shot prediction with canonical class names.
    pub fn predict(&self, image: &MultispectralImage, taxonomy: &ClassTaxonomy) -> Result<ProbabilityStack> {
        let prompts = self.prompts(taxonomy)?.canonical();
        self.predict_with(image, &prompts, taxonomy.id())
    }

    pub fn predict_with(&self, image: &MultispectralImage, prompts: &crate::Tensor, taxonomy_id: &str) -> Result<ProbabilityStack> {
        let img = self.normalize(image)?;
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.store);
        let logits = self.logits(&p, &img, g.constant(prompts.clone()), false)?;
        predict_probs(&logits.value(), taxonomy_id)
    }

    pub fn features(&self, image: &MultispectralImage) -> Result<EncoderFeatures> {
        self.encoder.encode_features(&self.store, &self.normalize(image)?)
    }

    pub fn to_checkpoint(&self, extra_meta: &KvFile) -> Checkpoint {
        let mut meta = KvFile::new();
        self.config.write_kv(&mut meta);
        for (id, s) in &self.norm {
            meta.set(&format!("norm.{id}.mean"), join_list(&s.mean));
            meta.set(&format!("norm.{id}.std"), join_list(&s.std));
        }
        meta.merge(extra_meta);
        Checkpoint { meta, params: self.store.clone(), extra: Vec::new() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(ModelConfig::from_kv(&ck.meta)?)?;
        m.store.load_values(&ck.params)?;
        for id in ck.meta.sections("norm") {
            let mean = ck.meta.list::<f64>(&format!("norm.{id}.mean"))?.unwrap_or_default();
            let std = ck.meta.list::<f64>(&format!("norm.{id}.std"))?.unwrap_or_default();
            if mean.len() != std.len() {
                return Err(invalid(format!("band statistics for `{id}` have mismatched lengths")));
            }
            m.norm.push((id, BandStats { mean, std }));
        }
        Ok(m)
    }
}
