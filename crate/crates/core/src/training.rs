//! Combined CE/Dice/BCE/binary-Dice loss, AdamW with per-group rates, cosine
//! schedule, augmentation, and the alternating main/auxiliary decoder loop
//! over subsets with heterogeneous taxonomies.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data_synth::{BandStats, LabelMask, MultispectralImage, Subset};
use crate::error::{invalid, shape, Error, Result};
use crate::kv::KvFile;
use crate::model::LandSegmenter;
use crate::params::{Binder, Checkpoint, Group, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text_prompter::{PromptMode, PromptSet};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub ce: bool,
    pub dice: bool,
    pub bce: bool,
    pub binary_dice: bool,
    /// Smoothing added to Dice numerators and denominators.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ce: true, dice: true, bce: true, binary_dice: true, eps: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub bce: f64,
    pub binary_dice: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.total += w * o.total;
        self.ce += w * o.ce;
        self.dice += w * o.dice;
        self.bce += w * o.bce;
        self.binary_dice += w * o.binary_dice;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.ce, self.dice, self.bce, self.binary_dice].iter().all(|v| v.is_finite())
    }
}

/// `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)` per class row.
fn dice_terms<'g>(p: Var<'g>, y: &Tensor, eps: f64) -> Var<'g> {
    let g = p.graph();
    let inter = p.mul(g.constant(y.clone())).sum_axis(1).scale(2.0).add_scalar(eps);
    let ysum: Vec<f64> = y.data().chunks(y.dim(1)).map(|r| r.iter().sum::<f64>() + eps).collect();
    let denom = p.sum_axis(1).add(g.constant(Tensor::new(&[ysum.len()], ysum)));
    inter.div(denom).neg().add_scalar(1.0)
}

/// Total loss over non-ignored pixels of `logits (K,H,W)`.
///
/// Multiclass terms use the softmax stack; per-class terms pass each logit
/// map through a logistic against its one-vs-rest target. Dice averages over
/// classes, the binary terms sum over classes.
pub fn combined_loss<'g>(logits: Var<'g>, target: &LabelMask, cfg: &LossConfig) -> Result<(Var<'g>, LossBreakdown)> {
    let s = logits.shape();
    if s.len() != 3 || s[1] != target.height() || s[2] != target.width() {
        return Err(shape(format!("logits {s:?} against {}×{} labels", target.height(), target.width())));
    }
    if cfg.eps <= 0.0 {
        return Err(invalid("dice smoothing must be positive"));
    }
    let (k, n) = (s[0], s[1] * s[2]);
    target.validate(k)?;
    let valid = target.valid_count();
    if valid == 0 {
        return Err(Error::Empty("every pixel is ignored; loss is undefined".into()));
    }
    let mut onehot = vec![0.0; k * n];
    let mut mask = vec![0.0; k * n];
    for (i, &c) in target.classes().iter().enumerate() {
        if !target.is_ignored(i) {
            onehot[c as usize * n + i] = 1.0;
            for r in 0..k {
                mask[r * n + i] = 1.0;
            }
        }
    }
    let y = Tensor::new(&[k, n], onehot);
    let m = Tensor::new(&[k, n], mask);
    let g = logits.graph();
    let z = logits.reshape(&[k, n]);
    let inv = 1.0 / valid as f64;
    let mut parts: Vec<Var<'g>> = Vec::new();
    let mut b = LossBreakdown::default();

    if cfg.ce {
        let ce = z.log_softmax(0).mul(g.constant(y.clone())).sum().scale(-inv);
        b.ce = ce.value().item();
        parts.push(ce);
    }
    if cfg.dice {
        let p = z.softmax(0).mul(g.constant(m.clone()));
        let d = dice_terms(p, &y, cfg.eps).mean();
        b.dice = d.value().item();
        parts.push(d);
    }
    if cfg.bce {
        // softplus(z) - y z, the stable form of the logistic cross-entropy
        let bce = z.softplus().sub(z.mul(g.constant(y.clone()))).mul(g.constant(m.clone())).sum().scale(inv);
        b.bce = bce.value().item();
        parts.push(bce);
    }
    if cfg.binary_dice {
        let p = z.sigmoid().mul(g.constant(m));
        let d = dice_terms(p, &y, cfg.eps).sum();
        b.binary_dice = d.value().item();
        parts.push(d);
    }
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| invalid("every loss component is disabled"))?;
    let total = it.fold(first, |a, v| a.add(v));
    b.total = total.value().item();
    Ok((total, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Ends this run after the given global step without changing the schedule.
    pub stop_after: Option<usize>,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Multiplier on the spectral embedder learning rate; 0 keeps it frozen.
    pub spectral_lr_scale: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub augment: bool,
    pub flip_p: f64,
    pub rotate_p: f64,
    pub val_fraction: f64,
    /// Validation period in steps; 0 picks a tenth of the run.
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps: None,
            stop_after: None,
            lr_init: 1e-4,
            lr_final: 1e-6,
            spectral_lr_scale: 0.1,
            weight_decay: 0.01,
            batch_size: 4,
            crop: 256,
            augment: true,
            flip_p: 0.5,
            rotate_p: 0.5,
            val_fraction: 0.1,
            eval_every: 0,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            epochs: kv.parsed_or("train.epochs", d.epochs)?,
            steps: kv.parsed("train.steps")?,
            stop_after: kv.parsed("train.stop_after")?,
            lr_init: kv.parsed_or("train.lr", d.lr_init)?,
            lr_final: kv.parsed_or("train.lr_final", d.lr_final)?,
            spectral_lr_scale: kv.parsed_or("train.spectral_lr_scale", d.spectral_lr_scale)?,
            weight_decay: kv.parsed_or("train.weight_decay", d.weight_decay)?,
            batch_size: kv.parsed_or("train.batch_size", d.batch_size)?,
            crop: kv.parsed_or("train.crop", d.crop)?,
            augment: kv.parsed_or("train.augment", d.augment)?,
            flip_p: kv.parsed_or("train.flip_p", d.flip_p)?,
            rotate_p: kv.parsed_or("train.rotate_p", d.rotate_p)?,
            val_fraction: kv.parsed_or("train.val_fraction", d.val_fraction)?,
            eval_every: kv.parsed_or("train.eval_every", d.eval_every)?,
            seed: kv.parsed_or("train.seed", d.seed)?,
            loss: LossConfig {
                ce: kv.parsed_or("loss.ce", true)?,
                dice: kv.parsed_or("loss.dice", true)?,
                bce: kv.parsed_or("loss.bce", true)?,
                binary_dice: kv.parsed_or("loss.binary_dice", true)?,
                eps: kv.parsed_or("loss.eps", 1.0)?,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.set("train.epochs", self.epochs);
        if let Some(s) = self.steps {
            kv.set("train.steps", s);
        }
        if let Some(s) = self.stop_after {
            kv.set("train.stop_after", s);
        }
        kv.set("train.lr", self.lr_init);
        kv.set("train.lr_final", self.lr_final);
        kv.set("train.spectral_lr_scale", self.spectral_lr_scale);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.crop", self.crop);
        kv.set("train.augment", self.augment);
        kv.set("train.flip_p", self.flip_p);
        kv.set("train.rotate_p", self.rotate_p);
        kv.set("train.val_fraction", self.val_fraction);
        kv.set("train.eval_every", self.eval_every);
        kv.set("train.seed", self.seed);
        kv.set("loss.ce", self.loss.ce);
        kv.set("loss.dice", self.loss.dice);
        kv.set("loss.bce", self.loss.bce);
        kv.set("loss.binary_dice", self.loss.binary_dice);
        kv.set("loss.eps", self.loss.eps);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return Err(invalid(format!("need 0 ≤ lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init)));
        }
        if !(self.spectral_lr_scale >= 0.0) || self.weight_decay < 0.0 {
            return Err(invalid("spectral lr scale and weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(invalid("batch size and crop must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_p) || !(0.0..=1.0).contains(&self.rotate_p) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("probabilities must lie in [0, 1] and the validation fraction in [0, 1)"));
        }
        if self.loss.eps <= 0.0 {
            return Err(invalid("loss.eps must be positive"));
        }
        Ok(())
    }

    /// Step count: explicit, or epochs over the training split.
    pub fn total_steps(&self, train_samples: usize) -> usize {
        self.steps.unwrap_or_else(|| (self.epochs * train_samples.div_ceil(self.batch_size)).max(1))
    }
}

/// Cosine decay from `init` at step 0 to `fin` at step `total`.
pub fn cosine_lr(step: usize, total: usize, init: f64, fin: f64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    fin + 0.5 * (init - fin) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay. Each parameter keeps its own step
/// count so that alternately trained decoders get correct bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub spectral_scale: f64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64, spectral_scale: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, spectral_scale, state: HashMap::new() }
    }

    /// Multiplier on the base rate; `None` for frozen groups.
    pub fn lr_scale(&self, group: Group) -> Option<f64> {
        match group {
            Group::Backbone | Group::Text => None,
            Group::Spectral => (self.spectral_scale > 0.0).then_some(self.spectral_scale),
            Group::Afm | Group::Neck | Group::Decoder | Group::DecoderAux => Some(1.0),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let p = store.get(*id);
            let Some(scale) = self.lr_scale(p.group) else { continue };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            st.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let a = lr * scale;
            let w = store.value_mut(*id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let upd = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps);
                w[i] -= a * (upd + self.weight_decay * w[i]);
            }
        }
    }

    fn to_extra(&self) -> Vec<(String, Tensor)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for n in names {
            let s = &self.state[n];
            out.push((format!("adam.m.{n}"), Tensor::new(&[s.m.len()], s.m.clone())));
            out.push((format!("adam.v.{n}"), Tensor::new(&[s.v.len()], s.v.clone())));
            out.push((format!("adam.t.{n}"), Tensor::scalar(s.t as f64)));
        }
        out
    }

    fn load_extra(&mut self, extra: &[(String, Tensor)]) {
        for (key, t) in extra {
            let Some(rest) = key.strip_prefix("adam.") else { continue };
            let (kind, name) = rest.split_at(1);
            let name = &name[1..];
            let st = self.state.entry(name.to_string()).or_default();
            match kind {
                "m" => st.m = t.data().to_vec(),
                "v" => st.v = t.data().to_vec(),
                _ => st.t = t.item() as u64,
            }
        }
    }
}

/// Random crop to a multiple of `multiple`, horizontal flip, and a quarter
/// turn. Image and label are transformed identically.
pub fn augment<R: Rng>(image: &MultispectralImage, label: &LabelMask, cfg: &TrainConfig, multiple: usize, rng: &mut R) -> Result<(MultispectralImage, LabelMask)> {
    let (c, h, w) = image.dims();
    let ch = (cfg.crop.min(h) / multiple * multiple).max(multiple).min(h);
    let cw = (cfg.crop.min(w) / multiple * multiple).max(multiple).min(w);
    let (y0, x0) = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
    let flip = rng.random_bool(cfg.flip_p);
    let turns = if rng.random_bool(cfg.rotate_p) { rng.random_range(1..4) } else { 0 };
    let (oh, ow) = if turns % 2 == 1 { (cw, ch) } else { (ch, cw) };
    // source coordinates of output pixel (r, q)
    let src = |r: usize, q: usize| {
        let (y, mut x) = match turns {
            1 => (ch - 1 - q, r),
            2 => (ch - 1 - r, cw - 1 - q),
            3 => (q, cw - 1 - r),
            _ => (r, q),
        };
        if flip {
            x = cw - 1 - x;
        }
        (y0 + y, x0 + x)
    };
    let px = image.pixels().data();
    let mut data = vec![0.0; c * oh * ow];
    let mut cls = vec![0u8; oh * ow];
    for r in 0..oh {
        for q in 0..ow {
            let (y, x) = src(r, q);
            for b in 0..c {
                data[b * oh * ow + r * ow + q] = px[b * h * w + y * w + x];
            }
            cls[r * ow + q] = label.classes()[y * w + x];
        }
    }
    Ok((image.with_pixels(Tensor::new(&[c, oh, ow], data))?, LabelMask::new(oh, ow, cls, label.quality(), label.taxonomy_id())?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderRole {
    Main,
    Aux,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub subset: String,
    pub lr: f64,
    pub decoder: DecoderRole,
    pub loss: LossBreakdown,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,subset,lr,total,ce,dice,bce,binary_dice";

    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{:e},{},{},{},{},{}", self.step, self.subset, self.lr, l.total, l.ce, l.dice, l.bce, l.binary_dice)
    }
}

/// Optimiser state plus the global batch counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    /// Batches processed so far; the next batch has index `batches_seen + 1`.
    pub batches_seen: u64,
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, total_steps: usize) -> Self {
        let optimizer = AdamW::new(config.weight_decay, config.spectral_lr_scale);
        Self { config, optimizer, batches_seen: 0, total_steps }
    }

    /// Odd batches (1, 3, ...) go to the main decoder, even ones to the aux.
    pub fn role_for(batch_index: u64, aux_enabled: bool) -> DecoderRole {
        if aux_enabled && batch_index % 2 == 0 {
            DecoderRole::Aux
        } else {
            DecoderRole::Main
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.batches_seen as usize, self.total_steps, self.config.lr_init, self.config.lr_final)
    }

    /// One optimiser update on a batch of normalised samples from one subset.
    pub fn train_step<R: Rng>(&mut self, model: &mut LandSegmenter, batch: &[(MultispectralImage, LabelMask)], prompts: &PromptSet, subset: &str, rng: &mut R) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let index = self.batches_seen + 1;
        let role = Self::role_for(index, model.decoder_aux.is_some());
        let aux = role == DecoderRole::Aux;
        let lr = self.current_lr();
        let dec_group = if aux { Group::DecoderAux } else { Group::Decoder };
        let trainable: Vec<Group> = [Group::Afm, Group::Neck, Group::Spectral, dec_group].into_iter().filter(|&g| self.optimizer.lr_scale(g).is_some()).collect();
        let text = prompts.sample(PromptMode::Train, rng);
        let (grads, loss) = {
            let g = Graph::new();
            let p = Binder::new(&g, &model.store, &trainable);
            let tv = g.constant(text);
            let w = 1.0 / batch.len() as f64;
            let mut total: Option<Var> = None;
            let mut loss = LossBreakdown::default();
            for (img, lab) in batch {
                let logits = model.logits(&p, img, tv, aux)?;
                let (l, b) = combined_loss(logits, lab, &self.config.loss)?;
                loss.accumulate(&b, w);
                let l = l.scale(w);
                total = Some(match total {
                    Some(t) => t.add(l),
                    None => l,
                });
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { step: index, detail: format!("non-finite loss {:?} on subset `{subset}` at lr {lr:e}", loss) });
            }
            let grads = p.gradients(&g.backward(total.expect("non-empty batch")));
            (grads, loss)
        };
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence { step: index, detail: format!("non-finite gradient on subset `{subset}` at lr {lr:e}") });
        }
        self.optimizer.step(&mut model.store, &grads, lr);
        self.batches_seen = index;
        Ok(StepMetrics { step: index, subset: subset.to_string(), lr, decoder: role, loss })
    }

    pub fn save_state(&self, ck: &mut Checkpoint) {
        ck.meta.set("train.batches_seen", self.batches_seen);
        ck.extra = self.optimizer.to_extra();
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.batches_seen = ck.meta.parsed_or("train.batches_seen", 0)?;
        self.optimizer.load_extra(&ck.extra);
        Ok(())
    }
}

/// Deterministic held-out indices: a `fraction` of `n` (at least one when
/// `n ≥ 2` and the fraction is positive).
pub fn validation_split(n: usize, fraction: f64, seed: u64, subset: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_5a11);
    rng.set_stream(subset as u64);
    idx.shuffle(&mut rng);
    let nv = if fraction > 0.0 && n >= 2 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
    let mut val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Sample positions for the `round`-th batch of a subset, reshuffling each epoch.
fn batch_positions(n: usize, batch: usize, round: usize, seed: u64, subset: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (round * batch..(round + 1) * batch)
        .map(|j| {
            let epoch = j / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
                rng.set_stream(0x1000 + subset as u64);
                order.shuffle(&mut rng);
                cache = Some((epoch, order));
            }
            cache.as_ref().unwrap().1[j % n]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: Vec<StepMetrics>,
    /// `(step, mean validation loss)` at each evaluation.
    pub validation: Vec<(u64, f64)>,
    pub best_val: f64,
    /// Held-out sample indices per subset.
    pub val_indices: Vec<(String, Vec<usize>)>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

struct Prepared<'a> {
    id: &'a str,
    prompts: PromptSet,
    train: Vec<(MultispectralImage, &'a LabelMask)>,
    val: Vec<(MultispectralImage, &'a LabelMask)>,
}

fn mean_val_loss(model: &LandSegmenter, prepared: &[Prepared], loss_cfg: &LossConfig) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for p in prepared {
        let text = p.prompts.canonical();
        for (img, lab) in &p.val {
            let g = Graph::new();
            let b = Binder::frozen(&g, &model.store);
            let (_, l) = combined_loss(model.logits(&b, img, g.constant(text.clone()), false)?, lab, loss_cfg)?;
            sum += l.total;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Trains on the given subsets, round-robin one subset per batch.
///
/// With `out` set, writes `metrics.csv`, `validation.csv`, `best.ckpt` and
/// `last.ckpt`. `resume` restores optimiser state and the batch counter; the
/// model weights are expected to come from the same checkpoint.
pub fn fit(model: &mut LandSegmenter, subsets: &[&Subset], cfg: &TrainConfig, out: Option<&Path>, resume: Option<&Checkpoint>) -> Result<FitReport> {
    cfg.validate()?;
    if subsets.is_empty() {
        return Err(Error::Empty("training needs at least one subset".into()));
    }
    let mut prepared = Vec::new();
    let mut val_indices = Vec::new();
    for (si, s) in subsets.iter().enumerate() {
        let (tr, va) = validation_split(s.samples.len(), cfg.val_fraction, cfg.seed, si);
        if tr.is_empty() {
            return Err(Error::Empty(format!("subset `{}` has no training samples", s.id())));
        }
        let stats = BandStats::from_images(tr.iter().map(|&i| &s.samples[i].image))?;
        model.set_norm(s.id(), stats.clone());
        let norm = |idx: &[usize]| -> Result<Vec<(MultispectralImage, &LabelMask)>> { idx.iter().map(|&i| Ok((s.samples[i].image.normalized(&stats)?, &s.samples[i].label))).collect() };
        prepared.push(Prepared { id: s.id(), prompts: model.prompts(&s.taxonomy)?, train: norm(&tr)?, val: norm(&va)? });
        val_indices.push((s.id().to_string(), va));
    }
    let total = cfg.total_steps(prepared.iter().map(|p| p.train.len()).sum());
    let mut trainer = Trainer::new(cfg.clone(), total);
    if let Some(ck) = resume {
        trainer.restore(ck)?;
    }
    let eval_every = if cfg.eval_every == 0 { (total / 10).max(1) } else { cfg.eval_every };
    let multiple = model.size_multiple();

    let mut csv = None;
    let mut val_csv = None;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<std::fs::File> {
            let path = dir.join(name);
            let fresh = resume.is_none() || !path.exists();
            let mut f = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(path)?;
            if fresh {
                writeln!(f, "{header}")?;
            }
            Ok(f)
        };
        csv = Some(open("metrics.csv", StepMetrics::CSV_HEADER)?);
        val_csv = Some(open("validation.csv", "step,val_loss")?);
    }
    let mut best_val = resume.and_then(|ck| ck.meta.parsed::<f64>("train.best_val").ok().flatten()).unwrap_or(f64::INFINITY);
    let mut report = FitReport { history: Vec::new(), validation: Vec::new(), best_val, val_indices, best_checkpoint: None, last_checkpoint: None };

    let save = |model: &LandSegmenter, trainer: &Trainer, best: f64, name: &str| -> Result<Option<PathBuf>> {
        let Some(dir) = out else { return Ok(None) };
        let mut meta = KvFile::new();
        cfg.write_kv(&mut meta);
        meta.set("train.best_val", best);
        let mut ck = model.to_checkpoint(&meta);
        trainer.save_state(&mut ck);
        let path = dir.join(name);
        ck.save(&path)?;
        Ok(Some(path))
    };

    let end = cfg.stop_after.map_or(total, |s| s.min(total));
    while (trainer.batches_seen as usize) < end {
        let step = trainer.batches_seen as usize;
        // rotate the visiting order each round so that, with an even subset
        // count, the odd/even decoder split does not pin subsets to decoders
        let round = step / prepared.len();
        let si = (step + round) % prepared.len();
        let p = &prepared[si];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64 + 1);
        let batch = batch_positions(p.train.len(), cfg.batch_size, round, cfg.seed, si)
            .into_iter()
            .map(|i| {
                let (img, lab) = &p.train[i];
                if cfg.augment {
                    augment(img, lab, cfg, multiple, &mut rng)
                } else {
                    Ok((img.clone(), (*lab).clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let m = trainer.train_step(model, &batch, &p.prompts, p.id, &mut rng)?;
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", m.csv_line())?;
        }
        report.history.push(m);
        let done = trainer.batches_seen as usize;
        if done % eval_every == 0 || done == end {
            let v = mean_val_loss(model, &prepared, &cfg.loss)?;
            report.validation.push((trainer.batches_seen, v));
            if let Some(f) = val_csv.as_mut() {
                writeln!(f, "{},{}", trainer.batches_seen, v)?;
            }
            if v.is_finite() && v < best_val {
                best_val = v;
                report.best_checkpoint = save(model, &trainer, best_val, "best.ckpt")?;
            }
        }
    }
    report.best_val = best_val;
    report.last_checkpoint = save(model, &trainer, best_val, "last.ckpt")?;
    if report.best_checkpoint.is_none() {
        if let Some(dir) = out {
            let best = dir.join("best.ckpt");
            if best.exists() {
                report.best_checkpoint = Some(best);
            } else if let Some(last) = &report.last_checkpoint {
                std::fs::copy(last, &best)?;
                report.best_checkpoint = Some(best);
            }
        }
    }
    Ok(report)
}
