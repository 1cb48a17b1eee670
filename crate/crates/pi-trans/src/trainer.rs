//! Alternating-step adversarial training with hand-implemented Adam,
//! deterministic seeding, binary checkpoints and a CSV loss log.
//!
//! Step order: (1) generator forward; (2) both discriminators score real
//! pairs and detached fakes, one Adam step on their parameters; (3) the
//! generator objective is rebuilt against the *updated* discriminators on
//! live fakes and one Adam step updates the generator. Gradients are zeroed
//! at the start of every step, so stray gradients deposited in
//! discriminator parameters during the generator phase never leak into the
//! next step. Batch norm runs in train mode throughout training.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::LoadedTriplet;
use crate::error::{Error, Result};
use crate::gan::{
    adversarial_loss, combine, perceptual_loss, DiscriminatorConfig, LossWeights,
    PatchDiscriminator, PerceptualExtractor,
};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::Mode;
use crate::tensor::{Rng, Tape, Tensor};

pub const LOSS_CSV_HEADER: &str = "epoch,step,l1,cgan_g,tv,per,g_total,d_total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Buffers are kept in the owning network's parameter enumeration order.
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    cursor: usize,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> AdamState {
        AdamState { cfg, t: 0, m: Vec::new(), v: Vec::new(), cursor: 0 }
    }

    fn begin(&mut self) {
        self.t += 1;
        self.cursor = 0;
    }

    /// Bias-corrected update of one parameter; arithmetic in f64, storage
    /// in f32. Call in enumeration order between `begin` and the end of the
    /// step. Errors if the parameter has no gradient.
    fn update_one(&mut self, name: &str, p: &mut Tensor) -> Result<()> {
        let grad = p
            .grad()
            .ok_or_else(|| Error::contract("adam_step", format!("parameter {name} has no gradient")))?;
        if self.cursor == self.m.len() {
            self.m.push(vec![0.0; p.numel()]);
            self.v.push(vec![0.0; p.numel()]);
        }
        let (m, v) = (&mut self.m[self.cursor], &mut self.v[self.cursor]);
        if m.len() != p.numel() {
            return Err(Error::contract(
                "adam_step",
                format!("moment buffer for {name} has {} elements, parameter has {}", m.len(), p.numel()),
            ));
        }
        self.cursor += 1;

        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let lr = self.cfg.lr as f64;
        let eps = self.cfg.eps as f64;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);

        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            data[i] = (data[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
        *p = Tensor::param(data, p.shape())?;
        Ok(())
    }

    /// One optimizer step over a parameter tree exposed by `visit`.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor))) -> Result<()> {
        self.begin();
        let mut first_err: Option<Error> = None;
        visit(&mut |name, p| {
            if first_err.is_none() {
                if let Err(e) = self.update_one(name, p) {
                    first_err = Some(e);
                }
            }
        });
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Overwrites the step counter and moment buffers (checkpoint restore,
    /// reference-parity probes).
    pub fn seed_state(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        self.t = t;
        self.m = m;
        self.v = v;
        self.cursor = 0;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l1: f64,
    pub cgan_g: f64,
    pub tv: f64,
    pub per: f64,
    pub g_total: f64,
    pub d_total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochEval {
    pub epoch: u32,
    pub l1_direct: f64,
    pub l1_fused: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub d_config: DiscriminatorConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            d_config: DiscriminatorConfig::desk(),
        }
    }
}

pub struct TrainOutcome {
    /// Loss CSV rows produced by this run (header included).
    pub loss_csv: String,
    pub eval_history: Vec<EpochEval>,
}

pub struct Trainer {
    pub gen: Generator,
    pub d_direct: PatchDiscriminator,
    pub d_final: PatchDiscriminator,
    pub extractor: PerceptualExtractor,
    pub settings: TrainSettings,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    /// Completed epochs.
    pub epoch: u32,
    shuffle_rng: Rng,
    global_step: usize,
}

impl Trainer {
    pub fn new(gen_cfg: GeneratorConfig, settings: TrainSettings) -> Result<Trainer> {
        settings.weights.validate()?;
        let seed = gen_cfg.seed;
        let gen = Generator::new(gen_cfg)?;
        let d_direct = PatchDiscriminator::new(&settings.d_config, &mut Rng::new(seed, "d_direct"))?;
        let d_final = PatchDiscriminator::new(&settings.d_config, &mut Rng::new(seed, "d_final"))?;
        let adam = settings.adam;
        Ok(Trainer {
            gen,
            d_direct,
            d_final,
            extractor: PerceptualExtractor::new(),
            settings,
            adam_g: AdamState::new(adam),
            adam_d: AdamState::new(adam),
            epoch: 0,
            shuffle_rng: Rng::new(seed, "shuffle"),
            global_step: 0,
        })
    }

    fn zero_all_grads(&mut self) {
        self.gen.visit_params(&mut |_, p| p.zero_grad());
        self.d_direct.visit_params("d", &mut |_, p| p.zero_grad());
        self.d_final.visit_params("d", &mut |_, p| p.zero_grad());
    }

    /// One alternating D/G step on a batch. Returns the objective
    /// components; aborts with the step index if any goes non-finite.
    pub fn train_step(&mut self, aerial: &Tensor, semantic: &Tensor, target: &Tensor) -> Result<StepLosses> {
        self.global_step += 1;
        self.zero_all_grads();
        let mut tape = Tape::new();
        let w = self.settings.weights;

        // (1) Generator forward.
        let out = self.gen.forward(&mut tape, aerial, semantic, Mode::Train)?;

        // (2) Discriminator losses on detached fakes, then the D step.
        let real_dir = self.d_direct.forward(&mut tape, aerial, target, Mode::Train)?;
        let fake_dir = self.d_direct.forward(&mut tape, aerial, &out.direct.detach(), Mode::Train)?;
        let (d_dir, _) = adversarial_loss(&mut tape, &real_dir, &fake_dir)?;
        let real_fin = self.d_final.forward(&mut tape, aerial, target, Mode::Train)?;
        let fake_fin = self.d_final.forward(&mut tape, aerial, &out.fused.detach(), Mode::Train)?;
        let (d_fin, _) = adversarial_loss(&mut tape, &real_fin, &fake_fin)?;
        let d_total = tape.add(&d_dir, &d_fin)?;
        tape.backward(&d_total)?;
        let (d_direct, d_final) = (&mut self.d_direct, &mut self.d_final);
        self.adam_d.step(|f| {
            d_direct.visit_params_mut("d_direct", f);
            d_final.visit_params_mut("d_final", f);
        })?;

        // (3) Generator objective against the updated discriminators.
        let l1_dir = tape.l1_loss(&out.direct, target)?;
        let l1_fus = tape.l1_loss(&out.fused, target)?;
        let l1 = tape.add(&l1_dir, &l1_fus)?;
        let g_dir_logits = self.d_direct.forward(&mut tape, aerial, &out.direct, Mode::Train)?;
        let g_dir = tape.bce_with_logits(&g_dir_logits, 1.0)?;
        let g_fin_logits = self.d_final.forward(&mut tape, aerial, &out.fused, Mode::Train)?;
        let g_fin = tape.bce_with_logits(&g_fin_logits, 1.0)?;
        let cgan_g = tape.add(&g_dir, &g_fin)?;
        let tv = tape.tv_loss(&out.fused)?;
        let per = perceptual_loss(&mut tape, &out.fused, target, &self.extractor)?;
        let g_total = combine(&mut tape, &w, &l1, &cgan_g, &tv, &per)?;
        tape.backward(&g_total)?;
        let gen = &mut self.gen;
        self.adam_g.step(|f| gen.visit_params_mut(f))?;

        let losses = StepLosses {
            l1: l1.item_f64(),
            cgan_g: cgan_g.item_f64(),
            tv: tv.item_f64(),
            per: per.item_f64(),
            g_total: g_total.item_f64(),
            d_total: d_total.item_f64(),
        };
        for (name, v) in [
            ("l1", losses.l1),
            ("cgan_g", losses.cgan_g),
            ("tv", losses.tv),
            ("per", losses.per),
            ("g_total", losses.g_total),
            ("d_total", losses.d_total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.global_step,
                    component: match name {
                        "l1" => "l1",
                        "cgan_g" => "cgan_g",
                        "tv" => "tv",
                        "per" => "per",
                        "g_total" => "g_total",
                        _ => "d_total",
                    },
                });
            }
        }
        Ok(losses)
    }

    /// Held-out mean L1 of both outputs (eval mode, no gradients).
    pub fn evaluate(&self, test: &[LoadedTriplet]) -> Result<(f64, f64)> {
        let mut sum_dir = 0.0f64;
        let mut sum_fus = 0.0f64;
        let mut count = 0usize;
        for chunk in test.chunks(self.settings.batch_size.max(1)) {
            let (aerial, semantic, target) = stack_batch(chunk)?;
            let mut tape = Tape::no_grad();
            let out = self.gen.forward(&mut tape, &aerial, &semantic, Mode::Eval)?;
            let l_dir = tape.l1_loss(&out.direct, &target)?.item_f64();
            let l_fus = tape.l1_loss(&out.fused, &target)?.item_f64();
            sum_dir += l_dir * chunk.len() as f64;
            sum_fus += l_fus * chunk.len() as f64;
            count += chunk.len();
        }
        if count == 0 {
            return Err(Error::Config("evaluate called with empty test set".to_string()));
        }
        Ok((sum_dir / count as f64, sum_fus / count as f64))
    }

    /// Trains until `settings.epochs` completed epochs, evaluating the test
    /// split after every epoch. `on_epoch` runs after each evaluation
    /// (checkpoint hooks). Full batches only; a trailing partial batch is
    /// dropped.
    pub fn run(
        &mut self,
        train: &[LoadedTriplet],
        test: &[LoadedTriplet],
        mut on_epoch: impl FnMut(&Trainer, &EpochEval) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut csv = String::from(LOSS_CSV_HEADER);
        csv.push('\n');
        let mut eval_history = Vec::new();
        let bs = self.settings.batch_size.max(1);
        while self.epoch < self.settings.epochs {
            let epoch = self.epoch + 1;
            let mut order: Vec<usize> = (0..train.len()).collect();
            self.shuffle_rng.shuffle(&mut order);
            let mut step_in_epoch = 0usize;
            for batch_ids in order.chunks(bs) {
                if batch_ids.len() < bs {
                    break;
                }
                let items: Vec<&LoadedTriplet> = batch_ids.iter().map(|&i| &train[i]).collect();
                let (aerial, semantic, target) = stack_batch_refs(&items)?;
                let losses = self.train_step(&aerial, &semantic, &target)?;
                step_in_epoch += 1;
                let _ = writeln!(
                    csv,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    epoch,
                    step_in_epoch,
                    losses.l1,
                    losses.cgan_g,
                    losses.tv,
                    losses.per,
                    losses.g_total,
                    losses.d_total
                );
            }
            self.epoch = epoch;
            let (l1_direct, l1_fused) = self.evaluate(test)?;
            let eval = EpochEval { epoch, l1_direct, l1_fused };
            eval_history.push(eval);
            on_epoch(self, &eval)?;
        }
        Ok(TrainOutcome { loss_csv: csv, eval_history })
    }

    /// FNV-1a over the generator's parameter bytes (enumeration order).
    pub fn generator_param_hash(&self) -> u64 {
        let mut h = Hasher::new();
        self.gen.visit_params(&mut |_, p| h.eat(p.data()));
        h.finish()
    }

    /// FNV-1a over both discriminators' parameter bytes.
    pub fn discriminator_param_hash(&self) -> u64 {
        let mut h = Hasher::new();
        self.d_direct.visit_params("d_direct", &mut |_, p| h.eat(p.data()));
        self.d_final.visit_params("d_final", &mut |_, p| h.eat(p.data()));
        h.finish()
    }
}

struct Hasher(u64);

impl Hasher {
    fn new() -> Hasher {
        Hasher(0xCBF2_9CE4_8422_2325)
    }

    fn eat(&mut self, data: &[f32]) {
        for v in data {
            for b in v.to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

fn stack_batch_refs(items: &[&LoadedTriplet]) -> Result<(Tensor, Tensor, Tensor)> {
    let b = items.len();
    let shape = items[0].aerial.shape().to_vec(); // (3, h, w)
    let per = shape.iter().product::<usize>();
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&shape);
    let stack = |pick: &dyn Fn(&LoadedTriplet) -> &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(b * per);
        for item in items {
            let t = pick(item);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "stack_batch",
                    format!("mixed item shapes: {:?} vs {:?}", t.shape(), shape),
                ));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(data, &out_shape)
    };
    Ok((
        stack(&|t| &t.aerial)?,
        stack(&|t| &t.semantic)?,
        stack(&|t| &t.ground)?,
    ))
}

fn stack_batch(items: &[LoadedTriplet]) -> Result<(Tensor, Tensor, Tensor)> {
    let refs: Vec<&LoadedTriplet> = items.iter().collect();
    stack_batch_refs(&refs)
}

// ── Checkpoint format ─────────────────────────────────────────────────
//
// Little-endian throughout:
//   magic "PITR", version u32,
//   config blob (u32 len + canonical GeneratorConfig text),
//   epoch u32,
//   named f32 records ×2 (params, then buffers):
//     u32 count, then per record: u32 name_len, name bytes, u32 rank,
//     u32 dims…, f32 payload…
//   optimizer states ×2 (adam_g, adam_d):
//     u32 name_len + name, u64 t, u32 param_count, per param:
//     u32 numel, f32 m…, f32 v…
//   rng streams: u32 count, per stream: u32 label_len, label, u64 key,
//     u64 counter.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PITR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Canonical textual form of the model configuration (embedded in
/// checkpoints; a checkpoint only loads into an identically-configured
/// run). Parse it back with [`crate::config::parse_model_config`].
pub fn canonical_model_config(cfg: &GeneratorConfig, d_cfg: &DiscriminatorConfig) -> String {
    format!(
        "image_size={}\nc_l1={}\nhc_mult={}\nhs_cap={}\nscale_scores={}\nencoder_variant={}\nuse_itm={}\nseed={}\nd_widths={}\n",
        cfg.image_size,
        cfg.c_l1,
        cfg.hc_mult,
        cfg.hs_cap,
        cfg.scale_scores,
        match cfg.encoder_variant {
            crate::generator::EncoderVariant::PConvMlp => "pconvmlp",
            crate::generator::EncoderVariant::BasicConv => "basic_conv",
        },
        cfg.use_itm,
        cfg.seed,
        d_cfg.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
    )
}

/// Reads only the embedded model configuration of a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<(GeneratorConfig, DiscriminatorConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            what: "checkpoint",
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let _version = r.u32()?;
    let cfg_len = r.u32()? as usize;
    let at = r.pos;
    let text = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| Error::Parse {
        what: "checkpoint",
        offset: at,
        detail: "config blob is not UTF-8".to_string(),
    })?;
    crate::config::parse_model_config(&text)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn floats(&mut self, data: &[f32]) {
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse { what: "checkpoint", offset: self.pos, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Parse {
            what: "checkpoint",
            offset: at,
            detail: "name is not UTF-8".to_string(),
        })
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Trainer {
    fn collect_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.gen.visit_params(&mut |n, p| out.push((n.to_string(), p.clone())));
        self.d_direct.visit_params("d_direct", &mut |n, p| out.push((n.to_string(), p.clone())));
        self.d_final.visit_params("d_final", &mut |n, p| out.push((n.to_string(), p.clone())));
        out
    }

    fn collect_buffers(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        let mut grab = |n: &str, b: &std::sync::Mutex<Vec<f32>>| out.push((n.to_string(), b.lock().unwrap().clone()));
        self.gen.visit_buffers(&mut grab);
        self.d_direct.visit_buffers("d_direct", &mut grab);
        self.d_final.visit_buffers("d_final", &mut grab);
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let cfg = canonical_model_config(&self.gen.cfg, &self.settings.d_config);
        w.u32(cfg.len() as u32);
        w.bytes(cfg.as_bytes());
        w.u32(self.epoch);

        let params = self.collect_params();
        w.u32(params.len() as u32);
        for (name, p) in &params {
            w.name(name);
            w.u32(p.shape().len() as u32);
            for &d in p.shape() {
                w.u32(d as u32);
            }
            w.floats(p.data());
        }

        let buffers = self.collect_buffers();
        w.u32(buffers.len() as u32);
        for (name, b) in &buffers {
            w.name(name);
            w.u32(1);
            w.u32(b.len() as u32);
            w.floats(b);
        }

        for (name, adam) in [("adam_g", &self.adam_g), ("adam_d", &self.adam_d)] {
            w.name(name);
            w.u64(adam.t);
            let (m, v) = adam.moments();
            w.u32(m.len() as u32);
            for (mi, vi) in m.iter().zip(v) {
                w.u32(mi.len() as u32);
                w.floats(mi);
                w.floats(vi);
            }
        }

        w.u32(1);
        w.name("shuffle");
        let (key, counter) = self.shuffle_rng.state();
        w.u64(key);
        w.u64(counter);

        std::fs::write(path, &w.buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Rebuilds a trainer from a checkpoint. The stored config must match
    /// `gen_cfg` exactly.
    pub fn load_checkpoint(path: &Path, gen_cfg: GeneratorConfig, settings: TrainSettings) -> Result<Trainer> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };

        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 0,
                detail: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos;
        let stored_cfg = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| Error::Parse {
            what: "checkpoint",
            offset: cfg_at,
            detail: "config blob is not UTF-8".to_string(),
        })?;
        let expected = canonical_model_config(&gen_cfg, &settings.d_config);
        if stored_cfg != expected {
            return Err(Error::Config(format!(
                "checkpoint config does not match this run:\n-- checkpoint --\n{stored_cfg}\n-- run --\n{expected}"
            )));
        }
        let epoch = r.u32()?;

        let mut trainer = Trainer::new(gen_cfg, settings)?;
        trainer.epoch = epoch;

        // Parameters, strictly in enumeration order.
        let count = r.u32()? as usize;
        let mut stored: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = r.floats(numel)?;
            stored.push((name, dims, data));
        }
        let mut idx = 0usize;
        let mut apply_err: Option<Error> = None;
        let mut apply = |name: &str, p: &mut Tensor| {
            if apply_err.is_some() {
                return;
            }
            match stored.get(idx) {
                Some((sname, dims, data)) if sname == name && dims == p.shape() => {
                    *p = Tensor::param(data.clone(), dims).unwrap();
                }
                Some((sname, dims, _)) => {
                    apply_err = Some(Error::Config(format!(
                        "checkpoint record {idx} is {sname} {dims:?}, model expects {name} {:?}",
                        p.shape()
                    )));
                }
                None => {
                    apply_err = Some(Error::Config(format!("checkpoint is missing parameter {name}")));
                }
            }
            idx += 1;
        };
        trainer.gen.visit_params_mut(&mut apply);
        trainer.d_direct.visit_params_mut("d_direct", &mut apply);
        trainer.d_final.visit_params_mut("d_final", &mut apply);
        if let Some(e) = apply_err {
            return Err(e);
        }
        if idx != stored.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter records, model consumed {idx}",
                stored.len()
            )));
        }

        // Buffers.
        let bcount = r.u32()? as usize;
        let mut stored_buf: Vec<(String, Vec<f32>)> = Vec::with_capacity(bcount);
        for _ in 0..bcount {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            let mut numel = 1usize;
            for _ in 0..rank {
                numel *= r.u32()? as usize;
            }
            stored_buf.push((name, r.floats(numel)?));
        }
        let mut bidx = 0usize;
        let mut buf_err: Option<Error> = None;
        let mut apply_buf = |name: &str, b: &std::sync::Mutex<Vec<f32>>| {
            if buf_err.is_some() {
                return;
            }
            match stored_buf.get(bidx) {
                Some((sname, data)) if sname == name && data.len() == b.lock().unwrap().len() => {
                    *b.lock().unwrap() = data.clone();
                }
                _ => buf_err = Some(Error::Config(format!("checkpoint buffer mismatch at {name}"))),
            }
            bidx += 1;
        };
        trainer.gen.visit_buffers(&mut apply_buf);
        trainer.d_direct.visit_buffers("d_direct", &mut apply_buf);
        trainer.d_final.visit_buffers("d_final", &mut apply_buf);
        if let Some(e) = buf_err {
            return Err(e);
        }

        // Optimizer states.
        for (expect_name, slot) in [("adam_g", &mut trainer.adam_g), ("adam_d", &mut trainer.adam_d)] {
            let name = r.name()?;
            if name != expect_name {
                return Err(r.fail(format!("expected optimizer {expect_name}, found {name}")));
            }
            let t = r.u64()?;
            let pcount = r.u32()? as usize;
            let mut m = Vec::with_capacity(pcount);
            let mut v = Vec::with_capacity(pcount);
            for _ in 0..pcount {
                let numel = r.u32()? as usize;
                m.push(r.floats(numel)?);
                v.push(r.floats(numel)?);
            }
            slot.seed_state(t, m, v);
        }

        // RNG streams.
        let rcount = r.u32()? as usize;
        for _ in 0..rcount {
            let label = r.name()?;
            let key = r.u64()?;
            let counter = r.u64()?;
            if label == "shuffle" {
                trainer.shuffle_rng = Rng::from_state(key, counter);
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_closed_form() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::param(vec![1.0], &[1]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut params = [("p", &mut p)];
        adam.step(|f| {
            for (n, t) in params.iter_mut() {
                f(n, t);
            }
        })
        .unwrap();
        // Δ = −lr·m̂/(√v̂ + eps) = −lr at step 1 with g = 1, up to the f32
        // storage rounding of the updated parameter.
        let delta = p.data()[0] - 1.0;
        assert!((delta + 2e-4).abs() < 1e-7, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::param(vec![0.5, -0.25], &[2]).unwrap();
        p.accumulate_grad(&[0.0, 0.0]);
        adam.step(|f| f("p", &mut p)).unwrap();
        assert_eq!(p.data(), &[0.5, -0.25]);
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = Tensor::param(vec![1.0], &[1]).unwrap();
        let err = adam.step(|f| f("gen.enc_a.stem.conv1.weight", &mut p)).unwrap_err();
        assert!(err.to_string().contains("gen.enc_a.stem.conv1.weight"), "{err}");
    }

    #[test]
    fn canonical_config_is_stable_and_parses_back() {
        let cfg = GeneratorConfig { seed: 7, ..GeneratorConfig::desk() };
        let d = DiscriminatorConfig::desk();
        let text = canonical_model_config(&cfg, &d);
        assert!(text.contains("image_size=64"));
        assert!(text.contains("seed=7"));
        assert!(text.contains("d_widths=8,16,32"));
        let (gcfg, dcfg) = crate::config::parse_model_config(&text).unwrap();
        assert_eq!(canonical_model_config(&gcfg, &dcfg), text);
    }
}
