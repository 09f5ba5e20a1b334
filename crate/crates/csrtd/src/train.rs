//! Training loop: Adam over leaf-replaced parameters, strict-improvement
//! early stopping, in-memory best checkpoint, and a binary checkpoint codec.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_traits::NumCast;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{image_to_tensor, LoadedSample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights};
use crate::metrics::{EvalAccum, EvalReport};
use crate::model::{ModelConfig, RtdModel};
use crate::param::ParamVisit;
use crate::scalar::Scalar;
use crate::tensor::{NoGradGuard, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("adam lr and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Each step reads accumulated leaf gradients and
/// replaces every parameter with a fresh leaf, which also clears gradients
/// for the next accumulation window.
pub struct Adam<E: Scalar> {
    pub cfg: AdamConfig,
    pub step_count: u64,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn moment(&self, which: char, name: &str) -> Option<&[E]> {
        let map = if which == 'm' { &self.m } else { &self.v };
        map.get(name).map(|v| v.as_slice())
    }

    pub fn set_moment(&mut self, which: char, name: String, data: Vec<E>) {
        let map = if which == 'm' { &mut self.m } else { &mut self.v };
        map.insert(name, data);
    }

    pub fn step<M: ParamVisit<E>>(&mut self, model: &mut M) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = E::c(self.cfg.beta1);
        let b2 = E::c(self.cfg.beta2);
        let lr = E::c(self.cfg.lr);
        let eps = E::c(self.cfg.epsilon);
        let bc1 = E::one() - b1.powi(t);
        let bc2 = E::one() - b2.powi(t);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        let mut failure: Option<Error> = None;
        model.visit_mut("", &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let g = tensor.grad_or_zeros();
            let n = g.len();
            let m = m_map.entry(name.to_string()).or_insert_with(|| vec![E::zero(); n]);
            let v = v_map.entry(name.to_string()).or_insert_with(|| vec![E::zero(); n]);
            if m.len() != n || v.len() != n {
                failure = Some(Error::Contract(format!("adam moment size mismatch for {name}")));
                return;
            }
            let mut data = tensor.data().to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (E::one() - b1) * g[i];
                v[i] = b2 * v[i] + (E::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = tensor.shape().to_vec();
            match Tensor::leaf(&shape, data) {
                Ok(fresh) => *tensor = fresh,
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Stops once `patience` consecutive epochs fail to strictly improve the
/// best validation loss.
#[derive(Clone, Copy, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: u64,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Returns true when this epoch set a new best.
    pub fn observe(&mut self, epoch: u64, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            patience: 5,
            max_epochs: 100,
            seed,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self { model: ModelConfig::paper(), batch_size: 16, ..Self::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_f1: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_loss={:.6} val_miou={:.6} val_f1={:.6}",
            self.epoch, self.train_loss, self.val_loss, self.val_miou, self.val_f1
        )
    }
}

/// Plain-data snapshot of model parameters and optimizer moments, stored as
/// f32 regardless of the scalar the model trains in.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: u64,
    pub best_val_loss: f64,
    pub adam_step: u64,
    pub records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn to_f32<E: Scalar>(x: E) -> f32 {
    <f64 as NumCast>::from(x).unwrap_or(f64::NAN) as f32
}

impl Checkpoint {
    pub fn capture<E: Scalar>(
        model: &RtdModel<E>,
        adam: &Adam<E>,
        epoch: u64,
        best_val_loss: f64,
    ) -> Self {
        let mut records = Vec::new();
        let mut names = Vec::new();
        model.visit("", &mut |name, t| {
            names.push(name.to_string());
            let data: Vec<f32> = t.data().iter().map(|&x| to_f32(x)).collect();
            records.push((name.to_string(), t.shape().to_vec(), data));
        });
        for which in ['m', 'v'] {
            for name in &names {
                let rec = records.iter().find(|(n, _, _)| n == name).unwrap();
                let data = match adam.moment(which, name) {
                    Some(d) => d.iter().map(|&x| to_f32(x)).collect(),
                    None => vec![0.0; rec.2.len()],
                };
                records.push((format!("{which}.{name}"), rec.1.clone(), data));
            }
        }
        Self { config: model.config.clone(), epoch, best_val_loss, adam_step: adam.step_count, records }
    }

    /// Rebuilds the model and optimizer; every parameter and both moment
    /// banks must be present with matching shapes.
    pub fn restore<E: Scalar>(&self) -> Result<(RtdModel<E>, Adam<E>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RtdModel::<E>::new(self.config.clone(), &mut rng)?;
        let by_name: BTreeMap<&str, (&[usize], &[f32])> = self
            .records
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect();
        if by_name.len() != self.records.len() {
            return Err(Error::Checkpoint("duplicate record names".into()));
        }
        let mut failure: Option<Error> = None;
        let mut used = 0usize;
        model.visit_mut("", &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            match by_name.get(name) {
                Some((shape, data)) if *shape == tensor.shape() => {
                    used += 1;
                    let vals: Vec<E> = data.iter().map(|&x| E::c(x as f64)).collect();
                    match Tensor::leaf(&shape.to_vec(), vals) {
                        Ok(t) => *tensor = t,
                        Err(e) => failure = Some(e),
                    }
                }
                Some(_) => {
                    failure = Some(Error::Checkpoint(format!("shape mismatch for {name}")))
                }
                None => failure = Some(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let mut adam = Adam::new(AdamConfig::default())?;
        adam.step_count = self.adam_step;
        for (name, _, data) in &self.records {
            if let Some(rest) = name.strip_prefix("m.") {
                used += 1;
                adam.set_moment('m', rest.to_string(), data.iter().map(|&x| E::c(x as f64)).collect());
            } else if let Some(rest) = name.strip_prefix("v.") {
                used += 1;
                adam.set_moment('v', rest.to_string(), data.iter().map(|&x| E::c(x as f64)).collect());
            }
        }
        if used != self.records.len() {
            return Err(Error::Checkpoint("checkpoint holds records the model does not own".into()));
        }
        Ok((model, adam))
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"CSRTD1";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header = format!(
        "{}epoch={}\nbest_val_loss={}\nadam_step={}\n",
        ckpt.config.to_kv(),
        ckpt.epoch,
        ckpt.best_val_loss,
        ckpt.adam_step
    );
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(ckpt.records.len() as u64).to_le_bytes());
    for (name, shape, data) in &ckpt.records {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn header_field(header: &str, key: &str) -> Result<String> {
    header
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("header missing {key}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let header_len = r.u64()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?
        .to_string();
    let config = ModelConfig::from_kv(&header)?;
    let epoch = header_field(&header, "epoch")?
        .parse::<u64>()
        .map_err(|_| Error::Checkpoint("bad epoch field".into()))?;
    let best_val_loss = header_field(&header, "best_val_loss")?
        .parse::<f64>()
        .map_err(|_| Error::Checkpoint("bad best_val_loss field".into()))?;
    let adam_step = header_field(&header, "adam_step")?
        .parse::<u64>()
        .map_err(|_| Error::Checkpoint("bad adam_step field".into()))?;
    let n_records = r.u64()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?
            .to_string();
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }
    Ok(Checkpoint { config, epoch, best_val_loss, adam_step, records })
}

pub struct SampleTensors<E: Scalar> {
    pub goal: Tensor<E>,
    pub cur: Tensor<E>,
    pub mask: Vec<u8>,
}

pub fn sample_tensors<E: Scalar>(s: &LoadedSample) -> Result<SampleTensors<E>> {
    Ok(SampleTensors {
        goal: image_to_tensor(&s.goal)?,
        cur: image_to_tensor(&s.cur)?,
        mask: s.mask.clone(),
    })
}

/// Mean total loss plus mask metrics over a split, gradient-free.
pub fn evaluate<E: Scalar>(
    model: &RtdModel<E>,
    samples: &[LoadedSample],
    weights: &LossWeights,
) -> Result<(f64, EvalReport)> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let _guard = NoGradGuard::new();
    let mut accum = EvalAccum::default();
    let mut loss_sum = 0.0;
    for s in samples {
        let t = sample_tensors::<E>(s)?;
        let logits = model.forward(&t.goal, &t.cur)?;
        let loss = total_loss(&logits, &t.mask, weights)?;
        loss_sum += <f64 as NumCast>::from(loss.item()).unwrap_or(f64::NAN);
        let pred = crate::decoder::binarize(&logits)?;
        accum.add_sample(&pred, &t.mask)?;
    }
    Ok((loss_sum / samples.len() as f64, accum.finish()))
}

/// Evaluation fanned out over worker threads; each worker restores its own
/// model from the checkpoint and results merge in sample order, so the
/// report is identical for any worker count.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    samples: &[LoadedSample],
    weights: &LossWeights,
    workers: usize,
) -> Result<(f64, EvalReport)> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let workers = workers.clamp(1, samples.len());
    let mut slots: Vec<Option<(Vec<u8>, f64)>> = vec![None; samples.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for w in 0..workers {
            handles.push(scope.spawn(move || -> Result<Vec<(usize, Vec<u8>, f64)>> {
                let (model, _) = ckpt.restore::<f32>()?;
                let _guard = NoGradGuard::new();
                let mut out = Vec::new();
                for (i, s) in samples.iter().enumerate().skip(w).step_by(workers) {
                    let t = sample_tensors::<f32>(s)?;
                    let logits = model.forward(&t.goal, &t.cur)?;
                    let loss = total_loss(&logits, &t.mask, weights)?;
                    let pred = crate::decoder::binarize(&logits)?;
                    out.push((i, pred, loss.item() as f64));
                }
                Ok(out)
            }));
        }
        for h in handles {
            for (i, pred, loss) in h.join().expect("eval worker panicked")? {
                slots[i] = Some((pred, loss));
            }
        }
        Ok(())
    })?;
    let mut accum = EvalAccum::default();
    let mut loss_sum = 0.0;
    for (slot, s) in slots.iter().zip(samples) {
        let (pred, loss) = slot.as_ref().expect("every sample slot filled");
        loss_sum += loss;
        accum.add_sample(pred, &s.mask)?;
    }
    Ok((loss_sum / samples.len() as f64, accum.finish()))
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Runs the full loop: shuffled mini-batches, per-sample backward of
/// loss/B, Adam step per batch, validation each epoch, best-epoch
/// checkpoint kept in memory. Non-finite losses abort with Diverged.
pub fn train<E: Scalar>(
    cfg: &TrainConfig,
    train_set: &[LoadedSample],
    val_set: &[LoadedSample],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("train and val splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RtdModel::<E>::new(cfg.model.clone(), &mut rng)?;
    let mut adam = Adam::<E>::new(cfg.adam)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<Checkpoint> = None;
    let mut logs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs as u64 {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inv_b = 1.0 / batch.len() as f64;
            for &idx in batch {
                let t = sample_tensors::<E>(&train_set[idx])?;
                let logits = model.forward(&t.goal, &t.cur)?;
                let loss = total_loss(&logits, &t.mask, &cfg.loss)?;
                let value = <f64 as NumCast>::from(loss.item()).unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}: non-finite training loss {value}"
                    )));
                }
                loss_sum += value;
                crate::ops::scale(&loss, E::c(inv_b)).backward()?;
            }
            adam.step(&mut model)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, report) = evaluate(&model, val_set, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite validation loss")));
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_miou: report.miou,
            val_f1: report.f1,
        };
        writeln!(log, "{}", entry.line()).map_err(|e| Error::io("train log", e))?;
        logs.push(entry);
        if stopper.observe(epoch, val_loss) {
            best = Some(Checkpoint::capture(&model, &adam, epoch, val_loss));
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Contract("no epoch produced a checkpoint".into()))?;
    Ok(TrainOutcome { best, logs, stopped_early })
}
