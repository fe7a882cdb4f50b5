//! P x K sampling, the two-stage batch gradient, Adam and the epoch loop.
//!
//! A batch gradient is computed in three passes. Each sample's forward pass
//! is recorded on its own tape (in parallel). A batch tape then takes the
//! fused features and bank weights as inputs and evaluates the terms that
//! couple samples: cross-entropy, triplet and load balance. Its input
//! gradients seed the reverse sweep of every sample tape (in parallel), and
//! the per-sample parameter gradients are summed in sample order.

use super::checkpoint::Checkpoint;
use super::losses::{batch_hard_triplet_t, check_triplet_batch, total_loss, LossBreakdown};
use super::model::{names, Model, SampleVars};
use super::{Decay, TrainConfig};
use crate::dataio::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::modality::{Modality, NUM_MODALITIES};
use crate::numerics::{seeded_rng, stream_id, Grads, Matrix, ParamStore, StreamKind, Tape, Var};
use crate::ugmoe;

/// One training batch: samples with their class indices for the head.
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
    pub labels: Vec<usize>,
}

/// Train split grouped by head class.
pub struct TrainSet<'a> {
    pub by_class: Vec<Vec<&'a Sample>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        let map = ds.train_label_map();
        let mut by_class = vec![Vec::new(); map.len()];
        for s in ds.split(Split::Train) {
            by_class[map[&s.label]].push(s);
        }
        Self { by_class }
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn steps_per_epoch(cfg: &TrainConfig, train_samples: usize) -> usize {
    (train_samples / cfg.batch_size()).max(1)
}

/// Batches of one epoch. Identities are visited in a shuffled cyclic
/// order, `P` per batch; `K` instances are drawn without replacement when
/// an identity has enough, with replacement otherwise.
pub fn epoch_batches<'a>(
    cfg: &TrainConfig,
    ts: &TrainSet<'a>,
    epoch: usize,
) -> Result<Vec<Batch<'a>>> {
    let classes = ts.num_classes();
    if classes < cfg.p {
        return Err(Error::Config(format!(
            "train.P = {} but only {classes} training identities",
            cfg.p
        )));
    }
    let mut order: Vec<usize> = (0..classes).collect();
    seeded_rng(cfg.seed, stream_id(StreamKind::Sampler, &[epoch as u64])).shuffle(&mut order);
    let steps = steps_per_epoch(cfg, ts.len());
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Batch {
            samples: Vec::with_capacity(cfg.batch_size()),
            labels: Vec::with_capacity(cfg.batch_size()),
        };
        for j in 0..cfg.p {
            let class = order[(step * cfg.p + j) % classes];
            let pool = &ts.by_class[class];
            let mut rng = seeded_rng(
                cfg.seed,
                stream_id(
                    StreamKind::Sampler,
                    &[epoch as u64, step as u64, class as u64],
                ),
            );
            if pool.len() >= cfg.k {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                rng.shuffle(&mut idx);
                batch.samples.extend(idx[..cfg.k].iter().map(|&i| pool[i]));
            } else {
                batch
                    .samples
                    .extend((0..cfg.k).map(|_| pool[rng.below(pool.len())]));
            }
            batch.labels.extend(std::iter::repeat_n(class, cfg.k));
        }
        out.push(batch);
    }
    Ok(out)
}

struct SampleForward<'p> {
    tape: Tape<'p>,
    vars: SampleVars,
    /// `(1/B) sum_m (lambda1 kl_cs + lambda2 routing)` when present.
    reg: Option<Var>,
}

fn forward_sample<'p>(
    model: &Model,
    cfg: &TrainConfig,
    params: &'p ParamStore,
    sample: &Sample,
    step: u64,
    slot: usize,
    batch: usize,
) -> SampleForward<'p> {
    let mut t = Tape::new(params);
    let noise = model.reparam_noise(cfg.seed, step, slot as u64);
    let vars = model.forward_t(&mut t, sample, noise);
    let mut terms = Vec::new();
    for m in 0..NUM_MODALITIES {
        if let Some(v) = vars.kl_cs[m] {
            terms.push(t.scale(v, cfg.lambda1));
        }
        if let Some(v) = vars.routing[m] {
            terms.push(t.scale(v, cfg.lambda2));
        }
    }
    let reg = terms.split_first().map(|(&first, rest)| {
        let mut acc = first;
        for &r in rest {
            acc = t.add(acc, r);
        }
        t.scale(acc, 1.0 / batch as f64)
    });
    SampleForward { tape: t, vars, reg }
}

struct BatchTerms<'p> {
    tape: Tape<'p>,
    objective: Var,
    z_inputs: Vec<Var>,
    w_inputs: [Vec<Var>; NUM_MODALITIES],
    ce: f64,
    tri: f64,
    balance: [f64; NUM_MODALITIES],
}

fn batch_terms<'p>(
    cfg: &TrainConfig,
    params: &'p ParamStore,
    forwards: &[SampleForward<'_>],
    labels: &[usize],
) -> BatchTerms<'p> {
    let mut t = Tape::new(params);
    let z_inputs: Vec<Var> = forwards
        .iter()
        .map(|f| t.input(f.tape.value(f.vars.z).clone()))
        .collect();
    let z = t.concat_rows(&z_inputs);
    let w = t.param(names::HEAD_W);
    let b = t.param(names::HEAD_B);
    let logits = t.affine(z, w, b);
    let ce = t.cross_entropy(logits, labels);
    let tri = batch_hard_triplet_t(&mut t, z, labels, cfg.margin);
    let mut objective = t.add(ce, tri);
    let mut w_inputs: [Vec<Var>; NUM_MODALITIES] = Default::default();
    let mut balance = [0.0; NUM_MODALITIES];
    for m in 0..NUM_MODALITIES {
        if forwards[0].vars.weights[m].is_none() {
            continue;
        }
        w_inputs[m] = forwards
            .iter()
            .map(|f| t.input(f.tape.value(f.vars.weights[m].expect("weights")).clone()))
            .collect();
        let stacked = t.concat_rows(&w_inputs[m]);
        let le = ugmoe::load_balance_t(&mut t, stacked);
        balance[m] = t.value(le).item();
        let scaled = t.scale(le, cfg.lambda3);
        objective = t.add(objective, scaled);
    }
    let (ce, tri) = (t.value(ce).item(), t.value(tri).item());
    BatchTerms {
        tape: t,
        objective,
        z_inputs,
        w_inputs,
        ce,
        tri,
        balance,
    }
}

fn check_batch(model: &Model, batch: &Batch<'_>) -> Result<()> {
    if batch.samples.len() != batch.labels.len() || batch.samples.is_empty() {
        return Err(Error::Shape(
            "batch samples and labels differ in length".into(),
        ));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::Shape(format!(
            "label {l} out of range for {} classes",
            model.num_classes
        )));
    }
    check_triplet_batch(&batch.labels)?;
    batch.samples.iter().try_for_each(|s| model.check_sample(s))
}

fn breakdown(
    cfg: &TrainConfig,
    forwards: &[SampleForward<'_>],
    bt: &BatchTerms<'_>,
) -> LossBreakdown {
    let b = forwards.len() as f64;
    let mut parts = LossBreakdown {
        ce: bt.ce,
        tri: bt.tri,
        balance: bt.balance,
        ..LossBreakdown::default()
    };
    for f in forwards {
        for m in 0..NUM_MODALITIES {
            if let Some(v) = f.vars.kl_cs[m] {
                parts.kl_cs[m] += f.tape.value(v).item() / b;
            }
            if let Some(v) = f.vars.routing[m] {
                parts.routing[m] += f.tape.value(v).item() / b;
            }
        }
    }
    total_loss(&parts, cfg.weights())
}

fn forward_all<'p>(
    model: &Model,
    cfg: &TrainConfig,
    params: &'p ParamStore,
    batch: &Batch<'_>,
    step: u64,
    exec: Exec,
) -> Vec<SampleForward<'p>> {
    let b = batch.samples.len();
    exec.map_range(b, |i| {
        forward_sample(model, cfg, params, batch.samples[i], step, i, b)
    })
}

/// Loss of one batch with reparameterization noise pinned by `step`.
pub fn batch_loss(
    model: &Model,
    cfg: &TrainConfig,
    params: &ParamStore,
    batch: &Batch<'_>,
    step: u64,
    exec: Exec,
) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    let forwards = forward_all(model, cfg, params, batch, step, exec);
    let bt = batch_terms(cfg, params, &forwards, &batch.labels);
    Ok(breakdown(cfg, &forwards, &bt))
}

/// Loss and full parameter gradient of one batch.
pub fn batch_gradients(
    model: &Model,
    cfg: &TrainConfig,
    params: &ParamStore,
    batch: &Batch<'_>,
    step: u64,
    exec: Exec,
) -> Result<(LossBreakdown, Grads)> {
    check_batch(model, batch)?;
    let forwards = forward_all(model, cfg, params, batch, step, exec);
    let bt = batch_terms(cfg, params, &forwards, &batch.labels);
    let loss = breakdown(cfg, &forwards, &bt);
    let top = bt.tape.backward(&[(bt.objective, Matrix::scalar(1.0))]);
    let mut grads = top.params.clone().expect("batch tape has parameters");
    let per_sample: Vec<Grads> = exec.map_range(forwards.len(), |i| {
        let f = &forwards[i];
        let mut seeds = Vec::with_capacity(2 + NUM_MODALITIES);
        if let Some(r) = f.reg {
            seeds.push((r, Matrix::scalar(1.0)));
        }
        if let Some(g) = top.grad(bt.z_inputs[i]) {
            seeds.push((f.vars.z, g.clone()));
        }
        for m in Modality::ALL {
            if let (Some(w), Some(&wi)) = (f.vars.weights[m.index()], bt.w_inputs[m.index()].get(i))
            {
                if let Some(g) = top.grad(wi) {
                    seeds.push((w, g.clone()));
                }
            }
        }
        f.tape
            .backward(&seeds)
            .params
            .expect("sample tape has parameters")
    });
    for g in &per_sample {
        grads.accumulate(g);
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads.get(i).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(i).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate at a global step.
pub fn learning_rate(cfg: &TrainConfig, step: u64, steps_per_epoch: usize) -> f64 {
    let spe = steps_per_epoch as f64;
    let warm = cfg.warmup_epochs as f64 * spe;
    let s = step as f64;
    if s < warm {
        return cfg.lr * (s + 1.0) / warm;
    }
    match cfg.decay {
        Decay::Constant => cfg.lr,
        Decay::Cosine => {
            let total = (cfg.epochs as f64 * spe - warm).max(1.0);
            let p = ((s - warm) / total).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Trains `ck` in place until it has completed `until_epoch` epochs.
pub fn train_until(
    ck: &mut Checkpoint,
    ds: &Dataset,
    until_epoch: usize,
    exec: Exec,
) -> Result<()> {
    let cfg = ck.config.clone();
    let ts = TrainSet::new(ds);
    if ts.num_classes() != ck.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} training identities, checkpoint head has {}",
            ts.num_classes(),
            ck.num_classes
        )));
    }
    let model = ck.model()?;
    let spe = steps_per_epoch(&cfg, ts.len());
    while ck.epoch < until_epoch {
        for batch in epoch_batches(&cfg, &ts, ck.epoch)? {
            let step = ck.step;
            let (loss, grads) = batch_gradients(&model, &cfg, &ck.params, &batch, step, exec)?;
            if let Some(term) = loss.first_non_finite() {
                return Err(Error::NonFinite {
                    step: step as usize,
                    term,
                });
            }
            for i in 0..grads.len() {
                if !grads.get(i).is_finite() {
                    return Err(Error::NonFinite {
                        step: step as usize,
                        term: format!("grad {}", ck.params.name(i)),
                    });
                }
            }
            let lr = learning_rate(&cfg, step, spe);
            ck.adam.step(&mut ck.params, &grads, lr);
            ck.history.push(loss);
            ck.step += 1;
        }
        ck.epoch += 1;
    }
    Ok(())
}

pub fn fit(cfg: &TrainConfig, ds: &Dataset, exec: Exec) -> Result<Checkpoint> {
    let mut ck = Checkpoint::initial(cfg, ds)?;
    train_until(&mut ck, ds, cfg.epochs, exec)?;
    Ok(ck)
}

/// Continues a checkpoint to `until_epoch` (the configured epoch count when `None`).
pub fn resume(
    mut ck: Checkpoint,
    ds: &Dataset,
    until_epoch: Option<usize>,
    exec: Exec,
) -> Result<Checkpoint> {
    let until = until_epoch.unwrap_or(ck.config.epochs);
    train_until(&mut ck, ds, until, exec)?;
    Ok(ck)
}
