//! Multi-task optimization: loss combination, warmup/cosine schedule,
//! global-norm clipping, Adam and a parameter moving average.

use case_autograd::{Graph, Gradients, Matrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::corpus::DEFAULT_WINDOWS;
use crate::error::{CaseError, Result};
use crate::layers::Ctx;
use crate::model::{CaseModel, TrainingExample};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalWeights {
    #[default]
    Ema,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub lambda_rps: f64,
    pub lambda_sti: f64,
    pub lambda_rg: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_weights: EvalWeights,
    pub weak_label_windows: Vec<usize>,
    pub disable_rps: bool,
    pub disable_sti: bool,
    pub plain_pointer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2.5e-4,
            warmup_steps: 300,
            total_steps: 3000,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9995,
            lambda_rps: 1.0,
            lambda_sti: 1.0,
            lambda_rg: 1.0,
            batch_size: 8,
            seed: 42,
            eval_weights: EvalWeights::Ema,
            weak_label_windows: DEFAULT_WINDOWS.to_vec(),
            disable_rps: false,
            disable_sti: false,
            plain_pointer: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 6,000 warmup steps to a 2.5e-4 peak.
    pub fn full_schedule(total_steps: u64) -> Self {
        TrainConfig {
            warmup_steps: 6000,
            total_steps,
            ..TrainConfig::default()
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_rps: self.disable_rps,
            disable_sti: self.disable_sti,
            plain_pointer: self.plain_pointer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CaseError::Config(m.into()));
        if self.warmup_steps >= self.total_steps && self.total_steps > 0 {
            return bad("warmup_steps must be smaller than total_steps");
        }
        if [self.lambda_rps, self.lambda_sti, self.lambda_rg].iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.clip_norm > 0.0) {
            return bad("peak_lr must be non-negative and clip_norm positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine annealing to 0 at
/// `total_steps`. Zero past the end.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let (warm, total, peak) = (config.warmup_steps, config.total_steps, config.peak_lr);
    if step > total {
        return 0.0;
    }
    if step <= warm {
        return if warm == 0 { peak } else { peak * step as f64 / warm as f64 };
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    peak * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Weighted sum of the enabled losses. A disabled or zero-weighted term
/// is left out of the graph entirely.
pub fn combined_loss(
    g: &mut Graph<'_>,
    l_rps: Option<case_autograd::Var>,
    l_sti: Option<case_autograd::Var>,
    l_rg: case_autograd::Var,
    config: &TrainConfig,
) -> case_autograd::Var {
    let mut total = g.scale(l_rg, config.lambda_rg);
    for (term, weight) in [(l_rps, config.lambda_rps), (l_sti, config.lambda_sti)] {
        if let Some(t) = term.filter(|_| weight != 0.0) {
            let w = g.scale(t, weight);
            total = g.add(total, w);
        }
    }
    total
}

/// `shadow ← decay·shadow + (1-decay)·params`.
pub fn ema_update(shadow: &mut [Matrix], params: &[Matrix], decay: f64) {
    assert_eq!(shadow.len(), params.len(), "shadow and parameters differ in count");
    for (s, p) in shadow.iter_mut().zip(params) {
        assert_eq!(s.dim(), p.dim(), "shadow and parameter shapes differ");
        s.zip_mut_with(p, |s, &p| *s = decay * *s + (1.0 - decay) * p);
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.dim())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64, config: &TrainConfig) {
        self.t += 1;
        let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = &mut params[i];
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_rps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_sti: Option<f64>,
    pub l_rg: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CaseModel,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub ema: Vec<Matrix>,
    pub step: u64,
}

fn check_finite(value: f64, component: &'static str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CaseError::Diverged { component, step })
    }
}

impl Trainer {
    pub fn new(model: CaseModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params.values());
        let ema = model.params.values().to_vec();
        Ok(Trainer {
            model,
            config,
            adam,
            ema,
            step: 0,
        })
    }

    /// Per-example combined loss and gradients, before any update.
    pub fn example_gradients(&self, ex: &TrainingExample, ctx: &mut Ctx) -> Result<(Gradients, [Option<f64>; 3], f64)> {
        let mut g = Graph::new(&self.model.params);
        let out = self.model.forward(&mut g, ex, self.config.ablation(), ctx)?;
        let step = self.step + 1;
        let rps = out.l_rps.map(|l| check_finite(g.scalar(l), "l_rps", step)).transpose()?;
        let sti = out.l_sti.map(|l| check_finite(g.scalar(l), "l_sti", step)).transpose()?;
        let rg = check_finite(g.scalar(out.l_rg), "l_rg", step)?;
        let total = combined_loss(&mut g, out.l_rps, out.l_sti, out.l_rg, &self.config);
        let loss = check_finite(g.scalar(total), "loss", step)?;
        Ok((g.backward(total), [rps, sti, Some(rg)], loss))
    }

    /// One optimizer update on a batch; nothing changes if it fails.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(CaseError::Input("empty batch".into()));
        }
        let step = self.step + 1;
        let mut grads = self.model.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let mut sums = [0.0f64; 3];
        let mut present = [false; 3];
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let mut ctx = self.dropout_ctx(step, i);
            let (gr, parts, l) = self.example_gradients(ex, &mut ctx)?;
            gr.accumulate_into(&mut grads, scale);
            for (j, p) in parts.iter().enumerate() {
                if let Some(v) = p {
                    sums[j] += v * scale;
                    present[j] = true;
                }
            }
            loss += l * scale;
        }
        let grad_norm = check_finite(global_norm(&grads), "gradient", step)?;
        clip_global_norm(&mut grads, self.config.clip_norm);
        let clipped_norm = global_norm(&grads);
        let lr = lr_schedule(step, &self.config);
        self.adam.update(self.model.params.values_mut(), &grads, lr, &self.config);
        ema_update(&mut self.ema, self.model.params.values(), self.config.ema_decay);
        self.step = step;
        Ok(StepLog {
            step,
            lr,
            loss,
            l_rps: present[0].then_some(sums[0]),
            l_sti: present[1].then_some(sums[1]),
            l_rg: sums[2],
            grad_norm,
            clipped_norm,
        })
    }

    fn dropout_ctx(&self, step: u64, index: usize) -> Ctx {
        let rate = self.model.config.dropout;
        if rate == 0.0 {
            return Ctx::eval();
        }
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(step << 20)
            .wrapping_add(index as u64);
        Ctx::train(rate, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Runs until `total_steps`, reshuffling the data every epoch. The
    /// callback sees each step's log and the trainer after the update.
    pub fn train(&mut self, data: &[TrainingExample], mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(CaseError::Input("training data is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        let mut epoch = 0u64;
        while self.step < self.config.total_steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size.min(data.len()) {
                if cursor == data.len() {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407));
                    order.shuffle(&mut rng);
                    cursor = 0;
                    epoch += 1;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let log = self.train_step(&batch)?;
            on_step(&log, self)?;
        }
        Ok(())
    }

    /// A copy of the model carrying the configured evaluation weights.
    pub fn eval_model(&self) -> CaseModel {
        let mut model = self.model.clone();
        if self.config.eval_weights == EvalWeights::Ema {
            model.params.values_mut().clone_from_slice(&self.ema);
        }
        model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::corpus::{EncodedExample, FrequencyTable};
    use crate::model::prepare_training_example;
    use crate::vocab::SpecialIds;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::full_schedule(60_000);
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert!((lr_schedule(6000, &c) - 2.5e-4).abs() < 1e-12);
        assert!((lr_schedule(3000, &c) - 1.25e-4).abs() < 1e-12);
        assert!(lr_schedule(60_000, &c).abs() < 1e-12);
        assert_eq!(lr_schedule(60_001, &c), 0.0);
        let mid = lr_schedule(33_000, &c);
        assert!((mid - 1.25e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let c = TrainConfig::default();
        let w = c.warmup_steps;
        let before = lr_schedule(w - 1, &c);
        let at = lr_schedule(w, &c);
        let after = lr_schedule(w + 1, &c);
        assert!((at - before) <= c.peak_lr / w as f64 + 1e-15);
        assert!((at - after).abs() < 1e-9);
    }

    #[test]
    fn combined_loss_examples() {
        let store = case_autograd::ParamStore::new();
        let mut g = Graph::new(&store);
        let (a, b, c) = (g.scalar_constant(0.1), g.scalar_constant(0.2), g.scalar_constant(0.3));
        let cfg = TrainConfig::default();
        let l = combined_loss(&mut g, Some(a), Some(b), c, &cfg);
        assert!((g.scalar(l) - 0.6).abs() < 1e-12);
        let l = combined_loss(&mut g, Some(a), None, c, &cfg);
        assert!((g.scalar(l) - 0.4).abs() < 1e-12);
        let only_rg = TrainConfig {
            lambda_rps: 0.0,
            lambda_sti: 0.0,
            ..cfg
        };
        let l = combined_loss(&mut g, Some(a), Some(b), c, &only_rg);
        assert_eq!(g.scalar(l), 0.3);
    }

    #[test]
    fn ema_examples() {
        let p = vec![Array2::ones((1, 1))];
        let mut s = vec![Array2::zeros((1, 1))];
        ema_update(&mut s, &p, 0.9995);
        assert!((s[0][[0, 0]] - 5e-4).abs() < 1e-15);
        let mut s = vec![Array2::from_elem((1, 1), 3.0)];
        ema_update(&mut s, &p, 1.0);
        assert_eq!(s[0][[0, 0]], 3.0);
        ema_update(&mut s, &p, 0.0);
        assert_eq!(s[0][[0, 0]], 1.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Array2::from_elem((2, 2), 3.0), Array2::from_elem((1, 3), -4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - (36.0f64 + 48.0).sqrt()).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Array2::from_elem((1, 1), 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.5);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![Array2::from_elem((1, 2), 1.0)];
        let g = vec![Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap()];
        let mut adam = AdamState::new(&p);
        adam.update(&mut p, &g, 0.01, &TrainConfig::default());
        assert!((p[0][[0, 0]] - 0.99).abs() < 1e-9);
        assert!((p[0][[0, 1]] - 1.01).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn schedule_is_nonnegative_and_bounded(step in 0u64..5000) {
            let c = TrainConfig::default();
            let lr = lr_schedule(step, &c);
            prop_assert!(lr >= 0.0 && lr <= c.peak_lr);
        }

        #[test]
        fn ema_with_frozen_params_has_closed_form(
            s0 in -5.0f64..5.0, p in -5.0f64..5.0, decay in 0.0f64..1.0, steps in 0u32..50,
        ) {
            let params = vec![Array2::from_elem((1, 1), p)];
            let mut shadow = vec![Array2::from_elem((1, 1), s0)];
            for _ in 0..steps {
                ema_update(&mut shadow, &params, decay);
            }
            let expected = p + decay.powi(steps as i32) * (s0 - p);
            prop_assert!((shadow[0][[0, 0]] - expected).abs() < 1e-12);
        }
    }

    fn tiny_setup() -> (CaseModel, Vec<TrainingExample>) {
        let config = ModelConfig {
            vocab_size: 24,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            encoder_layers: 1,
            fusion_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
            max_query_len: 8,
            max_passage_len: 8,
            max_response_len: 8,
        };
        let special = SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            bos: 4,
            eos: 5,
        };
        let data = (0..4u32)
            .map(|i| {
                let enc = EncodedExample {
                    key: format!("c#{i}"),
                    query_ids: vec![2, 6 + i, 7],
                    passage_ids: vec![vec![2, 10 + i, 11, 12], vec![2, 13, 14 + i]],
                    response_ids: vec![4, 10 + i, 12, 5],
                    relevance: vec![true, false],
                };
                prepare_training_example(enc, &FrequencyTable::uniform(24), &DEFAULT_WINDOWS, &special).unwrap()
            })
            .collect();
        (CaseModel::new(config, 3).unwrap(), data)
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let run = || {
            let (model, data) = tiny_setup();
            let cfg = TrainConfig {
                total_steps: 10,
                warmup_steps: 2,
                batch_size: 2,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, cfg).unwrap();
            let mut logs = Vec::new();
            t.train(&data, |l, _| {
                logs.push(l.clone());
                Ok(())
            })
            .unwrap();
            logs
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(a.iter().all(|l| l.clipped_norm <= 1.0 + 1e-6));
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (model, data) = tiny_setup();
        let init = model.params.values().to_vec();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        t.train(&data, |_, _| Ok(())).unwrap();
        assert_eq!(t.model.params.values(), &init[..]);
        assert_eq!(t.eval_model().params.values(), &init[..]);
    }

    #[test]
    fn generation_loss_alone_only_updates_what_it_reaches() {
        let (mut model, data) = tiny_setup();
        model.config.dropout = 0.0;
        let cfg = TrainConfig {
            lambda_rps: 0.0,
            lambda_sti: 0.0,
            disable_rps: true,
            total_steps: 3,
            warmup_steps: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let reachable = {
            let mut g = Graph::new(&model.params);
            let out = model.forward(&mut g, &data[0], cfg.ablation(), &mut Ctx::eval()).unwrap();
            let total = combined_loss(&mut g, out.l_rps, out.l_sti, out.l_rg, &cfg);
            g.reachable_params(total)
        };
        let before = model.params.values().to_vec();
        let mut t = Trainer::new(model, cfg).unwrap();
        t.train_step(&[&data[0]]).unwrap();
        let mut unreachable = 0;
        for id in t.model.params.ids() {
            if !reachable.contains(&id) {
                unreachable += 1;
                assert_eq!(t.model.params.get(id), &before[id.index()], "{}", t.model.params.name(id));
            }
        }
        // the selector head is cut off when passage priors are uniform
        assert!(unreachable > 0);
    }
}
