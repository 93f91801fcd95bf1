//! Finite-difference check of the full model's composite-loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParameterStore, Tape};
use crate::encoders::{EncoderConfig, FeatureDims, MissingMode, ModalityCombination, Sample};
use crate::error::{Error, Result};
use crate::losses::record_objective;
use crate::model::{ModelConfig, MoeHealthModel};
use crate::moe::{ExpertPool, Fusion, MoeConfig, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub d_h: usize,
    pub batch: usize,
    pub k: usize,
    pub alpha: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub error_floor: f64,
    /// Instances whose inputs lie closer than this to a kink are redrawn.
    pub min_margin: f64,
    pub max_redraws: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_h: 4,
            batch: 8,
            k: 2,
            alpha: 0.1,
            step: 1e-5,
            tolerance: 1e-4,
            error_floor: 1e-6,
            min_margin: 1e-4,
            max_redraws: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub parameters: usize,
    pub values_checked: usize,
    pub experts: Vec<String>,
    pub redraws: usize,
}

/// The pool used by the check: three experts.
fn pool() -> ExpertPool {
    let keys = ["E", "ET", "ETI"];
    ExpertPool::new(keys.iter().map(|k| k.parse::<ModalityCombination>().unwrap()).collect())
        .expect("distinct keys")
}

fn tiny_model(cfg: &GradcheckConfig) -> MoeHealthModel {
    let dims = FeatureDims {
        static_dim: 3,
        series_len: 4,
        series_dim: 2,
        vocab_size: 10,
        image_dim: 5,
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_h: cfg.d_h,
            rnn_hidden: 3,
            token_dim: 4,
            image_hidden: 5,
            missing: MissingMode::PerModality,
        },
        moe: MoeConfig {
            expert_hidden: 5,
            gate_hidden: 5,
        },
    };
    MoeHealthModel::new(config, dims, pool())
}

/// Random batch cycling through patterns that leave every modality absent
/// at least once, so each missingness embedding is on the gradient path.
fn tiny_batch(model: &MoeHealthModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let d = model.encoders.dims;
    let patterns = ["ETI", "ET", "E", "TI", "EI", "T"];
    let mut normal = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample(StandardNormal)).collect() };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let key = patterns[i % patterns.len()];
        let stat = normal(d.static_dim);
        let series = (0..d.series_len).map(|_| normal(d.series_dim)).collect();
        let image = normal(d.image_dim);
        out.push((i, key, stat, series, image));
    }
    out.into_iter()
        .map(|(i, key, stat, series, image)| {
            let n_tok = rng.gen_range(1..=5);
            let tokens = (0..n_tok).map(|_| rng.gen_range(0..d.vocab_size)).collect();
            Sample {
                id: format!("g{i}"),
                label: u8::from(i % 3 == 0),
                ehr_static: key.contains('E').then_some(stat),
                ehr_series: key.contains('E').then_some(series),
                text_tokens: key.contains('T').then_some(tokens),
                image_features: key.contains('I').then_some(image),
            }
        })
        .collect()
}

struct Evaluation {
    loss: f64,
    decisions: Vec<RoutingDecision>,
    margin: f64,
}

fn composite(
    model: &MoeHealthModel,
    store: &mut ParameterStore,
    batch: &[&Sample],
    cfg: &GradcheckConfig,
    backward: bool,
) -> Result<Evaluation> {
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, store, batch, Fusion::TopK(cfg.k))?;
    let out = pass.out;
    let obj = record_objective(&mut tape, out.pred, &labels, out.gate, &out.decisions, cfg.alpha)?;
    if backward {
        tape.backward(obj.total, store)?;
    }
    Ok(Evaluation {
        loss: tape.value(obj.total).get(0, 0),
        decisions: out.decisions,
        margin: tape.kink_margin(),
    })
}

fn same_routing(a: &[RoutingDecision], b: &[RoutingDecision]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.selected == y.selected)
}

/// Compares every analytic gradient entry of the composite loss against a
/// central difference. Instances near a kink, or whose routing flips under
/// perturbation, are redrawn.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.batch == 0 || cfg.d_h == 0 || cfg.k == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs positive batch, d_h, k and step".into()));
    }
    let model = tiny_model(cfg);
    'draw: for attempt in 0..=cfg.max_redraws {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(attempt as u64);
        let mut store = model.init(&mut rng)?;
        // nonzero biases and embeddings keep ReLUs away from exact zeros
        for p in store.iter_mut() {
            if p.name.ends_with(".b") || p.name.starts_with("missing.") {
                p.values.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let samples = tiny_batch(&model, cfg.batch, &mut rng);
        let batch: Vec<&Sample> = samples.iter().collect();

        store.zero_grad();
        let base = composite(&model, &mut store, &batch, cfg, true)?;
        if base.margin < cfg.min_margin {
            continue 'draw;
        }
        let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.gradient.clone()).collect();
        store.zero_grad();

        let mut report = GradcheckReport {
            passed: false,
            max_relative_error: 0.0,
            worst_parameter: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            tolerance: cfg.tolerance,
            parameters: store.len(),
            values_checked: 0,
            experts: model.pool().keys(),
            redraws: attempt,
        };
        for (pi, grads) in analytic.iter().enumerate() {
            for (vi, &a) in grads.iter().enumerate() {
                let original = store.iter().nth(pi).expect("index").values[vi];
                let at = |x: f64, store: &mut ParameterStore| -> Result<Evaluation> {
                    store.iter_mut().nth(pi).expect("index").values[vi] = x;
                    composite(&model, store, &batch, cfg, false)
                };
                let plus = at(original + cfg.step, &mut store)?;
                let minus = at(original - cfg.step, &mut store)?;
                at(original, &mut store)?;
                if !same_routing(&plus.decisions, &base.decisions)
                    || !same_routing(&minus.decisions, &base.decisions)
                {
                    continue 'draw;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.error_floor);
                report.values_checked += 1;
                if err > report.max_relative_error || report.worst_parameter.is_empty() {
                    report.max_relative_error = err;
                    report.worst_parameter = store.iter().nth(pi).expect("index").name.clone();
                    report.worst_index = vi;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        report.passed = report.max_relative_error < cfg.tolerance;
        return Ok(report);
    }
    Err(Error::Config(format!(
        "no instance away from non-differentiable points after {} redraws",
        cfg.max_redraws
    )))
}
