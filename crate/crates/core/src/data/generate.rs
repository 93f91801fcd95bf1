use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::encoders::{FeatureDims, ModalityCombination, ModalityKind, Sample};
use crate::error::{Error, Result};

/// Availability mix of the reference cohort: 11,636 complete, 12,160
/// EHR + notes, 581 EHR + X-ray and 6,711 EHR-only admissions out of 31,088.
pub fn default_combination_probabilities() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("ETI".to_string(), 0.3743),
        ("ET".to_string(), 0.3911),
        ("EI".to_string(), 0.0187),
        ("E".to_string(), 0.2159),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseScales {
    pub ehr_static: f64,
    pub ehr_series: f64,
    /// Scales the latent-dependent token logits; larger means more signal.
    pub text_signal: f64,
    pub image: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self {
            ehr_static: 1.0,
            ehr_series: 1.0,
            text_signal: 1.5,
            image: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    /// Seeds the per-sample random streams.
    pub seed: u64,
    /// Seeds the fixed projection matrices and label weights, i.e. the task
    /// itself. Datasets sharing `task_seed` are draws from one task.
    pub task_seed: u64,
    pub combination_probabilities: BTreeMap<String, f64>,
    /// Permit combinations without EHR.
    pub allow_missing_ehr: bool,
    pub latent_dim: usize,
    pub noise: NoiseScales,
    pub label_steepness: f64,
    pub label_offset: f64,
    /// Weight of the multiplicative cross-latent term in the label logit.
    pub interaction: f64,
    /// Scale of the cohort-specific label term: each modality combination
    /// carries its own effect of the latent dims its modalities observe.
    pub cohort_effect: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dims: FeatureDims,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 8000,
            seed: 0,
            task_seed: 0,
            combination_probabilities: default_combination_probabilities(),
            allow_missing_ehr: false,
            latent_dim: 6,
            noise: NoiseScales::default(),
            label_steepness: 1.0,
            label_offset: -3.5,
            interaction: 1.0,
            cohort_effect: 1.0,
            min_tokens: 8,
            max_tokens: 24,
            dims: FeatureDims::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.latent_dim < 3 {
            return Err(Error::Config("latent_dim must be at least 3".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("need 1 <= min_tokens <= max_tokens".into()));
        }
        let d = &self.dims;
        if [d.static_dim, d.series_len, d.series_dim, d.vocab_size, d.image_dim].contains(&0) {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if self.combination_probabilities.is_empty() {
            return Err(Error::Config("no combination probabilities".into()));
        }
        let mut total = 0.0;
        for (key, &p) in &self.combination_probabilities {
            let combo: ModalityCombination = key.parse()?;
            if !combo.contains(ModalityKind::Ehr) && !self.allow_missing_ehr {
                return Err(Error::Config(format!(
                    "combination `{key}` lacks EHR; set allow_missing_ehr to permit it"
                )));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Config(format!("probability of `{key}` is {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "combination probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Latent dimensions observed by a modality: index `j` belongs to modality
/// `j mod 3`, so every modality sees a disjoint slice of the latent state.
fn latent_support(m: ModalityKind, latent_dim: usize) -> Vec<usize> {
    (0..latent_dim).filter(|j| j % 3 == m.index()).collect()
}

/// Fixed random structure shared by every sample of one task.
struct World {
    static_proj: Matrix,
    series_base: Matrix,
    series_drift: Matrix,
    token_proj: Matrix,
    image_proj: Matrix,
    label_weights: Vec<f64>,
    /// Latent indices of the cross term (one text-side, one image-side).
    cross: (usize, usize),
    cohort_weights: BTreeMap<ModalityCombination, Vec<f64>>,
}

fn masked_gaussian(rng: &mut ChaCha8Rng, rows: usize, support: &[usize], latent: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, latent);
    let s = scale / (support.len() as f64).sqrt();
    for r in 0..rows {
        for &j in support {
            let v: f64 = rng.sample(StandardNormal);
            m.set(r, j, v * s);
        }
    }
    m
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.task_seed);
        let l = cfg.latent_dim;
        let d = &cfg.dims;
        let ehr = latent_support(ModalityKind::Ehr, l);
        let text = latent_support(ModalityKind::Text, l);
        let image = latent_support(ModalityKind::Image, l);
        let static_proj = masked_gaussian(&mut rng, d.static_dim, &ehr, l, 1.0);
        let series_base = masked_gaussian(&mut rng, d.series_dim, &ehr, l, 0.5);
        let series_drift = masked_gaussian(&mut rng, d.series_dim, &ehr, l, 1.0);
        let token_proj = masked_gaussian(&mut rng, d.vocab_size, &text, l, 1.0);
        let image_proj = masked_gaussian(&mut rng, d.image_dim, &image, l, 1.0);
        let label_weights = (0..l).map(|_| 0.6 + 0.6 * rng.gen::<f64>()).collect();
        let cohort_weights = ModalityCombination::all()
            .into_iter()
            .map(|c| {
                let w = (0..l)
                    .map(|j| {
                        let v = cfg.cohort_effect * gaussian(&mut rng);
                        if c.contains(ModalityKind::ALL[j % 3]) { v } else { 0.0 }
                    })
                    .collect();
                (c, w)
            })
            .collect();
        Self {
            static_proj,
            series_base,
            series_drift,
            token_proj,
            image_proj,
            label_weights,
            cross: (text[0], image[0]),
            cohort_weights,
        }
    }

    fn project(m: &Matrix, z: &[f64]) -> Vec<f64> {
        (0..m.rows())
            .map(|r| m.row(r).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_sample(
    cfg: &GeneratorConfig,
    world: &World,
    combos: &[ModalityCombination],
    weights: &WeightedIndex<f64>,
    index: usize,
) -> Sample {
    // one independent stream per sample index; sharding cannot change output
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let z: Vec<f64> = (0..cfg.latent_dim).map(|_| gaussian(&mut rng)).collect();
    let combo = combos[weights.sample(&mut rng)];
    let d = &cfg.dims;
    let noise = &cfg.noise;

    let logit = world.label_weights.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>()
        + cfg.interaction * z[world.cross.0] * z[world.cross.1]
        + world.cohort_weights[&combo].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>();
    let p = sigmoid(cfg.label_steepness * logit + cfg.label_offset);
    let label = u8::from(rng.gen::<f64>() < p);

    let mut sample = Sample {
        id: format!("s{index:06}"),
        label,
        ehr_static: None,
        ehr_series: None,
        text_tokens: None,
        image_features: None,
    };

    if combo.contains(ModalityKind::Ehr) {
        let base = World::project(&world.static_proj, &z);
        sample.ehr_static = Some(
            base.iter()
                .map(|v| v + noise.ehr_static * gaussian(&mut rng))
                .collect(),
        );
        let level = World::project(&world.series_base, &z);
        let drift = World::project(&world.series_drift, &z);
        let t_len = d.series_len as f64;
        sample.ehr_series = Some(
            (0..d.series_len)
                .map(|t| {
                    let frac = (t as f64 + 1.0) / t_len;
                    level
                        .iter()
                        .zip(&drift)
                        .map(|(a, b)| a + frac * b + noise.ehr_series * gaussian(&mut rng))
                        .collect()
                })
                .collect(),
        );
    }
    if combo.contains(ModalityKind::Text) {
        let logits: Vec<f64> = World::project(&world.token_proj, &z)
            .into_iter()
            .map(|v| v * noise.text_signal)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let dist = WeightedIndex::new(&probs).expect("finite positive token weights");
        let n_tokens = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        sample.text_tokens = Some((0..n_tokens).map(|_| dist.sample(&mut rng)).collect());
    }
    if combo.contains(ModalityKind::Image) {
        sample.image_features = Some(
            World::project(&world.image_proj, &z)
                .into_iter()
                .map(|v| v + noise.image * gaussian(&mut rng))
                .collect(),
        );
    }
    sample
}

/// Draws `n_samples` records. Each record comes from its own counter-indexed
/// random stream, so the output is identical however the work is split
/// across threads.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let world = World::new(cfg);
    let (combos, probs): (Vec<ModalityCombination>, Vec<f64>) = cfg
        .combination_probabilities
        .iter()
        .map(|(k, &p)| Ok((k.parse::<ModalityCombination>()?, p)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let weights = WeightedIndex::new(&probs)
        .map_err(|e| Error::Config(format!("combination probabilities: {e}")))?;
    Ok((0..cfg.n_samples)
        .into_par_iter()
        .map(|i| draw_sample(cfg, &world, &combos, &weights, i))
        .collect())
}
