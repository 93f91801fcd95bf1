//! Modality encoders and the fused representation.
//!
//! Each present modality is mapped to a `d_h` embedding; an absent one is
//! replaced by a trainable missingness embedding. The slots are concatenated
//! in canonical modality order into a vector of length `3 * d_h`.

mod modality;

pub use modality::{ModalityCombination, ModalityKind, Sample};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, NodeId, ParameterStore, Tape};
use crate::error::{Error, Result};

/// Raw feature dimensions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureDims {
    pub static_dim: usize,
    pub series_len: usize,
    pub series_dim: usize,
    pub vocab_size: usize,
    pub image_dim: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            static_dim: 8,
            series_len: 48,
            series_dim: 12,
            vocab_size: 256,
            image_dim: 64,
        }
    }
}

/// How absent modality slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// One learned embedding per modality.
    PerModality,
    /// A single learned embedding shared by all modalities.
    Shared,
    /// Zero padding, no learned parameters.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub rnn_hidden: usize,
    pub token_dim: usize,
    pub image_hidden: usize,
    pub missing: MissingMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            rnn_hidden: 32,
            token_dim: 32,
            image_hidden: 64,
            missing: MissingMode::PerModality,
        }
    }
}

/// The concatenated representation of one sample plus its availability.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub values: Vec<f64>,
    pub mask: [bool; 3],
}

impl FusedRepresentation {
    pub fn slot(&self, m: ModalityKind, d_h: usize) -> &[f64] {
        &self.values[m.index() * d_h..(m.index() + 1) * d_h]
    }
}

/// Stateless encoder wiring; all weights live in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub dims: FeatureDims,
}

/// Parameter-name prefixes owned by the encoders (including missingness
/// embeddings).
pub const ENCODER_PREFIXES: [&str; 4] = ["ehr.", "text.", "image.", "missing."];

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn missing_name(mode: MissingMode, m: ModalityKind) -> Option<String> {
    match mode {
        MissingMode::PerModality => Some(format!("missing.{}", m.name())),
        MissingMode::Shared => Some("missing.shared".to_string()),
        MissingMode::Zero => None,
    }
}

impl Encoders {
    pub fn new(config: EncoderConfig, dims: FeatureDims) -> Self {
        Self { config, dims }
    }

    pub fn width(&self) -> usize {
        ModalityKind::COUNT * self.config.d_h
    }

    /// Registers every encoder parameter: weight matrices drawn with the
    /// Glorot rule, biases zero, missingness embeddings random.
    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let d = &self.dims;
        let h = c.rnn_hidden;
        store.glorot("ehr.static.w", vec![c.d_h, d.static_dim], rng)?;
        store.zeros("ehr.static.b", vec![c.d_h])?;
        for dir in ["fwd", "bwd"] {
            store.glorot(&format!("ehr.lstm.{dir}.w_ih"), vec![4 * h, d.series_dim], rng)?;
            store.glorot(&format!("ehr.lstm.{dir}.w_hh"), vec![4 * h, h], rng)?;
            store.zeros(&format!("ehr.lstm.{dir}.b"), vec![4 * h])?;
        }
        store.glorot("ehr.out.w", vec![c.d_h, c.d_h + 2 * h], rng)?;
        store.zeros("ehr.out.b", vec![c.d_h])?;

        store.glorot("text.embed", vec![d.vocab_size, c.token_dim], rng)?;
        store.glorot("text.proj.w", vec![c.d_h, c.token_dim], rng)?;
        store.zeros("text.proj.b", vec![c.d_h])?;

        store.glorot("image.l1.w", vec![c.image_hidden, d.image_dim], rng)?;
        store.zeros("image.l1.b", vec![c.image_hidden])?;
        store.glorot("image.l2.w", vec![c.d_h, c.image_hidden], rng)?;
        store.zeros("image.l2.b", vec![c.d_h])?;

        for m in ModalityKind::ALL {
            if let Some(name) = missing_name(c.missing, m) {
                if !store.contains(&name) {
                    store.glorot(&name, vec![c.d_h], rng)?;
                }
            }
        }
        Ok(())
    }

    fn check_ehr(&self, stat: &[f64], series: &[Vec<f64>]) -> Result<()> {
        if series.is_empty() {
            return Err(Error::Empty("ehr_series"));
        }
        if stat.len() != self.dims.static_dim {
            return Err(Error::shape("ehr_static", &[self.dims.static_dim], &[stat.len()]));
        }
        for row in series {
            if row.len() != self.dims.series_dim {
                return Err(Error::shape("ehr_series", &[self.dims.series_dim], &[row.len()]));
            }
        }
        if stat.iter().chain(series.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "encode_ehr" });
        }
        Ok(())
    }

    /// EHR embeddings for a batch of `(static, series)` pairs sharing one
    /// series length.
    pub fn ehr_batch(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        items: &[(&[f64], &[Vec<f64>])],
    ) -> Result<NodeId> {
        let len = items.first().ok_or(Error::Empty("ehr batch"))?.1.len();
        for (s, series) in items {
            self.check_ehr(s, series)?;
            if series.len() != len {
                return Err(Error::shape("ehr_series length", &[len], &[series.len()]));
            }
        }
        let statics: Vec<&[f64]> = items.iter().map(|(s, _)| *s).collect();
        let x_static = tape.constant(Matrix::from_rows(&statics)?);
        let w = tape.param_named(store, "ehr.static.w")?;
        let b = tape.param_named(store, "ehr.static.b")?;
        let static_emb = tape.linear(x_static, w, Some(b))?;

        // time-major: row t * B + r holds step t of sample r
        let rows: Vec<&[f64]> = (0..len)
            .flat_map(|t| items.iter().map(move |(_, s)| s[t].as_slice()))
            .collect();
        let x = tape.constant(Matrix::from_rows(&rows)?);
        let mut finals = Vec::with_capacity(2);
        for (dir, reverse) in [("fwd", false), ("bwd", true)] {
            let w_ih = tape.param_named(store, &format!("ehr.lstm.{dir}.w_ih"))?;
            let w_hh = tape.param_named(store, &format!("ehr.lstm.{dir}.w_hh"))?;
            let b = tape.param_named(store, &format!("ehr.lstm.{dir}.b"))?;
            finals.push(tape.lstm(x, len, w_ih, w_hh, b, reverse)?);
        }
        let (fwd, bwd) = (finals[0], finals[1]);

        let joined = tape.concat(&[static_emb, fwd, bwd])?;
        let w = tape.param_named(store, "ehr.out.w")?;
        let b = tape.param_named(store, "ehr.out.b")?;
        tape.linear(joined, w, Some(b))
    }

    pub fn text_batch(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        bags: &[Vec<usize>],
    ) -> Result<NodeId> {
        for bag in bags {
            if let Some(&bad) = bag.iter().find(|&&t| t >= self.dims.vocab_size) {
                return Err(Error::OutOfVocabulary {
                    id: bad,
                    vocab: self.dims.vocab_size,
                });
            }
        }
        let table = tape.param_named(store, "text.embed")?;
        let pooled = tape.bag_mean(table, bags)?;
        let w = tape.param_named(store, "text.proj.w")?;
        let b = tape.param_named(store, "text.proj.b")?;
        let z = tape.linear(pooled, w, Some(b))?;
        Ok(tape.relu(z))
    }

    /// Returns `(first-layer pre-activation, output)`.
    fn image_layers(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rows: &[&[f64]],
    ) -> Result<(NodeId, NodeId)> {
        for r in rows {
            if r.len() != self.dims.image_dim {
                return Err(Error::shape("image_features", &[self.dims.image_dim], &[r.len()]));
            }
        }
        let x = tape.constant(Matrix::from_rows(rows)?);
        let w1 = tape.param_named(store, "image.l1.w")?;
        let b1 = tape.param_named(store, "image.l1.b")?;
        let pre = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(pre);
        let w2 = tape.param_named(store, "image.l2.w")?;
        let b2 = tape.param_named(store, "image.l2.b")?;
        Ok((pre, tape.linear(h, w2, Some(b2))?))
    }

    pub fn image_batch(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        rows: &[&[f64]],
    ) -> Result<NodeId> {
        Ok(self.image_layers(tape, store, rows)?.1)
    }

    /// Fused representation `B x 3 d_h` for a batch of samples.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&Sample],
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Empty("assemble"));
        }
        let d_h = self.config.d_h;
        let mut slots = Vec::with_capacity(ModalityKind::COUNT);
        for m in ModalityKind::ALL {
            let mask: Vec<bool> = batch.iter().map(|s| s.has(m)).collect();
            let present: Vec<&Sample> = batch.iter().copied().filter(|s| s.has(m)).collect();
            let encoded = if present.is_empty() {
                None
            } else {
                Some(match m {
                    ModalityKind::Ehr => {
                        let items: Vec<(&[f64], &[Vec<f64>])> = present
                            .iter()
                            .map(|s| {
                                let stat = s.ehr_static.as_deref().unwrap_or_default();
                                let series = s.ehr_series.as_deref().ok_or_else(|| {
                                    Error::InvalidSample {
                                        id: s.id.clone(),
                                        reason: "ehr_static without ehr_series".into(),
                                    }
                                })?;
                                Ok((stat, series))
                            })
                            .collect::<Result<_>>()?;
                        self.ehr_batch(tape, store, &items)?
                    }
                    ModalityKind::Text => {
                        let bags: Vec<Vec<usize>> = present
                            .iter()
                            .map(|s| s.text_tokens.clone().unwrap_or_default())
                            .collect();
                        self.text_batch(tape, store, &bags)?
                    }
                    ModalityKind::Image => {
                        let rows: Vec<&[f64]> = present
                            .iter()
                            .map(|s| s.image_features.as_deref().unwrap_or_default())
                            .collect();
                        if rows.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite { op: "encode_image" });
                        }
                        self.image_batch(tape, store, &rows)?
                    }
                })
            };
            let fill = if mask.iter().all(|&p| p) {
                None
            } else {
                match missing_name(self.config.missing, m) {
                    Some(name) => Some(tape.param_named(store, &name)?),
                    None => None,
                }
            };
            slots.push(tape.fill_rows(encoded, &mask, fill, d_h)?);
        }
        tape.concat(&slots)
    }

    /// EHR embedding of a single record.
    pub fn encode_ehr(
        &self,
        store: &ParameterStore,
        stat: &[f64],
        series: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.ehr_batch(&mut tape, store, &[(stat, series)])?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn encode_text(&self, store: &ParameterStore, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.text_batch(&mut tape, store, &[tokens.to_vec()])?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn encode_image(&self, store: &ParameterStore, features: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.image_batch(&mut tape, store, &[features])?;
        Ok(tape.value(out).data().to_vec())
    }

    /// First-layer pre-activation of the image encoder.
    pub fn image_preactivation(&self, store: &ParameterStore, features: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (pre, _) = self.image_layers(&mut tape, store, &[features])?;
        Ok(tape.value(pre).data().to_vec())
    }

    pub fn assemble_representation(
        &self,
        store: &ParameterStore,
        sample: &Sample,
    ) -> Result<FusedRepresentation> {
        sample.validate()?;
        let mut tape = Tape::new();
        let r = self.assemble(&mut tape, store, &[sample])?;
        Ok(FusedRepresentation {
            values: tape.value(r).data().to_vec(),
            mask: sample.combination()?.mask(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Encoders, ParameterStore) {
        let enc = Encoders::new(
            EncoderConfig {
                d_h: 16,
                rnn_hidden: 8,
                token_dim: 6,
                image_hidden: 10,
                missing: MissingMode::PerModality,
            },
            FeatureDims {
                static_dim: 3,
                series_len: 5,
                series_dim: 4,
                vocab_size: 20,
                image_dim: 7,
            },
        );
        let mut store = ParameterStore::new();
        enc.register(&mut store, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (enc, store)
    }

    fn series(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn full_sample(rng: &mut ChaCha8Rng) -> Sample {
        Sample {
            id: "s".into(),
            label: 0,
            ehr_static: Some((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ehr_series: Some(series(rng, 5, 4)),
            text_tokens: Some(vec![3, 7, 7, 19]),
            image_features: Some((0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        }
    }

    fn zero_param(store: &mut ParameterStore, name: &str) {
        store.by_name_mut(name).unwrap().values.iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn zero_input_and_zero_recurrence_gives_output_bias() {
        let (enc, mut store) = small();
        for dir in ["fwd", "bwd"] {
            for part in ["w_ih", "w_hh", "b"] {
                zero_param(&mut store, &format!("ehr.lstm.{dir}.{part}"));
            }
        }
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.5).collect();
        store.by_name_mut("ehr.out.b").unwrap().values = bias.clone();
        let out = enc.encode_ehr(&store, &[0.0; 3], &vec![vec![0.0; 4]; 5]).unwrap();
        assert_eq!(out, bias);
    }

    #[test]
    fn series_direction_matters() {
        let (enc, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stat = vec![0.2, -0.1, 0.4];
        let s = series(&mut rng, 5, 4);
        let mut r = s.clone();
        r.reverse();
        let a = enc.encode_ehr(&store, &stat, &s).unwrap();
        let b = enc.encode_ehr(&store, &stat, &r).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ehr_shape_and_errors() {
        let (enc, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 2, 9] {
            let s = series(&mut rng, t, 4);
            assert_eq!(enc.encode_ehr(&store, &[0.1; 3], &s).unwrap().len(), 16);
        }
        assert!(matches!(
            enc.encode_ehr(&store, &[0.1; 3], &[]),
            Err(Error::Empty(_))
        ));
        let mut s = series(&mut rng, 2, 4);
        s[1][2] = f64::NAN;
        assert!(matches!(
            enc.encode_ehr(&store, &[0.1; 3], &s),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn text_pooling_properties() {
        let (enc, store) = small();
        assert_eq!(enc.encode_text(&store, &[4]).unwrap().len(), 16);
        assert_eq!(
            enc.encode_text(&store, &[4, 11]).unwrap(),
            enc.encode_text(&store, &[11, 4]).unwrap()
        );
        let once = enc.encode_text(&store, &[4]).unwrap();
        let twice = enc.encode_text(&store, &[4, 4]).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            enc.encode_text(&store, &[20]),
            Err(Error::OutOfVocabulary { id: 20, vocab: 20 })
        ));
    }

    #[test]
    fn image_encoder_properties() {
        let (enc, store) = small();
        assert_eq!(enc.encode_image(&store, &[0.0; 7]).unwrap(), vec![0.0; 16]);
        let x: Vec<f64> = (0..7).map(|i| (i as f64 - 3.0) * 0.3).collect();
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let a = enc.image_preactivation(&store, &x).unwrap();
        let b = enc.image_preactivation(&store, &x2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
        assert!(matches!(
            enc.encode_image(&store, &[0.0; 6]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn missing_slots_use_missingness_embeddings() {
        let (enc, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = full_sample(&mut rng);
        s.text_tokens = None;
        s.image_features = None;
        let r = enc.assemble_representation(&store, &s).unwrap();
        assert_eq!(r.values.len(), 48);
        assert_eq!(r.mask, [true, false, false]);
        let e = enc
            .encode_ehr(&store, s.ehr_static.as_ref().unwrap(), s.ehr_series.as_ref().unwrap())
            .unwrap();
        assert_eq!(r.slot(ModalityKind::Ehr, 16), e.as_slice());
        let text_missing = &store.by_name("missing.text").unwrap().values;
        let image_missing = &store.by_name("missing.image").unwrap().values;
        assert_eq!(r.slot(ModalityKind::Text, 16), text_missing.as_slice());
        assert_eq!(r.slot(ModalityKind::Image, 16), image_missing.as_slice());
        assert_ne!(text_missing, image_missing);
    }

    #[test]
    fn zero_mode_pads_with_zeros() {
        let (mut enc, _) = small();
        enc.config.missing = MissingMode::Zero;
        let mut store = ParameterStore::new();
        enc.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!store.iter().any(|p| p.name.starts_with("missing.")));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = full_sample(&mut rng);
        s.ehr_static = None;
        s.ehr_series = None;
        let r = enc.assemble_representation(&store, &s).unwrap();
        assert_eq!(r.slot(ModalityKind::Ehr, 16), &[0.0; 16]);
    }

    #[test]
    fn shared_mode_uses_one_embedding() {
        let (mut enc, _) = small();
        enc.config.missing = MissingMode::Shared;
        let mut store = ParameterStore::new();
        enc.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = full_sample(&mut rng);
        s.text_tokens = None;
        s.image_features = None;
        let r = enc.assemble_representation(&store, &s).unwrap();
        assert_eq!(r.slot(ModalityKind::Text, 16), r.slot(ModalityKind::Image, 16));
    }

    #[test]
    fn changing_one_modality_leaves_other_slots() {
        let (enc, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = full_sample(&mut rng);
        let mut t = s.clone();
        t.image_features = Some(vec![0.9; 7]);
        let a = enc.assemble_representation(&store, &s).unwrap();
        let b = enc.assemble_representation(&store, &t).unwrap();
        assert_eq!(a.slot(ModalityKind::Ehr, 16), b.slot(ModalityKind::Ehr, 16));
        assert_eq!(a.slot(ModalityKind::Text, 16), b.slot(ModalityKind::Text, 16));
        assert_ne!(a.slot(ModalityKind::Image, 16), b.slot(ModalityKind::Image, 16));
        assert_eq!(a, enc.assemble_representation(&store, &s).unwrap());
    }

    #[test]
    fn batch_assembly_matches_single_samples() {
        let (enc, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut samples: Vec<Sample> = (0..4).map(|_| full_sample(&mut rng)).collect();
        samples[1].text_tokens = None;
        samples[2].ehr_static = None;
        samples[2].ehr_series = None;
        samples[3].image_features = None;
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut tape = Tape::new();
        let r = enc.assemble(&mut tape, &store, &refs).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let single = enc.assemble_representation(&store, s).unwrap();
            for (a, b) in tape.value(r).row(i).iter().zip(&single.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missingness_embeddings_get_no_gradient_on_complete_batches() {
        let (enc, mut store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples: Vec<Sample> = (0..3).map(|_| full_sample(&mut rng)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut tape = Tape::new();
        let r = enc.assemble(&mut tape, &store, &refs).unwrap();
        let s = tape.row_sum(r);
        let loss = tape.mean_rows(s).unwrap();
        tape.backward(loss, &mut store).unwrap();
        for name in ["missing.ehr", "missing.text", "missing.image"] {
            assert!(store.by_name(name).unwrap().gradient.iter().all(|&g| g == 0.0));
        }
        assert!(store.by_name("text.embed").unwrap().gradient.iter().any(|&g| g != 0.0));
    }
}
