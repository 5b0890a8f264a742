//! Which parameters must stay trainable. Layers are probed with Gaussian
//! perturbations (transform layers through the full loss, entropy-side
//! layers through the rate alone), the most sensitive layers are kept per
//! role group, and within them the parameters with the largest
//! magnitude-times-gradient scores are marked non-embeddable.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramstore::LayerSpan;
use crate::scalar::Real;
use crate::seed;
use crate::toymodel::{Batch, LatentCache, Quantizer, ToyCodec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Layer perturbation to pick layers, first-order scores within them.
    HalfHalf,
    /// First-order scores over all parameters.
    FirstOrderOnly,
    /// Per-parameter perturbation over all parameters.
    Accurate,
    /// Every parameter embeddable.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub mode: SensitivityMode,
    pub sigma_frac: f64,
    pub samples: usize,
    pub nonembeddable_fraction: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { mode: SensitivityMode::HalfHalf, sigma_frac: 0.05, samples: 64, nonembeddable_fraction: 0.25 }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_frac >= 0.0 && self.sigma_frac.is_finite()) {
            return Err(Error::Config("sigma_frac must be finite and non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.nonembeddable_fraction) {
            return Err(Error::Config("nonembeddable_fraction must lie in [0, 0.5]".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("sensitivity needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Parameter count above which the exhaustive per-parameter probe refuses to run.
pub const ACCURATE_MAX_PARAMS: usize = 50_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub mode: SensitivityMode,
    /// Loss (or rate) increase per layer; empty when layers were not probed.
    pub layer_deltas: Vec<f64>,
    pub selected_layers: Vec<usize>,
    /// `(parameter, score)` for every scored parameter.
    pub param_scores: Vec<(usize, f64)>,
    pub embeddable_mask: Vec<bool>,
}

impl SensitivityReport {
    pub fn non_embeddable_count(&self) -> usize {
        self.embeddable_mask.iter().filter(|&&e| !e).count()
    }

    pub fn non_embeddable_fraction(&self) -> f64 {
        self.non_embeddable_count() as f64 / self.embeddable_mask.len().max(1) as f64
    }

    pub fn layers_csv(&self, layers: &[LayerSpan]) -> String {
        let mut out = String::from("layer,name,role,params,delta,selected,non_embeddable\n");
        for (li, span) in layers.iter().enumerate() {
            let delta = self.layer_deltas.get(li).map_or(String::new(), |d| d.to_string());
            let fixed = self.embeddable_mask[span.range()].iter().filter(|&&e| !e).count();
            let _ = writeln!(
                out,
                "{li},{},{},{},{delta},{},{fixed}",
                span.name,
                span.role.as_str(),
                span.len,
                u8::from(self.selected_layers.contains(&li))
            );
        }
        out
    }
}

/// Clean latents and quantization shared by every probe.
struct Probe<'a, T> {
    codec: &'a ToyCodec<T>,
    batch: &'a Batch<T>,
    quant: Quantizer,
    cache: LatentCache<T>,
    clean_total: f64,
    clean_rate: f64,
}

impl<'a, T: Real> Probe<'a, T> {
    fn new(codec: &'a ToyCodec<T>, params: &[T], batch: &'a Batch<T>, seed: u64) -> Result<Self> {
        let quant = Quantizer::Noise(seed::derive(seed, "sensitivity.quant", 0));
        let (loss, cache) = codec.forward_cached(params, batch, quant)?;
        let clean_rate = codec.eval_rate_only(params, Some(&cache))?.to_f();
        Ok(Self { codec, batch, quant, cache, clean_total: loss.total.to_f(), clean_rate })
    }

    /// Loss increase of `perturbed` relative to the clean parameters, on the
    /// path that matches the role of the perturbed layer.
    fn delta(&self, perturbed: &[T], entropy_side: bool) -> f64 {
        let value = if entropy_side {
            self.codec.eval_rate_only(perturbed, Some(&self.cache)).map(|r| r.to_f() - self.clean_rate)
        } else {
            self.codec.forward_loss(perturbed, self.batch, self.quant).map(|l| l.total.to_f() - self.clean_total)
        };
        match value {
            Ok(d) if d.is_finite() => d,
            _ => f64::INFINITY,
        }
    }
}

fn layer_sigma<T: Real>(values: &[T], sigma_frac: f64) -> f64 {
    sigma_frac * values.iter().fold(0.0f64, |m, v| m.max(v.to_f().abs()))
}

/// Loss increase per layer under seeded Gaussian noise of standard
/// deviation `sigma_frac · max|w|` within the layer. `params` is not modified.
pub fn layer_sensitivity<T: Real>(
    codec: &ToyCodec<T>,
    params: &[T],
    samples: &Batch<T>,
    sigma_frac: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    codec.check_layout(params)?;
    let probe = Probe::new(codec, params, samples, seed)?;
    let deltas = codec
        .layers()
        .par_iter()
        .enumerate()
        .map(|(li, span)| {
            let sigma = layer_sigma(&params[span.range()], sigma_frac);
            if sigma == 0.0 {
                return 0.0;
            }
            let mut perturbed = params.to_vec();
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let mut rng = seed::rng(seed ^ li as u64);
            for v in &mut perturbed[span.range()] {
                *v += T::from_f(normal.sample(&mut rng));
            }
            probe.delta(&perturbed, span.role.is_entropy_side())
        })
        .collect();
    Ok(deltas)
}

/// `mean_b |w_i| · |∂L_b/∂w_i|` over single-sample losses, for the given
/// parameters (all of them when `indices` is `None`).
pub fn first_order_scores<T: Real>(
    codec: &ToyCodec<T>,
    params: &[T],
    samples: &Batch<T>,
    indices: Option<&[usize]>,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    codec.check_layout(params)?;
    let n = params.len();
    let abs_grad = (0..samples.batch_size)
        .into_par_iter()
        .map(|b| {
            let quant = Quantizer::Noise(seed::derive(seed, "sensitivity.score", b as u64));
            let (_, g) = codec.backward(params, &samples.single(b), quant)?;
            Ok(g.into_iter().map(|x| x.to_f().abs()).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(vec![0.0; n], |mut acc, g| {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
            acc
        });
    let count = samples.batch_size as f64;
    let score = |i: usize| params[i].to_f().abs() * abs_grad[i] / count;
    Ok(match indices {
        Some(idx) => idx.iter().map(|&i| (i, score(i))).collect(),
        None => (0..n).map(|i| (i, score(i))).collect(),
    })
}

/// Exhaustive probe: each parameter perturbed alone, on its layer's path.
pub fn accurate_scores<T: Real>(
    codec: &ToyCodec<T>,
    params: &[T],
    samples: &Batch<T>,
    sigma_frac: f64,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if params.len() > ACCURATE_MAX_PARAMS {
        return Err(Error::Config(format!(
            "exhaustive sensitivity is limited to {ACCURATE_MAX_PARAMS} parameters, model has {}",
            params.len()
        )));
    }
    let probe = Probe::new(codec, params, samples, seed)?;
    let per_layer: Vec<Vec<(usize, f64)>> = codec
        .layers()
        .iter()
        .enumerate()
        .map(|(li, span)| {
            let sigma = layer_sigma(&params[span.range()], sigma_frac);
            span.range()
                .into_par_iter()
                .map(|i| {
                    if sigma == 0.0 {
                        return (i, 0.0);
                    }
                    let normal = Normal::new(0.0, sigma).expect("finite sigma");
                    let mut rng = seed::derived_rng(seed ^ li as u64, "sensitivity.param", i as u64);
                    let mut perturbed = params.to_vec();
                    perturbed[i] += T::from_f(normal.sample(&mut rng));
                    (i, probe.delta(&perturbed, span.role.is_entropy_side()))
                })
                .collect()
        })
        .collect();
    Ok(per_layer.into_iter().flatten().collect())
}

/// Most sensitive prefix of a layer group whose parameter count is closest
/// to `target` (at least one layer when the group is non-empty).
pub fn select_group(group: &[usize], deltas: &[f64], layers: &[LayerSpan], target: f64) -> Vec<usize> {
    let mut order = group.to_vec();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
    let mut best = (f64::INFINITY, 0);
    let mut total = 0usize;
    for (k, &li) in order.iter().enumerate() {
        total += layers[li].len;
        let gap = (total as f64 - target).abs();
        if gap < best.0 {
            best = (gap, k + 1);
        }
    }
    order.truncate(best.1);
    order.sort_unstable();
    order
}

/// Transform-layer and entropy-side budgets of `fraction · N` each.
pub fn select_layers(deltas: &[f64], layers: &[LayerSpan], fraction: f64) -> Vec<usize> {
    let n: usize = layers.iter().map(|l| l.len).sum();
    let target = fraction * n as f64;
    let transform: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].role.is_transform()).collect();
    let entropy: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].role.is_entropy_side()).collect();
    let mut chosen = select_group(&transform, deltas, layers, target);
    chosen.extend(select_group(&entropy, deltas, layers, target));
    chosen.sort_unstable();
    chosen
}

/// Marks the `count` highest-scoring parameters non-embeddable (ties to the
/// lowest index).
pub fn mask_from_scores(n: usize, scores: &[(usize, f64)], count: usize) -> Vec<bool> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mask = vec![true; n];
    for &(i, _) in ranked.iter().take(count) {
        mask[i] = false;
    }
    mask
}

/// Half of the parameters in the selected layers, by score.
pub fn build_embeddable_mask(selected: &[usize], scores: &[(usize, f64)], layers: &[LayerSpan]) -> Vec<bool> {
    let n: usize = layers.iter().map(|l| l.len).sum();
    let in_union: usize = selected.iter().map(|&li| layers[li].len).sum();
    let mut in_selected = vec![false; n];
    for &li in selected {
        in_selected[layers[li].range()].iter_mut().for_each(|x| *x = true);
    }
    let eligible: Vec<(usize, f64)> = scores.iter().copied().filter(|&(i, _)| in_selected[i]).collect();
    mask_from_scores(n, &eligible, in_union.div_ceil(2))
}

/// Runs the configured procedure once, at the current parameters.
pub fn analyze<T: Real>(
    codec: &ToyCodec<T>,
    params: &[T],
    samples: &Batch<T>,
    cfg: &SensitivityConfig,
    seed: u64,
) -> Result<SensitivityReport> {
    cfg.validate()?;
    let n = params.len();
    let layers = codec.layers();
    let budget = (cfg.nonembeddable_fraction * n as f64).round() as usize;
    let report = |layer_deltas, selected_layers, param_scores, embeddable_mask| SensitivityReport {
        mode: cfg.mode,
        layer_deltas,
        selected_layers,
        param_scores,
        embeddable_mask,
    };
    match cfg.mode {
        SensitivityMode::Disabled => Ok(report(vec![], vec![], vec![], vec![true; n])),
        SensitivityMode::HalfHalf => {
            let deltas = layer_sensitivity(codec, params, samples, cfg.sigma_frac, seed)?;
            let selected = select_layers(&deltas, layers, cfg.nonembeddable_fraction);
            let idx: Vec<usize> = selected.iter().flat_map(|&li| layers[li].range()).collect();
            let scores = first_order_scores(codec, params, samples, Some(&idx), seed)?;
            let mask = build_embeddable_mask(&selected, &scores, layers);
            Ok(report(deltas, selected, scores, mask))
        }
        SensitivityMode::FirstOrderOnly => {
            let scores = first_order_scores(codec, params, samples, None, seed)?;
            let mask = mask_from_scores(n, &scores, budget);
            Ok(report(vec![], vec![], scores, mask))
        }
        SensitivityMode::Accurate => {
            let scores = accurate_scores(codec, params, samples, cfg.sigma_frac, seed)?;
            let mask = mask_from_scores(n, &scores, budget);
            Ok(report(vec![], vec![], scores, mask))
        }
    }
}

const MASK_MAGIC: &[u8; 4] = b"MSK1";

/// `MSK1`, little-endian u64 length, then bits packed LSB-first (1 = embeddable).
pub fn encode_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = MASK_MAGIC.to_vec();
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    for chunk in mask.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (k, &e)| b | (u8::from(e) << k)));
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Vec<bool>> {
    if bytes.len() < 12 || &bytes[..4] != MASK_MAGIC {
        return Err(Error::BadMagic);
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != n.div_ceil(8) {
        return Err(Error::Truncated(format!("mask of {n} bits needs {} bytes, found {}", n.div_ceil(8), body.len())));
    }
    Ok((0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn write_mask_file(mask: &[bool], path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn read_mask_file(path: &Path) -> Result<Vec<bool>> {
    decode_mask(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramstore::LayerRole;
    use crate::toymodel::{generate_batch, ToyCodecConfig};
    use proptest::prelude::*;

    fn setup() -> (ToyCodec<f64>, Vec<f64>, Batch<f64>) {
        let codec = ToyCodec::<f64>::new(ToyCodecConfig::default()).unwrap();
        let params = codec.init_params(3).values;
        let batch = generate_batch(16, 64, 4);
        (codec, params, batch)
    }

    fn span(name: &str, role: LayerRole, start: usize, len: usize) -> LayerSpan {
        LayerSpan { name: name.into(), role, start, len }
    }

    #[test]
    fn zero_sigma_gives_zero_deltas() {
        let (codec, params, batch) = setup();
        let d = layer_sensitivity(&codec, &params, &batch, 0.0, 1).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn params_untouched_and_deterministic() {
        let (codec, params, batch) = setup();
        let copy = params.clone();
        let a = layer_sensitivity(&codec, &params, &batch, 0.05, 1).unwrap();
        let b = layer_sensitivity(&codec, &params, &batch, 0.05, 1).unwrap();
        assert!(params.iter().zip(&copy).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a, b);
    }

    #[test]
    fn dead_layer_has_zero_delta() {
        let (codec, mut params, batch) = setup();
        // Zero the output weights of g_s.1: g_s.0 then feeds nothing.
        let layers = codec.layers().to_vec();
        let gs1 = layers.iter().position(|l| l.name == "g_s.1").unwrap();
        let gs0 = layers.iter().position(|l| l.name == "g_s.0").unwrap();
        let w_len = 64 * 32;
        params[layers[gs1].start..layers[gs1].start + w_len].iter_mut().for_each(|w| *w = 0.0);
        let d = layer_sensitivity(&codec, &params, &batch, 0.05, 2).unwrap();
        assert_eq!(d[gs0], 0.0);
        for (li, &x) in d.iter().enumerate() {
            let live = params[layers[li].range()].iter().any(|&w| w != 0.0);
            if li != gs0 && live {
                assert!(x != 0.0, "layer {} delta {x}", layers[li].name);
            }
        }
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let (codec, params, batch) = setup();
        let batch = batch.head(4);
        let seed = 8;
        let idx: Vec<usize> = (0..50).map(|k| (k * 167 + 11) % params.len()).collect();
        let scores = first_order_scores(&codec, &params, &batch, Some(&idx), seed).unwrap();
        let h = 1e-5;
        for &(i, s) in &scores {
            let mut fd_sum = 0.0;
            for b in 0..batch.batch_size {
                let quant = Quantizer::Noise(seed::derive(seed, "sensitivity.score", b as u64));
                let one = batch.single(b);
                let mut p = params.clone();
                p[i] += h;
                let up = codec.forward_loss(&p, &one, quant).unwrap().total;
                p[i] -= 2.0 * h;
                let down = codec.forward_loss(&p, &one, quant).unwrap().total;
                fd_sum += ((up - down) / (2.0 * h)).abs();
            }
            let oracle = params[i].abs() * fd_sum / batch.batch_size as f64;
            assert!((s - oracle).abs() <= 1e-3 * oracle.abs().max(1e-9), "param {i}: {s} vs {oracle}");
        }
    }

    #[test]
    fn zero_weight_scores_zero() {
        let (codec, params, batch) = setup();
        // Biases start at zero.
        let bias = codec.layers()[0].start + 32 * 64;
        let s = first_order_scores(&codec, &params, &batch.head(2), Some(&[bias]), 1).unwrap();
        assert_eq!(s[0].1, 0.0);
    }

    #[test]
    fn group_prefix_closest_to_budget() {
        let layers = vec![
            span("a", LayerRole::Analysis, 0, 10),
            span("b", LayerRole::Analysis, 10, 30),
            span("c", LayerRole::Synthesis, 40, 20),
            span("e", LayerRole::EntropyParams, 60, 40),
        ];
        // Order by delta: c (20), b (+30 = 50), a (60). Target 25 → c alone.
        assert_eq!(select_group(&[0, 1, 2], &[1.0, 2.0, 3.0], &layers, 25.0), vec![2]);
        // Target 45 → c + b.
        assert_eq!(select_group(&[0, 1, 2], &[1.0, 2.0, 3.0], &layers, 45.0), vec![1, 2]);
        // Equal distance picks the shorter prefix.
        assert_eq!(select_group(&[0, 1, 2], &[1.0, 2.0, 3.0], &layers, 35.0), vec![2]);
        // Budget below one layer still keeps one.
        assert_eq!(select_group(&[3], &[0.0; 4], &layers, 1.0), vec![3]);
        assert!(select_group(&[], &[], &layers, 10.0).is_empty());
    }

    #[test]
    fn uniform_inputs_tie_to_lowest_index() {
        let layers = vec![
            span("a", LayerRole::Analysis, 0, 4),
            span("b", LayerRole::Synthesis, 4, 4),
            span("e", LayerRole::EntropyParams, 8, 4),
            span("f", LayerRole::HyperSynthesis, 12, 4),
        ];
        let selected = select_layers(&[1.0; 4], &layers, 0.25);
        assert_eq!(selected, vec![0, 2]);
        let scores: Vec<(usize, f64)> = (0..16).map(|i| (i, 1.0)).collect();
        let mask = build_embeddable_mask(&selected, &scores, &layers);
        let fixed: Vec<usize> = (0..16).filter(|&i| !mask[i]).collect();
        assert_eq!(fixed, vec![0, 1, 2, 3]);
        assert_eq!(build_embeddable_mask(&selected, &scores, &layers), mask);
    }

    #[test]
    fn outside_selected_layers_is_embeddable() {
        let (codec, params, batch) = setup();
        let r = analyze(&codec, &params, &batch, &SensitivityConfig::default(), 5).unwrap();
        for (li, span) in codec.layers().iter().enumerate() {
            if !r.selected_layers.contains(&li) {
                assert!(r.embeddable_mask[span.range()].iter().all(|&e| e));
            }
        }
        let f = r.non_embeddable_fraction();
        assert!((0.15..=0.35).contains(&f), "fraction {f}");
        assert!(r.layers_csv(codec.layers()).starts_with("layer,name,role"));
    }

    #[test]
    fn other_modes() {
        let (codec, params, batch) = setup();
        let batch = batch.head(2);
        let off = analyze(&codec, &params, &batch, &SensitivityConfig { mode: SensitivityMode::Disabled, ..Default::default() }, 0).unwrap();
        assert_eq!(off.non_embeddable_count(), 0);
        let fo = analyze(&codec, &params, &batch, &SensitivityConfig { mode: SensitivityMode::FirstOrderOnly, ..Default::default() }, 0).unwrap();
        assert_eq!(fo.non_embeddable_count(), 2100);
    }

    #[test]
    fn accurate_mode_counts() {
        let cfg = ToyCodecConfig {
            input_dim: 4,
            hidden_dim: 3,
            latent_dim: 2,
            hyper_dim: 2,
            hyper_hidden: 3,
            entropy_hidden: 3,
            ..Default::default()
        };
        let codec = ToyCodec::<f64>::new(cfg).unwrap();
        let params = codec.init_params(1).values;
        let batch = generate_batch(8, 4, 2);
        let sc = SensitivityConfig { mode: SensitivityMode::Accurate, ..Default::default() };
        let r = analyze(&codec, &params, &batch, &sc, 3).unwrap();
        let n = params.len();
        assert_eq!(r.non_embeddable_count(), (0.25 * n as f64).round() as usize);
        assert_eq!(r.param_scores.len(), n);
    }

    #[test]
    fn mask_file_errors() {
        assert!(matches!(decode_mask(b"XXXX00000000"), Err(Error::BadMagic)));
        let mut bytes = encode_mask(&[true; 20]);
        bytes.pop();
        assert!(matches!(decode_mask(&bytes), Err(Error::Truncated(_))));
    }

    proptest! {
        #[test]
        fn mask_roundtrip(mask in proptest::collection::vec(any::<bool>(), 0..200)) {
            prop_assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
        }
    }
}
