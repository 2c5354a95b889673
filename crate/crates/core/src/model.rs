//! Explicit-parameter risk predictors: code embedding, a CNN or LSTM encoder,
//! an MLP head with a two-way softmax, and the cross-entropy objective.
//!
//! Every forward pass takes its parameters as graph handles, so the same code
//! evaluates Θ, an adapted Θ′, or a partially frozen mixture of both.

use indexmap::IndexMap;
use metapred_autodiff::nn::{self, NormStats};
use metapred_autodiff::{Expr, ParamExprs, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Label};
use crate::error::{Error, Result};

/// Probability clamp applied before the logarithms of the loss.
pub const PROB_EPS: f64 = 1e-7;

/// Momentum of batch-normalization running statistics.
pub const NORM_MOMENTUM: f64 = 0.9;

pub const BN_MEAN: &str = "bn.running_mean";
pub const BN_VAR: &str = "bn.running_var";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    Lstm,
    /// Embedding mean-pooled over visits, then the MLP head.
    Mlp,
    /// Linear model on code-occurrence counts.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub encoder: EncoderKind,
    /// Code vocabulary including the padding index 0.
    pub vocab: usize,
    pub embed_dim: usize,
    pub filter_sizes: Vec<usize>,
    /// Filters per filter size.
    pub filters: usize,
    pub mlp_hidden: Vec<usize>,
    pub max_len: usize,
    /// Batch norm after CNN pooling, layer norm on the final LSTM state.
    pub normalize: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder: EncoderKind::Cnn,
            vocab: 1017,
            embed_dim: 256,
            filter_sizes: vec![2, 3, 4],
            filters: 64,
            mlp_hidden: vec![128, 128],
            max_len: 64,
            normalize: true,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArchitecture(m.to_string()));
        if self.vocab < 2 {
            return bad("vocabulary needs at least the padding index and one code");
        }
        if self.embed_dim == 0 || self.max_len == 0 || self.mlp_hidden.contains(&0) {
            return bad("all dimensions must be at least 1");
        }
        if self.encoder == EncoderKind::Cnn
            && (self.filters == 0 || self.filter_sizes.is_empty() || self.filter_sizes.contains(&0))
        {
            return bad("cnn needs at least one filter of positive size");
        }
        Ok(())
    }

    /// Tag shared by every parameter set of this architecture.
    pub fn tag(&self) -> String {
        let enc = match self.encoder {
            EncoderKind::Cnn => format!("cnn{:?}x{}", self.filter_sizes, self.filters),
            EncoderKind::Lstm => "lstm".to_string(),
            EncoderKind::Mlp => "mlp".to_string(),
            EncoderKind::Logistic => return format!("logistic/v{}", self.vocab),
        };
        format!(
            "{enc}/v{}/d{}/h{:?}{}",
            self.vocab,
            self.embed_dim,
            self.mlp_hidden,
            if self.normalize { "/norm" } else { "" }
        )
    }

    /// Width of the encoder output fed to the head.
    pub fn encoded_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Cnn => self.filters * self.filter_sizes.len(),
            EncoderKind::Lstm | EncoderKind::Mlp => self.embed_dim,
            EncoderKind::Logistic => 2,
        }
    }

    /// Width of the penultimate activation.
    pub fn repr_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Logistic => 2,
            _ => self.mlp_hidden.last().copied().unwrap_or_else(|| self.encoded_dim()),
        }
    }

    /// Head parameters are the MLP (or the whole logistic model).
    pub fn is_head(&self, name: &str) -> bool {
        name.starts_with("mlp.") || name.starts_with("logistic.")
    }

    /// Default frozen set for fine-tuning: embedding and encoder.
    pub fn default_frozen(&self, params: &ParamSet) -> Vec<String> {
        params
            .names()
            .filter(|n| !self.is_head(n))
            .map(str::to_string)
            .collect()
    }

    fn uses_batch_norm(&self) -> bool {
        self.normalize && self.encoder == EncoderKind::Cnn
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fan-in scaled uniform initialization; biases zero, normalization gains
/// one, the padding row of the embedding zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new(arch.tag());
    let d = arch.embed_dim;
    let dense = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
        uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    };

    if arch.encoder == EncoderKind::Logistic {
        let mut w = uniform(&mut rng, &[arch.vocab, 2], 0.01).to_vec();
        w[..2].fill(0.0);
        p.insert("logistic.weight", Tensor::new(vec![arch.vocab, 2], w)?);
        p.insert("logistic.bias", Tensor::zeros(&[1, 2]));
        return Ok(p);
    }

    let mut emb = uniform(&mut rng, &[arch.vocab, d], 1.0 / (d as f64).sqrt()).to_vec();
    emb[..d].fill(0.0);
    p.insert("embedding.weight", Tensor::new(vec![arch.vocab, d], emb)?);
    p.insert("embedding.bias", Tensor::zeros(&[1, d]));

    match arch.encoder {
        EncoderKind::Cnn => {
            for &l in &arch.filter_sizes {
                p.insert(format!("conv{l}.weight"), dense(&mut rng, l * d, arch.filters));
                p.insert(format!("conv{l}.bias"), Tensor::zeros(&[1, arch.filters]));
            }
            if arch.normalize {
                let width = arch.encoded_dim();
                p.insert("bn.gamma", Tensor::ones(&[1, width]));
                p.insert("bn.beta", Tensor::zeros(&[1, width]));
                let stats = NormStats::identity(width);
                p.buffers.insert(BN_MEAN.into(), stats.mean);
                p.buffers.insert(BN_VAR.into(), stats.var);
            }
        }
        EncoderKind::Lstm => {
            p.insert("lstm.w_x", dense(&mut rng, d, 4 * d));
            p.insert("lstm.w_h", dense(&mut rng, d, 4 * d));
            p.insert("lstm.bias", Tensor::zeros(&[1, 4 * d]));
            if arch.normalize {
                p.insert("ln.gamma", Tensor::ones(&[1, d]));
                p.insert("ln.beta", Tensor::zeros(&[1, d]));
            }
        }
        EncoderKind::Mlp | EncoderKind::Logistic => {}
    }

    let mut fan_in = arch.encoded_dim();
    for (i, &h) in arch.mlp_hidden.iter().enumerate() {
        p.insert(format!("mlp.{i}.weight"), dense(&mut rng, fan_in, h));
        p.insert(format!("mlp.{i}.bias"), Tensor::zeros(&[1, h]));
        fan_in = h;
    }
    p.insert("mlp.out.weight", dense(&mut rng, fan_in, 2));
    p.insert("mlp.out.bias", Tensor::zeros(&[1, 2]));
    Ok(p)
}

/// How normalization layers behave during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Batch statistics, which are returned.
    Train,
    /// Running statistics read from the given buffers.
    Eval(&'a IndexMap<String, Tensor>),
}

pub struct Forward {
    /// `[n, 2]` softmax output; column 0 is the case probability.
    pub probs: Expr,
    /// Penultimate activation `[n, repr_dim]`.
    pub repr: Expr,
    /// Batch statistics of a training-mode batch norm.
    pub norm: Option<NormStats>,
}

/// Sum of embedding rows of each visit's codes plus the embedding bias,
/// scattered to row `slot(patient, visit)` of a `[rows, d]` matrix. Unused
/// rows stay zero.
fn embed_visits(
    arch: &Architecture,
    params: &ParamExprs,
    batch: &Batch,
    rows: usize,
    slot: impl Fn(usize, usize) -> usize,
) -> Result<Expr> {
    let d = arch.embed_dim;
    // the bias is appended as one extra table row and looked up once per visit
    let table = Expr::concat(
        &[
            params.get("embedding.weight")?.clone(),
            params.get("embedding.bias")?.clone(),
        ],
        0,
    )?;
    let bias_row = arch.vocab;
    let mut index = Vec::new();
    let mut target = Vec::new();
    for (p, seq) in batch.visits.iter().enumerate() {
        for (t, codes) in seq.iter().enumerate() {
            let row = slot(p, t);
            for &c in codes {
                index.push(c as usize);
                target.push(row);
            }
            index.push(bias_row);
            target.push(row);
        }
    }
    let n = index.len();
    let gathered = table.gather(index.into(), d, &[n, d])?;
    Ok(gathered.scatter_add(target.into(), d, &[rows, d])?)
}

fn cnn_encode(arch: &Architecture, params: &ParamExprs, batch: &Batch) -> Result<Expr> {
    let b = batch.len();
    let lengths = batch.lengths();
    let widest = arch.filter_sizes.iter().copied().max().unwrap_or(1);
    let steps = batch.max_len().max(widest);
    let x = embed_visits(arch, params, batch, b * steps, |p, t| p * steps + t)?;
    let mut pooled = Vec::with_capacity(arch.filter_sizes.len());
    for &l in &arch.filter_sizes {
        let w = params.get(&format!("conv{l}.weight"))?;
        let bias = params.get(&format!("conv{l}.bias"))?;
        let y = nn::conv1d_time(&x, b, steps, l, w, bias)?;
        let windows = steps - l + 1;
        // only windows that start on a real visit; short sequences keep one
        let segments: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(p, &len)| (p * windows, (len.saturating_sub(l) + 1).min(windows)))
            .collect();
        pooled.push(nn::max_pool_segments(&y, &segments)?.relu());
    }
    Ok(Expr::concat(&pooled, 1)?)
}

fn lstm_encode(arch: &Architecture, params: &ParamExprs, batch: &Batch) -> Result<Expr> {
    let b = batch.len();
    let d = arch.embed_dim;
    let lengths = batch.lengths();
    let steps = batch.max_len();
    // time-major rows so that each step is a contiguous slice
    let x = embed_visits(arch, params, batch, steps * b, |p, t| t * b + p)?;
    let xw = x.matmul(params.get("lstm.w_x")?)?.add(params.get("lstm.bias")?)?;
    let w_h = params.get("lstm.w_h")?;
    let mut h = Expr::constant(Tensor::zeros(&[b, d]));
    let mut c = Expr::constant(Tensor::zeros(&[b, d]));
    for t in 0..steps {
        let mut gates = xw.slice(0, t * b, b)?;
        if t > 0 {
            gates = gates.add(&h.matmul(w_h)?)?;
        }
        let sig = gates.slice(1, 0, 3 * d)?.sigmoid();
        let (i, f, o) = (sig.slice(1, 0, d)?, sig.slice(1, d, d)?, sig.slice(1, 2 * d, d)?);
        let g = gates.slice(1, 3 * d, d)?.tanh();
        let c_new = f.mul(&c)?.add(&i.mul(&g)?)?;
        let h_new = o.mul(&c_new.tanh())?;
        let live: Vec<f64> = lengths.iter().map(|&len| if t < len { 1.0 } else { 0.0 }).collect();
        if live.iter().all(|&m| m == 1.0) {
            h = h_new;
            c = c_new;
        } else {
            // finished sequences carry their state through padding unchanged
            let keep = Expr::constant(Tensor::new(vec![b, 1], live.iter().map(|m| 1.0 - m).collect())?);
            let live = Expr::constant(Tensor::new(vec![b, 1], live)?);
            h = h_new.mul(&live)?.add(&h.mul(&keep)?)?;
            c = c_new.mul(&live)?.add(&c.mul(&keep)?)?;
        }
    }
    if arch.normalize {
        h = nn::layer_norm(&h, params.get("ln.gamma")?, params.get("ln.beta")?)?;
    }
    Ok(h)
}

fn mean_pool_encode(arch: &Architecture, params: &ParamExprs, batch: &Batch) -> Result<Expr> {
    let b = batch.len();
    let summed = embed_visits(arch, params, batch, b, |p, _| p)?;
    let inv: Vec<f64> = batch.lengths().iter().map(|&l| 1.0 / l as f64).collect();
    Ok(summed.mul(&Expr::constant(Tensor::new(vec![b, 1], inv)?))?)
}

fn logistic_logits(params: &ParamExprs, batch: &Batch) -> Result<Expr> {
    let mut index = Vec::new();
    let mut target = Vec::new();
    for (p, seq) in batch.visits.iter().enumerate() {
        for &c in seq.iter().flatten() {
            index.push(c as usize);
            target.push(p);
        }
    }
    let n = index.len();
    let w = params.get("logistic.weight")?;
    let counts_w = w
        .gather(index.into(), 2, &[n, 2])?
        .scatter_add(target.into(), 2, &[batch.len(), 2])?;
    Ok(counts_w.add(params.get("logistic.bias")?)?)
}

/// Class probabilities for every patient of `batch`.
pub fn forward(arch: &Architecture, params: &ParamExprs, batch: &Batch, mode: Mode<'_>) -> Result<Forward> {
    batch.validate(arch.vocab)?;
    if arch.encoder == EncoderKind::Logistic {
        let logits = logistic_logits(params, batch)?;
        return Ok(Forward {
            probs: nn::softmax_rows(&logits)?,
            repr: logits,
            norm: None,
        });
    }
    let mut h = match arch.encoder {
        EncoderKind::Cnn => cnn_encode(arch, params, batch)?,
        EncoderKind::Lstm => lstm_encode(arch, params, batch)?,
        EncoderKind::Mlp | EncoderKind::Logistic => mean_pool_encode(arch, params, batch)?,
    };
    let mut norm = None;
    if arch.uses_batch_norm() {
        let (gamma, beta) = (params.get("bn.gamma")?, params.get("bn.beta")?);
        let (y, stats) = match mode {
            Mode::Train => nn::batch_norm(&h, gamma, beta, None)?,
            Mode::Eval(buffers) => {
                let running = running_stats(buffers)?;
                nn::batch_norm(&h, gamma, beta, Some(&running))?
            }
        };
        h = y;
        norm = stats;
    }
    for i in 0..arch.mlp_hidden.len() {
        h = h
            .matmul(params.get(&format!("mlp.{i}.weight"))?)?
            .add(params.get(&format!("mlp.{i}.bias"))?)?
            .relu();
    }
    let logits = h
        .matmul(params.get("mlp.out.weight")?)?
        .add(params.get("mlp.out.bias")?)?;
    Ok(Forward {
        probs: nn::softmax_rows(&logits)?,
        repr: h,
        norm,
    })
}

fn running_stats(buffers: &IndexMap<String, Tensor>) -> Result<NormStats> {
    let get = |k: &str| {
        buffers
            .get(k)
            .cloned()
            .ok_or_else(|| Error::from(metapred_autodiff::Error::UnknownParameter(k.to_string())))
    };
    Ok(NormStats {
        mean: get(BN_MEAN)?,
        var: get(BN_VAR)?,
    })
}

/// Folds batch statistics into the running averages stored in `params`.
/// Several batches are averaged first.
pub fn fold_norm_stats(params: &mut ParamSet, batches: &[NormStats]) -> Result<()> {
    let Some(first) = batches.first() else {
        return Ok(());
    };
    let inv = 1.0 / batches.len() as f64;
    let mut mean = first.mean.clone();
    let mut var = first.var.clone();
    for s in &batches[1..] {
        mean = mean.zip_map(&s.mean, |a, b| a + b)?;
        var = var.zip_map(&s.var, |a, b| a + b)?;
    }
    let batch = NormStats {
        mean: mean.map(|v| v * inv),
        var: var.map(|v| v * inv),
    };
    let mut running = running_stats(&params.buffers)?;
    running.update(&batch, NORM_MOMENTUM)?;
    params.buffers.insert(BN_MEAN.into(), running.mean);
    params.buffers.insert(BN_VAR.into(), running.var);
    Ok(())
}

/// Mean binary cross-entropy over both output columns:
/// `−(1/N) Σᵢ [yᵢᵀ log ŷᵢ + (1−yᵢ)ᵀ log(1−ŷᵢ)]` with ŷ clamped to
/// `[PROB_EPS, 1 − PROB_EPS]`.
pub fn cross_entropy(probs: &Expr, labels: &[Label]) -> Result<Expr> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if probs.shape() != [n, 2] {
        return Err(metapred_autodiff::Error::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: vec![n, 2],
        }
        .into());
    }
    let y: Vec<f64> = labels.iter().flat_map(|l| l.one_hot()).collect();
    let y = Tensor::new(vec![n, 2], y)?;
    let not_y = Expr::constant(y.map(|v| 1.0 - v));
    let y = Expr::constant(y);
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let q = Expr::constant(Tensor::ones(&[n, 2])).sub(&p)?;
    let total = y.mul(&p.ln())?.add(&not_y.mul(&q.ln())?)?.sum();
    Ok(total.scale(-1.0 / n as f64))
}

/// Case probabilities in evaluation mode, without building gradients.
pub fn predict(arch: &Architecture, params: &ParamSet, batch: &Batch) -> Result<Vec<f64>> {
    let out = forward(arch, &params.constants(), batch, Mode::Eval(&params.buffers))?;
    let v = out.probs.value();
    Ok((0..batch.len()).map(|i| v.row(i)[0]).collect())
}

/// Penultimate activations in evaluation mode, one row per patient.
pub fn representations(arch: &Architecture, params: &ParamSet, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let out = forward(arch, &params.constants(), batch, Mode::Eval(&params.buffers))?;
    let v = out.repr.value();
    Ok((0..batch.len()).map(|i| v.row(i).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use metapred_autodiff::{gradient, with_precision, Precision};

    fn tiny(encoder: EncoderKind) -> Architecture {
        Architecture {
            encoder,
            vocab: 10,
            embed_dim: 4,
            filter_sizes: vec![2, 3],
            filters: 3,
            mlp_hidden: vec![5],
            max_len: 5,
            normalize: true,
        }
    }

    fn batch() -> Batch {
        Batch {
            domain: "d".into(),
            split: SplitTag::Train,
            ids: vec!["a".into(), "b".into(), "c".into()],
            visits: vec![
                vec![vec![1, 2], vec![3], vec![4, 5, 6]],
                vec![vec![7]],
                vec![vec![8, 9], vec![2], vec![1], vec![5, 3]],
            ],
            labels: vec![Label::Case, Label::Control, Label::Case],
        }
    }

    #[test]
    fn lstm_weight_shapes() {
        let p = init_params(&tiny(EncoderKind::Lstm), 0).unwrap();
        assert_eq!(p.get("lstm.w_h").unwrap().shape(), &[4, 16]);
        assert_eq!(p.get("lstm.w_x").unwrap().shape(), &[4, 16]);
        assert_eq!(p.get("lstm.bias").unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn init_is_seeded() {
        let a = tiny(EncoderKind::Cnn);
        assert_eq!(init_params(&a, 1).unwrap(), init_params(&a, 1).unwrap());
        assert_ne!(init_params(&a, 1).unwrap(), init_params(&a, 2).unwrap());
        let p = init_params(&a, 1).unwrap();
        assert!(p.get("embedding.weight").unwrap().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        let mut a = tiny(EncoderKind::Cnn);
        a.vocab = 1;
        assert!(init_params(&a, 0).is_err());
        let mut a = tiny(EncoderKind::Cnn);
        a.filter_sizes.clear();
        assert!(init_params(&a, 0).is_err());
    }

    #[test]
    fn rows_sum_to_one_for_every_encoder() {
        for enc in [
            EncoderKind::Cnn,
            EncoderKind::Lstm,
            EncoderKind::Mlp,
            EncoderKind::Logistic,
        ] {
            let a = tiny(enc);
            let p = init_params(&a, 3).unwrap();
            let out = forward(&a, &p.constants(), &batch(), Mode::Train).unwrap();
            for r in 0..3 {
                let s: f64 = out.probs.value().row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{enc:?}");
            }
        }
    }

    #[test]
    fn zero_parameters_give_even_odds() {
        for enc in [
            EncoderKind::Cnn,
            EncoderKind::Lstm,
            EncoderKind::Mlp,
            EncoderKind::Logistic,
        ] {
            let a = tiny(enc);
            let p = init_params(&a, 3)
                .unwrap()
                .map_params(|_, t| Ok(Tensor::zeros(t.shape())))
                .unwrap();
            let probs = predict(&a, &p, &batch()).unwrap();
            assert!(probs.iter().all(|&v| v == 0.5), "{enc:?}: {probs:?}");
        }
    }

    #[test]
    fn eval_mode_is_per_patient() {
        for enc in [EncoderKind::Cnn, EncoderKind::Lstm, EncoderKind::Mlp] {
            let a = tiny(enc);
            let p = init_params(&a, 4).unwrap();
            let b = batch();
            let base = predict(&a, &p, &b).unwrap();
            let order = [2, 0, 1];
            let perm = predict(&a, &p, &b.permuted(&order)).unwrap();
            for (k, &i) in order.iter().enumerate() {
                assert_eq!(perm[k], base[i]);
            }
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let p = Expr::constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let l = cross_entropy(&p, &[Label::Case]).unwrap().value().item().unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let p = Expr::constant(Tensor::new(vec![1, 2], vec![1.0 - PROB_EPS, PROB_EPS]).unwrap());
        let l = cross_entropy(&p, &[Label::Case]).unwrap().value().item().unwrap();
        assert!(l.abs() < 1e-6);
        let p2 = Expr::constant(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.3, 0.7]).unwrap());
        let p1 = Expr::constant(Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap());
        let two = cross_entropy(&p2, &[Label::Case, Label::Case])
            .unwrap()
            .value()
            .item()
            .unwrap();
        let one = cross_entropy(&p1, &[Label::Case]).unwrap().value().item().unwrap();
        assert!((two - one).abs() < 1e-15);
        assert!(matches!(cross_entropy(&p1, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn lstm_ignores_trailing_padding() {
        let a = tiny(EncoderKind::Lstm);
        let p = init_params(&a, 5).unwrap();
        let b = batch();
        let together = predict(&a, &p, &b).unwrap();
        for i in 0..b.len() {
            let alone = predict(&a, &p, &b.permuted(&[i])).unwrap();
            assert!((alone[0] - together[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_stats_are_returned_in_training() {
        let a = tiny(EncoderKind::Cnn);
        let mut p = init_params(&a, 6).unwrap();
        let out = forward(&a, &p.variables(), &batch(), Mode::Train).unwrap();
        let stats = out.norm.unwrap();
        assert_eq!(stats.mean.shape(), &[1, 6]);
        fold_norm_stats(&mut p, &[stats.clone()]).unwrap();
        let expect = stats.mean.map(|m| 0.1 * m);
        assert!(p.buffers[BN_MEAN].max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        with_precision(Precision::Double, || {
            for enc in [
                EncoderKind::Cnn,
                EncoderKind::Lstm,
                EncoderKind::Mlp,
                EncoderKind::Logistic,
            ] {
                let a = tiny(enc);
                let p = init_params(&a, 7).unwrap();
                let vars = p.variables();
                let b = batch();
                let out = forward(&a, &vars, &b, Mode::Train).unwrap();
                let loss = cross_entropy(&out.probs, &b.labels).unwrap();
                let g = gradient(&loss, &vars, false).unwrap();
                assert_eq!(g.len(), p.len());
                for (name, t) in &g {
                    if name == "embedding.weight" || name == "logistic.weight" {
                        // padding row never receives gradient
                        assert!(t.value().row(0).iter().all(|&v| v == 0.0));
                    }
                }
            }
        });
    }
}
