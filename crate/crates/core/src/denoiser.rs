//! Fine/coarse soft denoiser: a shared two-layer GCN over cluster graphs,
//! a mean readout of the anchor graph, and bilinear per-record scores.

use camtraj_nd::{ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserDims {
    /// GCN input width (the token embedding width).
    pub d_in: usize,
    pub hidden: usize,
    pub d_st: usize,
    pub d_app: usize,
}

impl DenoiserDims {
    /// Width of `f = [f_st, f_app]`.
    pub fn feature_dim(&self) -> usize {
        self.d_st + self.d_app
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserParams {
    pub gcn1_w: ParamId,
    pub gcn1_b: ParamId,
    pub gcn2_w: ParamId,
    pub gcn2_b: ParamId,
    pub bilinear_w: ParamId,
    pub bilinear_b: ParamId,
}

pub(crate) fn xavier(rows: usize, cols: usize, gain: f32, rng: &mut SeededRng) -> Tensor {
    let a = gain * (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| (2.0 * rng.uniform_f32() - 1.0) * a).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn bilinear_init(dims: DenoiserDims, app_gain: f32, rng: &mut SeededRng) -> Tensor {
    let f = dims.feature_dim();
    let mut w = xavier(f, f, 0.1, rng);
    if app_gain > 0.0 {
        let data = w.data_mut();
        for i in dims.d_st..f {
            for j in dims.d_st..f {
                data[i * f + j] = if i == j { app_gain } else { 0.0 };
            }
        }
    }
    w
}

impl DenoiserParams {
    /// `app_gain > 0` starts the appearance–appearance block of the bilinear
    /// form at `app_gain · I`, so initial scores rank records by cosine
    /// similarity to the anchor.
    pub fn register(store: &mut ParamStore, dims: DenoiserDims, app_gain: f32, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            gcn1_w: store.insert("denoiser.gcn1.w", xavier(dims.d_in, dims.hidden, 1.0, rng), true)?,
            gcn1_b: store.insert("denoiser.gcn1.b", Tensor::zeros(1, dims.hidden), true)?,
            gcn2_w: store.insert("denoiser.gcn2.w", xavier(dims.hidden, dims.d_st, 1.0, rng), true)?,
            gcn2_b: store.insert("denoiser.gcn2.b", Tensor::zeros(1, dims.d_st), true)?,
            bilinear_w: store.insert("denoiser.bilinear.w", bilinear_init(dims, app_gain, rng), true)?,
            bilinear_b: store.insert("denoiser.bilinear.b", Tensor::zeros(1, 1), true)?,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            gcn1_w: store.id("denoiser.gcn1.w")?,
            gcn1_b: store.id("denoiser.gcn1.b")?,
            gcn2_w: store.id("denoiser.gcn2.w")?,
            gcn2_b: store.id("denoiser.gcn2.b")?,
            bilinear_w: store.id("denoiser.bilinear.w")?,
            bilinear_b: store.id("denoiser.bilinear.b")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.gcn1_w,
            self.gcn1_b,
            self.gcn2_w,
            self.gcn2_b,
            self.bilinear_w,
            self.bilinear_b,
        ]
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` where `A` holds the off-diagonal similarities of
/// a row-major `n × n` weight matrix; its diagonal is replaced by the unit
/// self-loop.
pub fn normalized_adjacency(weights: &[f64], n: usize) -> Result<Tensor> {
    if n == 0 || weights.len() != n * n {
        return Err(Error::LengthMismatch(format!("{} weights for {n} nodes", weights.len())));
    }
    let mut a = weights.to_vec();
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    let data = (0..n * n)
        .map(|k| (a[k] * inv_sqrt[k / n] * inv_sqrt[k % n]) as f32)
        .collect();
    Ok(Tensor::new(vec![n, n], data)?)
}

/// Two propagation rounds `Â·X·W + b` with a ReLU between them.
pub fn gcn_forward(tape: &mut Tape, store: &ParamStore, p: &DenoiserParams, adj: Var, x: Var) -> Result<Var> {
    let w1 = tape.param(store, p.gcn1_w);
    let b1 = tape.param(store, p.gcn1_b);
    let w2 = tape.param(store, p.gcn2_w);
    let b2 = tape.param(store, p.gcn2_b);
    let ax = tape.matmul(adj, x)?;
    let h = tape.matmul(ax, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let ah = tape.matmul(adj, h)?;
    let out = tape.matmul(ah, w2)?;
    Ok(tape.add_row(out, b2)?)
}

/// Per-record `f_i = [f_st_i, f_app_i]`.
pub fn node_features(
    tape: &mut Tape,
    store: &ParamStore,
    p: &DenoiserParams,
    adj: Var,
    x: Var,
    app: Var,
) -> Result<Var> {
    let st = gcn_forward(tape, store, p, adj, x)?;
    Ok(tape.concat_cols(&[st, app])?)
}

/// Mean of the node features.
pub fn readout(tape: &mut Tape, feats: Var) -> Result<Var> {
    Ok(tape.mean_rows(feats)?)
}

/// `fᵢᵀ W_b anchor + b` for every row of `feats`, as an `n × 1` column.
pub fn score_logits(tape: &mut Tape, store: &ParamStore, p: &DenoiserParams, feats: Var, anchor: Var) -> Result<Var> {
    let w = tape.param(store, p.bilinear_w);
    let b = tape.param(store, p.bilinear_b);
    let fw = tape.matmul(feats, w)?;
    let z = tape.matmul_nt(fw, anchor)?;
    Ok(tape.add_row(z, b)?)
}

/// Mean binary cross-entropy between `σ(logits)` and the noise labels.
pub fn denoise_loss(tape: &mut Tape, logits: Var, labels: &[f32]) -> Result<Var> {
    let (n, _) = tape.shape(logits);
    if n != labels.len() {
        return Err(Error::LengthMismatch(format!("{n} scores, {} labels", labels.len())));
    }
    Ok(tape.bce_with_logits(logits, labels)?)
}

/// Scalar BCE of probabilities against labels, for reporting.
pub fn bce(scores: &[f32], labels: &[f32]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::LengthMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let eps = 1e-12f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let (s, y) = (f64::from(s).clamp(eps, 1.0 - eps), f64::from(y));
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use camtraj_nd::sigmoid;

    fn dims(d: usize) -> DenoiserDims {
        DenoiserDims {
            d_in: d,
            hidden: d,
            d_st: d,
            d_app: d,
        }
    }

    fn setup(d: usize, seed: u64) -> (ParamStore, DenoiserParams) {
        let mut store = ParamStore::new();
        let p = DenoiserParams::register(&mut store, dims(d), 0.0, &mut SeededRng::new(seed)).unwrap();
        (store, p)
    }

    fn run_gcn(store: &ParamStore, p: &DenoiserParams, w: &[f64], x: &Tensor) -> Tensor {
        let n = x.rows();
        let mut tape = Tape::new();
        let adj = tape.constant(normalized_adjacency(w, n).unwrap());
        let xv = tape.constant(x.clone());
        let out = gcn_forward(&mut tape, store, p, adj, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identity_gain_sets_only_the_appearance_block() {
        let d = 3;
        let mut plain = ParamStore::new();
        let a = DenoiserParams::register(&mut plain, dims(d), 0.0, &mut SeededRng::new(2)).unwrap();
        let mut gained = ParamStore::new();
        let b = DenoiserParams::register(&mut gained, dims(d), 5.0, &mut SeededRng::new(2)).unwrap();
        let (wa, wb) = (plain.tensor(a.bilinear_w).data(), gained.tensor(b.bilinear_w).data());
        let f = 2 * d;
        for i in 0..f {
            for j in 0..f {
                let k = i * f + j;
                if i >= d && j >= d {
                    assert_eq!(wb[k], if i == j { 5.0 } else { 0.0 });
                } else {
                    assert_eq!(wb[k], wa[k]);
                }
            }
        }
        assert_eq!(plain.tensor(a.gcn2_w), gained.tensor(b.gcn2_w));
    }

    #[test]
    fn singleton_graph_uses_only_itself() {
        let (store, p) = setup(4, 1);
        let x = Tensor::row(vec![0.3, -0.2, 0.5, 1.0]);
        let got = run_gcn(&store, &p, &[0.7], &x);
        // Â = [1]: relu(x W1 + b1) W2 + b2 computed by hand.
        let w1 = store.tensor(p.gcn1_w);
        let w2 = store.tensor(p.gcn2_w);
        let h: Vec<f32> = (0..4)
            .map(|j| (0..4).map(|k| x.data()[k] * w1.at(k, j)).sum::<f32>().max(0.0))
            .collect();
        for j in 0..4 {
            let o: f32 = (0..4).map(|k| h[k] * w2.at(k, j)).sum();
            assert!((got.data()[j] - o).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_nodes_get_identical_outputs() {
        let (store, p) = setup(4, 2);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let out = run_gcn(&store, &p, &[1.0, 1.0, 1.0, 1.0], &x);
        assert_eq!(out.row_slice(0), out.row_slice(1));
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        let (store, p) = setup(3, 3);
        let mut rng = SeededRng::new(9);
        let n = 5;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = if i == j { 1.0 } else { rng.uniform() };
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| rng.uniform_f32() - 0.5).collect()).collect();
        let perm = [3, 0, 4, 1, 2];
        let mut pw = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                pw[i * n + j] = w[perm[i] * n + perm[j]];
            }
        }
        let prows: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out = run_gcn(&store, &p, &w, &Tensor::from_rows(&rows).unwrap());
        let pout = run_gcn(&store, &p, &pw, &Tensor::from_rows(&prows).unwrap());
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in pout.row_slice(i).iter().zip(out.row_slice(src)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adjacency_normalization_is_idempotent_on_diagonal_input() {
        let w = [1.0, 0.5, 0.5, 1.0];
        let a = normalized_adjacency(&w, 2).unwrap();
        let mut w2 = w;
        w2[0] = 0.2;
        assert_eq!(a, normalized_adjacency(&w2, 2).unwrap());
        // Row sums of A + I are 1.5 each: entries 1/1.5 and 0.5/1.5.
        assert!((a.at(0, 0) - 1.0 / 1.5).abs() < 1e-7);
        assert!((a.at(0, 1) - 0.5 / 1.5).abs() < 1e-7);
    }

    #[test]
    fn readout_means() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap());
        let r = readout(&mut tape, f).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
        let g = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![2.0, 2.0]]).unwrap());
        let r = readout(&mut tape, g).unwrap();
        assert_eq!(tape.value(r).data(), &[2.0, 3.0]);
    }

    fn hand_params(w: Tensor, b: f32) -> (ParamStore, DenoiserParams) {
        let mut store = ParamStore::new();
        let dims = DenoiserDims {
            d_in: 1,
            hidden: 1,
            d_st: 1,
            d_app: 1,
        };
        let p = DenoiserParams::register(&mut store, dims, 0.0, &mut SeededRng::new(0)).unwrap();
        store.get_mut(p.bilinear_w).tensor = w;
        store.get_mut(p.bilinear_b).tensor = Tensor::scalar(b);
        (store, p)
    }

    fn scores(store: &ParamStore, p: &DenoiserParams, feats: Tensor, anchor: Tensor) -> Vec<f32> {
        let mut tape = Tape::new();
        let f = tape.constant(feats);
        let a = tape.constant(anchor);
        let z = score_logits(&mut tape, store, p, f, a).unwrap();
        tape.value(z).data().iter().map(|&x| sigmoid(x)).collect()
    }

    #[test]
    fn zero_anchor_gives_half() {
        let (store, p) = hand_params(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
        let s = scores(&store, &p, Tensor::from_rows(&[vec![3.0, -1.0], vec![0.2, 0.9]]).unwrap(), Tensor::zeros(1, 2));
        assert!(s.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn aligned_features_score_above_half_and_scale_away() {
        let (store, p) = hand_params(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
        let feats = Tensor::from_rows(&[vec![0.8, 0.6], vec![-0.8, -0.6], vec![0.6, -0.8]]).unwrap();
        let s1 = scores(&store, &p, feats.clone(), Tensor::row(vec![0.8, 0.6]));
        assert!(s1[0] > 0.5 && s1[1] < 0.5);
        assert!((s1[0] - sigmoid(1.0)).abs() < 1e-6);
        let s2 = scores(&store, &p, feats, Tensor::row(vec![1.6, 1.2]));
        for (a, b) in s1.iter().zip(&s2) {
            assert!((b - 0.5).abs() >= (a - 0.5).abs());
            assert_eq!(*a > 0.5, *b > 0.5);
        }
    }

    #[test]
    fn denoise_loss_cases() {
        assert!((bce(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(bce(&[1.0 - 1e-9, 1e-9], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!(bce(&[0.9], &[0.0]).unwrap() > bce(&[0.9], &[1.0]).unwrap());
        assert!(bce(&[0.9], &[0.0, 1.0]).is_err());
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 1));
        let l = denoise_loss(&mut tape, z, &[1.0, 0.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(denoise_loss(&mut tape, z, &[1.0]).is_err());
    }
}
