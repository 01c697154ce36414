//! Naive `f64` reference implementations and a central finite-difference
//! gradient checker. Test-only: enabled by the `oracle` feature.
//!
//! The references share no code with the tape ops; the checker compares the
//! tape's analytic `f32` gradients against finite differences of the `f64`
//! references.

use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&x| f64::from(x)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.iter().map(|&x| x as f32).collect())
            .expect("consistent shape")
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            out[i * b.cols + j] = (0..a.cols).map(|p| a.get(i, p) * b.get(p, j)).sum();
        }
    }
    Mat::new(a.rows, b.cols, out)
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = vec![0.0; a.data.len()];
    for i in 0..a.rows {
        for j in 0..a.cols {
            out[j * a.rows + i] = a.get(i, j);
        }
    }
    Mat::new(a.cols, a.rows, out)
}

pub fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
}

pub fn row_broadcast(a: &Mat, row: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = (0..a.rows * a.cols).map(|i| f(a.data[i], row.data[i % a.cols])).collect();
    Mat::new(a.rows, a.cols, data)
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.data.clone();
    for row in out.chunks_mut(a.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - max).exp() / s);
    }
    Mat::new(a.rows, a.cols, out)
}

pub fn layer_norm_rows(a: &Mat) -> Mat {
    let mut out = a.data.clone();
    for row in out.chunks_mut(a.cols) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        row.iter_mut().for_each(|x| *x = (*x - mean) / (var + 1e-5).sqrt());
    }
    Mat::new(a.rows, a.cols, out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn cross_entropy(logits: &Mat, targets: &[usize], ignore: Option<usize>) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        let row = &logits.data[r * logits.cols..(r + 1) * logits.cols];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += z.ln() - row[t];
        n += 1;
    }
    total / n as f64
}

pub fn bce_with_logits(z: &Mat, y: &[f64]) -> f64 {
    z.data
        .iter()
        .zip(y)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / y.len() as f64
}

/// One differentiable op under test: builds the tape expression and its
/// reference counterpart from the same inputs.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    pub reference: Box<dyn Fn(&[Mat]) -> Mat>,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub shapes: Vec<(usize, usize)>,
    pub rel_err: f64,
    pub forward_err: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares tape gradients of `Σ W ⊙ op(inputs)` with central differences of
/// the reference, for fixed random weights `W`.
pub fn check(case: &OpCase, step: f64, rng: &mut SeededRng) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars);
    let (m, n) = tape.shape(out);
    let weights: Vec<f64> = (0..m * n).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let w = tape.constant(Mat::new(m, n, weights.clone()).to_tensor());
    let weighted = tape.hadamard(out, w).expect("same shape");
    let loss = tape.sum(weighted);
    let forward = Mat::from_tensor(tape.value(out));
    let grads = tape.backward(loss).expect("scalar loss");

    let mats: Vec<Mat> = case.inputs.iter().map(Mat::from_tensor).collect();
    let weights = Mat::new(m, n, weights.iter().map(|&x| f64::from(x as f32)).collect());
    let ref_out = (case.reference)(&mats);
    let forward_err = forward
        .data
        .iter()
        .zip(&ref_out.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let objective = |ms: &[Mat]| -> f64 {
        let o = (case.reference)(ms);
        o.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(*var);
        for idx in 0..mats[k].data.len() {
            analytic.push(g.map_or(0.0, |g| f64::from(g.data()[idx])));
            let mut plus = mats.clone();
            plus[k].data[idx] += step;
            let mut minus = mats.clone();
            minus[k].data[idx] -= step;
            numeric.push((objective(&plus) - objective(&minus)) / (2.0 * step));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel_err = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
    GradCheck {
        name: case.name.clone(),
        shapes: case.inputs.iter().map(|t| (t.rows(), t.cols())).collect(),
        rel_err,
        forward_err,
    }
}

fn random_tensor(rng: &mut SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| (lo + (hi - lo) * rng.uniform()) as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Inputs bounded away from zero (for kinks like ReLU).
fn away_from_zero(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = 0.05 + 1.5 * rng.uniform();
            (if rng.uniform() < 0.5 { -mag } else { mag }) as f32
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

fn dim(rng: &mut SeededRng, lo: usize) -> usize {
    lo + (rng.uniform() * (9 - lo) as f64) as usize
}

/// Cases for every differentiable op on one random shape draw (dims ≤ 8).
pub fn op_cases(rng: &mut SeededRng) -> Vec<OpCase> {
    let m = dim(rng, 1);
    let n = dim(rng, 1);
    let k = dim(rng, 1);
    let n2 = dim(rng, 2);
    let mut cases = Vec::new();
    let u = |rng: &mut SeededRng, r, c| random_tensor(rng, r, c, -1.5, 1.5);

    cases.push(OpCase {
        name: "matmul".into(),
        inputs: vec![u(rng, m, k), u(rng, k, n)],
        build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        reference: Box::new(|x| matmul(&x[0], &x[1])),
    });
    cases.push(OpCase {
        name: "matmul_nt".into(),
        inputs: vec![u(rng, m, k), u(rng, n, k)],
        build: Box::new(|t, v| t.matmul_nt(v[0], v[1]).unwrap()),
        reference: Box::new(|x| matmul(&x[0], &transpose(&x[1]))),
    });
    cases.push(OpCase {
        name: "transpose".into(),
        inputs: vec![u(rng, m, n)],
        build: Box::new(|t, v| t.transpose(v[0])),
        reference: Box::new(|x| transpose(&x[0])),
    });
    cases.push(OpCase {
        name: "add".into(),
        inputs: vec![u(rng, m, n), u(rng, m, n)],
        build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        reference: Box::new(|x| zip(&x[0], &x[1], |a, b| a + b)),
    });
    cases.push(OpCase {
        name: "sub".into(),
        inputs: vec![u(rng, m, n), u(rng, m, n)],
        build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        reference: Box::new(|x| zip(&x[0], &x[1], |a, b| a - b)),
    });
    cases.push(OpCase {
        name: "hadamard".into(),
        inputs: vec![u(rng, m, n), u(rng, m, n)],
        build: Box::new(|t, v| t.hadamard(v[0], v[1]).unwrap()),
        reference: Box::new(|x| zip(&x[0], &x[1], |a, b| a * b)),
    });
    cases.push(OpCase {
        name: "add_row".into(),
        inputs: vec![u(rng, m, n), u(rng, 1, n)],
        build: Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
        reference: Box::new(|x| row_broadcast(&x[0], &x[1], |a, b| a + b)),
    });
    cases.push(OpCase {
        name: "mul_row".into(),
        inputs: vec![u(rng, m, n), u(rng, 1, n)],
        build: Box::new(|t, v| t.mul_row(v[0], v[1]).unwrap()),
        reference: Box::new(|x| row_broadcast(&x[0], &x[1], |a, b| a * b)),
    });
    let bm = m;
    cases.push(OpCase {
        name: "broadcast_rows".into(),
        inputs: vec![u(rng, 1, n)],
        build: Box::new(move |t, v| t.broadcast_rows(v[0], bm).unwrap()),
        reference: Box::new(move |x| row_broadcast(&Mat::new(bm, x[0].cols, vec![0.0; bm * x[0].cols]), &x[0], |_, b| b)),
    });
    cases.push(OpCase {
        name: "scale".into(),
        inputs: vec![u(rng, m, n)],
        build: Box::new(|t, v| t.scale(v[0], -0.7)),
        reference: Box::new(|x| x[0].map(|a| a * f64::from(-0.7f32))),
    });
    let mask = random_tensor(rng, m, n, -2.0, 2.0);
    let mask_ref = Mat::from_tensor(&mask);
    cases.push(OpCase {
        name: "add_const".into(),
        inputs: vec![u(rng, m, n)],
        build: Box::new(move |t, v| t.add_const(v[0], &mask).unwrap()),
        reference: Box::new(move |x| zip(&x[0], &mask_ref, |a, b| a + b)),
    });
    cases.push(OpCase {
        name: "concat_cols".into(),
        inputs: vec![u(rng, m, n), u(rng, m, k)],
        build: Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        reference: Box::new(|x| {
            let cols = x[0].cols + x[1].cols;
            let mut data = Vec::new();
            for r in 0..x[0].rows {
                data.extend_from_slice(&x[0].data[r * x[0].cols..(r + 1) * x[0].cols]);
                data.extend_from_slice(&x[1].data[r * x[1].cols..(r + 1) * x[1].cols]);
            }
            Mat::new(x[0].rows, cols, data)
        }),
    });
    cases.push(OpCase {
        name: "concat_rows".into(),
        inputs: vec![u(rng, m, n), u(rng, k, n)],
        build: Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        reference: Box::new(|x| {
            let mut data = x[0].data.clone();
            data.extend_from_slice(&x[1].data);
            Mat::new(x[0].rows + x[1].rows, x[0].cols, data)
        }),
    });
    let (c0, c1) = (n2 / 2, n2);
    cases.push(OpCase {
        name: "slice_cols".into(),
        inputs: vec![u(rng, m, n2)],
        build: Box::new(move |t, v| t.slice_cols(v[0], c0, c1).unwrap()),
        reference: Box::new(move |x| {
            let mut data = Vec::new();
            for r in 0..x[0].rows {
                data.extend_from_slice(&x[0].data[r * x[0].cols + c0..r * x[0].cols + c1]);
            }
            Mat::new(x[0].rows, c1 - c0, data)
        }),
    });
    let rows = dim(rng, 2);
    let (r0, r1) = (rows / 2, rows);
    cases.push(OpCase {
        name: "slice_rows".into(),
        inputs: vec![u(rng, rows, n)],
        build: Box::new(move |t, v| t.slice_rows(v[0], r0, r1).unwrap()),
        reference: Box::new(move |x| Mat::new(r1 - r0, x[0].cols, x[0].data[r0 * x[0].cols..r1 * x[0].cols].to_vec())),
    });
    cases.push(OpCase {
        name: "sigmoid".into(),
        inputs: vec![random_tensor(rng, m, n, -3.0, 3.0)],
        build: Box::new(|t, v| t.sigmoid(v[0])),
        reference: Box::new(|x| x[0].map(sigmoid)),
    });
    cases.push(OpCase {
        name: "tanh".into(),
        inputs: vec![random_tensor(rng, m, n, -2.0, 2.0)],
        build: Box::new(|t, v| t.tanh(v[0])),
        reference: Box::new(|x| x[0].map(f64::tanh)),
    });
    cases.push(OpCase {
        name: "relu".into(),
        inputs: vec![away_from_zero(rng, m, n)],
        build: Box::new(|t, v| t.relu(v[0])),
        reference: Box::new(|x| x[0].map(|a| a.max(0.0))),
    });
    cases.push(OpCase {
        name: "softmax_rows".into(),
        inputs: vec![random_tensor(rng, m, n, -3.0, 3.0)],
        build: Box::new(|t, v| t.softmax_rows(v[0]).unwrap()),
        reference: Box::new(|x| softmax_rows(&x[0])),
    });
    cases.push(OpCase {
        name: "normalize_rows".into(),
        inputs: vec![random_tensor(rng, m, n, 0.2, 2.0)],
        build: Box::new(|t, v| t.normalize_rows(v[0]).unwrap()),
        reference: Box::new(|x| {
            let mut data = x[0].data.clone();
            for row in data.chunks_mut(x[0].cols) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|a| *a /= s);
            }
            Mat::new(x[0].rows, x[0].cols, data)
        }),
    });
    // Width 2 is degenerate (outputs are ±1, gradient ≈ 0).
    let ln_cols = dim(rng, 3);
    cases.push(OpCase {
        name: "layer_norm_rows".into(),
        inputs: vec![random_tensor(rng, m, ln_cols, -2.0, 2.0)],
        build: Box::new(|t, v| t.layer_norm_rows(v[0]).unwrap()),
        reference: Box::new(|x| layer_norm_rows(&x[0])),
    });
    let table_rows = dim(rng, 2);
    let ids: Vec<usize> = (0..m).map(|_| (rng.uniform() * table_rows as f64) as usize).collect();
    let ids_ref = ids.clone();
    cases.push(OpCase {
        name: "embedding".into(),
        inputs: vec![u(rng, table_rows, n)],
        build: Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()),
        reference: Box::new(move |x| {
            let mut data = Vec::new();
            for &i in &ids_ref {
                data.extend_from_slice(&x[0].data[i * x[0].cols..(i + 1) * x[0].cols]);
            }
            Mat::new(ids_ref.len(), x[0].cols, data)
        }),
    });
    cases.push(OpCase {
        name: "mean_rows".into(),
        inputs: vec![u(rng, m, n)],
        build: Box::new(|t, v| t.mean_rows(v[0]).unwrap()),
        reference: Box::new(|x| {
            let data = (0..x[0].cols)
                .map(|c| (0..x[0].rows).map(|r| x[0].get(r, c)).sum::<f64>() / x[0].rows as f64)
                .collect();
            Mat::new(1, x[0].cols, data)
        }),
    });
    cases.push(OpCase {
        name: "sum".into(),
        inputs: vec![u(rng, m, n)],
        build: Box::new(|t, v| t.sum(v[0])),
        reference: Box::new(|x| Mat::new(1, 1, vec![x[0].data.iter().sum()])),
    });
    let classes = n2;
    let mut targets: Vec<usize> = (0..m).map(|_| (rng.uniform() * classes as f64) as usize).collect();
    if m > 1 {
        targets[m - 1] = classes; // ignored position
    }
    let targets_ref = targets.clone();
    cases.push(OpCase {
        name: "cross_entropy".into(),
        inputs: vec![random_tensor(rng, m, classes, -3.0, 3.0)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &targets, Some(classes)).unwrap()),
        reference: Box::new(move |x| Mat::new(1, 1, vec![cross_entropy(&x[0], &targets_ref, Some(classes))])),
    });
    let labels: Vec<f32> = (0..m).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
    let labels_ref: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    cases.push(OpCase {
        name: "bce_with_logits".into(),
        inputs: vec![random_tensor(rng, m, 1, -3.0, 3.0)],
        build: Box::new(move |t, v| t.bce_with_logits(v[0], &labels).unwrap()),
        reference: Box::new(move |x| Mat::new(1, 1, vec![bce_with_logits(&x[0], &labels_ref)])),
    });
    cases
}

/// A two-layer tanh MLP with a squared-error head, `x·W1 + b1 → tanh → ·W2`.
pub fn mlp_case(rng: &mut SeededRng) -> OpCase {
    let (batch, input, hidden, out) = (dim(rng, 2), dim(rng, 2), dim(rng, 2), dim(rng, 1));
    let x = random_tensor(rng, batch, input, -1.0, 1.0);
    let x_ref = Mat::from_tensor(&x);
    OpCase {
        name: "mlp2".into(),
        inputs: vec![
            random_tensor(rng, input, hidden, -0.8, 0.8),
            random_tensor(rng, 1, hidden, -0.5, 0.5),
            random_tensor(rng, hidden, out, -0.8, 0.8),
        ],
        build: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, v[0]).unwrap();
            let h = t.add_row(h, v[1]).unwrap();
            let h = t.tanh(h);
            let o = t.matmul(h, v[2]).unwrap();
            let sq = t.hadamard(o, o).unwrap();
            t.mean(sq).unwrap()
        }),
        reference: Box::new(move |p| {
            let h = row_broadcast(&matmul(&x_ref, &p[0]), &p[1], |a, b| a + b).map(f64::tanh);
            let o = matmul(&h, &p[2]);
            Mat::new(1, 1, vec![o.data.iter().map(|v| v * v).sum::<f64>() / o.data.len() as f64])
        }),
    }
}
