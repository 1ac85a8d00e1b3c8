//! Targets, comparison functions and the local prediction loss.
//!
//! Inputs and targets travel as separate tensors. The pairing between a
//! sample and its class target is carried by explicit metadata (`labels`
//! for samples, `target_class` for target rows) instead of positional
//! interleaving.

mod generator;

pub use generator::{GeneratorConfig, Placement, TargetGenerator, Variant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

/// How a layer output is compared with its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    #[default]
    Dot,
    L2,
}

/// Sign convention for turning a comparison into logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitSign {
    /// Larger similarity means larger logit: `+dot`, `−l2`.
    #[default]
    Similarity,
    /// Negated comparison for both comparators: `−dot`, `−l2`.
    Negated,
}

/// Shape of the target emitted by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SparseSpec {
    #[default]
    Dense,
    /// Width-`k` target, zero-extended to the receiving layer's input width.
    Fc { k: usize },
    /// Kernel-shaped target `[c_in, kh, kw]` per class for a conv layer.
    Conv,
}

/// Activations and targets at one layer together with their class metadata.
#[derive(Debug, Clone)]
pub struct SignalBatch<T: Scalar> {
    pub h: Tensor<T>,
    pub t: Tensor<T>,
    pub labels: Vec<usize>,
    pub target_class: Vec<usize>,
}

impl<T: Scalar> SignalBatch<T> {
    pub fn new(
        h: Tensor<T>,
        t: Tensor<T>,
        labels: Vec<usize>,
        target_class: Vec<usize>,
    ) -> Result<Self> {
        if labels.len() != h.shape().first().copied().unwrap_or(0)
            || target_class.len() != t.shape().first().copied().unwrap_or(0)
        {
            return Err(Error::Metadata(format!(
                "{} labels for {} samples, {} classes for {} targets",
                labels.len(),
                h.shape().first().copied().unwrap_or(0),
                target_class.len(),
                t.shape().first().copied().unwrap_or(0)
            )));
        }
        if let Some(&l) = labels.iter().find(|l| !target_class.contains(l)) {
            return Err(Error::Metadata(format!("label {l} has no target")));
        }
        Ok(Self {
            h,
            t,
            labels,
            target_class,
        })
    }
}

/// One-hot rows for `classes[j]` over `width` columns.
pub fn one_hot<T: Scalar>(classes: &[usize], width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes.len(), width]);
    for (j, &c) in classes.iter().enumerate() {
        t.row_mut(j)[c] = T::one();
    }
    t
}

/// `logits[j,k] = ⟨h_j, t_k⟩`.
pub fn compare_dot<T: Scalar>(h: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, t, _) = unify(h, t)?;
    h.matmul_t(&t)
}

/// `d[j,k] = ‖t_k − h_j‖²`.
pub fn compare_l2<T: Scalar>(h: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, t, _) = unify(h, t)?;
    let mut d = h.matmul_t(&t)?;
    let hn: Vec<T> = (0..h.rows())
        .map(|j| h.row(j).iter().map(|&v| v * v).sum())
        .collect();
    let tn: Vec<T> = (0..t.rows())
        .map(|k| t.row(k).iter().map(|&v| v * v).sum())
        .collect();
    let m = t.rows();
    let two: T = s(2.0);
    for (i, v) in d.data_mut().iter_mut().enumerate() {
        *v = tn[i % m] - two * *v + hn[i / m];
    }
    Ok(d)
}

/// How the flattened `h` relates back to its original shape.
enum Restore {
    Reshape(Vec<usize>),
    /// `h` was globally average-pooled over `plane` positions.
    Pool(Vec<usize>, usize),
}

impl Restore {
    fn apply<T: Scalar>(&self, dh: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Restore::Reshape(shape) => dh.reshape(shape),
            Restore::Pool(shape, plane) => {
                let inv: T = s(1.0 / *plane as f64);
                let mut out = Vec::with_capacity(dh.len() * plane);
                for &g in dh.data() {
                    out.extend(std::iter::repeat_n(g * inv, *plane));
                }
                Tensor::new(shape, out)
            }
        }
    }
}

/// Brings `h` and `t` to matching 2-D widths.
fn unify<T: Scalar>(h: &Tensor<T>, t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Restore)> {
    let (hs, ts) = (h.shape(), t.shape());
    if hs.len() == 4 && ts.len() == 4 && ts[2] * ts[3] == 1 && hs[2] * hs[3] > 1 && hs[1] == ts[1] {
        let plane = hs[2] * hs[3];
        let inv: T = s(1.0 / plane as f64);
        let pooled: Vec<T> = h
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let hp = Tensor::new(&[hs[0], hs[1]], pooled)?;
        return Ok((hp, t.clone().flatten2(), Restore::Pool(hs.to_vec(), plane)));
    }
    let (h2, t2) = (h.clone().flatten2(), t.clone().flatten2());
    if h2.row_len() != t2.row_len() {
        return Err(Error::dim("compare", hs, ts));
    }
    Ok((h2, t2, Restore::Reshape(hs.to_vec())))
}

/// Output of [`pred_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub loss: f64,
    pub dh: Tensor<T>,
    pub dt: Tensor<T>,
    /// Samples whose highest-scoring class equals their label.
    pub correct: usize,
}

/// Columns of the comparison: one prototype per distinct target class.
///
/// With one target per class the targets are used directly. Several targets
/// sharing a class (per-sample generators) are averaged into a prototype.
struct Prototypes<T: Scalar> {
    p: Tensor<T>,
    classes: Vec<usize>,
    /// Row `k` of the targets feeds prototype `owner[k]` with weight `weight[k]`.
    owner: Vec<usize>,
    weight: Vec<T>,
}

fn prototypes<T: Scalar>(t: &Tensor<T>, target_class: &[usize]) -> Prototypes<T> {
    let mut classes: Vec<usize> = target_class.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() == target_class.len() {
        return Prototypes {
            p: t.clone(),
            classes: target_class.to_vec(),
            owner: (0..target_class.len()).collect(),
            weight: vec![T::one(); target_class.len()],
        };
    }
    let owner: Vec<usize> = target_class
        .iter()
        .map(|c| classes.binary_search(c).expect("present"))
        .collect();
    let mut counts = vec![0usize; classes.len()];
    owner.iter().for_each(|&o| counts[o] += 1);
    let weight: Vec<T> = owner.iter().map(|&o| s(1.0 / counts[o] as f64)).collect();
    let d = t.row_len();
    let mut p = Tensor::zeros(&[classes.len(), d]);
    for (k, (&o, &w)) in owner.iter().zip(&weight).enumerate() {
        for (dst, &v) in p.row_mut(o).iter_mut().zip(t.row(k)) {
            *dst += w * v;
        }
    }
    Prototypes {
        p,
        classes,
        owner,
        weight,
    }
}

fn logits_for<T: Scalar>(
    h: &Tensor<T>,
    p: &Tensor<T>,
    cmp: Comparator,
    sign: LogitSign,
) -> Result<Tensor<T>> {
    Ok(match (cmp, sign) {
        (Comparator::Dot, LogitSign::Similarity) => h.matmul_t(p)?,
        (Comparator::Dot, LogitSign::Negated) => h.matmul_t(p)?.scale(-T::one()),
        (Comparator::L2, _) => compare_l2(h, p)?.scale(-T::one()),
    })
}

/// Mean softmax cross-entropy of the comparison between `h` and `t`.
///
/// The logit of sample `j` for class `c` compares `h_j` with the target (or
/// class-mean of targets) labelled `c`. Gradients are returned for both
/// operands.
pub fn pred_loss<T: Scalar>(
    h: &Tensor<T>,
    t: &Tensor<T>,
    labels: &[usize],
    target_class: &[usize],
    cmp: Comparator,
    sign: LogitSign,
) -> Result<LossOutput<T>> {
    let (h2, t2, restore) = unify(h, t)?;
    if labels.len() != h2.rows() || target_class.len() != t2.rows() {
        return Err(Error::Metadata(format!(
            "{} labels for {} samples, {} classes for {} targets",
            labels.len(),
            h2.rows(),
            target_class.len(),
            t2.rows()
        )));
    }
    let proto = prototypes(&t2, target_class);
    let cols: Vec<usize> = labels
        .iter()
        .map(|l| {
            proto
                .classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Metadata(format!("label {l} has no target")))
        })
        .collect::<Result<_>>()?;
    let n = h2.rows();
    let m = proto.classes.len();
    let logits = logits_for(&h2, &proto.p, cmp, sign)?;
    let mut dl = Tensor::<T>::zeros(&[n, m]);
    let mut loss = 0.0f64;
    let mut correct = 0;
    let inv_n: T = s(1.0 / n.max(1) as f64);
    for j in 0..n {
        let row = logits.row(j);
        let (mut best, mut arg) = (T::neg_infinity(), 0);
        for (k, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = k;
            }
        }
        correct += usize::from(arg == cols[j]);
        let z: T = row.iter().map(|&v| (v - best).exp()).sum();
        loss += (z.ln() + best - row[cols[j]]).to_f64_lossy();
        let drow = dl.row_mut(j);
        for (k, &v) in row.iter().enumerate() {
            drow[k] = (v - best).exp() / z * inv_n;
        }
        drow[cols[j]] -= inv_n;
    }
    loss /= n.max(1) as f64;

    let (dh2, dp) = match (cmp, sign) {
        (Comparator::Dot, _) => {
            let sg = if sign == LogitSign::Negated {
                -T::one()
            } else {
                T::one()
            };
            (dl.matmul(&proto.p)?.scale(sg), dl.t_matmul(&h2)?.scale(sg))
        }
        (Comparator::L2, _) => {
            // logit = −‖p − h‖²: ∂/∂h = 2(p − h), ∂/∂p = −2(p − h)
            let two: T = s(2.0);
            let row_sum: Vec<T> = (0..n).map(|j| dl.row(j).iter().copied().sum()).collect();
            let col_sum: Vec<T> = (0..m).map(|k| (0..n).map(|j| dl.row(j)[k]).sum()).collect();
            let mut dh = dl.matmul(&proto.p)?;
            for j in 0..n {
                for (g, &hv) in dh.row_mut(j).iter_mut().zip(h2.row(j)) {
                    *g = two * (*g - hv * row_sum[j]);
                }
            }
            let mut dp = dl.t_matmul(&h2)?;
            for k in 0..m {
                for (g, &pv) in dp.row_mut(k).iter_mut().zip(proto.p.row(k)) {
                    *g = two * (*g - pv * col_sum[k]);
                }
            }
            (dh, dp)
        }
    };
    let d = t2.row_len();
    let mut dt2 = Tensor::zeros(&[t2.rows(), d]);
    for (k, (&o, &w)) in proto.owner.iter().zip(&proto.weight).enumerate() {
        for (dst, &g) in dt2.row_mut(k).iter_mut().zip(dp.row(o)) {
            *dst = w * g;
        }
    }
    Ok(LossOutput {
        loss,
        dh: restore.apply(dh2)?,
        dt: dt2.reshape(t.shape())?,
        correct,
    })
}

/// Class with the highest comparison score per sample.
pub fn predict_output_target<T: Scalar>(
    h: &Tensor<T>,
    t: &Tensor<T>,
    target_class: &[usize],
    cmp: Comparator,
    sign: LogitSign,
) -> Result<Vec<usize>> {
    let (h2, t2, _) = unify(h, t)?;
    let proto = prototypes(&t2, target_class);
    let logits = logits_for(&h2, &proto.p, cmp, sign)?;
    Ok(logits
        .argmax_rows()
        .into_iter()
        .map(|k| proto.classes[k])
        .collect())
}

/// Per-sample scores against per-sample candidate targets.
///
/// `t` holds `n·m` rows ordered sample-major: row `j·m + k` is the target
/// that sample `j` would receive for class `candidates[k]`.
pub fn predict_per_sample<T: Scalar>(
    h: &Tensor<T>,
    t: &Tensor<T>,
    candidates: &[usize],
    cmp: Comparator,
    sign: LogitSign,
) -> Result<Vec<usize>> {
    let (h2, t2, _) = unify(h, t)?;
    let (n, m) = (h2.rows(), candidates.len());
    if t2.rows() != n * m {
        return Err(Error::dim("predict_per_sample", h.shape(), t.shape()));
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let hj = Tensor::new(&[1, h2.row_len()], h2.row(j).to_vec())?;
        let tj = t2.select_rows(&(j * m..(j + 1) * m).collect::<Vec<_>>());
        let l = logits_for(&hj, &tj, cmp, sign)?;
        out.push(candidates[l.argmax_rows()[0]]);
    }
    Ok(out)
}

/// Row-wise argmax of classifier logits.
pub fn predict_classifier<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits.argmax_rows()
}

/// Mean softmax cross-entropy against integer labels; returns the loss,
/// `∂loss/∂logits` and the number of correct argmax predictions.
pub fn softmax_ce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>, usize)> {
    let classes: Vec<usize> = (0..logits.row_len()).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::Metadata(format!(
            "label {l} outside {} classes",
            classes.len()
        )));
    }
    let n = logits.rows();
    let mut d = Tensor::zeros(&[n, classes.len()]);
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_n: T = s(1.0 / n.max(1) as f64);
    for j in 0..n {
        let row = logits.row(j);
        let (mut best, mut arg) = (T::neg_infinity(), 0);
        for (k, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = k;
            }
        }
        correct += usize::from(arg == labels[j]);
        let z: T = row.iter().map(|&v| (v - best).exp()).sum();
        loss += (z.ln() + best - row[labels[j]]).to_f64_lossy();
        let drow = d.row_mut(j);
        for (k, &v) in row.iter().enumerate() {
            drow[k] = (v - best).exp() / z * inv_n;
        }
        drow[labels[j]] -= inv_n;
    }
    Ok((loss / n.max(1) as f64, d, correct))
}
