//! Synthetic semi-supervised datasets, batches and preprocessing.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// A set of examples with their (possibly hidden) true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Disjoint labeled, unlabeled and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SslDataset {
    pub labeled: Split,
    pub unlabeled: Split,
    pub test: Split,
    pub classes: usize,
}

impl SslDataset {
    pub fn dim(&self) -> usize {
        self.test.inputs.cols()
    }

    /// Labeled and unlabeled inputs stacked.
    pub fn train_inputs(&self) -> Tensor {
        let mut data = self.labeled.inputs.data().to_vec();
        data.extend_from_slice(self.unlabeled.inputs.data());
        Tensor::matrix(self.labeled.len() + self.unlabeled.len(), self.dim(), data)
            .expect("same width")
    }

    pub fn map_inputs(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<SslDataset> {
        let map = |s: &Split| -> Result<Split> {
            Ok(Split {
                inputs: f(&s.inputs)?,
                labels: s.labels.clone(),
            })
        };
        Ok(SslDataset {
            labeled: map(&self.labeled)?,
            unlabeled: map(&self.unlabeled)?,
            test: map(&self.test)?,
            classes: self.classes,
        })
    }
}

/// Inputs with labels; `-1` marks an unlabeled row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<i64>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<i64>, classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes as i64 || l < -1) {
            return Err(Error::usage(format!("label {bad} outside [-1, {classes})")));
        }
        let mask = labels.iter().map(|&l| l >= 0).collect();
        Ok(Batch {
            inputs,
            labels,
            mask,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Validates a labeled count against the dataset size.
pub fn check_counts(n: usize, n_labeled: usize) -> Result<()> {
    if n_labeled < 2 || !n_labeled.is_multiple_of(2) {
        return Err(Error::usage(format!(
            "labeled count must be even and at least 2, got {n_labeled}"
        )));
    }
    if n_labeled > n {
        return Err(Error::usage(format!(
            "labeled count {n_labeled} exceeds dataset size {n}"
        )));
    }
    Ok(())
}

/// Draws `n` labeled points from `sample(class, rng)` with alternating classes.
fn draw(
    n: usize,
    classes: usize,
    seed: u64,
    sample: &impl Fn(usize, &mut rand_chacha::ChaCha8Rng) -> [f64; 2],
) -> Split {
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        data.extend_from_slice(&sample(class, &mut rng));
        labels.push(class);
    }
    Split {
        inputs: Tensor::matrix(n, 2, data).expect("shape"),
        labels,
    }
}

fn split_labeled(train: Split, n_labeled: usize, classes: usize, seed: u64) -> (Split, Split) {
    let mut rng = rng_from(seed);
    let per_class = n_labeled / classes;
    let mut chosen = Vec::with_capacity(n_labeled);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..per_class.min(idx.len())]);
    }
    chosen.sort_unstable();
    let rest: Vec<usize> = (0..train.len())
        .filter(|i| chosen.binary_search(i).is_err())
        .collect();
    let pick = |idx: &[usize]| Split {
        inputs: train.inputs.select_rows(idx),
        labels: idx.iter().map(|&i| train.labels[i]).collect(),
    };
    (pick(&chosen), pick(&rest))
}

fn make_synthetic(
    n: usize,
    n_labeled: usize,
    seed: u64,
    sample: impl Fn(usize, &mut rand_chacha::ChaCha8Rng) -> [f64; 2],
) -> Result<SslDataset> {
    check_counts(n, n_labeled)?;
    let train = draw(n, 2, derive_seed(seed, &[1]), &sample);
    let test = draw(n, 2, derive_seed(seed, &[2]), &sample);
    let (labeled, unlabeled) = split_labeled(train, n_labeled, 2, derive_seed(seed, &[3]));
    Ok(SslDataset {
        labeled,
        unlabeled,
        test,
        classes: 2,
    })
}

/// Two interleaved half circles: class 0 on the unit upper half circle
/// centred at the origin, class 1 on the unit lower half circle centred at
/// `(1, 0.5)`. `n` training points plus an independent test set of the same
/// size; `n_labeled/2` labels per class.
pub fn make_two_moons(n: usize, noise: f64, n_labeled: usize, seed: u64) -> Result<SslDataset> {
    make_synthetic(n, n_labeled, seed, |class, rng| {
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        [x + noise * ex, y + noise * ey]
    })
}

/// Concentric circles: class 0 at radius 1, class 1 at radius 2.
pub fn make_rings(n: usize, noise: f64, n_labeled: usize, seed: u64) -> Result<SslDataset> {
    make_synthetic(n, n_labeled, seed, |class, rng| {
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = if class == 0 { 1.0 } else { 2.0 };
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        [radius * t.cos() + noise * ex, radius * t.sin() + noise * ey]
    })
}

/// Median distance from each row to its nearest other row.
pub fn median_nn_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let mut nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    x.row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        nn[n / 2]
    } else {
        0.5 * (nn[n / 2 - 1] + nn[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Symmetric `d × d`.
    pub whitening: Tensor,
    pub epsilon: f64,
}

/// Fits `W = E(Λ+εI)^{-1/2}Eᵀ` on the covariance of `x`.
pub fn fit_zca(x: &Tensor, epsilon: f64) -> Result<ZcaTransform> {
    let (n, d) = (x.rows(), x.cols());
    if !(epsilon > 0.0) {
        return Err(Error::Numeric("ZCA needs epsilon > 0".into()));
    }
    if n < d || n < 2 {
        return Err(Error::usage(format!("ZCA needs n >= d, got n={n}, d={d}")));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let scale =
        DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt()));
    let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let whitening = Tensor::matrix(d, d, (0..d * d).map(|k| w[(k / d, k % d)]).collect())?;
    Ok(ZcaTransform {
        mean,
        whitening,
        epsilon,
    })
}

pub fn apply_zca(t: &ZcaTransform, x: &Tensor) -> Result<Tensor> {
    if x.cols() != t.mean.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_zca",
            left: x.shape().to_vec(),
            right: vec![t.mean.len()],
        });
    }
    let mut centered = x.clone();
    for r in 0..x.rows() {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&t.mean) {
            *v -= m;
        }
    }
    centered.matmul(&t.whitening)
}

/// Adds `sigma`-scaled standard normal noise to the inputs.
pub fn augment_gaussian(batch: &Batch, sigma: f64, seed: u64) -> Batch {
    let mut out = batch.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = rng_from(seed);
    for v in out.inputs.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * e;
    }
    out
}

/// Draws batches with a fixed labeled:unlabeled composition, cycling
/// through shuffled epochs of each pool.
#[derive(Debug)]
pub struct BatchSampler {
    n_labeled: usize,
    n_unlabeled: usize,
    labeled_queue: Vec<usize>,
    unlabeled_queue: Vec<usize>,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, seed: u64) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::config("batches need at least one labeled example"));
        }
        Ok(BatchSampler {
            n_labeled,
            n_unlabeled,
            labeled_queue: Vec::new(),
            unlabeled_queue: Vec::new(),
            rng: rng_from(seed),
        })
    }

    fn take(
        queue: &mut Vec<usize>,
        pool: usize,
        k: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if queue.is_empty() {
                queue.extend(0..pool);
                queue.shuffle(rng);
            }
            out.push(queue.pop().expect("refilled"));
        }
        out
    }

    pub fn next_batch(&mut self, data: &SslDataset) -> Result<Batch> {
        if data.labeled.is_empty() || (self.n_unlabeled > 0 && data.unlabeled.is_empty()) {
            return Err(Error::usage("cannot sample from an empty pool"));
        }
        let li = Self::take(
            &mut self.labeled_queue,
            data.labeled.len(),
            self.n_labeled,
            &mut self.rng,
        );
        let ui = Self::take(
            &mut self.unlabeled_queue,
            data.unlabeled.len(),
            self.n_unlabeled,
            &mut self.rng,
        );
        let mut inputs = data.labeled.inputs.select_rows(&li).into_data();
        inputs.extend(data.unlabeled.inputs.select_rows(&ui).into_data());
        let mut labels: Vec<i64> = li.iter().map(|&i| data.labeled.labels[i] as i64).collect();
        labels.extend(std::iter::repeat_n(-1, ui.len()));
        let rows = labels.len();
        Batch::new(
            Tensor::matrix(rows, data.dim(), inputs)?,
            labels,
            data.classes,
        )
    }
}

/// Writes the dataset as CSV: `x0..x{d-1},label,split` with splits
/// `labeled`, `unlabeled`, `test` in that order. Unlabeled rows keep their
/// true label for analysis.
pub fn write_dataset_csv(path: &Path, data: &SslDataset) -> Result<()> {
    let d = data.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("label,split\n");
    for (name, split) in [
        ("labeled", &data.labeled),
        ("unlabeled", &data.unlabeled),
        ("test", &data.test),
    ] {
        for i in 0..split.len() {
            for v in split.inputs.row(i) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{},{name}\n", split.labels[i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, classes: usize) -> Result<SslDataset> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: String| Error::Format {
        what: "dataset csv",
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "split" {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let d = cols.len() - 2;
    let mut parts: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(bad(format!(
                "line {}: expected {} fields",
                lineno + 2,
                d + 2
            )));
        }
        let slot = match fields[d + 1] {
            "labeled" => 0,
            "unlabeled" => 1,
            "test" => 2,
            other => return Err(bad(format!("line {}: unknown split `{other}`", lineno + 2))),
        };
        for f in &fields[..d] {
            parts[slot].0.push(
                f.parse()
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?,
            );
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
        if label >= classes {
            return Err(bad(format!(
                "line {}: label {label} >= {classes}",
                lineno + 2
            )));
        }
        parts[slot].1.push(label);
    }
    let [l, u, t] = parts;
    let mk = |(x, y): (Vec<f64>, Vec<usize>)| -> Result<Split> {
        Ok(Split {
            inputs: Tensor::matrix(y.len(), d, x)?,
            labels: y,
        })
    };
    Ok(SslDataset {
        labeled: mk(l)?,
        unlabeled: mk(u)?,
        test: mk(t)?,
        classes,
    })
}
