//! Residual feed-forward sketch-to-sketch network with explicit backprop.
//!
//! ```text
//! x = [sketches | numerical | flag | categorical embeddings]
//! h0 = x W_in + b_in
//! h_{l+1} = h_l + leaky_relu(batch_norm(h_l W_l + b_l))     l = 0..blocks
//! logits = h_L W_out + b_out
//! ```
//!
//! The loss is a softmax cross-entropy per sketch row against the target
//! city's region in that row, averaged over rows and batch.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::dataset::NUM_CATEGORICAL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch-norm layer.
    Train,
    /// Running statistics; deterministic per sample.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn kaiming(fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = scale * (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Linear {
            w: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
            b: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Every trainable tensor. Gradients and optimizer moments share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub input: Linear,
    pub tables: Vec<Array2<f64>>,
    pub blocks: Vec<Block>,
    pub output: Linear,
}

/// A named view of one trainable tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub data: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decays: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub decays: bool,
}

impl Weights {
    pub fn zeros_like(&self) -> Weights {
        Weights {
            input: Linear::zeros(self.input.w.nrows(), self.input.w.ncols()),
            tables: self
                .tables
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    linear: Linear::zeros(b.linear.w.nrows(), b.linear.w.ncols()),
                    gamma: Array1::zeros(b.gamma.len()),
                    beta: Array1::zeros(b.beta.len()),
                })
                .collect(),
            output: Linear::zeros(self.output.w.nrows(), self.output.w.ncols()),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let this = self;
        let mut out = vec![
            Tensor {
                name: "input.w".into(),
                data: this.input.w.as_slice().unwrap(),
                decays: true,
            },
            Tensor {
                name: "input.b".into(),
                data: this.input.b.as_slice().unwrap(),
                decays: false,
            },
        ];
        for (i, t) in this.tables.iter().enumerate() {
            out.push(Tensor {
                name: format!("table{i}"),
                data: t.as_slice().unwrap(),
                decays: true,
            });
        }
        for (i, b) in this.blocks.iter().enumerate() {
            out.push(Tensor {
                name: format!("block{i}.w"),
                data: b.linear.w.as_slice().unwrap(),
                decays: true,
            });
            out.push(Tensor {
                name: format!("block{i}.b"),
                data: b.linear.b.as_slice().unwrap(),
                decays: false,
            });
            out.push(Tensor {
                name: format!("block{i}.gamma"),
                data: b.gamma.as_slice().unwrap(),
                decays: false,
            });
            out.push(Tensor {
                name: format!("block{i}.beta"),
                data: b.beta.as_slice().unwrap(),
                decays: false,
            });
        }
        out.push(Tensor {
            name: "output.w".into(),
            data: this.output.w.as_slice().unwrap(),
            decays: true,
        });
        out.push(Tensor {
            name: "output.b".into(),
            data: this.output.b.as_slice().unwrap(),
            decays: false,
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            TensorMut {
                name: "input.w".into(),
                data: self.input.w.as_slice_mut().unwrap(),
                decays: true,
            },
            TensorMut {
                name: "input.b".into(),
                data: self.input.b.as_slice_mut().unwrap(),
                decays: false,
            },
        ];
        for (i, t) in self.tables.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("table{i}"),
                data: t.as_slice_mut().unwrap(),
                decays: true,
            });
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("block{i}.w"),
                data: b.linear.w.as_slice_mut().unwrap(),
                decays: true,
            });
            out.push(TensorMut {
                name: format!("block{i}.b"),
                data: b.linear.b.as_slice_mut().unwrap(),
                decays: false,
            });
            out.push(TensorMut {
                name: format!("block{i}.gamma"),
                data: b.gamma.as_slice_mut().unwrap(),
                decays: false,
            });
            out.push(TensorMut {
                name: format!("block{i}.beta"),
                data: b.beta.as_slice_mut().unwrap(),
                decays: false,
            });
        }
        out.push(TensorMut {
            name: "output.w".into(),
            data: self.output.w.as_slice_mut().unwrap(),
            decays: true,
        });
        out.push(TensorMut {
            name: "output.b".into(),
            data: self.output.b.as_slice_mut().unwrap(),
            decays: false,
        });
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch-norm statistics observed in one training forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<Array1<f64>>,
    /// Unbiased.
    pub var: Vec<Array1<f64>>,
}

/// A mini-batch in network layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x dense_len`: three sketches, then numerical features and flag.
    pub dense: Array2<f64>,
    pub categorical: Vec<[usize; NUM_CATEGORICAL]>,
    /// `B x rows` target region per sketch row, when training.
    pub targets: Option<Array2<u16>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dense.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct BlockCache {
    mean: Array1<f64>,
    /// Biased variance used for normalization.
    var: Array1<f64>,
    xhat: Array2<f64>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
}

struct Cache {
    x: Array2<f64>,
    /// Inputs of every block plus the final hidden state.
    hs: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub weights: Weights,
    pub running: Vec<RunningStats>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let input = Linear::kaiming(config.input_len(), h, 1.0, &mut rng);
        let table_dist = Uniform::new_inclusive(-0.05, 0.05).unwrap();
        let tables = if config.use_features {
            config
                .categorical_sizes
                .iter()
                .zip(&config.categorical_dims)
                .map(|(&n, &d)| {
                    Array2::from_shape_simple_fn((n, d), || table_dist.sample(&mut rng))
                })
                .collect()
        } else {
            Vec::new()
        };
        let blocks = (0..config.blocks)
            .map(|_| Block {
                linear: Linear::kaiming(h, h, 1.0, &mut rng),
                gamma: Array1::ones(h),
                beta: Array1::zeros(h),
            })
            .collect();
        let output = Linear::kaiming(h, config.output_len(), config.output_init_scale, &mut rng);
        let running = (0..config.blocks)
            .map(|_| RunningStats {
                mean: Array1::zeros(h),
                var: Array1::ones(h),
            })
            .collect();
        Ok(Network {
            weights: Weights {
                input,
                tables,
                blocks,
                output,
            },
            running,
            config,
        })
    }

    fn check_batch(&self, batch: &Batch, mode: Mode) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::NoData("empty batch"));
        }
        if mode == Mode::Train && batch.len() < 2 {
            return Err(Error::invalid(
                "batch",
                "train mode needs at least 2 samples",
            ));
        }
        if batch.dense.ncols() != self.config.dense_len() {
            return Err(Error::shape(self.config.dense_len(), batch.dense.ncols()));
        }
        if self.config.use_features {
            if batch.categorical.len() != batch.len() {
                return Err(Error::shape(batch.len(), batch.categorical.len()));
            }
            for (idx, size) in batch
                .categorical
                .iter()
                .flat_map(|c| c.iter().zip(&self.config.categorical_sizes))
            {
                if idx >= size {
                    return Err(Error::invalid(
                        "categorical",
                        format!("index {idx} >= {size}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn assemble(&self, batch: &Batch) -> Array2<f64> {
        if !self.config.use_features {
            return batch.dense.clone();
        }
        let mut x = Array2::zeros((batch.len(), self.config.input_len()));
        let dense = self.config.dense_len();
        x.slice_mut(s![.., ..dense]).assign(&batch.dense);
        for (mut row, cats) in x.outer_iter_mut().zip(&batch.categorical) {
            let mut col = dense;
            for (table, &idx) in self.weights.tables.iter().zip(cats) {
                let d = table.ncols();
                row.slice_mut(s![col..col + d]).assign(&table.row(idx));
                col += d;
            }
        }
        x
    }

    fn forward_cached(&self, batch: &Batch, mode: Mode) -> (Array2<f64>, Cache) {
        let x = self.assemble(batch);
        let mut h = self.weights.input.apply(&x.view());
        let mut hs = Vec::with_capacity(self.config.blocks + 1);
        let mut caches = Vec::with_capacity(self.config.blocks);
        let slope = self.config.leaky_slope;
        let eps = self.config.bn_eps;
        for (block, running) in self.weights.blocks.iter().zip(&self.running) {
            let z = block.linear.apply(&h.view());
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = z.mean_axis(Axis(0)).unwrap();
                    let var = (&z - &mean).mapv(|d| d * d).mean_axis(Axis(0)).unwrap();
                    (mean, var)
                }
                Mode::Eval => (running.mean.clone(), running.var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = (z - &mean) * &inv_std;
            let y = &xhat * &block.gamma + &block.beta;
            let a = y.mapv(|v| if v > 0.0 { v } else { slope * v });
            let next = &h + &a;
            hs.push(h);
            caches.push(BlockCache {
                mean,
                var,
                xhat,
                y,
                inv_std,
            });
            h = next;
        }
        let logits = self.weights.output.apply(&h.view());
        hs.push(h);
        (
            logits,
            Cache {
                x,
                hs,
                blocks: caches,
            },
        )
    }

    /// Raw output logits, `B x output_len`.
    pub fn logits(&self, batch: &Batch, mode: Mode) -> Result<Array2<f64>> {
        self.check_batch(batch, mode)?;
        Ok(self.forward_cached(batch, mode).0)
    }

    /// Output sketches: a softmax over every sketch row of the logits.
    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Array2<f64>> {
        let mut out = self.logits(batch, mode)?;
        for mut row in out.outer_iter_mut() {
            let mut offset = 0;
            for seg in &self.config.segments {
                for r in 0..seg.depth {
                    let start = offset + r * seg.width;
                    let mut cells = row.slice_mut(s![start..start + seg.width]);
                    let max = cells.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    cells.mapv_inplace(|v| (v - max).exp());
                    let sum = cells.sum();
                    cells.mapv_inplace(|v| v / sum);
                }
                offset += seg.len();
            }
        }
        Ok(out)
    }

    /// Mean per-row cross-entropy of `logits` against `targets`, and its
    /// gradient with respect to the logits.
    pub fn loss_from_logits(
        &self,
        logits: &Array2<f64>,
        targets: &Array2<u16>,
    ) -> (f64, Array2<f64>) {
        softmax_cross_entropy(&self.config.segments, logits, targets)
    }

    /// Training-mode loss and exact gradients for every weight. Does not touch
    /// the running batch-norm statistics.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(f64, Weights, BatchStats)> {
        self.check_batch(batch, Mode::Train)?;
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::invalid("batch", "missing targets"))?;
        if targets.dim() != (batch.len(), self.config.rows()) {
            return Err(Error::shape(
                format!("{:?}", (batch.len(), self.config.rows())),
                format!("{:?}", targets.dim()),
            ));
        }
        let (logits, cache) = self.forward_cached(batch, Mode::Train);
        let (loss, dlogits) = self.loss_from_logits(&logits, targets);
        let grads = self.backward(batch, &cache, dlogits);
        let unbias = batch.len() as f64 / (batch.len() as f64 - 1.0);
        let stats = BatchStats {
            mean: cache.blocks.iter().map(|b| b.mean.clone()).collect(),
            var: cache.blocks.iter().map(|b| &b.var * unbias).collect(),
        };
        Ok((loss, grads, stats))
    }

    fn backward(&self, batch: &Batch, cache: &Cache, dlogits: Array2<f64>) -> Weights {
        let mut g = self.weights.zeros_like();
        let top = &cache.hs[self.config.blocks];
        g.output.w = top.t().dot(&dlogits);
        g.output.b = dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&self.weights.output.w.t());

        let n = batch.len() as f64;
        let slope = self.config.leaky_slope;
        for l in (0..self.config.blocks).rev() {
            let block = &self.weights.blocks[l];
            let bc = &cache.blocks[l];
            let h_in = &cache.hs[l];
            // Residual: dh flows to h_in directly and through the block.
            let mut dy = dh.clone();
            Zip::from(&mut dy).and(&bc.y).for_each(|d, &y| {
                if y <= 0.0 {
                    *d *= slope;
                }
            });
            let gb = &mut g.blocks[l];
            gb.gamma = (&dy * &bc.xhat).sum_axis(Axis(0));
            gb.beta = dy.sum_axis(Axis(0));
            let dxhat = dy * &block.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
            let mut dz = dxhat * n - &sum_dxhat - &bc.xhat * &sum_dxhat_xhat;
            dz *= &(&bc.inv_std / n);
            gb.linear.w = h_in.t().dot(&dz);
            gb.linear.b = dz.sum_axis(Axis(0));
            dh += &dz.dot(&block.linear.w.t());
        }

        g.input.w = cache.x.t().dot(&dh);
        g.input.b = dh.sum_axis(Axis(0));
        if self.config.use_features {
            let dense = self.config.dense_len();
            let w_cat = self.weights.input.w.slice(s![dense.., ..]);
            let dx_cat = dh.dot(&w_cat.t());
            for (row, cats) in dx_cat.outer_iter().zip(&batch.categorical) {
                let mut col = 0;
                for (table, &idx) in g.tables.iter_mut().zip(cats) {
                    let d = table.ncols();
                    let mut target = table.row_mut(idx);
                    target += &row.slice(s![col..col + d]);
                    col += d;
                }
            }
        }
        g
    }

    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for ((running, mean), var) in self.running.iter_mut().zip(&stats.mean).zip(&stats.var) {
            running.mean = &running.mean * (1.0 - m) + mean * m;
            running.var = &running.var * (1.0 - m) + var * m;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(&r.var).all(|x| x.is_finite()))
    }
}

pub(crate) fn softmax_cross_entropy(
    segments: &[crate::sketch::Segment],
    logits: &Array2<f64>,
    targets: &Array2<u16>,
) -> (f64, Array2<f64>) {
    let rows: usize = segments.iter().map(|s| s.depth).sum();
    let scale = 1.0 / (logits.nrows() * rows) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((z, mut dz), t) in logits
        .outer_iter()
        .zip(grad.outer_iter_mut())
        .zip(targets.outer_iter())
    {
        let mut offset = 0;
        let mut r_global = 0;
        for seg in segments {
            for r in 0..seg.depth {
                let start = offset + r * seg.width;
                let cells = z.slice(s![start..start + seg.width]);
                let max = cells.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = cells.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                let target = t[r_global] as usize;
                total += lse - cells[target];
                let mut d = dz.slice_mut(s![start..start + seg.width]);
                Zip::from(&mut d)
                    .and(&cells)
                    .for_each(|d, &v| *d = (v - lse).exp() * scale);
                d[target] -= scale;
                r_global += 1;
            }
            offset += seg.len();
        }
    }
    (total * scale, grad)
}
