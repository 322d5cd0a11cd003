//! Bias-free deep ReLU score network `S(θ; t, x) = W_{L+1} σ(W_L ··· σ(W_0 [x; σ̄_t]))`.
//!
//! Time enters only through the appended coordinate `σ̄_t`, so the input
//! dimension is `d + 1` while the output dimension is `d`. Only the hidden
//! matrices `W_1 … W_L` are trainable; `W_0` and `W_{L+1}` stay at their
//! initial values.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size          | content                                   |
//! |--------|---------------|-------------------------------------------|
//! | 0      | 8             | magic `b"VESDENET"`                       |
//! | 8      | 4             | format version, `u32` = 1                 |
//! | 12     | 8             | `d` (data dimension), `u64`               |
//! | 20     | 8             | `m` (width), `u64`                        |
//! | 28     | 8             | `L` (number of hidden m×m layers), `u64`  |
//! | 36     | 8             | init seed, `u64`                          |
//! | 44     | 8·m·(d+1)     | `W_0`, row-major `f64`                    |
//! | ...    | 8·m·m each    | `W_1 … W_L`, row-major `f64`              |
//! | ...    | 8·d·m         | `W_{L+1}`, row-major `f64`                |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedules::WeightingSpec;
use crate::training::TrainBatch;

const MAGIC: &[u8; 8] = b"VESDENET";
const FORMAT_VERSION: u32 = 1;

/// Data point `x` with its noise level `σ̄`, fed to the network as `[x; σ̄]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput {
    pub x: Vec<f64>,
    pub sigma_bar: f64,
}

impl AugmentedInput {
    pub fn new(x: Vec<f64>, sigma_bar: f64) -> Self {
        Self { x, sigma_bar }
    }

    pub fn to_vector(&self) -> Array1<f64> {
        let mut v = Array1::zeros(self.x.len() + 1);
        for (dst, src) in v.iter_mut().zip(&self.x) {
            *dst = *src;
        }
        v[self.x.len()] = self.sigma_bar;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    w_in: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    w_out: Array2<f64>,
    seed: u64,
}

/// Output of [`ScoreNet::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    /// `f(θ; i, j)` laid out `n × N`.
    pub per_term: Array2<f64>,
    /// Gradients for `W_1 … W_L`.
    pub grads: Vec<Array2<f64>>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Pre- and post-activations per layer, filled by the forward pass.
type ForwardCache<'a> = (&'a mut Vec<Array2<f64>>, &'a mut Vec<Array2<f64>>);

impl ScoreNet {
    /// Gaussian initialization: `W_0 … W_L` entries `N(0, 2/m)`, `W_{L+1}`
    /// entries `N(0, 1/d)`, drawn in layer order from a ChaCha8 stream.
    pub fn init(d: usize, m: usize, depth: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::invalid(format!("network needs d >= 1 and m >= 1, got d={d} m={m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize, var: f64| {
            let sd = var.sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
        };
        let hidden_var = 2.0 / m as f64;
        let w_in = gaussian(m, d + 1, hidden_var);
        let hidden = (0..depth).map(|_| gaussian(m, m, hidden_var)).collect();
        let w_out = gaussian(d, m, 1.0 / d as f64);
        Ok(Self {
            w_in,
            hidden,
            w_out,
            seed,
        })
    }

    pub fn from_weights(w_in: Array2<f64>, hidden: Vec<Array2<f64>>, w_out: Array2<f64>, seed: u64) -> Result<Self> {
        let (m, d_in) = w_in.dim();
        if m == 0 || d_in < 2 {
            return Err(Error::invalid("W_0 must be m x (d+1) with m >= 1, d >= 1"));
        }
        let d = d_in - 1;
        for h in &hidden {
            if h.dim() != (m, m) {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: if h.nrows() != m { h.nrows() } else { h.ncols() },
                    context: "hidden layer shape",
                });
            }
        }
        if w_out.dim() != (d, m) {
            return Err(Error::DimensionMismatch {
                expected: d * m,
                actual: w_out.len(),
                context: "output layer shape",
            });
        }
        Ok(Self {
            w_in,
            hidden,
            w_out,
            seed,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn width(&self) -> usize {
        self.w_in.nrows()
    }

    /// `L`, the number of trainable hidden layers.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w_in(&self) -> &Array2<f64> {
        &self.w_in
    }

    pub fn hidden(&self) -> &[Array2<f64>] {
        &self.hidden
    }

    pub fn hidden_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.hidden
    }

    pub fn w_out(&self) -> &Array2<f64> {
        &self.w_out
    }

    pub fn w_out_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w_out
    }

    pub fn parameter_count(&self) -> usize {
        self.w_in.len() + self.hidden.iter().map(|h| h.len()).sum::<usize>() + self.w_out.len()
    }

    pub fn forward(&self, input: &AugmentedInput) -> Result<Array1<f64>> {
        self.forward_raw(input.to_vector().view())
    }

    /// Evaluates the network on an already augmented `(d+1)`-vector.
    pub fn forward_raw(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.w_in.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.w_in.ncols(),
                actual: z.len(),
                context: "augmented input length",
            });
        }
        let col = z.insert_axis(Axis(1));
        Ok(self.forward_batch(col)?.column(0).to_owned())
    }

    /// Column-wise forward pass on a `(d+1) × B` matrix; returns `d × B`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.nrows() != self.w_in.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.w_in.ncols(),
                actual: inputs.nrows(),
                context: "augmented input rows",
            });
        }
        let mut h = self.w_in.dot(&inputs);
        relu_inplace(&mut h);
        for w in &self.hidden {
            h = w.dot(&h);
            relu_inplace(&mut h);
        }
        Ok(self.w_out.dot(&h))
    }

    fn check_batch(&self, batch: &TrainBatch, weighting: &WeightingSpec) -> Result<()> {
        if batch.n() == 0 || batch.time_count() == 0 {
            return Err(Error::invalid("training batch is empty"));
        }
        if batch.dim() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim(),
                actual: batch.dim(),
                context: "batch data dimension",
            });
        }
        if weighting.len() != batch.time_count() {
            return Err(Error::DimensionMismatch {
                expected: batch.time_count(),
                actual: weighting.len(),
                context: "weighting length vs batch time indices",
            });
        }
        Ok(())
    }

    /// Residuals `σ̄_j S(X_ij) + ξ_ij` (`d × nN`), plus the forward cache
    /// `[pre-activations per layer, post-activations per layer]` when requested.
    fn residuals(
        &self,
        batch: &TrainBatch,
        cache: Option<ForwardCache<'_>>,
    ) -> Result<Array2<f64>> {
        let inputs = batch.inputs();
        let mut pre = self.w_in.dot(&inputs);
        let mut post = pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let out = match cache {
            Some((pres, posts)) => {
                for w in &self.hidden {
                    let next_pre = w.dot(&post);
                    let next_post = next_pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
                    pres.push(std::mem::replace(&mut pre, next_pre));
                    posts.push(std::mem::replace(&mut post, next_post));
                }
                let out = self.w_out.dot(&post);
                pres.push(pre);
                posts.push(post);
                out
            }
            None => {
                for w in &self.hidden {
                    pre = w.dot(&post);
                    post = pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
                }
                self.w_out.dot(&post)
            }
        };
        let big_n = batch.time_count();
        let mut r = out;
        for (c, mut col) in r.axis_iter_mut(Axis(1)).enumerate() {
            let (i, j) = (c / big_n, c % big_n);
            let sb = batch.sigma_bars()[j];
            let xi = batch.noise(i, j);
            Zip::from(&mut col).and(xi).for_each(|r, &e| *r = sb * *r + e);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    sample: i,
                    time_index: j + 1,
                });
            }
        }
        Ok(r)
    }

    fn per_term(residuals: &Array2<f64>, batch: &TrainBatch, weighting: &WeightingSpec) -> (Array2<f64>, f64) {
        let (n, big_n) = (batch.n(), batch.time_count());
        let mut f = Array2::zeros((n, big_n));
        let mut total = 0.0;
        for (c, col) in residuals.axis_iter(Axis(1)).enumerate() {
            let (i, j) = (c / big_n, c % big_n);
            let v = weighting.beta[j] * col.dot(&col);
            f[[i, j]] = v;
            total += v;
        }
        (f, total / (2.0 * n as f64))
    }

    /// Empirical denoising loss `(1/2n) Σ_i Σ_j β_j ‖σ̄_j S(θ; X_ij) + ξ_ij‖²`.
    pub fn loss(&self, batch: &TrainBatch, weighting: &WeightingSpec) -> Result<f64> {
        self.check_batch(batch, weighting)?;
        let r = self.residuals(batch, None)?;
        Ok(Self::per_term(&r, batch, weighting).1)
    }

    /// Loss, per-term values and exact gradients for the trainable layers.
    pub fn loss_and_grad(&self, batch: &TrainBatch, weighting: &WeightingSpec) -> Result<LossAndGrad> {
        self.check_batch(batch, weighting)?;
        let mut pres = Vec::with_capacity(self.depth() + 1);
        let mut posts = Vec::with_capacity(self.depth() + 1);
        let r = self.residuals(batch, Some((&mut pres, &mut posts)))?;
        let (per_term, loss) = Self::per_term(&r, batch, weighting);

        // dL/d(out)_c = β_j σ̄_j r_c / n
        let big_n = batch.time_count();
        let inv_n = 1.0 / batch.n() as f64;
        let mut g_out = r;
        for (c, mut col) in g_out.axis_iter_mut(Axis(1)).enumerate() {
            let j = c % big_n;
            let scale = weighting.beta[j] * batch.sigma_bars()[j] * inv_n;
            col.mapv_inplace(|v| v * scale);
        }

        let depth = self.depth();
        let mut grads = vec![Array2::zeros((0, 0)); depth];
        if depth > 0 {
            // delta at the last hidden pre-activation
            let mut delta = self.w_out.t().dot(&g_out);
            Zip::from(&mut delta)
                .and(&pres[depth])
                .for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
            for l in (1..=depth).rev() {
                grads[l - 1] = delta.dot(&posts[l - 1].t());
                if l > 1 {
                    let mut next = self.hidden[l - 1].t().dot(&delta);
                    Zip::from(&mut next)
                        .and(&pres[l - 1])
                        .for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
                    delta = next;
                }
            }
        }
        Ok(LossAndGrad { loss, per_term, grads })
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.data_dim(), self.width(), self.depth()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        let layers = std::iter::once(&self.w_in)
            .chain(self.hidden.iter())
            .chain(std::iter::once(&self.w_out));
        for layer in layers {
            // iter() visits a standard-layout array in row-major order
            for v in layer.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let d = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let depth = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        if d == 0 || m == 0 || d > 1 << 20 || m > 1 << 20 || depth > 1 << 10 {
            return Err(Error::Checkpoint(format!("implausible header d={d} m={m} L={depth}")));
        }
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated weights: {e}")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
        };
        let w_in = read_matrix(m, d + 1)?;
        let hidden = (0..depth).map(|_| read_matrix(m, m)).collect::<Result<Vec<_>>>()?;
        let w_out = read_matrix(d, m)?;
        Self::from_weights(w_in, hidden, w_out, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}
