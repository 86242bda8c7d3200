//! Dense ReLU networks with an analytic backward pass and Adam.
//!
//! Weights are stored `in_dim x out_dim` so a batch `X` (rows are samples)
//! maps through a layer as `X W + b`. Hidden layers use ReLU; the final
//! layer is linear. Everything is `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Hidden sizes used by the value, critic and policy networks by default.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

const CHECKPOINT_MAGIC: &[u8; 4] = b"OTRM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
    hidden_sizes: Vec<usize>,
    seed: u64,
}

/// Parameter-shaped gradient (or moment) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
}

/// Intermediate values from a batched forward pass, consumed by `backward_batch`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre_activations: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Pre-activation values of each layer, hidden layers first.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

pub fn init_mlp(seed: u64, in_dim: usize, out_dim: usize, hidden: &[usize]) -> Result<MlpParams> {
    MlpParams::init(seed, in_dim, out_dim, hidden)
}

/// `rows x cols` matrix with orthonormal columns (if rows >= cols) or rows.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::zeros((tall, short));
    q.mapv_inplace(|_| StandardNormal.sample(rng));
    // Modified Gram-Schmidt, run twice for orthogonality at working precision.
    for _ in 0..2 {
        for j in 0..short {
            for k in 0..j {
                let proj = q.column(j).dot(&q.column(k));
                let col_k = q.column(k).to_owned();
                q.column_mut(j).scaled_add(-proj, &col_k);
            }
            let norm = q.column(j).dot(&q.column(j)).sqrt();
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}

impl MlpParams {
    pub fn init(seed: u64, in_dim: usize, out_dim: usize, hidden: &[usize]) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.contains(&0) {
            return Err(Error::Dimension(format!(
                "network dimensions must be >= 1 (in={in_dim}, out={out_dim}, hidden={hidden:?})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(in_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(out_dim);
        let layer_weights = sizes
            .windows(2)
            .map(|w| orthogonal(&mut rng, w[0], w[1]))
            .collect();
        let layer_biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_weights,
            layer_biases,
            hidden_sizes: hidden.to_vec(),
            seed,
        })
    }

    /// Builds a network from explicit tensors; used for hand-constructed test cases.
    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension("need one bias per weight matrix".into()));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(Error::Dimension(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && weights[l - 1].ncols() != w.nrows() {
                return Err(Error::Dimension(format!("layer {l}: input size mismatch")));
            }
        }
        let hidden_sizes = weights[..weights.len() - 1].iter().map(|w| w.ncols()).collect();
        Ok(Self {
            layer_weights: weights,
            layer_biases: biases,
            hidden_sizes,
            seed: 0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layer_weights[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layer_weights.last().map(|w| w.ncols()).unwrap_or(0)
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_weights.iter().map(|w| w.len()).sum::<usize>()
            + self.layer_biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let last = self.num_layers() - 1;
        let mut h = input.to_owned();
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(|z| z.max(0.0));
            }
        }
        Ok(h)
    }

    /// Forward pass retaining what the backward pass needs.
    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input.ncols())?;
        let last = self.num_layers() - 1;
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(last);
        let mut out = None;
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            let z = {
                let prev = if l == 0 { input } else { activations[l - 1].view() };
                prev.dot(w) + b
            };
            if l < last {
                activations.push(z.mapv(|v| v.max(0.0)));
            } else {
                out = Some(z.clone());
            }
            pre_activations.push(z);
        }
        let cache = ForwardCache {
            input: input.to_owned(),
            pre_activations,
            activations,
        };
        Ok((out.expect("at least one layer"), cache))
    }

    /// Gradient of `sum(output_grad * output)` with respect to the parameters and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let (_, cache) = self.forward_cached(x)?;
        let (grads, input_grad) = self.backward_batch(&cache, g)?;
        Ok((grads, input_grad.into_raw_vec_and_offset().0))
    }

    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if output_grad.ncols() != self.out_dim() || output_grad.nrows() != cache.input.nrows() {
            return Err(Error::Dimension(format!(
                "output gradient is {}x{}, expected {}x{}",
                output_grad.nrows(),
                output_grad.ncols(),
                cache.input.nrows(),
                self.out_dim()
            )));
        }
        let n = self.num_layers();
        let mut weight_grads = vec![Array2::zeros((0, 0)); n];
        let mut bias_grads = vec![Array1::zeros(0); n];
        let mut delta = output_grad.to_owned();
        for l in (0..n).rev() {
            let prev = if l == 0 {
                cache.input.view()
            } else {
                cache.activations[l - 1].view()
            };
            weight_grads[l] = prev.t().dot(&delta);
            bias_grads[l] = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.layer_weights[l].t());
            if l > 0 {
                // ReLU subgradient is 0 at exactly 0.
                Zip::from(&mut back)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            delta = back;
        }
        Ok((
            Gradients {
                layer_weights: weight_grads,
                layer_biases: bias_grads,
            },
            delta,
        ))
    }

    /// All parameters flattened layer by layer: weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layer_weights, &self.layer_biases)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.layer_weights.iter_mut().zip(self.layer_biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * online`.
    pub fn soft_update_from(&mut self, online: &MlpParams, tau: f64) {
        for (t, o) in self.layer_weights.iter_mut().zip(&online.layer_weights) {
            Zip::from(t).and(o).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
        for (t, o) in self.layer_biases.iter_mut().zip(&online.layer_biases) {
            Zip::from(t).and(o).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input has {cols} features, network expects {}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.in_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.out_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.hidden_sizes.len() as u32).to_le_bytes())?;
        for &h in &self.hidden_sizes {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        for x in self.to_flat() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: &str| IoError::new(ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let seed = u64::from_le_bytes(seed);
        let in_dim = read_u32(&mut r)? as usize;
        let out_dim = read_u32(&mut r)? as usize;
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 64 {
            return Err(bad("implausible hidden layer count"));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r).map(|h| h as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut params = MlpParams::init(0, in_dim, out_dim, &hidden).map_err(|e| bad(&e.to_string()))?;
        params.seed = seed;
        let mut flat = vec![0.0; params.param_count()];
        let mut buf = [0u8; 8];
        for x in flat.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        params.set_flat(&flat).map_err(|e| bad(&e.to_string()))?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn flatten(weights: &[Array2<f64>], biases: &[Array1<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        out.extend(w.iter().copied());
        out.extend(b.iter().copied());
    }
    out
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layer_weights: params
                .layer_weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            layer_biases: params
                .layer_biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layer_weights, &self.layer_biases)
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.layer_weights.len() == params.layer_weights.len()
            && self
                .layer_weights
                .iter()
                .zip(&params.layer_weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .layer_biases
                .iter()
                .zip(&params.layer_biases)
                .all(|(g, b)| g.dim() == b.dim())
    }

    /// First non-finite tensor, named for error messages.
    fn non_finite_tensor(&self) -> Option<String> {
        for (l, w) in self.layer_weights.iter().enumerate() {
            if w.iter().any(|x| !x.is_finite()) {
                return Some(format!("layer {l} weights"));
            }
        }
        for (l, b) in self.layer_biases.iter().enumerate() {
            if b.iter().any(|x| !x.is_finite()) {
                return Some(format!("layer {l} biases"));
            }
        }
        None
    }
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(params: &MlpParams, learning_rate: f64) -> Self {
        Self {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
            learning_rate,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.matches(params) || !state.first_moment.matches(params) {
        return Err(Error::Dimension("gradient or moment shapes do not match parameters".into()));
    }
    if let Some(tensor) = grads.non_finite_tensor() {
        return Err(Error::Numerical(format!("non-finite gradient in {tensor}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..params.num_layers() {
        Zip::from(&mut params.layer_weights[l])
            .and(&mut state.first_moment.layer_weights[l])
            .and(&mut state.second_moment.layer_weights[l])
            .and(&grads.layer_weights[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut params.layer_biases[l])
            .and(&mut state.first_moment.layer_biases[l])
            .and(&mut state.second_moment.layer_biases[l])
            .and(&grads.layer_biases[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn naive_forward(params: &MlpParams, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = params.num_layers() - 1;
        for (l, (w, b)) in params.layer_weights.iter().zip(&params.layer_biases).enumerate() {
            let mut next = vec![0.0; w.ncols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut s = b[j];
                for (i, &x) in h.iter().enumerate() {
                    s += x * w[[i, j]];
                }
                *out = if l < last { s.max(0.0) } else { s };
            }
            h = next;
        }
        h
    }

    fn randomize(params: &mut MlpParams, rng: &mut ChaCha8Rng) {
        let flat: Vec<f64> = (0..params.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.set_flat(&flat).unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(0, 5, 3, &[16, 16]).unwrap();
        let b = init_mlp(0, 5, 3, &[16, 16]).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        let c = init_mlp(1, 5, 3, &[16, 16]).unwrap();
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let p = init_mlp(7, 3, 2, &[4, 4]).unwrap();
        let shapes: Vec<_> = p.layer_weights.iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(3, 4), (4, 4), (4, 2)]);
        assert!(p.layer_biases.iter().all(|b| b.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(init_mlp(0, 0, 2, &[4]), Err(Error::Dimension(_))));
        assert!(matches!(init_mlp(0, 2, 0, &[4]), Err(Error::Dimension(_))));
        assert!(matches!(init_mlp(0, 2, 2, &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn square_hidden_weights_are_orthogonal() {
        let p = init_mlp(3, 9, 3, &[256, 256]).unwrap();
        let w = &p.layer_weights[1];
        let gram = w.t().dot(w);
        let err = gram
            .indexed_iter()
            .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "max |W^T W - I| = {err}");
        // Rectangular blocks are semi-orthogonal along their short side.
        let w0 = &p.layer_weights[0];
        let g0 = w0.dot(&w0.t());
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g0[[i, j]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = init_mlp(0, 3, 2, &[4, 4]).unwrap();
        p.set_flat(&vec![0.0; p.param_count()]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let p = MlpParams::from_layers(vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        assert_eq!(p.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let mut p = init_mlp(seed, 4, 3, &[8, 8]).unwrap();
            randomize(&mut p, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = p.forward(&x).unwrap();
            let want = naive_forward(&p, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_mlp(0, 3, 2, &[4]).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Dimension(_))));
        assert!(matches!(p.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let p = init_mlp(2, 3, 2, &[4, 4]).unwrap();
        let (g, gx) = p.backward(&[0.3, 0.1, -0.2], &[0.0, 0.0]).unwrap();
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
        assert!(gx.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dead_relu_unit_passes_no_gradient() {
        // Unit 1 of the hidden layer has negative pre-activation for this input.
        let w0 = array![[1.0, -1.0], [0.0, 0.0]];
        let b0 = array![0.0, 0.0];
        let w1 = array![[1.0], [1.0]];
        let b1 = array![0.0];
        let p = MlpParams::from_layers(vec![w0, w1], vec![b0, b1]).unwrap();
        let (g, _) = p.backward(&[1.0, 0.0], &[1.0]).unwrap();
        assert_eq!(g.layer_weights[0][[0, 1]], 0.0);
        assert_eq!(g.layer_biases[0][1], 0.0);
        assert_eq!(g.layer_weights[1][[1, 0]], 0.0);
        assert_eq!(g.layer_weights[0][[0, 0]], 1.0);
    }

    #[test]
    fn batch_backward_sums_per_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = init_mlp(1, 3, 2, &[6, 6]).unwrap();
        randomize(&mut p, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = p.forward_cached(x.view()).unwrap();
        let (batch_grads, batch_gx) = p.backward_batch(&cache, g.view()).unwrap();
        let mut sum = vec![0.0; p.param_count()];
        for i in 0..4 {
            let (gi, gxi) = p
                .backward(x.row(i).as_slice().unwrap(), g.row(i).as_slice().unwrap())
                .unwrap();
            for (s, v) in sum.iter_mut().zip(gi.to_flat()) {
                *s += v;
            }
            for (a, b) in gxi.iter().zip(batch_gx.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in sum.iter().zip(batch_grads.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = init_mlp(0, 2, 1, &[3]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 1e-3);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = MlpParams::from_layers(vec![array![[1.0]]], vec![array![0.0]]).unwrap();
        let mut st = AdamState::new(&p, 0.1);
        let mut g = Gradients::zeros_like(&p);
        g.layer_weights[0][[0, 0]] = 1.0;
        adam_step(&mut p, &g, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.layer_weights[0][[0, 0]] - expected).abs() < 1e-15);
        assert!((p.layer_weights[0][[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_is_deterministic() {
        let p0 = init_mlp(4, 3, 2, &[5]).unwrap();
        let mut g = Gradients::zeros_like(&p0);
        g.layer_weights[0].fill(0.25);
        g.layer_biases[1].fill(-1.0);
        let (mut pa, mut pb) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (AdamState::new(&p0, 3e-4), AdamState::new(&p0, 3e-4));
        adam_step(&mut pa, &g, &mut sa).unwrap();
        adam_step(&mut pb, &g, &mut sb).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = init_mlp(0, 2, 2, &[3]).unwrap();
        let mut st = AdamState::new(&p, 1e-3);
        let mut g = Gradients::zeros_like(&p);
        g.layer_biases[0][1] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut st).unwrap_err();
        assert!(err.to_string().contains("layer 0 biases"), "{err}");
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn soft_update_algebra() {
        let online = init_mlp(1, 2, 2, &[3]).unwrap();
        let mut target = init_mlp(2, 2, 2, &[3]).unwrap();
        target.soft_update_from(&online, 1.0);
        assert_eq!(target.to_flat(), online.to_flat());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_mlp(42, 7, 4, &[9, 5]).unwrap();
        randomize(&mut p, &mut rng);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = MlpParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(q.seed(), 42);
        assert_eq!(q.hidden_sizes(), &[9, 5]);
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(p.to_flat()), bits(q.to_flat()));
        assert!(MlpParams::read_from(&b"XXXX"[..]).is_err());
    }
}
