//! Residual MLP radiance field.
//!
//! ```text
//! h = W_in·γ(x) + b_in
//! repeat blocks:  h = h + W1·swish(W0·swish(LN(h)) + b0) + b1
//! o = W_out·swish(LN(h)) + b_out
//! σ = softplus(o₀ + ε),  c = sigmoid(o₁..₃)
//! ```
//!
//! Parameters live in a flat list of named tensors so that optimizers,
//! checkpoints and gradient checks can treat them uniformly.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_batch, frequencies_as, FourierBasis};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::real::{sigmoid, softplus, swish, swish_grad, Real};

const LAYER_NORM_EPS: f64 = 1e-6;

/// Points processed per forward/backward chunk.
const CHUNK: usize = 2048;

/// Widths and depth of the field network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArch {
    /// Encoded feature dimension.
    pub input_dim: usize,
    /// Trunk width carried by the residual stream.
    pub width: usize,
    /// Inner width of each block.
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self { input_dim: 256, width: 144, hidden: 288, blocks: 3 }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("field widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (i, w, e) = (self.input_dim, self.width, self.hidden);
        let mut m = vec![
            ("input/kernel".to_string(), vec![i, w]),
            ("input/bias".to_string(), vec![w]),
        ];
        for b in 0..self.blocks {
            m.push((format!("block{b}/norm/scale"), vec![w]));
            m.push((format!("block{b}/norm/offset"), vec![w]));
            m.push((format!("block{b}/dense0/kernel"), vec![w, e]));
            m.push((format!("block{b}/dense0/bias"), vec![e]));
            m.push((format!("block{b}/dense1/kernel"), vec![e, w]));
            m.push((format!("block{b}/dense1/bias"), vec![w]));
        }
        m.push(("output/norm/scale".to_string(), vec![w]));
        m.push(("output/norm/offset".to_string(), vec![w]));
        m.push(("output/head/kernel".to_string(), vec![w, 4]));
        m.push(("output/head/bias".to_string(), vec![4]));
        m
    }

    pub fn parameter_count(&self) -> usize {
        self.manifest().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn block_base(&self, b: usize) -> usize {
        2 + 6 * b
    }

    fn output_base(&self) -> usize {
        2 + 6 * self.blocks
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// All weights of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<F> {
    pub arch: FieldArch,
    pub tensors: Vec<Param<F>>,
}

impl<F: Real> FieldParams<F> {
    /// Zero-filled tensors following the architecture manifest.
    pub fn zeros(arch: FieldArch) -> Self {
        let tensors = arch
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                Param { name, shape, data: vec![F::zero(); len] }
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Flat view over every scalar, tensor by tensor.
    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<G: Real>(&self) -> FieldParams<G> {
        FieldParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|t| Param {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| G::lit(x.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    fn matrix(&self, index: usize) -> ArrayView2<'_, F> {
        let t = &self.tensors[index];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("manifest shape")
    }

    fn vector(&self, index: usize) -> &[F] {
        &self.tensors[index].data
    }

    fn matrix_mut(&mut self, index: usize) -> ArrayViewMut2<'_, F> {
        let t = &mut self.tensors[index];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("manifest shape")
    }
}

/// LeCun-normal kernels, zero biases, unit norm scales and zero norm offsets.
pub fn init_params<F: Real, R: Rng + ?Sized>(rng: &mut R, arch: FieldArch) -> Result<FieldParams<F>> {
    arch.validate()?;
    let mut params = FieldParams::<F>::zeros(arch);
    for t in &mut params.tensors {
        if t.name.ends_with("/kernel") {
            let fan_in = t.shape[0] as f64;
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid std");
            for x in &mut t.data {
                *x = F::lit(normal.sample(rng));
            }
        } else if t.name.ends_with("/scale") {
            t.data.iter_mut().for_each(|x| *x = F::one());
        }
    }
    Ok(params)
}

/// Density and color for a batch of points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldOutput<F> {
    pub sigma: Vec<F>,
    pub color: Vec<Vec3<F>>,
}

/// Anything that maps points to density and color.
pub trait RadianceField<F: Real> {
    /// Evaluates the field at `points`; `variances` are the isotropic
    /// footprint variances used by band-limited fields.
    fn query(&self, points: &[Vec3<F>], variances: &[F]) -> Result<FieldOutput<F>>;
}

/// The neural field bound to its encoding and optional density noise.
pub struct NeuralField<'a, F> {
    pub params: &'a FieldParams<F>,
    pub basis: &'a FourierBasis,
    /// Pre-activation density noise, one value per queried point.
    pub noise: Option<&'a [F]>,
}

impl<F: Real> RadianceField<F> for NeuralField<'_, F> {
    fn query(&self, points: &[Vec3<F>], variances: &[F]) -> Result<FieldOutput<F>> {
        field_forward(self.params, self.basis, points, variances, self.noise)
    }
}

/// Draws the density perturbation for `count` points.
pub fn density_noise<F: Real, R: Rng + ?Sized>(rng: &mut R, count: usize, perturb_sigma: f64) -> Vec<F> {
    if perturb_sigma <= 0.0 {
        return vec![F::zero(); count];
    }
    let normal = Normal::new(0.0, perturb_sigma).expect("finite noise scale");
    (0..count).map(|_| F::lit(normal.sample(rng))).collect()
}

fn check_inputs<F: Real>(
    params: &FieldParams<F>,
    basis: &FourierBasis,
    points: &[Vec3<F>],
    variances: &[F],
    noise: Option<&[F]>,
) -> Result<()> {
    if basis.output_dim() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "encoding produces {} features but the field expects {}",
            basis.output_dim(),
            params.arch.input_dim
        )));
    }
    if variances.len() != points.len() {
        return Err(Error::Shape(format!("{} variances for {} points", variances.len(), points.len())));
    }
    if let Some(noise) = noise {
        if noise.len() != points.len() {
            return Err(Error::Shape(format!("{} noise values for {} points", noise.len(), points.len())));
        }
    }
    Ok(())
}

/// Evaluates the field at encoded points.
pub fn field_forward<F: Real>(
    params: &FieldParams<F>,
    basis: &FourierBasis,
    points: &[Vec3<F>],
    variances: &[F],
    noise: Option<&[F]>,
) -> Result<FieldOutput<F>> {
    check_inputs(params, basis, points, variances, noise)?;
    let freqs = frequencies_as::<F>(basis);
    let mut out = FieldOutput {
        sigma: Vec::with_capacity(points.len()),
        color: Vec::with_capacity(points.len()),
    };
    for start in (0..points.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(points.len());
        let trace = Trace::run(params, &freqs, &points[start..end], &variances[start..end]);
        let raw = &trace.logits;
        for (p, row) in raw.outer_iter().enumerate() {
            let eps = noise.map_or(F::zero(), |n| n[start + p]);
            out.sigma.push(softplus(row[0] + eps));
            out.color.push([sigmoid(row[1]), sigmoid(row[2]), sigmoid(row[3])]);
        }
    }
    Ok(out)
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂σ` and `∂L/∂c` per point.
///
/// The forward pass is recomputed chunk by chunk, so memory stays bounded by
/// the chunk size rather than the number of points.
pub fn field_backward<F: Real>(
    params: &FieldParams<F>,
    basis: &FourierBasis,
    points: &[Vec3<F>],
    variances: &[F],
    noise: Option<&[F]>,
    d_sigma: &[F],
    d_color: &[Vec3<F>],
    grads: &mut FieldParams<F>,
) -> Result<()> {
    check_inputs(params, basis, points, variances, noise)?;
    if d_sigma.len() != points.len() || d_color.len() != points.len() {
        return Err(Error::Shape("upstream gradients do not match the point batch".into()));
    }
    if grads.arch != params.arch {
        return Err(Error::Shape("gradient buffer has a different architecture".into()));
    }
    let freqs = frequencies_as::<F>(basis);
    for start in (0..points.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(points.len());
        let trace = Trace::run(params, &freqs, &points[start..end], &variances[start..end]);
        let n = end - start;
        let mut d_logits = Array2::<F>::zeros((n, 4));
        for p in 0..n {
            let row = trace.logits.row(p);
            let eps = noise.map_or(F::zero(), |v| v[start + p]);
            d_logits[[p, 0]] = d_sigma[start + p] * sigmoid(row[0] + eps);
            for k in 0..3 {
                let c = sigmoid(row[k + 1]);
                d_logits[[p, k + 1]] = d_color[start + p][k] * c * (F::one() - c);
            }
        }
        trace.backward(params, d_logits, grads);
    }
    Ok(())
}

/// Saved activations of one layer-normalized, swish-activated stage.
struct NormAct<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

struct BlockTrace<F> {
    norm: NormAct<F>,
    hidden_pre: Array2<F>,
    hidden_act: Array2<F>,
}

/// Forward activations of one chunk.
struct Trace<F> {
    features: Array2<F>,
    blocks: Vec<BlockTrace<F>>,
    out_norm: NormAct<F>,
    logits: Array2<F>,
}

fn dense<F: Real>(x: &Array2<F>, kernel: ArrayView2<'_, F>, bias: &[F]) -> Array2<F> {
    let mut y = Array2::<F>::zeros((x.nrows(), kernel.ncols()));
    for mut row in y.outer_iter_mut() {
        row.as_slice_mut().unwrap().copy_from_slice(bias);
    }
    general_mat_mul(F::one(), x, &kernel, F::one(), &mut y);
    y
}

fn norm_act<F: Real>(h: &Array2<F>, scale: &[F], offset: &[F]) -> NormAct<F> {
    let width = F::lit(h.ncols() as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    let mut normalized = h.clone();
    let mut inv_std = Array1::<F>::zeros(h.nrows());
    for (mut row, r) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() / width;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / width;
        *r = F::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|x| (x - mean) * rr);
    }
    let mut pre = normalized.clone();
    for mut row in pre.outer_iter_mut() {
        for ((x, &g), &b) in row.iter_mut().zip(scale).zip(offset) {
            *x = *x * g + b;
        }
    }
    let act = pre.mapv(swish);
    NormAct { normalized, inv_std, pre, act }
}

/// Backpropagates through `swish(LN(h)·scale + offset)`; returns `∂L/∂h`.
fn norm_act_backward<F: Real>(
    saved: &NormAct<F>,
    d_act: Array2<F>,
    scale: &[F],
    d_scale: &mut [F],
    d_offset: &mut [F],
) -> Array2<F> {
    let mut d_pre = d_act;
    d_pre.zip_mut_with(&saved.pre, |d, &x| *d = *d * swish_grad(x));
    for (d_row, n_row) in d_pre.outer_iter().zip(saved.normalized.outer_iter()) {
        for k in 0..d_row.len() {
            d_scale[k] = d_scale[k] + d_row[k] * n_row[k];
            d_offset[k] = d_offset[k] + d_row[k];
        }
    }
    let width = F::lit(d_pre.ncols() as f64);
    let mut d_h = d_pre;
    for ((mut row, n_row), &r) in d_h.outer_iter_mut().zip(saved.normalized.outer_iter()).zip(saved.inv_std.iter()) {
        for (x, &g) in row.iter_mut().zip(scale) {
            *x = *x * g;
        }
        let mean_d = row.iter().copied().sum::<F>() / width;
        let mean_dn = row.iter().zip(n_row.iter()).map(|(&d, &n)| d * n).sum::<F>() / width;
        for (x, &n) in row.iter_mut().zip(n_row.iter()) {
            *x = r * (*x - mean_d - n * mean_dn);
        }
    }
    d_h
}

fn accumulate_dense<F: Real>(
    x: &Array2<F>,
    d_y: &Array2<F>,
    grads: &mut FieldParams<F>,
    kernel_index: usize,
) {
    let mut dk = grads.matrix_mut(kernel_index);
    general_mat_mul(F::one(), &x.t(), d_y, F::one(), &mut dk);
    let db = &mut grads.tensors[kernel_index + 1].data;
    for (acc, col) in db.iter_mut().zip(d_y.axis_iter(Axis(1))) {
        *acc = *acc + col.sum();
    }
}

impl<F: Real> Trace<F> {
    fn run(params: &FieldParams<F>, freqs: &[Vec3<F>], points: &[Vec3<F>], variances: &[F]) -> Self {
        let arch = params.arch;
        let mut features = Array2::<F>::zeros((points.len(), arch.input_dim));
        encode_batch(points, variances, freqs, features.view_mut());
        let mut h = dense(&features, params.matrix(0), params.vector(1));
        let mut blocks = Vec::with_capacity(arch.blocks);
        for b in 0..arch.blocks {
            let base = arch.block_base(b);
            let norm = norm_act(&h, params.vector(base), params.vector(base + 1));
            let hidden_pre = dense(&norm.act, params.matrix(base + 2), params.vector(base + 3));
            let hidden_act = hidden_pre.mapv(swish);
            let update = dense(&hidden_act, params.matrix(base + 4), params.vector(base + 5));
            h += &update;
            blocks.push(BlockTrace { norm, hidden_pre, hidden_act });
        }
        let ob = arch.output_base();
        let out_norm = norm_act(&h, params.vector(ob), params.vector(ob + 1));
        let logits = dense(&out_norm.act, params.matrix(ob + 2), params.vector(ob + 3));
        Trace { features, blocks, out_norm, logits }
    }

    fn backward(self, params: &FieldParams<F>, d_logits: Array2<F>, grads: &mut FieldParams<F>) {
        let arch = params.arch;
        let ob = arch.output_base();
        accumulate_dense(&self.out_norm.act, &d_logits, grads, ob + 2);
        let d_act = d_logits.dot(&params.matrix(ob + 2).t());
        let (d_scale, d_offset) = split_pair(grads, ob);
        let mut d_h = norm_act_backward(&self.out_norm, d_act, params.vector(ob), d_scale, d_offset);

        for (b, trace) in self.blocks.into_iter().enumerate().rev() {
            let base = arch.block_base(b);
            accumulate_dense(&trace.hidden_act, &d_h, grads, base + 4);
            let mut d_hidden = d_h.dot(&params.matrix(base + 4).t());
            d_hidden.zip_mut_with(&trace.hidden_pre, |d, &x| *d = *d * swish_grad(x));
            accumulate_dense(&trace.norm.act, &d_hidden, grads, base + 2);
            let d_act = d_hidden.dot(&params.matrix(base + 2).t());
            let (d_scale, d_offset) = split_pair(grads, base);
            let d_branch = norm_act_backward(&trace.norm, d_act, params.vector(base), d_scale, d_offset);
            d_h += &d_branch;
        }
        accumulate_dense(&self.features, &d_h, grads, 0);
    }
}

fn split_pair<F>(grads: &mut FieldParams<F>, index: usize) -> (&mut [F], &mut [F]) {
    let (a, b) = grads.tensors.split_at_mut(index + 1);
    (&mut a[index].data, &mut b[0].data)
}

/// Zeroes density outside the closed cube `max(|x|,|y|,|z|) ≤ half_side`.
pub fn mask_density<F: Real>(sigma: &[F], positions: &[Vec3<F>], half_side: F) -> Vec<F> {
    sigma
        .iter()
        .zip(positions)
        .map(|(&s, p)| if inside_cube(p, half_side) { s } else { F::zero() })
        .collect()
}

#[inline]
pub fn inside_cube<F: Real>(p: &Vec3<F>, half_side: F) -> bool {
    p[0].abs() <= half_side && p[1].abs() <= half_side && p[2].abs() <= half_side
}

/// Exponential moving average of the rendered density's center of mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OriginTracker {
    pub origin: Vec3<f32>,
    pub decay: f32,
}

impl Default for OriginTracker {
    fn default() -> Self {
        Self { origin: [0.0; 3], decay: 0.999 }
    }
}

impl OriginTracker {
    pub fn new(decay: f32) -> Self {
        Self { origin: [0.0; 3], decay }
    }

    /// Moves the origin towards `center_of_mass`. Non-finite centers (empty
    /// renders) leave the tracker unchanged.
    pub fn update(self, center_of_mass: Vec3<f64>) -> Self {
        if !center_of_mass.iter().all(|c| c.is_finite()) {
            return self;
        }
        let keep = self.decay;
        let take = 1.0 - self.decay;
        let mut origin = self.origin;
        for k in 0..3 {
            origin[k] = keep * origin[k] + take * center_of_mass[k] as f32;
        }
        Self { origin, ..self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::sample_basis;
    use crate::rng::{stream, Purpose};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn tiny_arch(input_dim: usize) -> FieldArch {
        FieldArch { input_dim, width: 8, hidden: 12, blocks: 2 }
    }

    #[test]
    fn default_parameter_budget() {
        let count = FieldArch::default().parameter_count();
        assert!((count as f64 - 280_000.0).abs() <= 0.05 * 280_000.0, "{count} parameters");
    }

    #[test]
    fn init_zero_biases_and_unit_scales() {
        let mut rng = stream(0, 0, Purpose::Init);
        let p: FieldParams<f32> = init_params(&mut rng, FieldArch::default()).unwrap();
        for t in &p.tensors {
            if t.name.ends_with("/bias") || t.name.ends_with("/offset") {
                assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name);
            }
            if t.name.ends_with("/scale") {
                assert!(t.data.iter().all(|&x| x == 1.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_lecun_scaled() {
        let arch = FieldArch::default();
        let a: FieldParams<f32> = init_params(&mut stream(5, 0, Purpose::Init), arch).unwrap();
        let b: FieldParams<f32> = init_params(&mut stream(5, 0, Purpose::Init), arch).unwrap();
        assert_eq!(a, b);
        let k = a.get("block0/dense0/kernel").unwrap();
        let var: f64 = k.data.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / k.data.len() as f64;
        assert!((var * arch.width as f64 - 1.0).abs() < 0.05, "variance·fan_in = {}", var * arch.width as f64);
    }

    #[test]
    fn zero_density_head_gives_ln2() {
        let mut rng = StdRng::seed_from_u64(1);
        let basis = sample_basis(&mut rng, 4.0, 8).unwrap();
        let mut params: FieldParams<f64> = init_params(&mut rng, tiny_arch(16)).unwrap();
        let head = params.get_mut("output/head/kernel").unwrap();
        for row in head.data.chunks_mut(4) {
            row[0] = 0.0;
        }
        let pts: Vec<Vec3<f64>> = (0..10).map(|i| [i as f64 * 0.1 - 0.5, 0.2, -0.3]).collect();
        let out = field_forward(&params, &basis, &pts, &[0.0; 10], None).unwrap();
        for s in out.sigma {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_in_range_and_deterministic() {
        let mut rng = StdRng::seed_from_u64(2);
        let basis = sample_basis(&mut rng, 8.0, 8).unwrap();
        let params: FieldParams<f32> = init_params(&mut rng, tiny_arch(16)).unwrap();
        let pts: Vec<Vec3<f32>> = (0..300).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let var = vec![1e-3f32; 300];
        let a = field_forward(&params, &basis, &pts, &var, None).unwrap();
        let b = field_forward(&params, &basis, &pts, &var, None).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma.iter().all(|&s| s >= 0.0 && s.is_finite()));
        assert!(a.color.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = StdRng::seed_from_u64(3);
        let basis = sample_basis(&mut rng, 8.0, 4).unwrap();
        let params: FieldParams<f64> = init_params(&mut rng, tiny_arch(16)).unwrap();
        let r = field_forward(&params, &basis, &[[0.0; 3]], &[0.0], None);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn summed_density_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let basis = sample_basis(&mut rng, 3.0, 6).unwrap();
        let mut params: FieldParams<f64> = init_params(&mut rng, tiny_arch(12)).unwrap();
        // Non-trivial norm parameters so their gradients are exercised.
        for t in &mut params.tensors {
            if !t.name.ends_with("/kernel") {
                t.data.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
            }
        }
        let pts: Vec<Vec3<f64>> = (0..64).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let var: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..0.01)).collect();
        let objective = |p: &FieldParams<f64>| field_forward(p, &basis, &pts, &var, None).unwrap().sigma.iter().sum::<f64>();
        let mut grads = params.zeros_like();
        field_backward(&params, &basis, &pts, &var, None, &[1.0; 64], &[[0.0; 3]; 64], &mut grads).unwrap();
        let h = 1e-6;
        let mut probe = params.clone();
        for ti in 0..params.tensors.len() {
            for k in 0..params.tensors[ti].data.len() {
                let orig = params.tensors[ti].data[k];
                probe.tensors[ti].data[k] = orig + h;
                let up = objective(&probe);
                probe.tensors[ti].data[k] = orig - h;
                let down = objective(&probe);
                probe.tensors[ti].data[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors[ti].data[k];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-4, "{}[{k}]: analytic {an} vs fd {fd}", params.tensors[ti].name);
            }
        }
    }

    #[test]
    fn noise_is_added_before_softplus() {
        let mut rng = StdRng::seed_from_u64(6);
        let basis = sample_basis(&mut rng, 2.0, 4).unwrap();
        let params: FieldParams<f64> = init_params(&mut rng, tiny_arch(8)).unwrap();
        let pts = [[0.1, 0.2, 0.3]];
        let clean = field_forward(&params, &basis, &pts, &[0.0], None).unwrap();
        let noisy = field_forward(&params, &basis, &pts, &[0.0], Some(&[1.5])).unwrap();
        let logit = (clean.sigma[0].exp() - 1.0).ln();
        assert!((noisy.sigma[0] - softplus(logit + 1.5)).abs() < 1e-12);
        assert_eq!(clean.color, noisy.color);
    }

    #[test]
    fn cube_mask_cases() {
        let s = mask_density(&[5.0, 5.0, 5.0], &[[0.0, 0.0, 0.0], [1.01, 0.0, 0.0], [1.0, 1.0, 1.0]], 1.0);
        assert_eq!(s, vec![5.0, 0.0, 5.0]);
    }

    #[test]
    fn mask_is_idempotent_and_commutes_with_scaling() {
        let mut rng = StdRng::seed_from_u64(7);
        let pts: Vec<Vec3<f64>> = (0..200).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let sig: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
        let once = mask_density(&sig, &pts, 1.0);
        assert_eq!(mask_density(&once, &pts, 1.0), once);
        let scaled: Vec<f64> = sig.iter().map(|s| 3.0 * s).collect();
        let a: Vec<f64> = mask_density(&scaled, &pts, 1.0);
        let b: Vec<f64> = once.iter().map(|s| 3.0 * s).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn origin_ema_cases() {
        let t = OriginTracker::default().update([1.0, 0.0, 0.0]);
        assert!((t.origin[0] - 0.001).abs() < 1e-6);
        assert_eq!(&t.origin[1..], &[0.0, 0.0]);

        let mut t = OriginTracker::default();
        for _ in 0..10_000 {
            t = t.update([1.0, 0.0, 0.0]);
        }
        assert!((t.origin[0] - 1.0).abs() < 5e-5, "{}", t.origin[0]);

        let same = t.update([f64::NAN, 0.0, 0.0]);
        assert_eq!(same, t);
    }

    #[test]
    fn origin_stays_within_running_max() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut t = OriginTracker::new(0.9);
        let mut running = 0.0f32;
        for _ in 0..500 {
            let com = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            running = com.iter().fold(running, |m, &c: &f64| m.max(c.abs() as f32));
            t = t.update(com);
            assert!(t.origin.iter().all(|o| o.abs() <= running * (1.0 + 1e-6)));
        }
    }

    #[test]
    fn chunked_and_whole_batches_agree() {
        let mut rng = StdRng::seed_from_u64(9);
        let basis = sample_basis(&mut rng, 5.0, 8).unwrap();
        let params: FieldParams<f64> = init_params(&mut rng, tiny_arch(16)).unwrap();
        let n = CHUNK + 37;
        let pts: Vec<Vec3<f64>> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let var = vec![0.0; n];
        let all = field_forward(&params, &basis, &pts, &var, None).unwrap();
        let tail = field_forward(&params, &basis, &pts[CHUNK..], &var[CHUNK..], None).unwrap();
        assert_eq!(&all.sigma[CHUNK..], &tail.sigma[..]);
    }
}
