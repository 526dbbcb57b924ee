//! A small trainable latent neural process with a hand-written backward pass.
//!
//! Encoder MLP (x, y) → 64 with two ReLU hidden layers of width 64, mean
//! aggregation, linear recognition heads to a 32-dimensional diagonal
//! Gaussian latent, and a decoder MLP (x*, z) → (μ, ν) with two ReLU hidden
//! layers and predictive variance softplus(ν) + 0.05.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gp::GpSampler;
use crate::kernel::{KernelSpec, NoiseModel};
use crate::par::{map_indexed, rng_for};

pub const INPUT_DIM: usize = 2;
pub const HIDDEN: usize = 64;
pub const REPR_DIM: usize = 64;
pub const LATENT_DIM: usize = 32;
pub const VARIANCE_FLOOR: f64 = 0.05;

pub const CHECKPOINT_FORMAT: &str = "npgap-lnp";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LAYER_NAMES: [&str; 8] = [
    "enc1",
    "enc2",
    "enc3",
    "rec_mu",
    "rec_logvar",
    "dec1",
    "dec2",
    "dec3",
];

const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const REC_MU: usize = 3;
const REC_LV: usize = 4;
const DEC1: usize = 5;
const DEC2: usize = 6;
const DEC3: usize = 7;

// Stream keys for rng_for.
const KEY_INIT: u64 = 1;
const KEY_TASK: u64 = 2;
const KEY_Z: u64 = 3;

/// (out, in) shape of each layer.
const SHAPES: [(usize, usize); 8] = [
    (HIDDEN, INPUT_DIM),
    (HIDDEN, HIDDEN),
    (REPR_DIM, HIDDEN),
    (LATENT_DIM, REPR_DIM),
    (LATENT_DIM, REPR_DIM),
    (HIDDEN, 1 + LATENT_DIM),
    (HIDDEN, HIDDEN),
    (2, HIDDEN),
];

/// Affine layer y = W x + b; inputs are stored one point per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            w: DMatrix::zeros(out, inp),
            b: DVector::zeros(out),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.w * x;
        for mut c in a.column_iter_mut() {
            c += &self.b;
        }
        a
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Accumulates dW += s·dA Xᵀ, db += s·Σ_cols dA.
    fn accumulate(&mut self, da: &DMatrix<f64>, x: &DMatrix<f64>, s: f64) {
        self.w.gemm(s, da, &x.transpose(), 1.0);
        self.b.axpy(s, &da.column_sum(), 1.0);
    }

    fn accumulate_vec(&mut self, da: &DVector<f64>, x: &DVector<f64>, s: f64) {
        self.w.ger(s, da, x, 1.0);
        self.b.axpy(s, da, 1.0);
    }
}

fn relu(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| v.max(0.0))
}

fn relu_back(dh: DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    dh.zip_map(a, |g, v| if v > 0.0 { g } else { 0.0 })
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Predictive variance of the decoder output head.
pub fn output_variance(nu: f64) -> f64 {
    softplus(nu) + VARIANCE_FLOOR
}

/// log N(y | μ, softplus(ν) + floor) and its derivatives in μ and ν.
pub fn gaussian_loglik(y: f64, mu: f64, nu: f64) -> (f64, f64, f64) {
    let v = output_variance(nu);
    let r = y - mu;
    let ll = -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
    let d_mu = r / v;
    let d_v = -0.5 / v + 0.5 * r * r / (v * v);
    (ll, d_mu, d_v * sigmoid(nu))
}

/// KL(N(μ1, e^{lv1}) ‖ N(μ2, e^{lv2})) for diagonal Gaussians, with gradients
/// (dμ1, dlv1, dμ2, dlv2).
pub fn diag_kl(
    mu1: &DVector<f64>,
    lv1: &DVector<f64>,
    mu2: &DVector<f64>,
    lv2: &DVector<f64>,
) -> (f64, [DVector<f64>; 4]) {
    let k = mu1.len();
    let mut kl = 0.0;
    let mut g = [
        DVector::zeros(k),
        DVector::zeros(k),
        DVector::zeros(k),
        DVector::zeros(k),
    ];
    for i in 0..k {
        let v2 = lv2[i].exp();
        let dm = mu1[i] - mu2[i];
        // e^{lv1 - lv2} - 1 - (lv1 - lv2) is the variance part, written in
        // terms of the log ratio to avoid cancellation.
        let t = lv1[i] - lv2[i];
        kl += 0.5 * (t.exp_m1() - t + dm * dm / v2);
        g[0][i] = dm / v2;
        g[1][i] = 0.5 * t.exp_m1();
        g[2][i] = -dm / v2;
        g[3][i] = -0.5 * (t.exp_m1() + dm * dm / v2);
    }
    (kl, g)
}

/// Training provenance carried by a checkpoint; absent on untrained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub context_min: usize,
    pub context_max: usize,
    pub task_size: usize,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub sigma_eps_sq: f64,
    pub final_elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnpModel {
    pub layers: Vec<Dense>,
    pub meta: Option<TrainingMeta>,
}

/// One context/target split; the first `n_context` points are the context.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub n_context: usize,
}

impl Task {
    pub fn new(cx: &[f64], cy: &[f64], tx: &[f64], ty: &[f64]) -> Result<Self> {
        if cx.is_empty() || tx.is_empty() {
            return param("context and target sets must be nonempty");
        }
        if cx.len() != cy.len() || tx.len() != ty.len() {
            return param("locations and labels differ in length");
        }
        Ok(Task {
            xs: [cx, tx].concat(),
            ys: [cy, ty].concat(),
            n_context: cx.len(),
        })
    }
}

/// Value of a single-sample ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub elbo: f64,
    pub loglik: f64,
    pub kl: f64,
    /// Hash of every ReLU on/off state; changes when a kink is crossed.
    pub pattern: u64,
}

struct EncoderCache {
    x0: DMatrix<f64>,
    a1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    h2: DMatrix<f64>,
    e: DMatrix<f64>,
}

struct DecoderCache {
    d0: DMatrix<f64>,
    a4: DMatrix<f64>,
    h4: DMatrix<f64>,
    a5: DMatrix<f64>,
    h5: DMatrix<f64>,
    o: DMatrix<f64>,
}

fn mean_columns(m: &DMatrix<f64>, cols: usize) -> DVector<f64> {
    m.columns(0, cols).column_sum() / cols as f64
}

fn hash_pattern(h: &mut DefaultHasher, a: &DMatrix<f64>) {
    for v in a.iter() {
        (*v > 0.0).hash(h);
    }
}

impl LnpModel {
    /// He-uniform on ReLU layers, Xavier-uniform on linear outputs, zero
    /// biases except 0.01 on the first hidden layer of each MLP.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_for(seed, &[KEY_INIT]);
        let layers = SHAPES
            .iter()
            .enumerate()
            .map(|(i, &(out, inp))| {
                let relu_layer = matches!(i, ENC1 | ENC2 | DEC1 | DEC2);
                let bound = if relu_layer {
                    (6.0 / inp as f64).sqrt()
                } else {
                    (6.0 / (inp + out) as f64).sqrt()
                };
                let w = DMatrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound));
                let b0 = if matches!(i, ENC1 | DEC1) { 0.01 } else { 0.0 };
                Dense {
                    w,
                    b: DVector::from_element(out, b0),
                }
            })
            .collect();
        LnpModel { layers, meta: None }
    }

    pub fn is_trained(&self) -> bool {
        self.meta.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    fn zero_grads() -> Vec<Dense> {
        SHAPES.iter().map(|&(o, i)| Dense::zeros(o, i)).collect()
    }

    fn locate(&self, k: usize) -> (usize, bool, usize) {
        let mut k = k;
        for (l, d) in self.layers.iter().enumerate() {
            if k < d.w.len() {
                return (l, true, k);
            }
            k -= d.w.len();
            if k < d.b.len() {
                return (l, false, k);
            }
            k -= d.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access, layer by layer, weights (column-major) then bias.
    pub fn param(&self, k: usize) -> f64 {
        let (l, is_w, i) = self.locate(k);
        if is_w {
            self.layers[l].w.as_slice()[i]
        } else {
            self.layers[l].b[i]
        }
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        let (l, is_w, i) = self.locate(k);
        if is_w {
            self.layers[l].w.as_mut_slice()[i] = v;
        } else {
            self.layers[l].b[i] = v;
        }
    }

    /// Human-readable name of flat parameter `k`.
    pub fn param_name(&self, k: usize) -> String {
        let (l, is_w, i) = self.locate(k);
        if is_w {
            let rows = self.layers[l].w.nrows();
            format!("{}.weight[{},{}]", LAYER_NAMES[l], i % rows, i / rows)
        } else {
            format!("{}.bias[{}]", LAYER_NAMES[l], i)
        }
    }

    fn encoder_cached(&self, xs: &[f64], ys: &[f64]) -> EncoderCache {
        let n = xs.len();
        let x0 = DMatrix::from_fn(INPUT_DIM, n, |r, c| if r == 0 { xs[c] } else { ys[c] });
        let a1 = self.layers[ENC1].forward(&x0);
        let h1 = relu(&a1);
        let a2 = self.layers[ENC2].forward(&h1);
        let h2 = relu(&a2);
        let e = self.layers[ENC3].forward(&h2);
        EncoderCache {
            x0,
            a1,
            h1,
            a2,
            h2,
            e,
        }
    }

    /// Per-point encodings h(x_i, y_i), one column per point.
    pub fn encode_points(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        self.encoder_cached(xs, ys).e
    }

    /// Mean-aggregated representation r_C.
    pub fn represent(&self, xs: &[f64], ys: &[f64]) -> Result<DVector<f64>> {
        if xs.is_empty() || xs.len() != ys.len() {
            return param("representation needs a nonempty context with matching labels");
        }
        Ok(mean_columns(&self.encode_points(xs, ys), xs.len()))
    }

    /// (μ_z, log σ_z²) from a representation.
    pub fn latent(&self, r: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mu = &self.layers[REC_MU].w * r + &self.layers[REC_MU].b;
        let lv = &self.layers[REC_LV].w * r + &self.layers[REC_LV].b;
        (mu, lv)
    }

    /// Decoder on columns [x_t; z_t].
    fn decoder_cached(&self, xs: &[f64], zs: &DMatrix<f64>) -> DecoderCache {
        let t = xs.len();
        let d0 = DMatrix::from_fn(1 + LATENT_DIM, t, |r, c| if r == 0 { xs[c] } else { zs[(r - 1, c)] });
        let a4 = self.layers[DEC1].forward(&d0);
        let h4 = relu(&a4);
        let a5 = self.layers[DEC2].forward(&h4);
        let h5 = relu(&a5);
        let o = self.layers[DEC3].forward(&h5);
        DecoderCache {
            d0,
            a4,
            h4,
            a5,
            h5,
            o,
        }
    }

    /// Single-sample ELBO with fixed reparameterization noise `eps`. When
    /// `grads` is given, adds `scale · ∂ELBO/∂θ` into it.
    pub fn task_elbo(
        &self,
        task: &Task,
        eps: &DVector<f64>,
        grads: Option<&mut [Dense]>,
        scale: f64,
    ) -> Result<ElboParts> {
        let n = task.xs.len();
        let nc = task.n_context;
        if nc == 0 || nc >= n || task.ys.len() != n {
            return param(format!(
                "task needs a nonempty context and target, got {nc} of {n} points"
            ));
        }
        if eps.len() != LATENT_DIM {
            return param(format!("latent noise must have {LATENT_DIM} entries"));
        }
        let enc = self.encoder_cached(&task.xs, &task.ys);
        let r_all = mean_columns(&enc.e, n);
        let r_c = mean_columns(&enc.e, nc);
        let (mu_a, lv_a) = self.latent(&r_all);
        let (mu_c, lv_c) = self.latent(&r_c);
        let sd_a = lv_a.map(|v| (0.5 * v).exp());
        let z = &mu_a + sd_a.component_mul(eps);

        let tx = &task.xs[nc..];
        let ty = &task.ys[nc..];
        let t = tx.len();
        let zs = DMatrix::from_fn(LATENT_DIM, t, |r, _| z[r]);
        let dec = self.decoder_cached(tx, &zs);

        let mut loglik = 0.0;
        let mut d_o = DMatrix::zeros(2, t);
        for c in 0..t {
            let (ll, dmu, dnu) = gaussian_loglik(ty[c], dec.o[(0, c)], dec.o[(1, c)]);
            loglik += ll;
            d_o[(0, c)] = dmu;
            d_o[(1, c)] = dnu;
        }
        let (kl, kg) = diag_kl(&mu_a, &lv_a, &mu_c, &lv_c);

        let mut h = DefaultHasher::new();
        hash_pattern(&mut h, &enc.a1);
        hash_pattern(&mut h, &enc.a2);
        hash_pattern(&mut h, &dec.a4);
        hash_pattern(&mut h, &dec.a5);
        let parts = ElboParts {
            elbo: loglik - kl,
            loglik,
            kl,
            pattern: h.finish(),
        };

        let Some(g) = grads else {
            return Ok(parts);
        };
        let s = scale;

        // Decoder.
        g[DEC3].accumulate(&d_o, &dec.h5, s);
        let d_a5 = relu_back(self.layers[DEC3].w.transpose() * &d_o, &dec.a5);
        g[DEC2].accumulate(&d_a5, &dec.h4, s);
        let d_a4 = relu_back(self.layers[DEC2].w.transpose() * &d_a5, &dec.a4);
        g[DEC1].accumulate(&d_a4, &dec.d0, s);
        let d_d0 = self.layers[DEC1].w.transpose() * &d_a4;
        let dz: DVector<f64> = d_d0.rows(1, LATENT_DIM).column_sum();

        // Reparameterization and KL(q(z|C∪T) ‖ q(z|C)); the ELBO subtracts KL.
        let d_mu_a = &dz - &kg[0];
        let d_lv_a = dz.component_mul(&sd_a).component_mul(eps) * 0.5 - &kg[1];
        let d_mu_c = -&kg[2];
        let d_lv_c = -&kg[3];

        g[REC_MU].accumulate_vec(&d_mu_a, &r_all, s);
        g[REC_MU].accumulate_vec(&d_mu_c, &r_c, s);
        g[REC_LV].accumulate_vec(&d_lv_a, &r_all, s);
        g[REC_LV].accumulate_vec(&d_lv_c, &r_c, s);
        let wm_t = self.layers[REC_MU].w.transpose();
        let wl_t = self.layers[REC_LV].w.transpose();
        let d_r_all = (&wm_t * &d_mu_a + &wl_t * &d_lv_a) / n as f64;
        let d_r_c = (&wm_t * &d_mu_c + &wl_t * &d_lv_c) / nc as f64;

        // Mean aggregation.
        let mut d_e = DMatrix::zeros(REPR_DIM, n);
        for c in 0..n {
            let mut col = d_e.column_mut(c);
            col += &d_r_all;
            if c < nc {
                col += &d_r_c;
            }
        }

        // Encoder.
        g[ENC3].accumulate(&d_e, &enc.h2, s);
        let d_a2 = relu_back(self.layers[ENC3].w.transpose() * &d_e, &enc.a2);
        g[ENC2].accumulate(&d_a2, &enc.h1, s);
        let d_a1 = relu_back(self.layers[ENC2].w.transpose() * &d_a2, &enc.a1);
        g[ENC1].accumulate(&d_a1, &enc.x0, s);
        Ok(parts)
    }

    /// ELBO with `z_samples` reparameterized draws for the likelihood term and
    /// the exact KL term.
    pub fn elbo(
        &self,
        cx: &[f64],
        cy: &[f64],
        tx: &[f64],
        ty: &[f64],
        z_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        if z_samples == 0 {
            return param("z_samples must be >= 1");
        }
        let task = Task::new(cx, cy, tx, ty)?;
        let mut rng = rng_for(seed, &[KEY_Z]);
        let mut ll = 0.0;
        let mut kl = 0.0;
        for _ in 0..z_samples {
            let eps = standard_normal_vec(&mut rng, LATENT_DIM);
            let p = self.task_elbo(&task, &eps, None, 1.0)?;
            ll += p.loglik;
            kl = p.kl;
        }
        Ok(ll / z_samples as f64 - kl)
    }

    /// Law-of-total-variance predictive at x* from the draws eps (one column
    /// per z sample, at least two).
    pub fn predictive_with_noise(
        &self,
        xs: &[f64],
        ys: &[f64],
        x_star: f64,
        eps: &DMatrix<f64>,
    ) -> Result<Predictive> {
        let s = eps.ncols();
        if s < 2 || eps.nrows() != LATENT_DIM {
            return param("need a 32 x S noise matrix with S >= 2");
        }
        let r = self.represent(xs, ys)?;
        let (mu, lv) = self.latent(&r);
        let sd = lv.map(|v| (0.5 * v).exp());
        let mut zs = eps.clone();
        for mut c in zs.column_iter_mut() {
            c.component_mul_assign(&sd);
            c += &mu;
        }
        let dec = self.decoder_cached(&vec![x_star; s], &zs);
        let means: Vec<f64> = (0..s).map(|c| dec.o[(0, c)]).collect();
        let vars: Vec<f64> = (0..s).map(|c| output_variance(dec.o[(1, c)])).collect();
        let m = means.iter().sum::<f64>() / s as f64;
        // Shifted by the first draw so identical draws give exactly zero.
        let d: Vec<f64> = means.iter().map(|v| v - means[0]).collect();
        let (sd, sd2) = (d.iter().sum::<f64>(), d.iter().map(|v| v * v).sum::<f64>());
        let var_of_means = ((sd2 - sd * sd / s as f64) / (s - 1) as f64).max(0.0);
        let mean_var = vars.iter().sum::<f64>() / s as f64;
        Ok(Predictive {
            mean: m,
            variance: mean_var + var_of_means,
            expected_variance: mean_var,
            variance_of_mean: var_of_means,
        })
    }

    /// E_z[Var(y*|z)] + Var_z[E(y*|z)] over `z_samples` draws from q(z|C).
    pub fn predictive_mc(
        &self,
        xs: &[f64],
        ys: &[f64],
        x_star: f64,
        z_samples: usize,
        seed: u64,
    ) -> Result<Predictive> {
        if z_samples < 2 {
            return param("z_samples must be >= 2");
        }
        let mut rng = rng_for(seed, &[KEY_Z]);
        let eps = DMatrix::from_fn(LATENT_DIM, z_samples, |_, _| StandardNormal.sample(&mut rng));
        self.predictive_with_noise(xs, ys, x_star, &eps)
    }

    pub fn predictive_variance_mc(
        &self,
        xs: &[f64],
        ys: &[f64],
        x_star: f64,
        z_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        Ok(self.predictive_mc(xs, ys, x_star, z_samples, seed)?.variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predictive {
    pub mean: f64,
    pub variance: f64,
    pub expected_variance: f64,
    pub variance_of_mean: f64,
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub context_min: usize,
    pub context_max: usize,
    /// Points per task; the target set is what remains after the context draw.
    pub task_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            batch: 16,
            lr: 1e-3,
            context_min: 5,
            context_max: 49,
            task_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return param("batch and learning rate must be positive");
        }
        if self.context_min == 0
            || self.context_min > self.context_max
            || self.context_max >= self.task_size
        {
            return param(format!(
                "context range {}..={} must be nonempty and below the task size {}",
                self.context_min, self.context_max, self.task_size
            ));
        }
        Ok(())
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: LnpModel::zero_grads(),
            v: LnpModel::zero_grads(),
            t: 0,
        }
    }
}

impl Adam {
    /// One descent step on `grads` (gradient of the loss).
    pub fn step(&mut self, model: &mut LnpModel, grads: &[Dense], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, e) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + e);
            }
        };
        let layers = model.layers.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v));
        for ((layer, g), (m, v)) in layers {
            update(layer.w.as_mut_slice(), g.w.as_slice(), m.w.as_mut_slice(), v.w.as_mut_slice());
            update(layer.b.as_mut_slice(), g.b.as_slice(), m.b.as_mut_slice(), v.b.as_mut_slice());
        }
    }
}

/// Draws one training task: locations U[0,1], labels from the GP plus noise,
/// a context size uniform on the configured range, and latent noise.
pub fn sample_task(
    kernel: &KernelSpec,
    noise: NoiseModel,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Task, DVector<f64>)> {
    let xs: Vec<f64> = (0..cfg.task_size).map(|_| rng.random::<f64>()).collect();
    let f = GpSampler::new(kernel, &xs)?.sample(rng);
    let sd = noise.sigma_eps_sq.sqrt();
    let ys: Vec<f64> = f
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sd * e
        })
        .collect();
    let n_context = rng.random_range(cfg.context_min..=cfg.context_max);
    let eps = standard_normal_vec(rng, LATENT_DIM);
    Ok((Task { xs, ys, n_context }, eps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch-mean ELBO at each step, before the update.
    pub elbo_history: Vec<f64>,
}

/// Adam on the negative batch-mean ELBO. Steps run in order; the tasks of a
/// step may be evaluated in parallel and are reduced in index order, so the
/// result depends only on the seed.
pub fn train(
    cfg: &TrainConfig,
    kernel: &KernelSpec,
    noise: NoiseModel,
) -> Result<(LnpModel, TrainReport)> {
    cfg.validate()?;
    kernel.validate()?;
    let mut model = LnpModel::init(cfg.seed);
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let results: Vec<Result<(f64, Vec<Dense>)>> = map_indexed(cfg.batch, |b| {
            let mut rng = rng_for(cfg.seed, &[KEY_TASK, step as u64, b as u64]);
            let (task, eps) = sample_task(kernel, noise, cfg, &mut rng)?;
            let mut g = LnpModel::zero_grads();
            let p = model.task_elbo(&task, &eps, Some(&mut g), -1.0 / cfg.batch as f64)?;
            Ok((p.elbo, g))
        });
        let mut grads = LnpModel::zero_grads();
        let mut elbo = 0.0;
        for r in results {
            let (e, g) = r?;
            elbo += e;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.w += &gi.w;
                acc.b += &gi.b;
            }
        }
        elbo /= cfg.batch as f64;
        if !elbo.is_finite() || grads.iter().any(|g| g.w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite ELBO or gradient at step {step} (batch ELBO {elbo})"
            )));
        }
        history.push(elbo);
        adam.step(&mut model, &grads, cfg.lr);
    }
    if cfg.steps > 0 {
        model.meta = Some(TrainingMeta {
            steps: cfg.steps,
            batch: cfg.batch,
            lr: cfg.lr,
            seed: cfg.seed,
            context_min: cfg.context_min,
            context_max: cfg.context_max,
            task_size: cfg.task_size,
            lengthscale: kernel.lengthscale,
            signal_variance: kernel.signal_variance,
            sigma_eps_sq: noise.sigma_eps_sq,
            final_elbo: history.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok((
        model,
        TrainReport {
            elbo_history: history,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMismatch {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h perturbation flips a ReLU.
    pub skipped_kinks: usize,
    /// Coordinates with |g| ≤ the magnitude threshold.
    pub skipped_small: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_MIN_MAGNITUDE: f64 = 1e-6;

/// Compares the backward pass with central differences of the single-sample
/// ELBO at frozen noise `eps`, over every parameter. Coordinates whose
/// stencil crosses a ReLU kink are skipped.
pub fn gradient_check(
    model: &LnpModel,
    task: &Task,
    eps: &DVector<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut g = LnpModel::zero_grads();
    let base = model.task_elbo(task, eps, Some(&mut g), 1.0)?;
    let mut flat = Vec::with_capacity(model.param_count());
    for d in &g {
        flat.extend_from_slice(d.w.as_slice());
        flat.extend_from_slice(d.b.as_slice());
    }
    let h = GRAD_CHECK_STEP;
    let outcomes: Vec<Result<Option<(f64, f64, bool)>>> = map_indexed(flat.len(), |k| {
        let mut m = model.clone();
        let p0 = m.param(k);
        let mut at = |offset: f64| {
            m.set_param(k, p0 + offset);
            m.task_elbo(task, eps, None, 1.0)
        };
        let (f1, b1, f2, b2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        if [&f1, &b1, &f2, &b2].iter().any(|p| p.pattern != base.pattern) {
            return Ok(None);
        }
        // Fourth-order central stencil.
        let numeric = (8.0 * (f1.elbo - b1.elbo) - (f2.elbo - b2.elbo)) / (12.0 * h);
        let mag = flat[k].abs().max(numeric.abs());
        Ok(Some((numeric, mag, mag > GRAD_CHECK_MIN_MAGNITUDE)))
    });
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        skipped_small: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for (k, o) in outcomes.into_iter().enumerate() {
        match o? {
            None => report.skipped_kinks += 1,
            Some((_, _, false)) => report.skipped_small += 1,
            Some((numeric, mag, true)) => {
                report.checked += 1;
                let rel = (flat[k] - numeric).abs() / mag;
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > tolerance {
                    report.failures.push(GradMismatch {
                        name: model.param_name(k),
                        analytic: flat[k],
                        numeric,
                        rel_err: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub repr_dim: usize,
    pub latent_dim: usize,
    pub variance_floor: f64,
}

impl Architecture {
    pub fn current() -> Self {
        Architecture {
            input_dim: INPUT_DIM,
            hidden: HIDDEN,
            repr_dim: REPR_DIM,
            latent_dim: LATENT_DIM,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub training: Option<TrainingMeta>,
    pub tensors: Vec<TensorRecord>,
}

impl LnpModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (name, d) in LAYER_NAMES.iter().zip(&self.layers) {
            tensors.push(TensorRecord {
                name: format!("{name}.weight"),
                shape: vec![d.w.nrows(), d.w.ncols()],
                data: d.w.transpose().as_slice().to_vec(),
            });
            tensors.push(TensorRecord {
                name: format!("{name}.bias"),
                shape: vec![d.b.len()],
                data: d.b.as_slice().to_vec(),
            });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: Architecture::current(),
            training: self.meta.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let expect = || format!("expected format {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}");
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "found format {} version {}; {}",
                ck.format,
                ck.version,
                expect()
            )));
        }
        if ck.architecture != Architecture::current() {
            return Err(Error::Checkpoint(format!(
                "architecture {:?} does not match {:?}",
                ck.architecture,
                Architecture::current()
            )));
        }
        let find = |name: &str, shape: &[usize]| -> Result<&[f64]> {
            let t = ck
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}; {}", expect())))?;
            let len: usize = shape.iter().product();
            if t.shape != shape || t.data.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} with {} values, expected {shape:?}",
                    t.shape,
                    t.data.len()
                )));
            }
            Ok(&t.data)
        };
        let mut layers = Vec::with_capacity(SHAPES.len());
        for (name, &(o, i)) in LAYER_NAMES.iter().zip(&SHAPES) {
            let w = find(&format!("{name}.weight"), &[o, i])?;
            let b = find(&format!("{name}.bias"), &[o])?;
            layers.push(Dense {
                w: DMatrix::from_row_slice(o, i, w),
                b: DVector::from_column_slice(b),
            });
        }
        Ok(LnpModel {
            layers,
            meta: ck.training.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| {
            Error::Checkpoint(format!(
                "unreadable checkpoint ({e}); expected format {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}"
            ))
        })?;
        Self::from_checkpoint(&ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Checkpoint(format!(
                "cannot read {} ({e}); expected format {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}",
                path.display()
            ))
        })?;
        Self::from_json(&text)
    }
}
