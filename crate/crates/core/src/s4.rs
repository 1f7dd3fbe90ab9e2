//! Structured state-space sequence layer.
//!
//! A continuous system `x'(t) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)`
//! is discretized with the bilinear transform and applied to a length-`L`
//! input either by the state recurrence or, equivalently, by causal
//! convolution with the materialized kernel `K_l = C Abar^l Bbar`.
//!
//! The recurrence is the correctness oracle; the FFT convolution is the fast
//! path. Both are exposed and must agree (see the equivalence tests and the
//! acceptance suite).
//!
//! Output convention: `y_k = C x_{k+1} + D u_k` with `x_{k+1} = Abar x_k +
//! Bbar u_k` and `x_0 = 0`, which makes `K_0 = C Bbar` and the two paths
//! literally equal.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// HiPPO-LegS initialization (0-indexed):
/// `A[n][k] = -sqrt(2n+1) sqrt(2k+1)` for `n > k`, `-(n+1)` for `n = k`,
/// `0` for `n < k`; `B[n] = sqrt(2n+1)`.
pub fn hippo_legs_matrix(n: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    if n == 0 {
        return Err(Error::Config("state dimension must be >= 1".into()));
    }
    let mut a = Array2::zeros((n, n));
    let mut b = Array1::zeros(n);
    for row in 0..n {
        b[row] = (2.0 * row as f64 + 1.0).sqrt();
        for col in 0..row {
            a[[row, col]] = -((2.0 * row as f64 + 1.0).sqrt() * (2.0 * col as f64 + 1.0).sqrt());
        }
        a[[row, row]] = -(row as f64 + 1.0);
    }
    Ok((a, b))
}

/// Continuous-time system parameters for one channel.
#[derive(Debug, Clone)]
pub struct StateSpaceParams {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
    pub d: f64,
    pub log_dt: f64,
}

impl StateSpaceParams {
    pub fn state_dim(&self) -> usize {
        self.b.len()
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }
}

/// Length-`L` convolution kernel of a discretized system.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub k: Vec<f64>,
}

impl ConvKernel {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Small dense linear algebra (N <= 64); LU with partial pivoting.
// ---------------------------------------------------------------------------

struct Lu {
    n: usize,
    data: Vec<f64>, // row-major combined L\U
    piv: Vec<usize>,
}

impl Lu {
    fn factor(m: &Array2<f64>) -> Result<Lu> {
        let n = m.nrows();
        let mut data: Vec<f64> = m.iter().copied().collect();
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            let mut best_abs = data[col * n + col].abs();
            for row in col + 1..n {
                let v = data[row * n + col].abs();
                if v > best_abs {
                    best = row;
                    best_abs = v;
                }
            }
            if best_abs < 1e-12 {
                return Err(Error::IllConditioned(format!(
                    "pivot {best_abs:.3e} at column {col}"
                )));
            }
            if best != col {
                for j in 0..n {
                    data.swap(col * n + j, best * n + j);
                }
                piv.swap(col, best);
            }
            let pivot = data[col * n + col];
            for row in col + 1..n {
                let f = data[row * n + col] / pivot;
                data[row * n + col] = f;
                for j in col + 1..n {
                    data[row * n + j] -= f * data[col * n + j];
                }
            }
        }
        Ok(Lu { n, data, piv })
    }

    fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| rhs[p]).collect();
        for row in 1..n {
            for col in 0..row {
                x[row] -= self.data[row * n + col] * x[col];
            }
        }
        for row in (0..n).rev() {
            for col in row + 1..n {
                x[row] -= self.data[row * n + col] * x[col];
            }
            x[row] /= self.data[row * n + row];
        }
        x
    }

    /// Solve M X = R column by column.
    fn solve_mat(&self, r: &Array2<f64>) -> Array2<f64> {
        let n = self.n;
        let mut out = Array2::zeros((n, r.ncols()));
        let mut col = vec![0.0; n];
        for j in 0..r.ncols() {
            for i in 0..n {
                col[i] = r[[i, j]];
            }
            let x = self.solve_vec(&col);
            for i in 0..n {
                out[[i, j]] = x[i];
            }
        }
        out
    }
}

fn matvec_into(a: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let n = a.nrows();
    let data = a.as_slice().expect("standard layout");
    for row in 0..n {
        let mut acc = 0.0;
        let base = row * n;
        for col in 0..n {
            acc += data[base + col] * x[col];
        }
        out[row] = acc;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Discretization and kernels
// ---------------------------------------------------------------------------

/// Bilinear discretization:
/// `Abar = (I - dt/2 A)^-1 (I + dt/2 A)`, `Bbar = (I - dt/2 A)^-1 dt B`.
pub fn discretize_bilinear(p: &StateSpaceParams) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = p.state_dim();
    let dt = p.dt();
    let mut minus = Array2::eye(n);
    let mut plus = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            minus[[i, j]] -= 0.5 * dt * p.a[[i, j]];
            plus[[i, j]] += 0.5 * dt * p.a[[i, j]];
        }
    }
    let lu = Lu::factor(&minus)?;
    let abar = lu.solve_mat(&plus);
    let rhs: Vec<f64> = p.b.iter().map(|v| v * dt).collect();
    let bbar = Array1::from_vec(lu.solve_vec(&rhs));
    Ok((abar, bbar))
}

/// `K_l = C Abar^l Bbar` for `l = 0..len-1`, by iterated matrix-vector
/// products.
pub fn compute_kernel(
    abar: &Array2<f64>,
    bbar: &Array1<f64>,
    c: &Array1<f64>,
    len: usize,
) -> Result<ConvKernel> {
    if len == 0 {
        return Err(Error::Config("kernel length must be >= 1".into()));
    }
    let n = bbar.len();
    if abar.dim() != (n, n) || c.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("system of state dim {n}"),
            got: format!("A {:?}, C {}", abar.dim(), c.len()),
        });
    }
    let c_slice = c.as_slice().expect("standard layout");
    let mut state: Vec<f64> = bbar.to_vec();
    let mut next = vec![0.0; n];
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(dot(c_slice, &state));
        matvec_into(abar, &state, &mut next);
        std::mem::swap(&mut state, &mut next);
    }
    Ok(ConvKernel { k })
}

/// State recurrence: the correctness oracle for the convolution path.
pub fn apply_recurrence(
    abar: &Array2<f64>,
    bbar: &Array1<f64>,
    c: &Array1<f64>,
    d: f64,
    u: &[f64],
) -> Vec<f64> {
    let n = bbar.len();
    let c_slice = c.as_slice().expect("standard layout");
    let mut state = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut y = Vec::with_capacity(u.len());
    for &u_k in u {
        matvec_into(abar, &state, &mut next);
        for i in 0..n {
            next[i] += bbar[i] * u_k;
        }
        std::mem::swap(&mut state, &mut next);
        y.push(dot(c_slice, &state) + d * u_k);
    }
    y
}

// ---------------------------------------------------------------------------
// FFT convolution plan
// ---------------------------------------------------------------------------

/// Cached FFT plans for causal convolution/correlation at one sequence
/// length. Signals are zero-padded to the next power of two >= 2L so the
/// circular products never wrap into the retained range.
pub struct ConvPlan {
    len: usize,
    padded: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl ConvPlan {
    pub fn new(len: usize) -> ConvPlan {
        let padded = (2 * len.max(1)).next_power_of_two();
        let mut planner = FftPlanner::new();
        ConvPlan {
            len,
            padded,
            fwd: planner.plan_fft_forward(padded),
            inv: planner.plan_fft_inverse(padded),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forward FFT of a zero-padded real signal.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        debug_assert!(x.len() <= self.padded);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.padded];
        for (slot, &v) in buf.iter_mut().zip(x) {
            slot.re = v;
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// First `len` samples of the (linear) convolution `a * b` given both
    /// spectra.
    pub fn conv_spectra(&self, af: &[Complex64], bf: &[Complex64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = af.iter().zip(bf).map(|(x, y)| x * y).collect();
        self.inv.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        buf[..self.len].iter().map(|v| v.re * scale).collect()
    }

    /// Correlation `c_j = sum_m a_m b_{j+m}` for `j = 0..len`, given spectra.
    pub fn corr_spectra(&self, af: &[Complex64], bf: &[Complex64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = af.iter().zip(bf).map(|(x, y)| x.conj() * y).collect();
        self.inv.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        buf[..self.len].iter().map(|v| v.re * scale).collect()
    }
}

/// `y = causal_conv(K, u) + D u` via FFT with zero padding to >= 2L.
pub fn apply_convolution(kernel: &ConvKernel, d: f64, u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("input of length {}", kernel.len()),
            got: format!("{}", u.len()),
        });
    }
    let plan = ConvPlan::new(u.len());
    let kf = plan.spectrum(&kernel.k);
    let uf = plan.spectrum(u);
    let mut y = plan.conv_spectra(&kf, &uf);
    for (y_k, u_k) in y.iter_mut().zip(u) {
        *y_k += d * u_k;
    }
    Ok(y)
}

/// Direct `O(L^2)` causal convolution; the dual implementation the FFT path
/// is checked against.
pub fn apply_convolution_direct(kernel: &ConvKernel, d: f64, u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("input of length {}", kernel.len()),
            got: format!("{}", u.len()),
        });
    }
    let k = &kernel.k;
    let mut y = vec![0.0; u.len()];
    for (i, y_i) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for l in 0..=i {
            acc += k[l] * u[i - l];
        }
        *y_i = acc + d * u[i];
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Differentiable channel bank (used by the denoiser blocks)
// ---------------------------------------------------------------------------

/// Pointwise nonlinearity applied after the SSM. Smooth everywhere so
/// finite-difference gradient checks stay clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `x * sigmoid(x)`
    Silu,
    /// tanh approximation of the Gaussian error linear unit
    Gelu,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Silu => x * sigmoid(x),
            Nonlinearity::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Nonlinearity::Identity => x,
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Nonlinearity::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-step cache for one discretized channel: the kernel, the state
/// trajectory `S_l = Abar^l Bbar`, and the `d/d(dt)` tangents needed by the
/// parameter adjoint.
pub struct KernelCache {
    pub dt: f64,
    pub abar: Array2<f64>,
    pub bbar: Vec<f64>,
    pub dabar_ddt: Array2<f64>,
    pub dbbar_ddt: Vec<f64>,
    /// `len x n`, row l holds `S_l`.
    pub states: Vec<f64>,
    pub kernel: Vec<f64>,
    pub k_spec: Vec<Complex64>,
}

/// Discretize one channel and materialize its kernel together with the
/// caches required for the backward pass.
pub fn materialize_kernel(
    a: &Array2<f64>,
    b: &Array1<f64>,
    c: &[f64],
    log_dt: f64,
    len: usize,
    plan: &ConvPlan,
) -> Result<KernelCache> {
    let n = b.len();
    let dt = log_dt.exp();
    let mut minus = Array2::eye(n);
    let mut plus = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            minus[[i, j]] -= 0.5 * dt * a[[i, j]];
            plus[[i, j]] += 0.5 * dt * a[[i, j]];
        }
    }
    let lu = Lu::factor(&minus)?;
    let abar = lu.solve_mat(&plus);
    let bbar = lu.solve_vec(&b.iter().map(|v| v * dt).collect::<Vec<_>>());

    // dAbar/ddt = M^-1 (A/2)(I + Abar), dBbar/ddt = M^-1 ((A/2) Bbar + B)
    let mut i_plus_abar = abar.clone();
    for i in 0..n {
        i_plus_abar[[i, i]] += 1.0;
    }
    let half_a = a.mapv(|v| 0.5 * v);
    let dabar_ddt = lu.solve_mat(&half_a.dot(&i_plus_abar));
    let mut rhs = vec![0.0; n];
    matvec_into(&half_a, &bbar, &mut rhs);
    for i in 0..n {
        rhs[i] += b[i];
    }
    let dbbar_ddt = lu.solve_vec(&rhs);

    let mut states = vec![0.0; len * n];
    let mut kernel = vec![0.0; len];
    let mut state = bbar.clone();
    let mut next = vec![0.0; n];
    for l in 0..len {
        states[l * n..(l + 1) * n].copy_from_slice(&state);
        kernel[l] = dot(c, &state);
        if l + 1 < len {
            matvec_into(&abar, &state, &mut next);
            std::mem::swap(&mut state, &mut next);
        }
    }
    let k_spec = plan.spectrum(&kernel);
    Ok(KernelCache {
        dt,
        abar,
        bbar,
        dabar_ddt,
        dbbar_ddt,
        states,
        kernel,
        k_spec,
    })
}

/// Parameter adjoint for one channel given the summed kernel cotangent
/// `g_k[l] = dL/dK_l`. Returns `(dL/dC, dL/d log_dt)`.
///
/// Uses the forward-mode tangent of the state trajectory:
/// `T_0 = dBbar/ddt`, `T_l = dAbar/ddt S_{l-1} + Abar T_{l-1}`, so that
/// `dK_l/ddt = C T_l` and `dK_l/dC = S_l`.
pub fn kernel_param_grads(cache: &KernelCache, c: &[f64], g_k: &[f64]) -> (Vec<f64>, f64) {
    let n = c.len();
    let len = g_k.len();
    let mut d_c = vec![0.0; n];
    let mut tangent = cache.dbbar_ddt.clone();
    let mut tmp_a = vec![0.0; n];
    let mut tmp_b = vec![0.0; n];
    let mut d_dt = 0.0;
    for l in 0..len {
        let s_l = &cache.states[l * n..(l + 1) * n];
        let g = g_k[l];
        for i in 0..n {
            d_c[i] += g * s_l[i];
        }
        d_dt += g * dot(c, &tangent);
        if l + 1 < len {
            matvec_into(&cache.dabar_ddt, s_l, &mut tmp_a);
            matvec_into(&cache.abar, &tangent, &mut tmp_b);
            for i in 0..n {
                tangent[i] = tmp_a[i] + tmp_b[i];
            }
        }
    }
    (d_c, d_dt * cache.dt)
}

/// A bank of independent channel systems sharing a frozen `(A, B)` pair,
/// with per-channel trainable `(C, D, log_dt)`.
pub struct S4Layer {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    /// Per channel: C (state_dim values), then D and log_dt.
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub log_dt: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

/// Per-step kernel bank shared across all batch elements.
pub struct LayerKernels {
    pub per_channel: Vec<KernelCache>,
}

/// Per-element forward trace kept for the backward pass.
pub struct LayerTrace {
    /// Per channel FFT of the input row.
    u_spec: Vec<Vec<Complex64>>,
    u: Array2<f64>,
    /// Pre-nonlinearity outputs.
    pre: Array2<f64>,
}

/// Per-element gradients produced by [`S4Layer::backward`]. Kernel and `D`
/// cotangents are summed over the batch by the caller before
/// [`kernel_param_grads`] runs once per channel.
pub struct LayerGrads {
    pub d_u: Array2<f64>,
    /// Per channel `dL/dK` (length L each).
    pub d_kernel: Vec<Vec<f64>>,
    pub d_d: Vec<f64>,
}

impl S4Layer {
    pub fn channels(&self) -> usize {
        self.c.len()
    }

    pub fn kernels(&self, len: usize, plan: &ConvPlan) -> Result<LayerKernels> {
        let per_channel = self
            .c
            .iter()
            .zip(&self.log_dt)
            .map(|(c, &log_dt)| materialize_kernel(&self.a, &self.b, c, log_dt, len, plan))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerKernels { per_channel })
    }

    /// Forward pass without caching (sampling / inference).
    pub fn forward_with(
        &self,
        kernels: &LayerKernels,
        u: &Array2<f64>,
        plan: &ConvPlan,
    ) -> Result<Array2<f64>> {
        self.check_input(u, plan)?;
        let mut out = Array2::zeros(u.dim());
        for (ch, cache) in kernels.per_channel.iter().enumerate() {
            let row = u.row(ch);
            let row = row.as_slice().expect("standard layout");
            let uf = plan.spectrum(row);
            let mut y = plan.conv_spectra(&cache.k_spec, &uf);
            let d = self.d[ch];
            for (y_k, u_k) in y.iter_mut().zip(row) {
                *y_k = self.nonlinearity.apply(*y_k + d * u_k);
            }
            out.row_mut(ch).as_slice_mut().unwrap().copy_from_slice(&y);
        }
        Ok(out)
    }

    /// Forward pass retaining what backward needs. Returns the trace and the
    /// activated output.
    pub fn forward_cached(
        &self,
        kernels: &LayerKernels,
        u: &Array2<f64>,
        plan: &ConvPlan,
    ) -> Result<(LayerTrace, Array2<f64>)> {
        self.check_input(u, plan)?;
        let mut pre = Array2::zeros(u.dim());
        let mut out = Array2::zeros(u.dim());
        let mut u_spec = Vec::with_capacity(self.channels());
        for (ch, cache) in kernels.per_channel.iter().enumerate() {
            let row = u.row(ch);
            let row = row.as_slice().expect("standard layout");
            let uf = plan.spectrum(row);
            let y = plan.conv_spectra(&cache.k_spec, &uf);
            let d = self.d[ch];
            for (k, (y_k, u_k)) in y.iter().zip(row).enumerate() {
                let p = *y_k + d * u_k;
                pre[[ch, k]] = p;
                out[[ch, k]] = self.nonlinearity.apply(p);
            }
            u_spec.push(uf);
        }
        Ok((
            LayerTrace {
                u_spec,
                u: u.clone(),
                pre,
            },
            out,
        ))
    }

    /// Per-element backward pass: maps the output cotangent to the input
    /// cotangent plus per-channel kernel/D cotangents.
    pub fn backward(
        &self,
        kernels: &LayerKernels,
        trace: &LayerTrace,
        d_out: &Array2<f64>,
        plan: &ConvPlan,
    ) -> LayerGrads {
        let (h, len) = d_out.dim();
        let mut d_u = Array2::zeros((h, len));
        let mut d_kernel = Vec::with_capacity(h);
        let mut d_d = vec![0.0; h];
        let mut d_pre = vec![0.0; len];
        for ch in 0..h {
            for k in 0..len {
                d_pre[k] = d_out[[ch, k]] * self.nonlinearity.grad(trace.pre[[ch, k]]);
            }
            let df = plan.spectrum(&d_pre);
            // dL/du_j = sum_m K_m dpre_{j+m} + D dpre_j
            let cache = &kernels.per_channel[ch];
            let mut du_row = plan.corr_spectra(&cache.k_spec, &df);
            let d = self.d[ch];
            for (j, slot) in du_row.iter_mut().enumerate() {
                *slot += d * d_pre[j];
            }
            d_u.row_mut(ch)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&du_row);
            // dL/dK_l = sum_m u_m dpre_{l+m}
            d_kernel.push(plan.corr_spectra(&trace.u_spec[ch], &df));
            let u_row = trace.u.row(ch);
            let u_row = u_row.as_slice().unwrap();
            d_d[ch] = dot(u_row, &d_pre);
        }
        LayerGrads { d_u, d_kernel, d_d }
    }

    fn check_input(&self, u: &Array2<f64>, plan: &ConvPlan) -> Result<()> {
        if u.nrows() != self.channels() || u.ncols() != plan.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", self.channels(), plan.len()),
                got: format!("{:?}", u.dim()),
            });
        }
        Ok(())
    }
}
