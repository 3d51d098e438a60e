//! Layer-granular network building blocks with independent forward/backward,
//! the unit from which device portions are built.
//!
//! Every layer caches what its backward pass needs during forward; calling
//! backward without a prior forward is an error. Batch work is processed in
//! fixed-size sample chunks (see [`crate::par`]) so parallel and sequential
//! builds agree bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{
    col2im_add_strided, gemm, gemm_at, gemm_bt, im2col_strided, ConvGeom,
};
use crate::error::{Error, Result};
use crate::par::{self, SAMPLE_CHUNK};
use crate::tensor::Tensor;

/// Forward-pass mode.
///
/// `Probe` evaluates with batch statistics like `Train` but leaves running
/// statistics untouched; it is used when a frozen network must not be mutated
/// (e.g. the discriminator during a generator update).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Probe,
}

const INIT_STD: f64 = 0.02;

fn init_normal<R: Rng>(t: &mut Tensor, mean: f64, std: f64, rng: &mut R) {
    let dist = Normal::new(mean, std).expect("valid normal");
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Tensor, // (Cout, Cin, k, k)
    pub b: Tensor, // (Cout,)
    pub gw: Tensor,
    pub gb: Tensor,
    cache: Option<Tensor>, // input
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Tensor::zeros(&[out_channels, in_channels, kernel, kernel]);
        init_normal(&mut w, 0.0, INIT_STD, rng);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            w,
            b: Tensor::zeros(&[out_channels]),
            gw: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            gb: Tensor::zeros(&[out_channels]),
            cache: None,
        }
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.in_channels,
            h_in: h,
            w_in: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "Conv2d::forward".into(),
                expected: vec![0, self.in_channels, 0, 0],
                got: shape.to_vec(),
            });
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let g = self.geom(h, w);
        let (ho, wo) = g.out_hw();
        let hw_out = ho * wo;
        let hw_in = self.in_channels * h * w;
        let ck2 = g.col_rows();
        let cout = self.out_channels;
        let mut out = Tensor::zeros(&[batch, cout, ho, wo]);
        let in_data = input.data();
        let wmat = self.w.data();
        let bias = self.b.data();
        par::for_each_chunk_mut(out.data_mut(), SAMPLE_CHUNK * cout * hw_out, |ci, out_chunk| {
            let s0 = ci * SAMPLE_CHUNK;
            let cs = out_chunk.len() / (cout * hw_out);
            let wide = cs * hw_out;
            let mut cols = vec![0.0; ck2 * wide];
            for s in 0..cs {
                let x_s = &in_data[(s0 + s) * hw_in..(s0 + s + 1) * hw_in];
                im2col_strided(x_s, &g, &mut cols, wide, s * hw_out);
            }
            // (Cout, cs·HoWo) = W · cols
            let mut wide_out = vec![0.0; cout * wide];
            gemm(cout, ck2, wide, wmat, &cols, 0.0, &mut wide_out);
            for s in 0..cs {
                for c in 0..cout {
                    let src = &wide_out[c * wide + s * hw_out..c * wide + (s + 1) * hw_out];
                    let dst =
                        &mut out_chunk[s * cout * hw_out + c * hw_out..s * cout * hw_out + (c + 1) * hw_out];
                    let bc = bias[c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + bc;
                    }
                }
            }
        });
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Conv2d"))?;
        let shape = input.shape();
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let g = self.geom(h, w);
        let (ho, wo) = g.out_hw();
        upstream.expect_shape(&[batch, self.out_channels, ho, wo], "Conv2d::backward")?;
        let hw_out = ho * wo;
        let hw_in = self.in_channels * h * w;
        let ck2 = g.col_rows();
        let cout = self.out_channels;
        let up = upstream.data();
        let in_data = input.data();
        let wmat = self.w.data();

        let mut dx = Tensor::zeros(shape);
        par::for_each_chunk_mut(dx.data_mut(), SAMPLE_CHUNK * hw_in, |ci, dx_chunk| {
            let s0 = ci * SAMPLE_CHUNK;
            let cs = dx_chunk.len() / hw_in;
            let wide = cs * hw_out;
            // gather upstream planes: (Cout, cs·HoWo)
            let mut up_gather = vec![0.0; cout * wide];
            for s in 0..cs {
                for c in 0..cout {
                    let src = &up[(s0 + s) * cout * hw_out + c * hw_out..(s0 + s) * cout * hw_out + (c + 1) * hw_out];
                    up_gather[c * wide + s * hw_out..c * wide + (s + 1) * hw_out]
                        .copy_from_slice(src);
                }
            }
            // dcols = Wᵀ · up
            let mut dcols = vec![0.0; ck2 * wide];
            gemm_at(ck2, cout, wide, wmat, &up_gather, 0.0, &mut dcols);
            for s in 0..cs {
                col2im_add_strided(&dcols, &g, &mut dx_chunk[s * hw_in..(s + 1) * hw_in], wide, s * hw_out);
            }
        });

        if accumulate {
            let partials = par::map_chunk_ranges(batch, SAMPLE_CHUNK, |r| {
                let cs = r.len();
                let wide = cs * hw_out;
                let mut cols = vec![0.0; ck2 * wide];
                let mut up_gather = vec![0.0; cout * wide];
                for (s, sample) in r.clone().enumerate() {
                    im2col_strided(
                        &in_data[sample * hw_in..(sample + 1) * hw_in],
                        &g,
                        &mut cols,
                        wide,
                        s * hw_out,
                    );
                    for c in 0..cout {
                        let src = &up[sample * cout * hw_out + c * hw_out..sample * cout * hw_out + (c + 1) * hw_out];
                        up_gather[c * wide + s * hw_out..c * wide + (s + 1) * hw_out]
                            .copy_from_slice(src);
                    }
                }
                // dW partial = up · colsᵀ : (Cout, C·k²)
                let mut dw = vec![0.0; cout * ck2];
                gemm_bt(cout, wide, ck2, &up_gather, &cols, 0.0, &mut dw);
                let mut db = vec![0.0; cout];
                for c in 0..cout {
                    db[c] = up_gather[c * wide..(c + 1) * wide].iter().sum();
                }
                (dw, db)
            });
            for (dw, db) in partials {
                for (g, v) in self.gw.data_mut().iter_mut().zip(&dw) {
                    *g += v;
                }
                for (g, v) in self.gb.data_mut().iter_mut().zip(&db) {
                    *g += v;
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Tensor, // (Cin, Cout, k, k)
    pub b: Tensor, // (Cout,)
    pub gw: Tensor,
    pub gb: Tensor,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Tensor::zeros(&[in_channels, out_channels, kernel, kernel]);
        init_normal(&mut w, 0.0, INIT_STD, rng);
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            w,
            b: Tensor::zeros(&[out_channels]),
            gw: Tensor::zeros(&[in_channels, out_channels, kernel, kernel]),
            gb: Tensor::zeros(&[out_channels]),
            cache: None,
        }
    }

    pub fn out_hw(&self, h_in: usize, w_in: usize) -> (usize, usize) {
        (
            (h_in - 1) * self.stride + self.kernel - 2 * self.pad,
            (w_in - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    /// The window-sweep geometry over the *output* plane; its `out_hw` equals
    /// the transpose-conv input size.
    fn geom(&self, ho: usize, wo: usize) -> ConvGeom {
        ConvGeom {
            channels: self.out_channels,
            h_in: ho,
            w_in: wo,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "ConvTranspose2d::forward".into(),
                expected: vec![0, self.in_channels, 0, 0],
                got: shape.to_vec(),
            });
        }
        let (batch, hi, wi) = (shape[0], shape[2], shape[3]);
        let (ho, wo) = self.out_hw(hi, wi);
        let g = self.geom(ho, wo);
        debug_assert_eq!(g.out_hw(), (hi, wi));
        let hw_in = hi * wi;
        let in_len = self.in_channels * hw_in;
        let out_len = self.out_channels * ho * wo;
        let ck2 = g.col_rows(); // Cout·k²
        let cin = self.in_channels;
        let in_data = input.data();
        let wmat = self.w.data(); // (Cin, Cout·k²)
        let bias = self.b.data();
        let mut out = Tensor::zeros(&[batch, self.out_channels, ho, wo]);
        par::for_each_chunk_mut(out.data_mut(), SAMPLE_CHUNK * out_len, |ci, out_chunk| {
            let s0 = ci * SAMPLE_CHUNK;
            let cs = out_chunk.len() / out_len;
            let wide = cs * hw_in;
            // gather inputs: (Cin, cs·HiWi)
            let mut x_gather = vec![0.0; cin * wide];
            for s in 0..cs {
                for c in 0..cin {
                    let src = &in_data[(s0 + s) * in_len + c * hw_in..(s0 + s) * in_len + (c + 1) * hw_in];
                    x_gather[c * wide + s * hw_in..c * wide + (s + 1) * hw_in].copy_from_slice(src);
                }
            }
            // cols = Wᵀ · x : (Cout·k², cs·HiWi)
            let mut cols = vec![0.0; ck2 * wide];
            gemm_at(ck2, cin, wide, wmat, &x_gather, 0.0, &mut cols);
            for s in 0..cs {
                let y_s = &mut out_chunk[s * out_len..(s + 1) * out_len];
                for c in 0..g.channels {
                    y_s[c * ho * wo..(c + 1) * ho * wo]
                        .iter_mut()
                        .for_each(|v| *v = bias[c]);
                }
                col2im_add_strided(&cols, &g, y_s, wide, s * hw_in);
            }
        });
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("ConvTranspose2d"))?;
        let shape = input.shape();
        let (batch, hi, wi) = (shape[0], shape[2], shape[3]);
        let (ho, wo) = self.out_hw(hi, wi);
        upstream.expect_shape(
            &[batch, self.out_channels, ho, wo],
            "ConvTranspose2d::backward",
        )?;
        let g = self.geom(ho, wo);
        let hw_in = hi * wi;
        let in_len = self.in_channels * hw_in;
        let out_len = self.out_channels * ho * wo;
        let ck2 = g.col_rows();
        let cin = self.in_channels;
        let cout = self.out_channels;
        let up = upstream.data();
        let in_data = input.data();
        let wmat = self.w.data();

        let mut dx = Tensor::zeros(shape);
        par::for_each_chunk_mut(dx.data_mut(), SAMPLE_CHUNK * in_len, |ci, dx_chunk| {
            let s0 = ci * SAMPLE_CHUNK;
            let cs = dx_chunk.len() / in_len;
            let wide = cs * hw_in;
            let mut up_cols = vec![0.0; ck2 * wide];
            for s in 0..cs {
                im2col_strided(
                    &up[(s0 + s) * out_len..(s0 + s + 1) * out_len],
                    &g,
                    &mut up_cols,
                    wide,
                    s * hw_in,
                );
            }
            // dx = W · up_cols : (Cin, cs·HiWi)
            let mut dx_gather = vec![0.0; cin * wide];
            gemm(cin, ck2, wide, wmat, &up_cols, 0.0, &mut dx_gather);
            for s in 0..cs {
                for c in 0..cin {
                    dx_chunk[s * in_len + c * hw_in..s * in_len + (c + 1) * hw_in]
                        .copy_from_slice(&dx_gather[c * wide + s * hw_in..c * wide + (s + 1) * hw_in]);
                }
            }
        });

        if accumulate {
            let partials = par::map_chunk_ranges(batch, SAMPLE_CHUNK, |r| {
                let cs = r.len();
                let wide = cs * hw_in;
                let mut up_cols = vec![0.0; ck2 * wide];
                let mut x_gather = vec![0.0; cin * wide];
                let mut db = vec![0.0; cout];
                for (s, sample) in r.clone().enumerate() {
                    im2col_strided(
                        &up[sample * out_len..(sample + 1) * out_len],
                        &g,
                        &mut up_cols,
                        wide,
                        s * hw_in,
                    );
                    for c in 0..cin {
                        x_gather[c * wide + s * hw_in..c * wide + (s + 1) * hw_in].copy_from_slice(
                            &in_data[sample * in_len + c * hw_in..sample * in_len + (c + 1) * hw_in],
                        );
                    }
                    for c in 0..cout {
                        db[c] += up[sample * out_len + c * ho * wo..sample * out_len + (c + 1) * ho * wo]
                            .iter()
                            .sum::<f64>();
                    }
                }
                // dW partial = x · up_colsᵀ : (Cin, Cout·k²)
                let mut dw = vec![0.0; cin * ck2];
                gemm_bt(cin, wide, ck2, &x_gather, &up_cols, 0.0, &mut dw);
                (dw, db)
            });
            for (dw, db) in partials {
                for (g, v) in self.gw.data_mut().iter_mut().zip(&dw) {
                    *g += v;
                }
                for (g, v) in self.gb.data_mut().iter_mut().zip(&db) {
                    *g += v;
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub g_gamma: Tensor,
    pub g_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BatchNormCache>,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        init_normal(&mut gamma, 1.0, INIT_STD, rng);
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta: Tensor::zeros(&[channels]),
            g_gamma: Tensor::zeros(&[channels]),
            g_beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            cache: None,
        }
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                context: "BatchNorm2d::forward".into(),
                expected: vec![0, self.channels, 0, 0],
                got: shape.to_vec(),
            });
        }
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let hw = h * w;
        let plane = self.channels * hw;
        let n = (batch * hw) as f64;
        let data = input.data();
        let mut out = Tensor::zeros(shape);
        let mut xhat = Tensor::zeros(shape);
        let mut inv_std = vec![0.0; self.channels];
        let batch_stats = mode != Mode::Eval;

        // per-channel stats; channel reductions run in fixed sample order
        let stats: Vec<(f64, f64)> = par::map_indices(self.channels, |c| {
            if batch_stats {
                let mut sum = 0.0;
                for s in 0..batch {
                    sum += data[s * plane + c * hw..s * plane + (c + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
                let mean = sum / n;
                let mut var_sum = 0.0;
                for s in 0..batch {
                    for v in &data[s * plane + c * hw..s * plane + (c + 1) * hw] {
                        let d = v - mean;
                        var_sum += d * d;
                    }
                }
                (mean, var_sum / n)
            } else {
                (self.running_mean.data()[c], self.running_var.data()[c])
            }
        });

        for c in 0..self.channels {
            inv_std[c] = 1.0 / (stats[c].1 + self.eps).sqrt();
        }
        {
            let gamma = self.gamma.data();
            let beta = self.beta.data();
            let xhat_data = xhat.data_mut();
            let out_data = out.data_mut();
            for s in 0..batch {
                for c in 0..self.channels {
                    let (mean, _) = stats[c];
                    let is = inv_std[c];
                    let (gc, bc) = (gamma[c], beta[c]);
                    let base = s * plane + c * hw;
                    for i in 0..hw {
                        let xh = (data[base + i] - mean) * is;
                        xhat_data[base + i] = xh;
                        out_data[base + i] = gc * xh + bc;
                    }
                }
            }
        }
        if mode == Mode::Train {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..self.channels {
                let rm = self.running_mean.data_mut();
                rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * stats[c].0;
                let rv = self.running_var.data_mut();
                rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * stats[c].1 * unbias;
            }
        }
        self.cache = Some(BatchNormCache {
            xhat,
            inv_std,
            batch_stats,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("BatchNorm2d"))?;
        let shape = cache.xhat.shape().to_vec();
        upstream.expect_shape(&shape, "BatchNorm2d::backward")?;
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let hw = h * w;
        let plane = self.channels * hw;
        let n = (batch * hw) as f64;
        let up = upstream.data();
        let xhat = cache.xhat.data();
        let mut dx = Tensor::zeros(&shape);

        let sums: Vec<(f64, f64)> = par::map_indices(self.channels, |c| {
            let mut sum_up = 0.0;
            let mut sum_up_xhat = 0.0;
            for s in 0..batch {
                let base = s * plane + c * hw;
                for i in 0..hw {
                    sum_up += up[base + i];
                    sum_up_xhat += up[base + i] * xhat[base + i];
                }
            }
            (sum_up, sum_up_xhat)
        });

        {
            let gamma = self.gamma.data();
            let dx_data = dx.data_mut();
            for s in 0..batch {
                for c in 0..self.channels {
                    let base = s * plane + c * hw;
                    let scale = gamma[c] * cache.inv_std[c];
                    if cache.batch_stats {
                        let (su, sux) = sums[c];
                        for i in 0..hw {
                            dx_data[base + i] = scale / n
                                * (n * up[base + i] - su - xhat[base + i] * sux);
                        }
                    } else {
                        for i in 0..hw {
                            dx_data[base + i] = scale * up[base + i];
                        }
                    }
                }
            }
        }
        if accumulate {
            for c in 0..self.channels {
                self.g_gamma.data_mut()[c] += sums[c].1;
                self.g_beta.data_mut()[c] += sums[c].0;
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Activations, Flatten, Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LeakyReLU {
    pub slope: f64,
    cache: Option<Tensor>, // input
}

#[derive(Debug, Clone, Default)]
pub struct ReLU {
    cache: Option<Tensor>, // input
}

#[derive(Debug, Clone, Default)]
pub struct Tanh {
    cache: Option<Tensor>, // output
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>, // output
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>, // input shape
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub w: Tensor, // (out, in)
    pub b: Tensor, // (out,)
    pub gw: Tensor,
    pub gb: Tensor,
    cache: Option<Tensor>, // input
}

impl Dense {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut w = Tensor::zeros(&[out_features, in_features]);
        init_normal(&mut w, 0.0, INIT_STD, rng);
        Dense {
            in_features,
            out_features,
            w,
            b: Tensor::zeros(&[out_features]),
            gw: Tensor::zeros(&[out_features, in_features]),
            gb: Tensor::zeros(&[out_features]),
            cache: None,
        }
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                context: "Dense::forward".into(),
                expected: vec![0, self.in_features],
                got: shape.to_vec(),
            });
        }
        let batch = shape[0];
        let mut out = Tensor::zeros(&[batch, self.out_features]);
        // y = x·Wᵀ
        gemm_bt(
            batch,
            self.in_features,
            self.out_features,
            input.data(),
            self.w.data(),
            0.0,
            out.data_mut(),
        );
        let bias = self.b.data();
        for s in 0..batch {
            for (o, bv) in out.data_mut()[s * self.out_features..(s + 1) * self.out_features]
                .iter_mut()
                .zip(bias)
            {
                *o += bv;
            }
        }
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Dense"))?;
        let batch = input.shape()[0];
        upstream.expect_shape(&[batch, self.out_features], "Dense::backward")?;
        let mut dx = Tensor::zeros(&[batch, self.in_features]);
        // dx = up·W
        gemm(
            batch,
            self.out_features,
            self.in_features,
            upstream.data(),
            self.w.data(),
            0.0,
            dx.data_mut(),
        );
        if accumulate {
            // dW += upᵀ·x
            gemm_at(
                self.out_features,
                batch,
                self.in_features,
                upstream.data(),
                input.data(),
                1.0,
                self.gw.data_mut(),
            );
            for s in 0..batch {
                for (g, u) in self.gb.data_mut().iter_mut().zip(
                    &upstream.data()[s * self.out_features..(s + 1) * self.out_features],
                ) {
                    *g += u;
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Layer enum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    BatchNorm2d(BatchNorm2d),
    LeakyReLU(LeakyReLU),
    ReLU(ReLU),
    Tanh(Tanh),
    Sigmoid(Sigmoid),
    Flatten(Flatten),
    Dense(Dense),
}

impl Layer {
    pub fn leaky_relu(slope: f64) -> Self {
        Layer::LeakyReLU(LeakyReLU { slope, cache: None })
    }

    pub fn relu() -> Self {
        Layer::ReLU(ReLU::default())
    }

    pub fn tanh() -> Self {
        Layer::Tanh(Tanh::default())
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid(Sigmoid::default())
    }

    pub fn flatten() -> Self {
        Layer::Flatten(Flatten::default())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::ConvTranspose2d(_) => "ConvTranspose2d",
            Layer::BatchNorm2d(_) => "BatchNorm2d",
            Layer::LeakyReLU(_) => "LeakyReLU",
            Layer::ReLU(_) => "ReLU",
            Layer::Tanh(_) => "Tanh",
            Layer::Sigmoid(_) => "Sigmoid",
            Layer::Flatten(_) => "Flatten",
            Layer::Dense(_) => "Dense",
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = match self {
            Layer::Conv2d(l) => l.forward(input, mode)?,
            Layer::ConvTranspose2d(l) => l.forward(input, mode)?,
            Layer::BatchNorm2d(l) => l.forward(input, mode)?,
            Layer::LeakyReLU(l) => {
                let mut out = input.clone();
                let slope = l.slope;
                for v in out.data_mut() {
                    if *v <= 0.0 {
                        *v *= slope;
                    }
                }
                l.cache = Some(input.clone());
                out
            }
            Layer::ReLU(l) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                l.cache = Some(input.clone());
                out
            }
            Layer::Tanh(l) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = v.tanh();
                }
                l.cache = Some(out.clone());
                out
            }
            Layer::Sigmoid(l) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
                l.cache = Some(out.clone());
                out
            }
            Layer::Flatten(l) => {
                let shape = input.shape().to_vec();
                if shape.is_empty() {
                    return Err(Error::ShapeMismatch {
                        context: "Flatten::forward".into(),
                        expected: vec![0, 0],
                        got: shape,
                    });
                }
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                l.cache = Some(shape);
                input.clone().reshaped(&[batch, rest])?
            }
            Layer::Dense(l) => l.forward(input)?,
        };
        out.check_finite(self.kind())?;
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        let dx = match self {
            Layer::Conv2d(l) => l.backward(upstream, accumulate)?,
            Layer::ConvTranspose2d(l) => l.backward(upstream, accumulate)?,
            Layer::BatchNorm2d(l) => l.backward(upstream, accumulate)?,
            Layer::LeakyReLU(l) => {
                let input = l
                    .cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("LeakyReLU"))?;
                upstream.expect_shape(input.shape(), "LeakyReLU::backward")?;
                let mut dx = upstream.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *d *= l.slope;
                    }
                }
                dx
            }
            Layer::ReLU(l) => {
                let input = l
                    .cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("ReLU"))?;
                upstream.expect_shape(input.shape(), "ReLU::backward")?;
                let mut dx = upstream.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            Layer::Tanh(l) => {
                let out = l
                    .cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("Tanh"))?;
                upstream.expect_shape(out.shape(), "Tanh::backward")?;
                let mut dx = upstream.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                dx
            }
            Layer::Sigmoid(l) => {
                let out = l
                    .cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("Sigmoid"))?;
                upstream.expect_shape(out.shape(), "Sigmoid::backward")?;
                let mut dx = upstream.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                dx
            }
            Layer::Flatten(l) => {
                let shape = l
                    .cache
                    .as_ref()
                    .ok_or(Error::BackwardBeforeForward("Flatten"))?
                    .clone();
                upstream.clone().reshaped(&shape)?
            }
            Layer::Dense(l) => l.backward(upstream, accumulate)?,
        };
        dx.check_finite(self.kind())?;
        Ok(dx)
    }

    /// Named parameter/gradient pairs, in a stable order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(l) => vec![("w", &l.w, &l.gw), ("b", &l.b, &l.gb)],
            Layer::ConvTranspose2d(l) => vec![("w", &l.w, &l.gw), ("b", &l.b, &l.gb)],
            Layer::BatchNorm2d(l) => vec![
                ("gamma", &l.gamma, &l.g_gamma),
                ("beta", &l.beta, &l.g_beta),
            ],
            Layer::Dense(l) => vec![("w", &l.w, &l.gw), ("b", &l.b, &l.gb)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(l) => vec![("w", &mut l.w, &mut l.gw), ("b", &mut l.b, &mut l.gb)],
            Layer::ConvTranspose2d(l) => {
                vec![("w", &mut l.w, &mut l.gw), ("b", &mut l.b, &mut l.gb)]
            }
            Layer::BatchNorm2d(l) => vec![
                ("gamma", &mut l.gamma, &mut l.g_gamma),
                ("beta", &mut l.beta, &mut l.g_beta),
            ],
            Layer::Dense(l) => vec![("w", &mut l.w, &mut l.gw), ("b", &mut l.b, &mut l.gb)],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p, _)| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, _, g) in self.params_mut() {
            g.fill(0.0);
        }
    }

    /// Output shape for a given input shape, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv2d(l) => {
                let g = l.geom(input[2], input[3]);
                let (h, w) = g.out_hw();
                vec![input[0], l.out_channels, h, w]
            }
            Layer::ConvTranspose2d(l) => {
                let (h, w) = l.out_hw(input[2], input[3]);
                vec![input[0], l.out_channels, h, w]
            }
            Layer::Flatten(_) => vec![input[0], input[1..].iter().product()],
            Layer::Dense(l) => vec![input[0], l.out_features],
            _ => input.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_matches_definition() {
        let mut l = Layer::relu();
        let out = l
            .forward(&t(&[1, 3], &[-1.0, 0.0, 2.0]), Mode::Train)
            .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_gates_upstream() {
        let mut l = Layer::relu();
        l.forward(&t(&[1, 2], &[-1.0, 2.0]), Mode::Train).unwrap();
        let dx = l.backward(&t(&[1, 2], &[1.0, 1.0]), true).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_forward_matches_definition() {
        let mut l = Layer::leaky_relu(0.2);
        let out = l.forward(&t(&[1, 2], &[-1.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(out.data(), &[-0.2, 2.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut l = Layer::tanh();
        l.forward(&t(&[1, 1], &[0.0]), Mode::Train).unwrap();
        let dx = l.backward(&t(&[1, 1], &[1.0]), true).unwrap();
        assert_eq!(dx.data(), &[1.0]);
    }

    #[test]
    fn identity_convolution_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 1, 1, 0, &mut rng);
        conv.w.fill(1.0);
        conv.b.fill(0.0);
        let mut l = Layer::Conv2d(conv);
        let x = t(&[1, 1, 2, 2], &[1.0, -2.0, 3.5, 0.25]);
        let out = l.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut l = Layer::sigmoid();
        assert!(l.backward(&t(&[1, 1], &[1.0]), true).is_err());
    }

    #[test]
    fn batchnorm_eval_is_pure_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm2d::new(2, &mut rng);
        bn.running_mean = t(&[2], &[0.5, -1.0]);
        bn.running_var = t(&[2], &[4.0, 0.25]);
        let mut l = Layer::BatchNorm2d(bn.clone());
        let x = t(&[1, 2, 1, 2], &[1.0, 3.0, 0.0, -2.0]);
        let y = l.forward(&x, Mode::Eval).unwrap();
        // frozen stats: y = gamma*(x-rm)/sqrt(rv+eps)+beta elementwise
        for c in 0..2 {
            for i in 0..2 {
                let idx = c * 2 + i;
                let expect = bn.gamma.data()[c] * (x.data()[idx] - bn.running_mean.data()[c])
                    / (bn.running_var.data()[c] + bn.eps).sqrt()
                    + bn.beta.data()[c];
                assert!((y.data()[idx] - expect).abs() < 1e-12);
            }
        }
        // and running stats unchanged
        if let Layer::BatchNorm2d(after) = &l {
            assert_eq!(after.running_mean, bn.running_mean);
            assert_eq!(after.running_var, bn.running_var);
        }
    }

    #[test]
    fn probe_mode_leaves_running_stats_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bn = BatchNorm2d::new(1, &mut rng);
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        let mut l = Layer::BatchNorm2d(bn);
        l.forward(&t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]), Mode::Probe)
            .unwrap();
        if let Layer::BatchNorm2d(after) = &l {
            assert_eq!(after.running_mean, before.0);
            assert_eq!(after.running_var, before.1);
        }
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dense = Dense::new(1, 1, &mut rng);
        dense.w.fill(f64::MAX);
        let mut l = Layer::Dense(dense);
        let r = l.forward(&t(&[1, 1], &[f64::MAX]), Mode::Train);
        assert!(matches!(r, Err(Error::NumericFailure(_))));
    }
}
