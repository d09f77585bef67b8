use super::{Result, Scalar, Tensor, TensorError};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Per-channel inference statistics and affine parameters of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize, eps: T) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != channels {
                return Err(TensorError::Shape(format!(
                    "batch-norm {} has {} entries, expected {}",
                    name,
                    v.len(),
                    channels
                )));
            }
        }
        if eps < T::zero() {
            return Err(TensorError::Domain(format!("batch-norm eps {} < 0", eps)));
        }
        if let Some((c, v)) = self
            .var
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= T::zero()))
        {
            return Err(TensorError::Domain(format!(
                "batch-norm variance of channel {} is {}",
                c, v
            )));
        }
        if let Some(c) = self.var.iter().position(|&v| v + eps <= T::zero()) {
            return Err(TensorError::Domain(format!(
                "batch-norm var + eps is zero for channel {}",
                c
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn affine(&self, eps: T) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(self.beta.iter().zip(&self.mean))
            .map(|(&s, (&b, &m))| b - s * m)
            .collect();
        (scale, shift)
    }
}

fn expect_channels(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(TensorError::Shape(format!(
            "{}: channel mismatch ({} vs {})",
            what, got, want
        )));
    }
    Ok(())
}

/// 3x3 depthwise convolution, stride 1, zero padding 1, no bias.
pub fn dw_conv3<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, wd) = x.chw()?;
    match w.shape() {
        [wc, 3, 3] => expect_channels("dw_conv3", *wc, c)?,
        s => {
            return Err(TensorError::Shape(format!(
                "dw_conv3 kernel must be (C, 3, 3), got {:?}",
                s
            )))
        }
    }
    let mut out = vec![T::zero(); c * h * wd];
    let xs = x.data();
    let ws = w.data();
    let plane = h * wd;
    for ch in 0..c {
        let xp = &xs[ch * plane..(ch + 1) * plane];
        let op = &mut out[ch * plane..(ch + 1) * plane];
        for u in 0..3usize {
            // output rows i whose source row i + u - 1 is inside the image
            let (i0, i1) = valid_range(u, h);
            for v in 0..3usize {
                let k = ws[ch * 9 + u * 3 + v];
                if k == T::zero() {
                    continue;
                }
                let (j0, j1) = valid_range(v, wd);
                for i in i0..i1 {
                    let src = (i + u - 1) * wd;
                    let dst = i * wd;
                    for j in j0..j1 {
                        op[dst + j] = op[dst + j] + k * xp[src + j + v - 1];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, wd], out)
}

/// Output index range `[lo, hi)` for which `idx + tap - 1` stays in `[0, n)`.
fn valid_range(tap: usize, n: usize) -> (usize, usize) {
    match tap {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// 1x1 pointwise convolution with weight `(Cout, Cin)`, no bias.
pub fn pw_conv1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, h, wd) = x.chw()?;
    let cout = match w.shape() {
        [o, i] => {
            expect_channels("pw_conv1", *i, cin)?;
            *o
        }
        s => {
            return Err(TensorError::Shape(format!(
                "pw_conv1 kernel must be (Cout, Cin), got {:?}",
                s
            )))
        }
    };
    let plane = h * wd;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); cout * plane];
    for (o, row) in out.chunks_exact_mut(plane).enumerate() {
        for c in 0..cin {
            let k = ws[o * cin + c];
            if k == T::zero() {
                continue;
            }
            for (dst, &src) in row.iter_mut().zip(&xs[c * plane..(c + 1) * plane]) {
                *dst = *dst + k * src;
            }
        }
    }
    Tensor::new(&[cout, h, wd], out)
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    p.validate(c, eps)?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for (ch, row) in out.chunks_exact_mut(plane).enumerate() {
        let inv = (p.var[ch] + eps).sqrt();
        for v in row.iter_mut() {
            *v = p.gamma[ch] * (*v - p.mean[ch]) / inv + p.beta[ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

fn even_spatial(op: &str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(TensorError::Shape(format!(
            "{} needs even spatial dims, got {}x{}",
            op, h, w
        )));
    }
    Ok(())
}

/// 2x2 max-pooling with stride 2.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    even_spatial("maxpool2", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            let r0 = base + 2 * i * w;
            let r1 = r0 + w;
            for j in 0..ow {
                let m = xs[r0 + 2 * j]
                    .max(xs[r0 + 2 * j + 1])
                    .max(xs[r1 + 2 * j])
                    .max(xs[r1 + 2 * j + 1]);
                out.push(m);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Moves every 2x2 spatial block into four channels: output channel `4c + k`
/// at `(i, j)` holds input `(c, 2i + k / 2, 2j + k % 2)`.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    even_spatial("space_to_depth", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for k in 0..4 {
            let (di, dj) = (k / 2, k % 2);
            let dst = &mut out[(4 * ch + k) * oh * ow..(4 * ch + k + 1) * oh * ow];
            for i in 0..oh {
                let src = (ch * h + 2 * i + di) * w + dj;
                for j in 0..ow {
                    dst[i * ow + j] = xs[src + 2 * j];
                }
            }
        }
    }
    Tensor::new(&[4 * c, oh, ow], out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c4, h, w) = x.chw()?;
    if c4 % 4 != 0 {
        return Err(TensorError::Shape(format!(
            "depth_to_space needs a channel count divisible by 4, got {}",
            c4
        )));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![T::zero(); c4 * h * w];
    for ch in 0..c {
        for k in 0..4 {
            let (di, dj) = (k / 2, k % 2);
            let src = &xs[(4 * ch + k) * h * w..(4 * ch + k + 1) * h * w];
            for i in 0..h {
                let dst = (ch * oh + 2 * i + di) * ow + dj;
                for j in 0..w {
                    out[dst + 2 * j] = src[i * w + j];
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(TensorError::Shape(format!(
            "concat_channels spatial mismatch: {}x{} vs {}x{}",
            ha, wa, hb, wb
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a.data());
    out.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], out)
}
