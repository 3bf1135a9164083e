//! Dense channel-major tensors and the handful of kernels the runtime needs.

use crate::error::{Error, Result};

/// A `channels × height × width` block of `f32`, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite tensor value {v}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of spatial positions, `height × width`.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The channel vector at flat spatial index `pos`.
    pub fn pixel(&self, pos: usize) -> Vec<f32> {
        let plane = self.plane();
        (0..self.channels)
            .map(|c| self.data[c * plane + pos])
            .collect()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Weights and bias of a stride-1, "same"-padded square convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvParams {
    /// `weight` is laid out `out × in × k × k`.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {kernel} must be odd")));
        }
        if weight.len() != out_channels * in_channels * kernel * kernel {
            return Err(Error::config(format!(
                "weight length {} does not match {out_channels}x{in_channels}x{kernel}x{kernel}",
                weight.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "bias length {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weight,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::config(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    /// Computes every output channel at `(y, x)` into `out`.
    ///
    /// This is the only place convolution arithmetic happens, so dense and
    /// masked execution agree bitwise. Sums run in `f64` in the fixed order
    /// input channel, kernel row, kernel column; the bias is added last.
    pub(crate) fn apply_at(&self, input: &Tensor, y: usize, x: usize, out: &mut [f32]) {
        let k = self.kernel;
        let r = (k / 2) as isize;
        let (h, w) = (input.height() as isize, input.width() as isize);
        let src = input.data();
        let plane = input.plane();
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..self.in_channels {
                let wbase = (o * self.in_channels + i) * k * k;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let row = i * plane + sy as usize * input.width();
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - r;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        acc +=
                            self.weight[wbase + dy * k + dx] as f64 * src[row + sx as usize] as f64;
                    }
                }
            }
            *slot = (acc + self.bias[o] as f64) as f32;
        }
    }
}

/// Dense stride-1 convolution with zero padding of `(k - 1) / 2`.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    params.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let plane = h * w;
    let mut out = Tensor::zeros(params.out_channels(), h, w);
    let mut buf = vec![0.0f32; params.out_channels()];
    for y in 0..h {
        for x in 0..w {
            params.apply_at(input, y, x, &mut buf);
            let pos = y * w + x;
            for (o, v) in buf.iter().enumerate() {
                out.data[o * plane + pos] = *v;
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        // `max` would keep -0.0; positive zero is wanted here.
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let plane = logits.plane();
    let k = logits.channels();
    let mut out = Tensor::zeros(k, logits.height(), logits.width());
    let mut exps = vec![0.0f64; k];
    for pos in 0..plane {
        let max = (0..k)
            .map(|c| logits.data[c * plane + pos])
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for (c, e) in exps.iter_mut().enumerate() {
            *e = (logits.data[c * plane + pos] as f64 - max).exp();
            sum += *e;
        }
        for (c, e) in exps.iter().enumerate() {
            out.data[c * plane + pos] = (e / sum) as f32;
        }
    }
    out
}

/// Index of the largest channel per pixel (lowest index on ties) and its value.
pub fn argmax_channels(probs: &Tensor) -> (Vec<usize>, Vec<f32>) {
    let plane = probs.plane();
    let mut classes = vec![0usize; plane];
    let mut conf = vec![0.0f32; plane];
    for pos in 0..plane {
        let (best, value) = argmax_at(probs, pos);
        classes[pos] = best;
        conf[pos] = value;
    }
    (classes, conf)
}

#[inline]
pub(crate) fn argmax_at(t: &Tensor, pos: usize) -> (usize, f32) {
    let plane = t.plane();
    let mut best = 0;
    let mut value = t.data[pos];
    for c in 1..t.channels() {
        let v = t.data[c * plane + pos];
        if v > value {
            best = c;
            value = v;
        }
    }
    (best, value)
}

/// Argmax of a plain slice with the same tie-break as [`argmax_channels`].
pub fn argmax_slice(values: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(c: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::new(c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_affine() {
        let p = ConvParams::new(1, 1, 1, vec![2.0], vec![1.0]).unwrap();
        let out = conv2d(&t(1, 1, 1, &[5.0]), &p).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::from_fn(1, 3, 4, |_, y, x| (y * 4 + x) as f32 - 3.5);
        let p = ConvParams::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn conv_ones_with_zero_padding() {
        let input = t(1, 3, 3, &[1.0; 9]);
        let p = ConvParams::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.get(0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 1), 6.0);
        assert_eq!(out.get(0, 1, 0), 6.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
        assert_eq!(out.get(0, 2, 2), 4.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let p = ConvParams::new(1, 2, 1, vec![1.0, 1.0], vec![0.0]).unwrap();
        assert!(matches!(
            conv2d(&t(1, 1, 1, &[1.0]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_params_validation() {
        assert!(ConvParams::new(1, 1, 2, vec![0.0; 4], vec![0.0]).is_err());
        assert!(ConvParams::new(2, 1, 1, vec![0.0; 2], vec![0.0]).is_err());
        assert!(ConvParams::new(2, 1, 1, vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite_and_bad_length() {
        assert!(Tensor::new(1, 1, 2, vec![0.0]).is_err());
        assert!(Tensor::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(
            relu(&t(1, 1, 3, &[-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        let pos = t(1, 1, 3, &[0.0, 1.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let z = relu(&t(1, 1, 1, &[-0.0]));
        assert_eq!(z.data()[0], 0.0);
        assert!(z.data()[0].is_sign_positive());
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_channels(&t(2, 1, 1, &[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_channels(&t(2, 1, 1, &[3f32.ln(), 0.0]));
        assert!((s.data()[0] - 0.75).abs() < 1e-6);
        assert!((s.data()[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn argmax_cases() {
        let (c, v) = argmax_channels(&t(3, 1, 1, &[0.1, 0.7, 0.2]));
        assert_eq!((c[0], v[0]), (1, 0.7));
        let (c, _) = argmax_channels(&t(2, 1, 1, &[0.5, 0.5]));
        assert_eq!(c[0], 0);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(7);
        let input = Tensor::from_fn(4, 3, 3, |_, _, _| rng.random::<f32>());
        let (classes, conf) = argmax_channels(&input);
        for y in 0..3 {
            for x in 0..3 {
                let mut best = 0;
                for c in 0..4 {
                    if input.get(c, y, x) > input.get(best, y, x) {
                        best = c;
                    }
                }
                assert_eq!(classes[y * 3 + x], best);
                assert_eq!(conf[y * 3 + x], input.get(best, y, x));
            }
        }
    }

    fn small_tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f32..2.0, c * h * w)
            .prop_map(move |d| Tensor::new(c, h, w, d).unwrap())
    }

    proptest! {
        #[test]
        fn conv_is_affine(
            x in small_tensor(2, 4, 5),
            y in small_tensor(2, 4, 5),
            w in prop::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
            b in prop::collection::vec(-1.0f32..1.0, 3),
            a in -2.0f32..2.0,
            c in -2.0f32..2.0,
        ) {
            let p = ConvParams::new(3, 2, 3, w, b.clone()).unwrap();
            let mixed = Tensor::new(2, 4, 5, x.data().iter().zip(y.data()).map(|(u, v)| a * u + c * v).collect()).unwrap();
            let lhs = conv2d(&mixed, &p).unwrap();
            let cx = conv2d(&x, &p).unwrap();
            let cy = conv2d(&y, &p).unwrap();
            let plane = 20;
            for (idx, v) in lhs.data().iter().enumerate() {
                let bias = b[idx / plane];
                let rhs = a * cx.data()[idx] + c * cy.data()[idx] - (a + c - 1.0) * bias;
                prop_assert!((v - rhs).abs() < 1e-4, "{v} vs {rhs}");
            }
        }

        #[test]
        fn softmax_is_distribution(logits in small_tensor(4, 3, 3), shift in -50.0f32..50.0) {
            let s = softmax_channels(&logits);
            for pos in 0..9 {
                let px = s.pixel(pos);
                let sum: f32 = px.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let shifted = Tensor::new(4, 3, 3, logits.data().iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax_channels(&shifted);
            for (u, v) in s.data().iter().zip(s2.data()) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_preserves_argmax(logits in small_tensor(5, 2, 3)) {
            let (raw, _) = argmax_channels(&logits);
            let (soft, _) = argmax_channels(&softmax_channels(&logits));
            for pos in 0..6 {
                let px = logits.pixel(pos);
                let top = px[raw[pos]];
                let ties = px.iter().filter(|v| **v == top).count();
                // Near-ties may collapse to equal probabilities in f32.
                let mut sorted = px.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if ties == 1 && sorted[0] - sorted[1] > 1e-5 {
                    prop_assert_eq!(raw[pos], soft[pos]);
                }
            }
        }
    }
}
