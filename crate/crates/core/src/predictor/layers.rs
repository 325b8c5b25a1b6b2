//! Channel-major 2D feature maps and the forward/backward kernels the slice
//! network is built from.

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Location of one convolution's weights `[out][in][k][k]` and biases
/// `[out]` inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayout {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel * self.kernel
    }
}

/// Valid output rows/cols for tap offset `d` (in `-r..=r`) with zero padding.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)) as usize;
    (lo, hi.max(lo))
}

/// Same-padded stride-1 convolution.
pub fn conv_forward(layout: &ConvLayout, params: &[f64], input: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(input.channels, layout.in_channels);
    let (h, w) = (input.height, input.width);
    let k = layout.kernel;
    let r = (k / 2) as isize;
    let weights = &params[layout.weight_offset..layout.weight_offset + layout.weight_len()];
    let bias = &params[layout.bias_offset..layout.bias_offset + layout.out_channels];
    let mut out = FeatureMap::zeros(layout.out_channels, h, w);
    for o in 0..layout.out_channels {
        let dst = out.plane_mut(o);
        dst.fill(bias[o]);
        for i in 0..layout.in_channels {
            let src = input.plane(i);
            let taps = &weights[(o * layout.in_channels + i) * k * k..][..k * k];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = span(dy, h);
                for kx in 0..k {
                    let wv = taps[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - r;
                    let (x0, x1) = span(dx, w);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grads` and, when requested,
/// returns the gradient with respect to the input.
pub fn conv_backward(
    layout: &ConvLayout,
    params: &[f64],
    input: &FeatureMap,
    grad_out: &FeatureMap,
    grads: &mut [f64],
    want_input_grad: bool,
) -> Option<FeatureMap> {
    let (h, w) = (input.height, input.width);
    let k = layout.kernel;
    let r = (k / 2) as isize;
    let mut grad_in = want_input_grad.then(|| FeatureMap::zeros(layout.in_channels, h, w));
    for o in 0..layout.out_channels {
        let g = grad_out.plane(o);
        grads[layout.bias_offset + o] += g.iter().sum::<f64>();
        for i in 0..layout.in_channels {
            let src = input.plane(i);
            let base = (o * layout.in_channels + i) * k * k;
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = span(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = span(dx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grads[layout.weight_offset + base + ky * k + kx] += acc;

                    if let Some(gi) = grad_in.as_mut() {
                        let wv = params[layout.weight_offset + base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = gi.plane_mut(i);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let gr = &g[y * w + x0..y * w + x1];
                            let d = &mut dst[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (a, b) in d.iter_mut().zip(gr) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// 2x2 mean pooling; height and width must be even.
pub fn avg_pool2(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * input.width + 2 * x;
                dst[y * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + input.width] + src[i + input.width + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad_out.height * 2, grad_out.width * 2);
    let mut out = FeatureMap::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let g = grad_out.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * grad_out.width + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * input.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut out = FeatureMap::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let g = grad_out.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                dst[(y / 2) * w + x / 2] += g[y * grad_out.width + x];
            }
        }
    }
    out
}

pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

/// Splits a gradient of a concatenation back into its two parts.
pub fn split(g: &FeatureMap, first_channels: usize) -> (FeatureMap, FeatureMap) {
    let n = first_channels * g.height * g.width;
    (
        FeatureMap {
            channels: first_channels,
            height: g.height,
            width: g.width,
            data: g.data[..n].to_vec(),
        },
        FeatureMap {
            channels: g.channels - first_channels,
            height: g.height,
            width: g.width,
            data: g.data[n..].to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(layout: &ConvLayout, params: &[f64], input: &FeatureMap) -> FeatureMap {
        let k = layout.kernel as isize;
        let r = k / 2;
        let (h, w) = (input.height as isize, input.width as isize);
        let mut out = FeatureMap::zeros(layout.out_channels, input.height, input.width);
        for o in 0..layout.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = params[layout.bias_offset + o];
                    for i in 0..layout.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - r, x + kx - r);
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let wi = layout.weight_offset
                                    + ((o * layout.in_channels + i) * layout.kernel + ky as usize) * layout.kernel
                                    + kx as usize;
                                acc += params[wi] * input.plane(i)[(sy * w + sx) as usize];
                            }
                        }
                    }
                    out.plane_mut(o)[(y * w + x) as usize] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n as u64)
            .map(|i| {
                let v = (i
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(salt * 1442695040888963407))
                    >> 33;
                (v % 1000) as f64 / 500.0 - 1.0
            })
            .collect()
    }

    fn layout(cin: usize, cout: usize, k: usize) -> ConvLayout {
        ConvLayout {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            weight_offset: 0,
            bias_offset: cout * cin * k * k,
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        for k in [1, 3] {
            let l = layout(3, 4, k);
            let params = pseudo(l.weight_len() + 4, 1);
            let input = FeatureMap {
                channels: 3,
                height: 5,
                width: 6,
                data: pseudo(90, 2),
            };
            let a = conv_forward(&l, &params, &input);
            let b = naive_conv(&l, &params, &input);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and in w, so its gradients are exact.
        let l = layout(2, 3, 3);
        let params = pseudo(l.weight_len() + 3, 3);
        let input = FeatureMap {
            channels: 2,
            height: 4,
            width: 5,
            data: pseudo(40, 4),
        };
        let g = FeatureMap {
            channels: 3,
            height: 4,
            width: 5,
            data: pseudo(60, 5),
        };
        let dot = |p: &[f64], x: &FeatureMap| -> f64 {
            conv_forward(&l, p, x)
                .data
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = vec![0.0; params.len()];
        let gi = conv_backward(&l, &params, &input, &g, &mut grads, true).unwrap();
        let h = 1e-6;
        for idx in [0, 7, 20, l.weight_len() + 1] {
            let mut p = params.clone();
            p[idx] += h;
            let up = dot(&p, &input);
            p[idx] -= 2.0 * h;
            let down = dot(&p, &input);
            assert!(((up - down) / (2.0 * h) - grads[idx]).abs() < 1e-6);
        }
        for idx in [0, 13, 39] {
            let mut x = input.clone();
            x.data[idx] += h;
            let up = dot(&params, &x);
            x.data[idx] -= 2.0 * h;
            let down = dot(&params, &x);
            assert!(((up - down) / (2.0 * h) - gi.data[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let x = FeatureMap {
            channels: 2,
            height: 4,
            width: 6,
            data: pseudo(48, 6),
        };
        let g = FeatureMap {
            channels: 2,
            height: 2,
            width: 3,
            data: pseudo(12, 7),
        };
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&avg_pool2_backward(&g).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = upsample2(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .data
            .iter()
            .zip(&upsample2_backward(&x).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = FeatureMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let b = FeatureMap {
            channels: 2,
            height: 2,
            width: 2,
            data: pseudo(8, 8),
        };
        let (x, y) = split(&concat(&a, &b), 1);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn elu_is_continuous_with_continuous_slope() {
        assert_eq!(elu(0.0), 0.0);
        assert!((elu(-1e-9) + 1e-9).abs() < 1e-15);
        assert_eq!(elu_grad(1e-12), 1.0);
        assert!((elu_grad(-1e-12) - 1.0).abs() < 1e-11);
    }
}
