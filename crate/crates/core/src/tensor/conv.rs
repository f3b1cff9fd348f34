//! 3×3 / stride 1 / zero-pad 1 convolution kernels over flat NCHW buffers.

pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn new(input_shape: &[usize], c_out: usize) -> Self {
        Self {
            batch: input_shape[0],
            c_in: input_shape[1],
            c_out,
            h: input_shape[2],
            w: input_shape[3],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h, self.w]
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Valid output-row range and input-row offset for kernel row `k`.
    fn span(len: usize, k: usize) -> (usize, usize) {
        // input index = out + k - 1
        let lo = if k == 0 { 1 } else { 0 };
        let hi = if k == 2 { len - 1 } else { len };
        (lo, hi)
    }
}

/// Iterates `(out_offset, in_offset, run)` contiguous row runs that pair
/// output pixels with input pixels shifted by kernel tap `(ky, kx)`.
fn for_each_run(g: &Geometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (y0, y1) = Geometry::span(g.h, ky);
    let (x0, x1) = Geometry::span(g.w, kx);
    if x1 <= x0 {
        return;
    }
    let run = x1 - x0;
    for y in y0..y1 {
        let iy = y + ky - 1;
        let ix0 = x0 + kx - 1;
        f(y * g.w + x0, iy * g.w + ix0, run);
    }
}

pub(crate) fn forward(g: &Geometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.plane();
    let mut out = vec![0.0; g.batch * g.c_out * plane];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            if let Some(b) = bias {
                dst.fill(b[co]);
            }
            for ci in 0..g.c_in {
                let src = &input[(n * g.c_in + ci) * plane..(n * g.c_in + ci + 1) * plane];
                let kbase = (co * g.c_in + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[kbase + ky * 3 + kx];
                        for_each_run(g, ky, kx, |o, i, run| {
                            for (d, s) in dst[o..o + run].iter_mut().zip(&src[i..i + run]) {
                                *d += wv * s;
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(g: &Geometry, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let mut gin = vec![0.0; g.batch * g.c_in * plane];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            for ci in 0..g.c_in {
                let dst = &mut gin[(n * g.c_in + ci) * plane..(n * g.c_in + ci + 1) * plane];
                let kbase = (co * g.c_in + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[kbase + ky * 3 + kx];
                        for_each_run(g, ky, kx, |o, i, run| {
                            for (d, s) in dst[i..i + run].iter_mut().zip(&go[o..o + run]) {
                                *d += wv * s;
                            }
                        });
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn backward_weight(g: &Geometry, grad_out: &[f64], input: &[f64], gw: &mut [f64]) {
    let plane = g.plane();
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane];
            for ci in 0..g.c_in {
                let src = &input[(n * g.c_in + ci) * plane..(n * g.c_in + ci + 1) * plane];
                let kbase = (co * g.c_in + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for_each_run(g, ky, kx, |o, i, run| {
                            acc += go[o..o + run]
                                .iter()
                                .zip(&src[i..i + run])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        });
                        gw[kbase + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_bias(g: &Geometry, grad_out: &[f64], gb: &mut [f64]) {
    let plane = g.plane();
    for n in 0..g.batch {
        for co in 0..g.c_out {
            gb[co] += grad_out[(n * g.c_out + co) * plane..(n * g.c_out + co + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit bounds checks.
    fn naive(g: &Geometry, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.h * g.w];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for y in 0..g.h {
                    for x in 0..g.w {
                        let mut acc = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = x as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += weight[((co * g.c_in + ci) * 3 + ky) * 3 + kx]
                                        * input[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.h + y) * g.w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_definition() {
        let g = Geometry::new(&[2, 3, 5, 4], 2);
        let input: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.75).collect();
        assert_eq!(forward(&g, &input, &weight, None), naive(&g, &input, &weight));
    }

    #[test]
    fn single_pixel_image() {
        let g = Geometry::new(&[1, 1, 1, 1], 1);
        let w: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(forward(&g, &[2.0], &w, Some(&[1.0])), vec![9.0]);
    }
}
