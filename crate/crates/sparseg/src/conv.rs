//! Grouped, dilated 2-D convolution (cross-correlation) and its exact adjoint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Configuration and parameters of one convolution layer.
///
/// `weights` has dims `(out_channels, in_channels/groups, k_h, k_w)`;
/// `bias` has one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    /// Zero-initialized parameters for the given configuration.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
    ) -> Result<ConvParams> {
        if out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Param("conv sizes must be positive".into()));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Param(format!(
                "groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}"
            )));
        }
        Ok(ConvParams {
            out_channels,
            kernel,
            stride,
            dilation,
            groups,
            padding,
            weights: Tensor::zeros(out_channels, in_channels / groups, kernel.0, kernel.1),
            bias: vec![0.0; out_channels],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.c() * self.groups
    }

    /// Effective kernel extent with dilation: `dilation*(k-1)+1`.
    pub fn kernel_extent(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    /// Output spatial dims for the given input spatial dims.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (keh, kew) = self.kernel_extent();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if keh > ph || kew > pw {
            return Err(Error::Param(format!(
                "kernel extent {keh}x{kew} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - keh) / self.stride + 1, (pw - kew) / self.stride + 1))
    }

    fn validate_input(&self, input: &Tensor) -> Result<()> {
        if input.c() != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.c()
            )));
        }
        if self.weights.dims()
            != (self.out_channels, self.in_channels() / self.groups, self.kernel.0, self.kernel.1)
        {
            return Err(Error::Shape("conv weight dims inconsistent with config".into()));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::Shape("conv bias length != out_channels".into()));
        }
        Ok(())
    }
}

/// Grouped, dilated cross-correlation plus bias.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_impl(input, p, &mut 0u64)
}

/// Same as [`conv2d`] but counts one multiply-add per kernel tap per output
/// value, including taps that fall in the zero padding. This is the
/// brute-force counter the cost model is checked against.
pub fn conv2d_counted(input: &Tensor, p: &ConvParams, macs: &mut u64) -> Result<Tensor> {
    conv2d_impl(input, p, macs)
}

fn conv2d_impl(input: &Tensor, p: &ConvParams, macs: &mut u64) -> Result<Tensor> {
    p.validate_input(input)?;
    let (n, c_in, h, w) = input.dims();
    let (oh, ow) = p.out_dims(h, w)?;
    let cpg_in = c_in / p.groups;
    let cpg_out = p.out_channels / p.groups;
    let (kh, kw) = p.kernel;
    let mut out = Tensor::zeros(n, p.out_channels, oh, ow);
    for i in 0..n {
        for oc in 0..p.out_channels {
            let g = oc / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias[oc];
                    let base_y = (oy * p.stride) as isize - p.padding as isize;
                    let base_x = (ox * p.stride) as isize - p.padding as isize;
                    for ic in 0..cpg_in {
                        let in_ch = g * cpg_in + ic;
                        for ky in 0..kh {
                            let sy = base_y + (ky * p.dilation) as isize;
                            for kx in 0..kw {
                                let sx = base_x + (kx * p.dilation) as isize;
                                *macs += 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += input.at(i, in_ch, sy as usize, sx as usize)
                                        * p.weights.at(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(i, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `<out_grad, conv2d(input, p)>` w.r.t. the input,
/// the weights and the bias.
pub fn conv2d_adjoint(
    input: &Tensor,
    p: &ConvParams,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    p.validate_input(input)?;
    let (n, c_in, h, w) = input.dims();
    let (oh, ow) = p.out_dims(h, w)?;
    if out_grad.dims() != (n, p.out_channels, oh, ow) {
        return Err(Error::Shape(format!(
            "out_grad dims {:?} do not match conv output ({n},{},{oh},{ow})",
            out_grad.dims(),
            p.out_channels
        )));
    }
    let cpg_in = c_in / p.groups;
    let cpg_out = p.out_channels / p.groups;
    let (kh, kw) = p.kernel;
    let mut input_grad = Tensor::zeros(n, c_in, h, w);
    let mut weight_grad = Tensor::zeros(p.out_channels, cpg_in, kh, kw);
    let mut bias_grad = vec![0.0; p.out_channels];
    for i in 0..n {
        for oc in 0..p.out_channels {
            let g = oc / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = out_grad.at(i, oc, oy, ox);
                    bias_grad[oc] += go;
                    let base_y = (oy * p.stride) as isize - p.padding as isize;
                    let base_x = (ox * p.stride) as isize - p.padding as isize;
                    for ic in 0..cpg_in {
                        let in_ch = g * cpg_in + ic;
                        for ky in 0..kh {
                            let sy = base_y + (ky * p.dilation) as isize;
                            if sy < 0 || sy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = base_x + (kx * p.dilation) as isize;
                                if sx < 0 || sx as usize >= w {
                                    continue;
                                }
                                let ii = input_grad.idx(i, in_ch, sy as usize, sx as usize);
                                input_grad.data_mut()[ii] += go * p.weights.at(oc, ic, ky, kx);
                                let wi = weight_grad.idx(oc, ic, ky, kx);
                                weight_grad.data_mut()[wi] +=
                                    go * input.at(i, in_ch, sy as usize, sx as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((input_grad, weight_grad, bias_grad))
}
