use crate::error::{shape_err, Error, Result};
use crate::geometry::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor4, Layout4};

fn check(
    geo: &ConvGeometry,
    x: &DenseTensor4<impl Scalar>,
    w: &DenseTensor4<impl Scalar>,
) -> Result<()> {
    geo.validate()?;
    if x.logical_dims() != geo.input_dims() {
        return Err(shape_err(format!("input {:?} vs geometry {:?}", x.logical_dims(), geo.input_dims())));
    }
    if w.layout() != Layout4::Bicmn || w.dims() != geo.weight_dims() {
        return Err(Error::Geometry(format!("weights {:?} vs geometry {:?}", w.dims(), geo.weight_dims())));
    }
    Ok(())
}

/// Reads `X[b, c, r, s]` with `r, s` shifted by the padding; outside reads 0.
#[inline]
fn padded<T: Scalar>(x: &DenseTensor4<T>, geo: &ConvGeometry, b: usize, c: usize, r: usize, s: usize) -> T {
    if r < geo.pad || s < geo.pad || r - geo.pad >= geo.m || s - geo.pad >= geo.n {
        T::zero()
    } else {
        x.at(b, c, r - geo.pad, s - geo.pad)
    }
}

/// `O[b,oc,p,q] = Σ W[oc,ic,i,j]·X[b,ic,p+i−pad,q+j−pad]`, output in `Bicmn`.
pub fn dense_conv_forward<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &DenseTensor4<T>,
    geo: &ConvGeometry,
) -> Result<DenseTensor4<T>> {
    check(geo, x, w)?;
    let (om, on, k) = (geo.om(), geo.on(), geo.k);
    let mut o = DenseTensor4::zeros(geo.output_dims(), Layout4::Bicmn);
    for b in 0..geo.b {
        for oc in 0..geo.oc {
            for p in 0..om {
                for q in 0..on {
                    let mut acc = T::zero();
                    for ic in 0..geo.ic {
                        for i in 0..k {
                            for j in 0..k {
                                acc += w.get([oc, ic, i, j]) * padded(x, geo, b, ic, p + i, q + j);
                            }
                        }
                    }
                    o.set([b, oc, p, q], acc);
                }
            }
        }
    }
    Ok(o)
}

/// Returns `(dX, dW)`; `dX` in `Bicmn`, `dW` as `(OC, IC, K, K)`.
///
/// `dX[b,ic,m,n]` gathers every output position whose receptive field covers
/// `(m, n)`: `p = m + pad − i` and `q = n + pad − j` for each kernel offset,
/// kept only when `(p, q)` is a valid output coordinate.
pub fn dense_conv_backward<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &DenseTensor4<T>,
    d_out: &DenseTensor4<T>,
    geo: &ConvGeometry,
) -> Result<(DenseTensor4<T>, DenseTensor4<T>)> {
    check(geo, x, w)?;
    if d_out.logical_dims() != geo.output_dims() {
        return Err(shape_err(format!("dO {:?} vs geometry {:?}", d_out.logical_dims(), geo.output_dims())));
    }
    let (om, on, k, pad) = (geo.om(), geo.on(), geo.k, geo.pad);

    let mut dx = DenseTensor4::zeros(geo.input_dims(), Layout4::Bicmn);
    for b in 0..geo.b {
        for ic in 0..geo.ic {
            for m in 0..geo.m {
                for n in 0..geo.n {
                    let mut acc = T::zero();
                    for oc in 0..geo.oc {
                        for i in 0..k {
                            let Some(p) = (m + pad).checked_sub(i).filter(|&p| p < om) else { continue };
                            for j in 0..k {
                                let Some(q) = (n + pad).checked_sub(j).filter(|&q| q < on) else { continue };
                                acc += d_out.at(b, oc, p, q) * w.get([oc, ic, i, j]);
                            }
                        }
                    }
                    dx.set([b, ic, m, n], acc);
                }
            }
        }
    }

    let mut dw = DenseTensor4::zeros(geo.weight_dims(), Layout4::Bicmn);
    for oc in 0..geo.oc {
        for ic in 0..geo.ic {
            for i in 0..k {
                for j in 0..k {
                    let mut acc = T::zero();
                    for b in 0..geo.b {
                        for p in 0..om {
                            for q in 0..on {
                                acc += d_out.at(b, oc, p, q) * padded(x, geo, b, ic, p + i, q + j);
                            }
                        }
                    }
                    dw.set([oc, ic, i, j], acc);
                }
            }
        }
    }
    Ok((dx, dw))
}
