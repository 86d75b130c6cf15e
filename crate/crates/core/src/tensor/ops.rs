//! Differentiable operations on [`Tape`].
//!
//! Each op pushes one node whose backward closure captures `Arc` clones of
//! whatever values it needs, so the reverse sweep never re-borrows the tape.

use super::{scalar_arr, Arr, Tape, Var};
use ndarray::{concatenate, Array1, Array2, Array3, ArrayView3, Axis, Ix2, Ix3, IxDyn};

fn same_shape(a: &Arr, b: &Arr, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

impl Tape {
    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "add");
        let out = &*va + &*vb;
        self.push(out, vec![a, b], Some(Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "sub");
        let out = &*va - &*vb;
        self.push(out, vec![a, b], Some(Box::new(|g| vec![g.clone(), -g])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "mul");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &*vb, g * &*va])),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(&va, &vb, "div");
        let out = &*va / &*vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = g / &*vb;
                let gb = -(g * &*va) / (&*vb * &*vb);
                vec![ga, gb]
            })),
        )
    }

    /// Elementwise product with a non-differentiated constant.
    pub fn mul_const(&self, a: Var, c: &Arr) -> Var {
        let va = self.value(a);
        same_shape(&va, c, "mul_const");
        let out = &*va * c;
        let c = c.clone();
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * &c])))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = &*self.value(a) + s;
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let out = &*self.value(a) * s;
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * s])))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(sigmoid);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &s| *d *= s * (1.0 - s));
                vec![dx]
            })),
        )
    }

    /// Natural log; caller is responsible for positive inputs (clamp first).
    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::ln);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g / &*va])),
        )
    }

    /// `a^p` for positive `a`.
    pub fn pow_const(&self, a: Var, p: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.powf(p));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = va.mapv(|x| p * x.powf(p - 1.0));
                dx *= g;
                vec![dx]
            })),
        )
    }

    /// Clamp with zero gradient outside `(lo, hi)`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.clamp(lo, hi));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= lo || x >= hi {
                        *d = 0.0;
                    }
                });
                vec![dx]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = scalar_arr(va.sum());
        let dim = va.raw_dim();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Arr::from_elem(dim.clone(), g[[0]])]
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let out = scalar_arr(va.sum() / n);
        let dim = va.raw_dim();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Arr::from_elem(dim.clone(), g[[0]] / n)]
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a2 = as2(&va);
        let b2 = as2(&vb);
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&vb).t()).into_dyn();
                let db = as2(&va).t().dot(&g2).into_dyn();
                vec![da, db]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = as2(&va).t().to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(|g| vec![as2(g).t().to_owned().into_dyn()])),
        )
    }

    // ---- structure ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old: Vec<usize> = va.shape().to_vec();
        let out = va
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward")]
            })),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut start = 0;
                for &len in &lens {
                    grads.push(
                        g.slice_axis(Axis(axis), (start..start + len).into())
                            .to_owned(),
                    );
                    start += len;
                }
                grads
            })),
        )
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let out = va
            .slice_axis(Axis(axis), (start..start + len).into())
            .to_owned();
        let dim = va.raw_dim();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(dim.clone());
                dx.slice_axis_mut(Axis(axis), (start..start + len).into())
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// Row gather on a 2-D array; duplicate indices accumulate on backward.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let m = a2.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), m));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&a2.row(i));
        }
        let idx = idx.to_vec();
        let n = a2.nrows();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros((n, m));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g2.row(r);
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// `x[n,m] + v[m]` broadcast over rows (linear-layer bias).
    pub fn add_vec_to_rows(&self, x: Var, v: Var) -> Var {
        let vx = self.value(x);
        let vv = self.value(v);
        let x2 = as2(&vx);
        let v1 = vv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&x2 + &v1).into_dyn();
        self.push(
            out,
            vec![x, v],
            Some(Box::new(|g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// `x[n,m] + v[n]` broadcast over columns (per-row bias).
    pub fn add_vec_to_cols(&self, x: Var, v: Var) -> Var {
        let vx = self.value(x);
        let vv = self.value(v);
        let x2 = as2(&vx);
        let v1 = vv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let n = x2.nrows();
        let vcol = v1.to_owned().into_shape_with_order((n, 1)).unwrap();
        let out = (&x2 + &vcol).into_dyn();
        self.push(
            out,
            vec![x, v],
            Some(Box::new(|g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(1)).into_dyn()]
            })),
        )
    }

    // ---- normalization / attention ----

    /// Row-wise softmax on `[n,m]`.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = out.clone();
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut dx = g2.to_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gi, &yi)| gi * yi)
                        .sum::<f64>();
                    for (d, &yi) in drow.iter_mut().zip(yrow.iter()) {
                        *d = yi * (*d - dot);
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Row-wise layer normalization on `[n,d]` with per-column affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let x2 = as2(&vx);
        let d = x2.ncols() as f64;
        let mut xhat = x2.to_owned();
        let mut inv_sigma = Vec::with_capacity(x2.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma.push(is);
            row.mapv_inplace(|v| (v - mu) * is);
        }
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&xhat * &g1 + &b1).into_dyn();
        let xhat_s = xhat.clone();
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let gamma1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                for (r, grow) in g2.rows().into_iter().enumerate() {
                    let xrow = xhat_s.row(r);
                    let a: Vec<f64> = grow
                        .iter()
                        .zip(gamma1.iter())
                        .map(|(&gi, &gm)| gi * gm)
                        .collect();
                    let m1 = a.iter().sum::<f64>() / d;
                    let m2 = a
                        .iter()
                        .zip(xrow.iter())
                        .map(|(&ai, &xi)| ai * xi)
                        .sum::<f64>()
                        / d;
                    let is = inv_sigma[r];
                    for (c, dxc) in dx.row_mut(r).iter_mut().enumerate() {
                        *dxc = (a[c] - m1 - xrow[c] * m2) * is;
                    }
                }
                let dgamma = (&g2 * &xhat_s).sum_axis(Axis(0)).into_dyn();
                let dbeta = g2.sum_axis(Axis(0)).into_dyn();
                vec![dx.into_dyn(), dgamma, dbeta]
            })),
        )
    }

    /// Group normalization on `[c,h,w]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let x3 = as3(&vx);
        let (c, h, w) = x3.dim();
        assert!(c % groups == 0, "group_norm: channels not divisible");
        let per = c / groups;
        let n = (per * h * w) as f64;
        let mut xhat = x3.to_owned();
        let mut inv_sigma = vec![0.0; groups];
        for gi in 0..groups {
            let mut block = xhat.slice_mut(ndarray::s![gi * per..(gi + 1) * per, .., ..]);
            let mu = block.sum() / n;
            let var = block.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[gi] = is;
            block.mapv_inplace(|v| (v - mu) * is);
        }
        let gm = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bt = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = xhat.clone();
        for ci in 0..c {
            let mut plane = out.slice_mut(ndarray::s![ci, .., ..]);
            plane.mapv_inplace(|v| v * gm[ci] + bt[ci]);
        }
        let xhat_s = xhat;
        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let gamma1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                // a = gamma_c * g, statistics per group
                let mut a = g3.to_owned();
                for ci in 0..c {
                    let mut plane = a.slice_mut(ndarray::s![ci, .., ..]);
                    plane.mapv_inplace(|v| v * gamma1[ci]);
                }
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for gi in 0..groups {
                    let sl = ndarray::s![gi * per..(gi + 1) * per, .., ..];
                    let ab = a.slice(sl);
                    let xb = xhat_s.slice(sl);
                    let m1 = ab.sum() / n;
                    let m2 = (&ab * &xb).sum() / n;
                    let is = inv_sigma[gi];
                    let mut dxb = dx.slice_mut(sl);
                    ndarray::Zip::from(&mut dxb)
                        .and(&ab)
                        .and(&xb)
                        .for_each(|d, &ai, &xi| *d = (ai - m1 - xi * m2) * is);
                }
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gp = g3.slice(ndarray::s![ci, .., ..]);
                    let xp = xhat_s.slice(ndarray::s![ci, .., ..]);
                    dgamma[ci] = (&gp * &xp).sum();
                    dbeta[ci] = gp.sum();
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    // ---- convolution ----

    /// 2-D convolution `[c,h,w] * [o,c,kh,kw] -> [o,h',w']`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let x3 = as3(&vx);
        let wd = vw.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (c_in, h, wid) = x3.dim();
        let (c_out, cw, kh, kw) = wd.dim();
        assert_eq!(c_in, cw, "conv2d: channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let col = im2col(x3, kh, kw, stride, pad, ho, wo);
        let w2 = wd
            .to_owned()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .unwrap();
        let mut y2 = w2.dot(&col);
        if let Some(bv) = b {
            let vb = self.value(bv);
            let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (o, mut row) in y2.rows_mut().into_iter().enumerate() {
                row += b1[o];
            }
        }
        let out = y2.into_shape_with_order((c_out, ho, wo)).unwrap().into_dyn();
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                let w2b = vw
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned()
                    .into_shape_with_order((c_out, c_in * kh * kw))
                    .unwrap();
                let dwflat = g2.dot(&col.t());
                // logical-order copy: dot results with inner dim 1 can be
                // returned in column-major layout
                let dw = Arr::from_shape_vec(
                    IxDyn(&[c_out, c_in, kh, kw]),
                    dwflat.iter().cloned().collect(),
                )
                .unwrap();
                let dcol = w2b.t().dot(&g2);
                let dx = col2im(&dcol, c_in, h, wid, kh, kw, stride, pad, ho, wo).into_dyn();
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(g2.sum_axis(Axis(1)).into_dyn());
                }
                grads
            })),
        )
    }

    // ---- interpolation ----

    /// Bilinear resize of `[c,h,w]` to `(out_h, out_w)`, half-pixel centers.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx);
        let (c, h, w) = x3.dim();
        let out = resize_bilinear_arr(x3, out_h, out_w);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for oy in 0..out_h {
                    let (y0, y1, fy) = resize_coords(h, out_h, oy);
                    for ox in 0..out_w {
                        let (x0, x1, fx) = resize_coords(w, out_w, ox);
                        for ci in 0..c {
                            let gv = g3[[ci, oy, ox]];
                            dx[[ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                            dx[[ci, y0, x1]] += gv * (1.0 - fy) * fx;
                            dx[[ci, y1, x0]] += gv * fy * (1.0 - fx);
                            dx[[ci, y1, x1]] += gv * fy * fx;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of `[c,h,w]`.
    pub fn nearest_up2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx);
        let (c, h, w) = x3.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x3[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[ci, y, xx]] = g3[[ci, 2 * y, 2 * xx]]
                                + g3[[ci, 2 * y, 2 * xx + 1]]
                                + g3[[ci, 2 * y + 1, 2 * xx]]
                                + g3[[ci, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Samples `x[c,h,w]` at `(i + flow[0,i,j], j + flow[1,i,j])` with
    /// bilinear interpolation and edge clamping. Differentiable in both.
    pub fn grid_warp(&self, x: Var, flow: Var) -> Var {
        let vx = self.value(x);
        let vf = self.value(flow);
        let x3 = as3(&vx);
        let f3 = as3(&vf);
        let (c, h, w) = x3.dim();
        assert_eq!(f3.dim(), (2, h, w), "grid_warp: flow must be [2,h,w]");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                let (y0, y1, fy, _) = warp_coords(i as f64 + f3[[0, i, j]], h);
                let (x0, x1, fx, _) = warp_coords(j as f64 + f3[[1, i, j]], w);
                for ci in 0..c {
                    out[[ci, i, j]] = (1.0 - fy) * (1.0 - fx) * x3[[ci, y0, x0]]
                        + (1.0 - fy) * fx * x3[[ci, y0, x1]]
                        + fy * (1.0 - fx) * x3[[ci, y1, x0]]
                        + fy * fx * x3[[ci, y1, x1]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, flow],
            Some(Box::new(move |g| {
                let g3 = as3(g);
                let x3 = as3(&vx);
                let f3 = as3(&vf);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut df = Array3::<f64>::zeros((2, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let (y0, y1, fy, yin) = warp_coords(i as f64 + f3[[0, i, j]], h);
                        let (x0, x1, fx, xin) = warp_coords(j as f64 + f3[[1, i, j]], w);
                        let mut dy = 0.0;
                        let mut dxx = 0.0;
                        for ci in 0..c {
                            let gv = g3[[ci, i, j]];
                            let v00 = x3[[ci, y0, x0]];
                            let v01 = x3[[ci, y0, x1]];
                            let v10 = x3[[ci, y1, x0]];
                            let v11 = x3[[ci, y1, x1]];
                            dx[[ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                            dx[[ci, y0, x1]] += gv * (1.0 - fy) * fx;
                            dx[[ci, y1, x0]] += gv * fy * (1.0 - fx);
                            dx[[ci, y1, x1]] += gv * fy * fx;
                            dy += gv * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                            dxx += gv * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                        }
                        // clamped coordinates hold their boundary value
                        df[[0, i, j]] = if yin { dy } else { 0.0 };
                        df[[1, i, j]] = if xin { dxx } else { 0.0 };
                    }
                }
                vec![dx.into_dyn(), df.into_dyn()]
            })),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-D array")
}

fn as3(a: &Arr) -> ArrayView3<'_, f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected 3-D array")
}

/// Source coordinates for bilinear resize with half-pixel alignment.
pub(crate) fn resize_coords(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

/// Sample coordinates for warping: clamped floor/ceil pair, fraction, and
/// whether the raw position was interior (its flow gradient is live).
fn warp_coords(raw: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let interior = raw > 0.0 && raw < max;
    let s = raw.clamp(0.0, max);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64, interior)
}

/// Plain-array bilinear resize shared by the tape op and inference code.
pub fn resize_bilinear_arr(x: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = resize_coords(h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = resize_coords(w, out_w, ox);
            for ci in 0..c {
                out[[ci, oy, ox]] = (1.0 - fy) * (1.0 - fx) * x[[ci, y0, x0]]
                    + (1.0 - fy) * fx * x[[ci, y0, x1]]
                    + fy * (1.0 - fx) * x[[ci, y1, x0]]
                    + fy * fx * x[[ci, y1, x1]];
            }
        }
    }
    out
}

fn im2col(
    x: ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = dcol.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_grad, max_rel_err, Arr, Tape, Var};
    use ndarray::{Array1, Array2, Array3, Array4, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// FD-checks d(sum of op output)/d(input) for a single-input op.
    fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&Tape, Var) -> Var) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = rand_arr(&mut rng, shape);
        let run = |x: &Arr| {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            let y = f(&t, v);
            let s = t.sum(y);
            (t, v, s)
        };
        let (t, v, s) = run(&x0);
        let grads = t.backward(s);
        let analytic = grads.get(v).unwrap().clone();
        let mut eval = |x: &Arr| {
            let (t, _, s) = run(x);
            t.scalar(s)
        };
        let numeric = finite_diff_grad(&mut eval, &x0, 1e-5);
        assert!(
            max_rel_err(&analytic, &numeric) < 1e-4,
            "unary op gradient mismatch: {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn elementwise_grads() {
        check_unary(&[3, 4], 1, |t, x| t.relu(t.add_scalar(x, 0.3)));
        check_unary(&[3, 4], 2, |t, x| t.sigmoid(x));
        check_unary(&[5], 3, |t, x| t.ln(t.add_scalar(t.sigmoid(x), 0.1)));
        check_unary(&[5], 4, |t, x| t.pow_const(t.add_scalar(t.sigmoid(x), 0.2), 2.7));
        check_unary(&[4, 2], 5, |t, x| {
            let y = t.mul_scalar(x, 0.5);
            t.mul(y, x)
        });
        check_unary(&[6], 6, |t, x| {
            let d = t.add_scalar(t.sigmoid(x), 1.0);
            t.div(x, d)
        });
        check_unary(&[2, 3], 7, |t, x| t.mean(x));
        check_unary(&[7], 8, |t, x| t.clamp(x, -0.9, 0.9));
    }

    #[test]
    fn binary_grads_both_sides() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a0 = rand_arr(&mut rng, &[3, 3]);
        let b0 = rand_arr(&mut rng, &[3, 3]);
        for side in 0..2 {
            let run = |a: &Arr, b: &Arr| {
                let t = Tape::new();
                let va = t.leaf(a.clone());
                let vb = t.leaf(b.clone());
                let y = t.mul(t.sub(va, vb), t.add(va, vb));
                let s = t.sum(y);
                (t, va, vb, s)
            };
            let (t, va, vb, s) = run(&a0, &b0);
            let grads = t.backward(s);
            let analytic = grads.get(if side == 0 { va } else { vb }).unwrap().clone();
            let mut eval = |x: &Arr| {
                let (aa, bb) = if side == 0 { (x, &b0) } else { (&a0, x) };
                let (t, _, _, s) = run(aa, bb);
                t.scalar(s)
            };
            let base = if side == 0 { a0.clone() } else { b0.clone() };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-5);
            assert!(max_rel_err(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn matmul_and_structure_grads() {
        check_unary(&[3, 4], 20, |t, x| {
            let w = t.constant(
                Array2::from_shape_fn((4, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64).into_dyn(),
            );
            t.matmul(x, w)
        });
        check_unary(&[4, 3], 21, |t, x| t.transpose(x));
        check_unary(&[2, 6], 22, |t, x| t.reshape(x, &[3, 4]));
        check_unary(&[5, 3], 23, |t, x| t.narrow(x, 0, 1, 3));
        check_unary(&[4, 3], 24, |t, x| t.gather_rows(x, &[0, 2, 2, 3]));
        check_unary(&[3, 4], 25, |t, x| {
            let a = t.narrow(x, 1, 0, 2);
            let b = t.narrow(x, 1, 2, 2);
            t.concat(1, &[b, a])
        });
        check_unary(&[3, 4], 26, |t, x| t.softmax_rows(x));
    }

    #[test]
    fn bias_broadcast_grads() {
        check_unary(&[4], 30, |t, x| {
            let m = t.constant(Array2::from_elem((3, 4), 0.7).into_dyn());
            t.add_vec_to_rows(m, x)
        });
        check_unary(&[3], 31, |t, x| {
            let m = t.constant(Array2::from_elem((3, 4), -0.4).into_dyn());
            t.add_vec_to_cols(m, x)
        });
    }

    #[test]
    fn norm_grads() {
        // x, gamma, beta all checked through a combined leaf trick: check each in turn
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let x0 = rand_arr(&mut rng, &[3, 6]);
        let g0 = rand_arr(&mut rng, &[6]);
        let b0 = rand_arr(&mut rng, &[6]);
        for target in 0..3 {
            let run = |x: &Arr, g: &Arr, b: &Arr| {
                let t = Tape::new();
                let vx = t.leaf(x.clone());
                let vg = t.leaf(g.clone());
                let vb = t.leaf(b.clone());
                let y = t.layer_norm(vx, vg, vb, 1e-5);
                // weight the output so the gradient is not constant
                let wgt = t.constant(Array2::from_shape_fn((3, 6), |(i, j)| {
                    0.1 + 0.3 * i as f64 - 0.15 * j as f64
                })
                .into_dyn());
                let s = t.sum(t.mul(y, wgt));
                (t, [vx, vg, vb], s)
            };
            let (t, vars, s) = run(&x0, &g0, &b0);
            let grads = t.backward(s);
            let analytic = grads.get(vars[target]).unwrap().clone();
            let base = [&x0, &g0, &b0][target].clone();
            let mut eval = |p: &Arr| {
                let args = [&x0, &g0, &b0];
                let mut owned: Vec<Arr> = args.iter().map(|a| (*a).clone()).collect();
                owned[target] = p.clone();
                let (t, _, s) = run(&owned[0], &owned[1], &owned[2]);
                t.scalar(s)
            };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-5);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "layer_norm grad {target}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }

        let x0 = rand_arr(&mut rng, &[4, 3, 2]);
        let g0 = rand_arr(&mut rng, &[4]);
        let b0 = rand_arr(&mut rng, &[4]);
        for target in 0..3 {
            let run = |x: &Arr, g: &Arr, b: &Arr| {
                let t = Tape::new();
                let vx = t.leaf(x.clone());
                let vg = t.leaf(g.clone());
                let vb = t.leaf(b.clone());
                let y = t.group_norm(vx, vg, vb, 2, 1e-5);
                let wgt = t.constant(Array3::from_shape_fn((4, 3, 2), |(i, j, k)| {
                    0.2 * i as f64 - 0.1 * j as f64 + 0.05 * k as f64 + 0.3
                })
                .into_dyn());
                let s = t.sum(t.mul(y, wgt));
                (t, [vx, vg, vb], s)
            };
            let (t, vars, s) = run(&x0, &g0, &b0);
            let grads = t.backward(s);
            let analytic = grads.get(vars[target]).unwrap().clone();
            let base = [&x0, &g0, &b0][target].clone();
            let mut eval = |p: &Arr| {
                let args = [&x0, &g0, &b0];
                let mut owned: Vec<Arr> = args.iter().map(|a| (*a).clone()).collect();
                owned[target] = p.clone();
                let (t, _, s) = run(&owned[0], &owned[1], &owned[2]);
                t.scalar(s)
            };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-5);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "group_norm grad {target}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        let x0 = rand_arr(&mut rng, &[2, 5, 4]);
        let w0 = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let b0 = rand_arr(&mut rng, &[3]);
        for target in 0..3 {
            let run = |x: &Arr, w: &Arr, b: &Arr| {
                let t = Tape::new();
                let vx = t.leaf(x.clone());
                let vw = t.leaf(w.clone());
                let vb = t.leaf(b.clone());
                let y = t.conv2d(vx, vw, Some(vb), 2, 1);
                let s = t.sum(t.mul(y, y));
                (t, [vx, vw, vb], s)
            };
            let (t, vars, s) = run(&x0, &w0, &b0);
            let grads = t.backward(s);
            let analytic = grads.get(vars[target]).unwrap().clone();
            let base = [&x0, &w0, &b0][target].clone();
            let mut eval = |p: &Arr| {
                let args = [&x0, &w0, &b0];
                let mut owned: Vec<Arr> = args.iter().map(|a| (*a).clone()).collect();
                owned[target] = p.clone();
                let (t, _, s) = run(&owned[0], &owned[1], &owned[2]);
                t.scalar(s)
            };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-5);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "conv2d grad {target}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let x = rand_arr(&mut rng, &[3, 6, 5]);
        let w = rand_arr(&mut rng, &[2, 3, 3, 3]);
        let t = Tape::new();
        let y = t.conv2d(t.leaf(x.clone()), t.leaf(w.clone()), None, 1, 1);
        let yv = t.value(y);
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let w4 = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for o in 0..2 {
            for i in 0..6usize {
                for j in 0..5usize {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = i as isize + ky as isize - 1;
                                let ix = j as isize + kx as isize - 1;
                                if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                    acc += x3[[c, iy as usize, ix as usize]] * w4[[o, c, ky, kx]];
                                }
                            }
                        }
                    }
                    assert!((yv[[o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn interpolation_grads() {
        check_unary(&[2, 3, 4], 60, |t, x| t.bilinear_resize(x, 7, 9));
        check_unary(&[2, 3, 3], 61, |t, x| t.nearest_up2(x));

        // warp: check feature and flow gradients with fractional offsets
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        let x0 = rand_arr(&mut rng, &[2, 4, 4]);
        let mut f0 = rand_arr(&mut rng, &[2, 4, 4]);
        // keep sample positions away from integer lattice kinks
        f0.mapv_inplace(|v| 0.3 + 0.25 * v.tanh());
        for target in 0..2 {
            let run = |x: &Arr, f: &Arr| {
                let t = Tape::new();
                let vx = t.leaf(x.clone());
                let vf = t.leaf(f.clone());
                let y = t.grid_warp(vx, vf);
                let s = t.sum(t.mul(y, y));
                (t, [vx, vf], s)
            };
            let (t, vars, s) = run(&x0, &f0);
            let grads = t.backward(s);
            let analytic = grads.get(vars[target]).unwrap().clone();
            let base = [&x0, &f0][target].clone();
            let mut eval = |p: &Arr| {
                let (xx, ff) = if target == 0 { (p, &f0) } else { (&x0, p) };
                let (t, _, s) = run(xx, ff);
                t.scalar(s)
            };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-6);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "grid_warp grad {target}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let x = rand_arr(&mut rng, &[3, 5, 6]);
        let t = Tape::new();
        let vx = t.leaf(x.clone());
        let flow = t.constant(Array3::<f64>::zeros((2, 5, 6)).into_dyn());
        let y = t.grid_warp(vx, flow);
        assert_eq!(*t.value(y), x);
    }

    #[test]
    fn warp_integer_shift_with_clamping() {
        // 4x4 ramp shifted one row up with edge clamping on the last row
        let ramp = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (4 * i + j) as f64);
        let t = Tape::new();
        let vx = t.leaf(ramp.clone().into_dyn());
        let mut flow = Array3::<f64>::zeros((2, 4, 4));
        flow.slice_mut(ndarray::s![0, .., ..]).fill(1.0);
        let y = t.grid_warp(vx, t.constant(flow.into_dyn()));
        let yv = t.value(y);
        for i in 0..4usize {
            for j in 0..4usize {
                let src = (i + 1).min(3);
                assert_eq!(yv[[0, i, j]], ramp[[0, src, j]]);
            }
        }
    }

    #[test]
    fn warp_constant_map_stays_constant() {
        let x = Array3::from_elem((2, 4, 4), 1.25);
        let t = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(64);
        let flow = rand_arr(&mut rng, &[2, 4, 4]);
        let y = t.grid_warp(t.leaf(x.into_dyn()), t.constant(flow));
        assert!(t.value(y).iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn resize_identity_when_same_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(65);
        let x = rand_arr(&mut rng, &[2, 5, 7]);
        let t = Tape::new();
        let y = t.bilinear_resize(t.leaf(x.clone()), 5, 7);
        assert_eq!(*t.value(y), x);
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // y = x * x via two uses of the same var
        let t = Tape::new();
        let x = t.leaf(Array1::from_vec(vec![2.0, -3.0]).into_dyn());
        let y = t.mul(x, x);
        let s = t.sum(y);
        let g = t.backward(s);
        let gx = g.get(x).unwrap();
        assert_eq!(gx[[0]], 4.0);
        assert_eq!(gx[[1]], -6.0);
    }

    #[test]
    fn param_nodes_are_memoized() {
        use super::super::ParamStore;
        let mut store = ParamStore::new();
        let id = store.add("w", Array1::from_vec(vec![1.0, 2.0]).into_dyn());
        let t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let s = t.sum(t.add(a, b));
        let g = t.backward(s);
        assert_eq!(*g.param(id).unwrap(), Array1::from_vec(vec![2.0, 2.0]).into_dyn());
    }

    #[test]
    fn zeroed_conv_head_outputs_zero() {
        use super::super::{Conv2d, ParamStore};
        let mut store = ParamStore::new();
        let conv = Conv2d::new_zeroed(&mut store, "flow", 4, 2, 3);
        let t = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(66);
        let x = t.leaf(rand_arr(&mut rng, &[4, 6, 6]));
        let y = conv.forward(&t, &store, x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        let _ = Array4::<f64>::zeros((1, 1, 1, 1)); // keep import used
    }
}
