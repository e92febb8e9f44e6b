//! Minimal reverse-mode autodiff tape over `ndarray`, sized for the training
//! needs of this crate: 2-D convolutions, pooling, nearest upsampling,
//! channel concatenation, channel gating and the loss heads. Convolutions go
//! through im2col + `matrixmultiply`-backed GEMM.
//!
//! Every differentiable op is checked against central finite differences in
//! the crate's gradient test suite.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Dynamic-rank f32 tensor.
pub type Ax = ArrayD<f32>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Slot index into a [`crate::nn::ParamStore`].
pub type ParamSlot = usize;

type BackFn = Box<dyn FnOnce(&[Ax], &Ax, &mut [Option<Ax>])>;

struct Step {
    out: usize,
    back: BackFn,
}

/// Clamp used inside BCE so log terms stay finite.
pub const BCE_EPS: f32 = 1e-7;

/// Gradients collected per parameter slot after a backward pass.
pub struct Grads {
    by_slot: Vec<Option<Ax>>,
}

impl Grads {
    pub fn get(&self, slot: ParamSlot) -> Option<&Ax> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    #[allow(dead_code)] // test helper
    pub(crate) fn from_vec(by_slot: Vec<Option<Ax>>) -> Self {
        Self { by_slot }
    }

    pub fn take(&mut self, slot: ParamSlot) -> Option<Ax> {
        self.by_slot.get_mut(slot).and_then(|g| g.take())
    }
}

/// Reverse-mode tape: forward calls append nodes, `backward` replays them.
pub struct Tape {
    vals: Vec<Ax>,
    needs: Vec<bool>,
    /// f64 values for scalar loss nodes, so finite-difference oracles are not
    /// limited by f32 storage quantization.
    hi: Vec<Option<f64>>,
    steps: Vec<Step>,
    param_nodes: Vec<(usize, ParamSlot)>,
}

fn standardize(a: Ax) -> Ax {
    if a.as_slice().is_some() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn accumulate(grads: &mut [Option<Ax>], idx: usize, delta: Ax) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot => *slot = Some(standardize(delta)),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            needs: Vec::new(),
            hi: Vec::new(),
            steps: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, val: Ax, needs: bool) -> NodeId {
        // keep every node in standard layout so slice-based op kernels hold
        self.vals.push(standardize(val));
        self.needs.push(needs);
        self.hi.push(None);
        NodeId(self.vals.len() - 1)
    }

    fn set_hi(&mut self, id: NodeId, v: f64) {
        self.hi[id.0] = Some(v);
    }

    /// Scalar value at full precision when the node is a loss head (or a
    /// sum/scale of loss heads); falls back to the stored f32.
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        self.hi[id.0].unwrap_or_else(|| self.scalar(id) as f64)
    }

    pub fn value(&self, id: NodeId) -> &Ax {
        &self.vals[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        let v = &self.vals[id.0];
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, val: Ax) -> NodeId {
        self.push(val, false)
    }

    /// Leaf whose gradient is routed to a parameter slot.
    pub fn param(&mut self, slot: ParamSlot, val: Ax) -> NodeId {
        let id = self.push(val, true);
        self.param_nodes.push((id.0, slot));
        id
    }

    /// Copies a value into a fresh gradient-barrier leaf.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x.0].clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape());
        let val = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.needs[a.0] || self.needs[b.0];
        let out = self.push(val, needs);
        if let (Some(x), Some(y)) = (self.hi[a.0], self.hi[b.0]) {
            self.set_hi(out, x + y);
        }
        if needs {
            let (na, nb) = (self.needs[a.0], self.needs[b.0]);
            let (ai, bi) = (a.0, b.0);
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |_vals, dout, grads| {
                    if na {
                        accumulate(grads, ai, dout.clone());
                    }
                    if nb {
                        accumulate(grads, bi, dout.clone());
                    }
                }),
            });
        }
        out
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape());
        let val = &self.vals[a.0] * &self.vals[b.0];
        let needs = self.needs[a.0] || self.needs[b.0];
        let out = self.push(val, needs);
        if needs {
            let (ai, bi) = (a.0, b.0);
            let (na, nb) = (self.needs[a.0], self.needs[b.0]);
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |vals, dout, grads| {
                    if na {
                        accumulate(grads, ai, dout * &vals[bi]);
                    }
                    if nb {
                        accumulate(grads, bi, dout * &vals[ai]);
                    }
                }),
            });
        }
        out
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let val = self.vals[a.0].mapv(|v| v * c);
        let needs = self.needs[a.0];
        let out = self.push(val, needs);
        if let Some(x) = self.hi[a.0] {
            self.set_hi(out, x * c as f64);
        }
        if needs {
            let ai = a.0;
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |_vals, dout, grads| {
                    accumulate(grads, ai, dout.mapv(|v| v * c));
                }),
            });
        }
        out
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a.0].mapv(|v| v.max(0.0));
        let needs = self.needs[a.0];
        let out = self.push(val, needs);
        if needs {
            let ai = a.0;
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |vals, dout, grads| {
                    let mut dx = dout.clone();
                    dx.zip_mut_with(&vals[ai], |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(grads, ai, dx);
                }),
            });
        }
        out
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f32) -> NodeId {
        let val = self.vals[a.0].mapv(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs[a.0];
        let out = self.push(val, needs);
        if needs {
            let ai = a.0;
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |vals, dout, grads| {
                    let mut dx = dout.clone();
                    dx.zip_mut_with(&vals[ai], |d, &x| {
                        if x < 0.0 {
                            *d *= slope;
                        }
                    });
                    accumulate(grads, ai, dx);
                }),
            });
        }
        out
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a.0].mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs[a.0];
        let out = self.push(val, needs);
        if needs {
            let ai = a.0;
            let oi = out.0;
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |vals, dout, grads| {
                    let y = &vals[oi];
                    let mut dx = dout.clone();
                    dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
                    accumulate(grads, ai, dx);
                }),
            });
        }
        out
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a.0].mapv(f32::tanh);
        let needs = self.needs[a.0];
        let out = self.push(val, needs);
        if needs {
            let ai = a.0;
            let oi = out.0;
            self.steps.push(Step {
                out: out.0,
                back: Box::new(move |vals, dout, grads| {
                    let y = &vals[oi];
                    let mut dx = dout.clone();
                    dx.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
                    accumulate(grads, ai, dx);
                }),
            });
        }
        out
    }

    /// 2-D convolution, NCHW input, OIHW weights, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, ci, h, wd) = xv.dim();
        let (co, ci2, kh, kw) = wv.dim();
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let w_mat = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();
        let bias = self.vals[b.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::<f32>::zeros((bsz, co, ho, wo));
        {
            let out_s = out.as_slice_mut().unwrap();
            for n in 0..bsz {
                let col = im2col(&xv.index_axis(Axis(0), n), kh, kw, stride, pad, ho, wo);
                let res = w_mat.dot(&col); // (co, ho*wo)
                let res_s = res.as_slice().unwrap();
                let base = n * co * ho * wo;
                for c in 0..co {
                    let bc = bias[c];
                    let dst = &mut out_s[base + c * ho * wo..base + (c + 1) * ho * wo];
                    let src = &res_s[c * ho * wo..(c + 1) * ho * wo];
                    for (d, &v) in dst.iter_mut().zip(src.iter()) {
                        *d = v + bc;
                    }
                }
            }
        }

        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let (xi, wi, bi) = (x.0, w.0, b.0);
            let (nx, nw, nb) = (self.needs[x.0], self.needs[w.0], self.needs[b.0]);
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let wv = vals[wi].view().into_dimensionality::<Ix4>().unwrap();
                    let dov = dout.view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, ci, h, wd) = xv.dim();
                    let (co, _, kh, kw) = wv.dim();
                    let (_, _, ho, wo) = dov.dim();
                    let w_mat = wv.to_shape((co, ci * kh * kw)).unwrap().to_owned();

                    let mut dw_mat = Array2::<f32>::zeros((co, ci * kh * kw));
                    let mut db = ndarray::Array1::<f32>::zeros(co);
                    let mut dx = Array4::<f32>::zeros((bsz, ci, h, wd));
                    for n in 0..bsz {
                        let dout_n = dov.index_axis(Axis(0), n);
                        let dout_mat = dout_n.to_shape((co, ho * wo)).unwrap();
                        if nb {
                            db += &dout_mat.sum_axis(Axis(1));
                        }
                        if nw {
                            let col =
                                im2col(&xv.index_axis(Axis(0), n), kh, kw, stride, pad, ho, wo);
                            dw_mat += &dout_mat.dot(&col.t());
                        }
                        if nx {
                            let dcol = w_mat.t().dot(&dout_mat); // (ci*kh*kw, ho*wo)
                            col2im_accumulate(
                                &dcol,
                                &mut dx.index_axis_mut(Axis(0), n),
                                kh,
                                kw,
                                stride,
                                pad,
                                ho,
                                wo,
                            );
                        }
                    }
                    if nx {
                        accumulate(grads, xi, dx.into_dyn());
                    }
                    if nw {
                        let dw = dw_mat.into_shape_with_order((co, ci, kh, kw)).unwrap();
                        accumulate(grads, wi, dw.into_dyn());
                    }
                    if nb {
                        accumulate(grads, bi, db.into_dyn());
                    }
                }),
            });
        }
        out_id
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f32>::zeros((bsz, c, ho, wo));
        let mut argmax: Vec<u8> = Vec::with_capacity(bsz * c * ho * wo);
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().unwrap();
            for plane in 0..bsz * c {
                let src = &xs[plane * h * w..(plane + 1) * h * w];
                let dst = &mut os[plane * ho * wo..(plane + 1) * ho * wo];
                for i in 0..ho {
                    let r0 = &src[2 * i * w..(2 * i + 1) * w];
                    let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
                    for j in 0..wo {
                        let cands = [r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]];
                        let mut best = cands[0];
                        let mut best_k = 0u8;
                        for (k, &v) in cands.iter().enumerate().skip(1) {
                            if v > best {
                                best = v;
                                best_k = k as u8;
                            }
                        }
                        dst[i * wo + j] = best;
                        argmax.push(best_k);
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let xi = x.0;
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, c, h, w) = xv.dim();
                    let (ho, wo) = (h / 2, w / 2);
                    let dos = dout.as_slice().expect("standard layout");
                    let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        let mut k = 0usize;
                        for plane in 0..bsz * c {
                            let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
                            for i in 0..ho {
                                for j in 0..wo {
                                    let sel = argmax[k] as usize;
                                    let (di, dj) = [(0, 0), (0, 1), (1, 0), (1, 1)][sel];
                                    dst[(2 * i + di) * w + 2 * j + dj] +=
                                        dos[plane * ho * wo + i * wo + j];
                                    k += 1;
                                }
                            }
                        }
                    }
                    accumulate(grads, xi, dx.into_dyn());
                }),
            });
        }
        out_id
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array4::<f32>::zeros((bsz, c, 2 * h, 2 * w));
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().unwrap();
            let (oh, ow) = (2 * h, 2 * w);
            for plane in 0..bsz * c {
                let src = &xs[plane * h * w..(plane + 1) * h * w];
                let dst = &mut os[plane * oh * ow..(plane + 1) * oh * ow];
                for i in 0..h {
                    let srow = &src[i * w..(i + 1) * w];
                    // write the doubled row once, then copy it to the twin row
                    for j in 0..w {
                        let v = srow[j];
                        dst[2 * i * ow + 2 * j] = v;
                        dst[2 * i * ow + 2 * j + 1] = v;
                    }
                    let (head, tail) = dst.split_at_mut((2 * i + 1) * ow);
                    tail[..ow].copy_from_slice(&head[2 * i * ow..]);
                }
            }
        }
        let needs = self.needs[x.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let xi = x.0;
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, c, h, w) = xv.dim();
                    let dos = dout.as_slice().expect("standard layout");
                    let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        let (oh, ow) = (2 * h, 2 * w);
                        for plane in 0..bsz * c {
                            let src = &dos[plane * oh * ow..(plane + 1) * oh * ow];
                            let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
                            for i in 0..h {
                                let drow = &mut dst[i * w..(i + 1) * w];
                                for half in 0..2 {
                                    let srow = &src[(2 * i + half) * ow..(2 * i + half + 1) * ow];
                                    for j in 0..w {
                                        drow[j] += srow[2 * j] + srow[2 * j + 1];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, xi, dx.into_dyn());
                }),
            });
        }
        out_id
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.vals[p.0].view().into_dimensionality::<Ix4>().unwrap())
            .collect();
        let out = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .as_standard_layout()
        .into_owned();
        let needs = parts.iter().any(|p| self.needs[p.0]);
        let chans: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
        drop(views);
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let idxs: Vec<(usize, bool)> = parts.iter().map(|p| (p.0, self.needs[p.0])).collect();
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |_vals, dout, grads| {
                    let dov = dout.view().into_dimensionality::<Ix4>().unwrap();
                    let mut start = 0usize;
                    for ((idx, need), &nc) in idxs.iter().zip(chans.iter()) {
                        if *need {
                            let slice = dov
                                .slice(ndarray::s![.., start..start + nc, .., ..])
                                .to_owned();
                            accumulate(grads, *idx, slice.into_dyn());
                        }
                        start += nc;
                    }
                }),
            });
        }
        out_id
    }

    /// Per-channel spatial mean: (B,C,H,W) -> (B,C).
    pub fn spatial_mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array2::<f32>::zeros((bsz, c));
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().unwrap();
            for (plane, o) in os.iter_mut().enumerate() {
                let src = &xs[plane * h * w..(plane + 1) * h * w];
                *o = src.iter().sum::<f32>() / (h * w) as f32;
            }
        }
        let needs = self.needs[x.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let xi = x.0;
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, c, h, w) = xv.dim();
                    let dos = dout.as_slice().expect("standard layout");
                    let scale = 1.0 / (h * w) as f32;
                    let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        for (plane, &g) in dos.iter().enumerate() {
                            dxs[plane * h * w..(plane + 1) * h * w].fill(g * scale);
                        }
                    }
                    accumulate(grads, xi, dx.into_dyn());
                }),
            });
        }
        out_id
    }

    /// Dense layer: (B,In) x (In,Out) [+ bias (Out)].
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut out = xv.dot(&wv);
        if let Some(b) = bias {
            let bv = self.vals[b.0]
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            out += &bv;
        }
        let needs = self.needs[x.0]
            || self.needs[w.0]
            || bias.map(|b| self.needs[b.0]).unwrap_or(false);
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let (xi, wi) = (x.0, w.0);
            let (nx, nw) = (self.needs[x.0], self.needs[w.0]);
            let bslot = bias.map(|b| (b.0, self.needs[b.0]));
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix2>().unwrap();
                    let wv = vals[wi].view().into_dimensionality::<Ix2>().unwrap();
                    let dov = dout.view().into_dimensionality::<Ix2>().unwrap();
                    if nx {
                        accumulate(grads, xi, dov.dot(&wv.t()).into_dyn());
                    }
                    if nw {
                        accumulate(grads, wi, xv.t().dot(&dov).into_dyn());
                    }
                    if let Some((bi, nb)) = bslot {
                        if nb {
                            accumulate(grads, bi, dov.sum_axis(Axis(0)).into_dyn());
                        }
                    }
                }),
            });
        }
        out_id
    }

    /// Dense layer against a transposed weight: (B,In) x (Out,In)^T -> (B,Out).
    /// Lets callers keep weights in row-major (Out,In) layout.
    pub fn linear_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let out = xv.dot(&wv.t());
        let needs = self.needs[x.0] || self.needs[w.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let (xi, wi) = (x.0, w.0);
            let (nx, nw) = (self.needs[x.0], self.needs[w.0]);
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix2>().unwrap();
                    let wv = vals[wi].view().into_dimensionality::<Ix2>().unwrap();
                    let dov = dout.view().into_dimensionality::<Ix2>().unwrap();
                    if nx {
                        accumulate(grads, xi, dov.dot(&wv).into_dyn());
                    }
                    if nw {
                        accumulate(grads, wi, dov.t().dot(&xv).into_dyn());
                    }
                }),
            });
        }
        out_id
    }

    /// Channel gating: (B,C,H,W) scaled by (B,C).
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        {
            let sv = self.vals[s.0].view().into_dimensionality::<Ix2>().unwrap();
            debug_assert_eq!(sv.dim().0, xv.dim().0);
            debug_assert_eq!(sv.dim().1, xv.dim().1);
        }
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array4::<f32>::zeros((bsz, c, h, w));
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let ss = self.vals[s.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().unwrap();
            for (plane, &g) in ss.iter().enumerate() {
                for (o, &v) in os[plane * h * w..(plane + 1) * h * w]
                    .iter_mut()
                    .zip(xs[plane * h * w..(plane + 1) * h * w].iter())
                {
                    *o = v * g;
                }
            }
        }
        let needs = self.needs[x.0] || self.needs[s.0];
        let out_id = self.push(out.into_dyn(), needs);
        if needs {
            let (xi, si) = (x.0, s.0);
            let (nx, ns) = (self.needs[x.0], self.needs[s.0]);
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, c, h, w) = xv.dim();
                    let dos = dout.as_slice().expect("standard layout");
                    let xs = vals[xi].as_slice().expect("standard layout");
                    let ss = vals[si].as_slice().expect("standard layout");
                    if nx {
                        let mut dx = Array4::<f32>::zeros((bsz, c, h, w));
                        {
                            let dxs = dx.as_slice_mut().unwrap();
                            for (plane, &g) in ss.iter().enumerate() {
                                for (d, &go) in dxs[plane * h * w..(plane + 1) * h * w]
                                    .iter_mut()
                                    .zip(dos[plane * h * w..(plane + 1) * h * w].iter())
                                {
                                    *d = go * g;
                                }
                            }
                        }
                        accumulate(grads, xi, dx.into_dyn());
                    }
                    if ns {
                        let mut ds = Array2::<f32>::zeros((bsz, c));
                        {
                            let dss = ds.as_slice_mut().unwrap();
                            for (plane, d) in dss.iter_mut().enumerate() {
                                *d = dos[plane * h * w..(plane + 1) * h * w]
                                    .iter()
                                    .zip(xs[plane * h * w..(plane + 1) * h * w].iter())
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                            }
                        }
                        accumulate(grads, si, ds.into_dyn());
                    }
                }),
            });
        }
        out_id
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// [BCE_EPS, 1 - BCE_EPS]. `target` carries no gradient.
    pub fn bce_mean(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let p = &self.vals[pred.0];
        let t = &self.vals[target.0];
        assert_eq!(p.shape(), t.shape());
        let n = p.len() as f32;
        let mut loss = 0.0f64;
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let tv = tv as f64;
            loss -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        }
        let val = ArrayD::from_elem(IxDyn(&[]), (loss / n as f64) as f32);
        let needs = self.needs[pred.0];
        let out_id = self.push(val, needs);
        self.set_hi(out_id, loss / n as f64);
        if needs {
            let (pi, ti) = (pred.0, target.0);
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let g = *dout.iter().next().unwrap();
                    let p = &vals[pi];
                    let t = &vals[ti];
                    let n = p.len() as f32;
                    let mut dp = p.clone();
                    dp.zip_mut_with(t, |pv, &tv| {
                        let raw = *pv;
                        if raw <= BCE_EPS || raw >= 1.0 - BCE_EPS {
                            *pv = 0.0; // clamp region: no gradient
                        } else {
                            *pv = g * (raw - tv) / (raw * (1.0 - raw)) / n;
                        }
                    });
                    accumulate(grads, pi, dp);
                }),
            });
        }
        out_id
    }

    /// Mean absolute error between two tensors of identical shape.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.vals[a.0];
        let bv = &self.vals[b.0];
        assert_eq!(av.shape(), bv.shape());
        let n = av.len() as f32;
        let mut loss = 0.0f64;
        for (&x, &y) in av.iter().zip(bv.iter()) {
            loss += (x - y).abs() as f64;
        }
        let val = ArrayD::from_elem(IxDyn(&[]), (loss / n as f64) as f32);
        let needs = self.needs[a.0] || self.needs[b.0];
        let out_id = self.push(val, needs);
        self.set_hi(out_id, loss / n as f64);
        if needs {
            let (ai, bi) = (a.0, b.0);
            let (na, nb) = (self.needs[a.0], self.needs[b.0]);
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |vals, dout, grads| {
                    let g = *dout.iter().next().unwrap();
                    let av = &vals[ai];
                    let bv = &vals[bi];
                    let n = av.len() as f32;
                    let mut sign = av.clone();
                    sign.zip_mut_with(bv, |x, &y| {
                        *x = g * (*x - y).signum() * if *x == y { 0.0 } else { 1.0 } / n;
                    });
                    if na {
                        accumulate(grads, ai, sign.clone());
                    }
                    if nb {
                        accumulate(grads, bi, sign.mapv(|v| -v));
                    }
                }),
            });
        }
        out_id
    }

    /// Mean softmax cross-entropy of (B,K) logits against class labels.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let lv = self.vals[logits.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let (bsz, k) = lv.dim();
        assert_eq!(bsz, labels.len());
        let mut probs = Array2::<f32>::zeros((bsz, k));
        let mut loss = 0.0f64;
        for n in 0..bsz {
            let row = lv.row(n);
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f32 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[[n, j]] = e / z;
            }
            loss -= (probs[[n, labels[n]]].max(BCE_EPS) as f64).ln();
        }
        let val = ArrayD::from_elem(IxDyn(&[]), (loss / bsz as f64) as f32);
        let needs = self.needs[logits.0];
        let out_id = self.push(val, needs);
        self.set_hi(out_id, loss / bsz as f64);
        if needs {
            let li = logits.0;
            self.steps.push(Step {
                out: out_id.0,
                back: Box::new(move |_vals, dout, grads| {
                    let g = *dout.iter().next().unwrap();
                    let (bsz, _k) = probs.dim();
                    let mut dl = probs.clone();
                    for (n, &lab) in labels.iter().enumerate() {
                        dl[[n, lab]] -= 1.0;
                    }
                    dl.mapv_inplace(|v| v * g / bsz as f32);
                    accumulate(grads, li, dl.into_dyn());
                }),
            });
        }
        out_id
    }

    /// Runs reverse accumulation from a scalar loss node and collects
    /// per-parameter-slot gradients. Consumes the recorded steps.
    pub fn backward(&mut self, loss: NodeId, n_slots: usize) -> Grads {
        assert_eq!(self.vals[loss.0].len(), 1, "backward needs a scalar loss");
        let mut node_grads: Vec<Option<Ax>> = vec![None; self.vals.len()];
        node_grads[loss.0] = Some(ArrayD::from_elem(self.vals[loss.0].raw_dim(), 1.0));
        for step in self.steps.drain(..).rev() {
            if let Some(dout) = node_grads[step.out].take() {
                (step.back)(&self.vals, &dout, &mut node_grads);
            }
        }
        let mut by_slot: Vec<Option<Ax>> = vec![None; n_slots];
        for &(node, slot) in &self.param_nodes {
            if let Some(g) = node_grads[node].take() {
                match &mut by_slot[slot] {
                    Some(acc) => *acc += &g,
                    entry => *entry = Some(g),
                }
            }
        }
        Grads { by_slot }
    }
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (ci, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((ci * kh * kw, ho * wo));
    let xs = x.as_slice().expect("conv input is standard layout");
    let cs = col.as_slice_mut().unwrap();
    for c in 0..ci {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let row = (c * kh + a) * kw + b;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst_base = row_base + oi * wo;
                    if stride == 1 {
                        // jj = oj + b - pad stays contiguous
                        let oj_lo = pad.saturating_sub(b);
                        let oj_hi = (w + pad).saturating_sub(b).min(wo).max(oj_lo);
                        if oj_hi > oj_lo {
                            let src_lo = oj_lo + b - pad; // >= 0 by construction
                            cs[dst_base + oj_lo..dst_base + oj_hi]
                                .copy_from_slice(&src[src_lo..src_lo + (oj_hi - oj_lo)]);
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + b) as isize - pad as isize;
                            if jj >= 0 && (jj as usize) < w {
                                cs[dst_base + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    dcol: &Array2<f32>,
    dx: &mut ndarray::ArrayViewMut3<'_, f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (ci, h, w) = dx.dim();
    let ds = dcol.as_slice().expect("dcol is freshly allocated");
    let xs = dx.as_slice_mut().expect("dx is standard layout");
    for c in 0..ci {
        let plane = &mut xs[c * h * w..(c + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let row = (c * kh + a) * kw + b;
                let row_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let src_base = row_base + oi * wo;
                    if stride == 1 {
                        let oj_lo = pad.saturating_sub(b);
                        let oj_hi = (w + pad).saturating_sub(b).min(wo).max(oj_lo);
                        if oj_hi > oj_lo {
                            let dst_lo = b + oj_lo - pad; // >= 0 by construction
                            for (d, &g) in dst[dst_lo..dst_lo + (oj_hi - oj_lo)]
                                .iter_mut()
                                .zip(ds[src_base + oj_lo..src_base + oj_hi].iter())
                            {
                                *d += g;
                            }
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + b) as isize - pad as isize;
                            if jj >= 0 && (jj as usize) < w {
                                dst[jj as usize] += ds[src_base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
