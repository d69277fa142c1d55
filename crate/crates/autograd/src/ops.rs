//! Differentiable operations on [`Var`]. Every backward is built from these same
//! ops, so second derivatives come for free when `create_graph` is set.

use crate::conv;
use crate::kernels;
use crate::tensor::{numel, Shape, Tensor};
use crate::var::{Op, Var};

fn reduce_grad(g: Var, shape: Shape) -> Var {
    if g.shape() == shape {
        g
    } else {
        g.sum_to(shape)
    }
}

macro_rules! op_struct {
    ($name:ident { $($field:ident : $ty:ty),* }) => {
        struct $name {
            inputs: Vec<Var>,
            $($field: $ty,)*
        }
    };
}

op_struct!(AddOp {});
op_struct!(SubOp {});
op_struct!(MulOp {});
op_struct!(DivOp {});
op_struct!(ScaleOp { factor: f32 });
op_struct!(AddScalarOp {});
op_struct!(SqrtOp {});
op_struct!(SafeRecipOp {});
op_struct!(ExpOp {});
op_struct!(LogOp {});
op_struct!(SigmoidOp {});
op_struct!(SoftplusOp {});
op_struct!(AbsOp {});
op_struct!(LeakyReluOp { slope: f32 });
op_struct!(SumToOp {});
op_struct!(ExpandOp {});
op_struct!(ConvOp { pad: usize });
op_struct!(ConvDataOp { pad: usize });
op_struct!(ConvWeightOp { pad: usize });
op_struct!(AvgPoolOp {});
op_struct!(UpsampleOp {});
op_struct!(ConcatOp {});
op_struct!(NarrowOp { start: usize });
op_struct!(PadOp { start: usize });
op_struct!(ReshapeOp {});

impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&self.inputs[0], &self.inputs[1]);
        vec![
            a.requires_grad().then(|| reduce_grad(g.clone(), a.shape())),
            b.requires_grad().then(|| reduce_grad(g.clone(), b.shape())),
        ]
    }
}

impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&self.inputs[0], &self.inputs[1]);
        vec![
            a.requires_grad().then(|| reduce_grad(g.clone(), a.shape())),
            b.requires_grad().then(|| reduce_grad(g.neg(), b.shape())),
        ]
    }
}

impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&self.inputs[0], &self.inputs[1]);
        vec![
            a.requires_grad().then(|| reduce_grad(g.mul(b), a.shape())),
            b.requires_grad().then(|| reduce_grad(g.mul(a), b.shape())),
        ]
    }
}

impl Op for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (a, b) = (&self.inputs[0], &self.inputs[1]);
        vec![
            a.requires_grad().then(|| reduce_grad(g.div(b), a.shape())),
            b.requires_grad()
                .then(|| reduce_grad(g.mul(a).div(&b.mul(b)).neg(), b.shape())),
        ]
    }
}

impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.scale(self.factor))]
    }
}

impl Op for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.clone())]
    }
}

impl Op for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        // d sqrt(x) = 1 / (2 sqrt(x)), defined as 0 where x = 0
        let y = self.inputs[0].sqrt();
        vec![Some(g.mul(&y.safe_recip()).scale(0.5))]
    }
}

impl Op for SafeRecipOp {
    fn name(&self) -> &'static str {
        "safe_recip"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let r = self.inputs[0].safe_recip();
        vec![Some(g.mul(&r.mul(&r)).neg())]
    }
}

impl Op for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&self.inputs[0].exp()))]
    }
}

impl Op for LogOp {
    fn name(&self) -> &'static str {
        "log"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.div(&self.inputs[0]))]
    }
}

impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let s = self.inputs[0].sigmoid();
        let one_minus = s.neg().add_scalar(1.0);
        vec![Some(g.mul(&s.mul(&one_minus)))]
    }
}

impl Op for SoftplusOp {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.mul(&self.inputs[0].sigmoid()))]
    }
}

impl Op for AbsOp {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let sign = self.inputs[0].value().map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        vec![Some(g.mul(&Var::constant(sign)))]
    }
}

impl Op for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let slope = self.slope;
        let mask = self.inputs[0]
            .value()
            .map(|v| if v > 0.0 { 1.0 } else { slope });
        vec![Some(g.mul(&Var::constant(mask)))]
    }
}

impl Op for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.expand(self.inputs[0].shape()))]
    }
}

impl Op for ExpandOp {
    fn name(&self) -> &'static str {
        "expand"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.sum_to(self.inputs[0].shape()))]
    }
}

impl Op for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (x, w) = (&self.inputs[0], &self.inputs[1]);
        let [_, _, h, wd] = x.shape();
        let k = w.shape()[2];
        vec![
            x.requires_grad()
                .then(|| g.conv2d_backward_data(w, self.pad, (h, wd))),
            w.requires_grad()
                .then(|| x.conv2d_backward_weight(g, self.pad, k)),
        ]
    }
}

impl Op for ConvDataOp {
    fn name(&self) -> &'static str {
        "conv2d_backward_data"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (gy, w) = (&self.inputs[0], &self.inputs[1]);
        let k = w.shape()[2];
        vec![
            gy.requires_grad().then(|| g.conv2d(w, self.pad)),
            w.requires_grad()
                .then(|| g.conv2d_backward_weight(gy, self.pad, k)),
        ]
    }
}

impl Op for ConvWeightOp {
    fn name(&self) -> &'static str {
        "conv2d_backward_weight"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let (x, gy) = (&self.inputs[0], &self.inputs[1]);
        let [_, _, h, wd] = x.shape();
        vec![
            x.requires_grad()
                .then(|| gy.conv2d_backward_data(g, self.pad, (h, wd))),
            gy.requires_grad().then(|| x.conv2d(g, self.pad)),
        ]
    }
}

impl Op for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.upsample2().scale(0.25))]
    }
}

impl Op for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample2"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.avg_pool2().scale(4.0))]
    }
}

impl Op for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let ca = self.inputs[0].shape()[1];
        let cb = self.inputs[1].shape()[1];
        vec![
            Some(g.narrow_channels(0, ca)),
            Some(g.narrow_channels(ca, cb)),
        ]
    }
}

impl Op for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let total = self.inputs[0].shape()[1];
        vec![Some(g.pad_channels(self.start, total))]
    }
}

impl Op for PadOp {
    fn name(&self) -> &'static str {
        "pad_channels"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        let c = self.inputs[0].shape()[1];
        vec![Some(g.narrow_channels(self.start, c))]
    }
}

impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, g: &Var) -> Vec<Option<Var>> {
        vec![Some(g.reshape(self.inputs[0].shape()))]
    }
}

fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let v = kernels::binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, AddOp { inputs: vec![self.clone(), other.clone()] })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = kernels::binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, SubOp { inputs: vec![self.clone(), other.clone()] })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = kernels::binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, MulOp { inputs: vec![self.clone(), other.clone()] })
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = kernels::binary(self.value(), other.value(), |a, b| a / b);
        Var::from_op(v, DivOp { inputs: vec![self.clone(), other.clone()] })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f32) -> Var {
        let v = self.value().map(|a| a * factor);
        Var::from_op(v, ScaleOp { inputs: vec![self.clone()], factor })
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        let v = self.value().map(|a| a + s);
        Var::from_op(v, AddScalarOp { inputs: vec![self.clone()] })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Square root whose derivative at 0 is taken to be 0.
    pub fn sqrt(&self) -> Var {
        let v = self.value().map(|a| a.max(0.0).sqrt());
        Var::from_op(v, SqrtOp { inputs: vec![self.clone()] })
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn safe_recip(&self) -> Var {
        let v = self.value().map(|a| if a == 0.0 { 0.0 } else { 1.0 / a });
        Var::from_op(v, SafeRecipOp { inputs: vec![self.clone()] })
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f32::exp);
        Var::from_op(v, ExpOp { inputs: vec![self.clone()] })
    }

    pub fn ln(&self) -> Var {
        let v = self.value().map(f32::ln);
        Var::from_op(v, LogOp { inputs: vec![self.clone()] })
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(stable_sigmoid);
        Var::from_op(v, SigmoidOp { inputs: vec![self.clone()] })
    }

    /// `log(1 + e^x)` computed without overflow.
    pub fn softplus(&self) -> Var {
        let v = self.value().map(stable_softplus);
        Var::from_op(v, SoftplusOp { inputs: vec![self.clone()] })
    }

    pub fn abs(&self) -> Var {
        let v = self.value().map(f32::abs);
        Var::from_op(v, AbsOp { inputs: vec![self.clone()] })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        let v = self.value().map(|a| if a > 0.0 { a } else { a * slope });
        Var::from_op(v, LeakyReluOp { inputs: vec![self.clone()], slope })
    }

    /// Sum over the dims where `shape` is 1.
    pub fn sum_to(&self, shape: Shape) -> Var {
        let v = kernels::sum_to(self.value(), shape);
        Var::from_op(v, SumToOp { inputs: vec![self.clone()] })
    }

    pub fn mean_to(&self, shape: Shape) -> Var {
        let count = numel(&self.shape()) / numel(&shape);
        self.sum_to(shape).scale(1.0 / count as f32)
    }

    pub fn sum_all(&self) -> Var {
        self.sum_to([1, 1, 1, 1])
    }

    pub fn mean_all(&self) -> Var {
        self.mean_to([1, 1, 1, 1])
    }

    pub fn expand(&self, shape: Shape) -> Var {
        let v = kernels::expand(self.value(), shape);
        Var::from_op(v, ExpandOp { inputs: vec![self.clone()] })
    }

    /// Stride-1 convolution with symmetric zero padding; weight is `[Co, Ci, k, k]`.
    pub fn conv2d(&self, weight: &Var, pad: usize) -> Var {
        let v = conv::conv2d(self.value(), weight.value(), pad);
        Var::from_op(v, ConvOp { inputs: vec![self.clone(), weight.clone()], pad })
    }

    pub fn conv2d_backward_data(&self, weight: &Var, pad: usize, in_hw: (usize, usize)) -> Var {
        let v = conv::conv2d_backward_data(self.value(), weight.value(), pad, in_hw);
        Var::from_op(v, ConvDataOp { inputs: vec![self.clone(), weight.clone()], pad })
    }

    pub fn conv2d_backward_weight(&self, grad_out: &Var, pad: usize, kernel: usize) -> Var {
        let v = conv::conv2d_backward_weight(self.value(), grad_out.value(), pad, kernel);
        Var::from_op(v, ConvWeightOp { inputs: vec![self.clone(), grad_out.clone()], pad })
    }

    pub fn avg_pool2(&self) -> Var {
        let v = kernels::avg_pool2(self.value());
        Var::from_op(v, AvgPoolOp { inputs: vec![self.clone()] })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Var {
        let v = kernels::upsample2(self.value());
        Var::from_op(v, UpsampleOp { inputs: vec![self.clone()] })
    }

    pub fn concat_channels(&self, other: &Var) -> Var {
        let v = kernels::concat_channels(self.value(), other.value());
        Var::from_op(v, ConcatOp { inputs: vec![self.clone(), other.clone()] })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Var {
        let v = kernels::narrow_channels(self.value(), start, len);
        Var::from_op(v, NarrowOp { inputs: vec![self.clone()], start })
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Var {
        let v = kernels::pad_channels(self.value(), start, total);
        Var::from_op(v, PadOp { inputs: vec![self.clone()], start })
    }

    pub fn reshape(&self, shape: Shape) -> Var {
        let v = self.value().reshape(shape);
        Var::from_op(v, ReshapeOp { inputs: vec![self.clone()] })
    }

    /// `self·(1−t) + other·t` for a fixed scalar `t`.
    pub fn lerp(&self, other: &Var, t: f32) -> Var {
        self.scale(1.0 - t).add(&other.scale(t))
    }
}

impl From<Tensor> for Var {
    fn from(t: Tensor) -> Self {
        Var::constant(t)
    }
}
