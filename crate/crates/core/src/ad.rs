//! Reverse-mode differentiation over a flat tape of n-ary nodes.
//!
//! Every node stores its value together with the local partial derivatives
//! towards its parents, computed eagerly during the forward pass. The
//! backward sweep is then a single reverse pass accumulating adjoints.
//!
//! All numeric code in this crate is written against the [`Real`] trait so
//! that the same function runs on plain `f64` (rendering, data generation,
//! finite differences) and on [`Var`] (training). Both paths perform the same
//! floating-point operations in the same order, so values agree bit-for-bit.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

const NO_NODE: u32 = u32::MAX;

/// Scalar abstraction shared by `f64` and tape variables.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// `min(self, c)`; derivative is zero on the clamped side.
    fn min_c(self, c: f64) -> Self;
    /// `max(self, c)`; derivative is zero on the clamped side.
    fn max_c(self, c: f64) -> Self;
    /// `bias + Σ w_i x_i` evaluated left to right.
    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self;
    /// Front-to-back alpha compositing of one channel:
    /// `Σ c_i α_i Π_{j<i}(1-α_j) + bg Π_j(1-α_j)`.
    fn composite(alphas: &[Self], values: &[Self], bg: f64) -> Self;
    /// Opacity-weighted 2D Gaussian `o·exp(-½ dᵀ Q d)` at pixel `p`, with
    /// `d = p - mean` and conic `Q = [[a, b], [b, c]]`.
    fn gauss2d(mean: [Self; 2], conic: [Self; 3], opacity: Self, p: [f64; 2]) -> Self;

    fn relu(self) -> Self {
        self.max_c(0.0)
    }

    fn sigmoid(self) -> Self {
        Self::cst(1.0) / ((-self).exp() + 1.0)
    }

    fn clamp_c(self, lo: f64, hi: f64) -> Self {
        self.max_c(lo).min_c(hi)
    }

    fn sum(xs: &[Self]) -> Self {
        let mut acc = Self::cst(0.0);
        for &x in xs {
            acc = acc + x;
        }
        acc
    }
}

/// Plain-value compositing kernel shared by every `Real` implementation.
fn composite_value(alphas: &[f64], values: &[f64], bg: f64) -> f64 {
    let mut t = 1.0;
    let mut c = 0.0;
    for (&a, &v) in alphas.iter().zip(values) {
        c += v * (a * t);
        t *= 1.0 - a;
    }
    c + bg * t
}

#[inline]
fn gauss2d_value(m: [f64; 2], q: [f64; 3], o: f64, p: [f64; 2]) -> (f64, f64, f64, f64) {
    let dx = p[0] - m[0];
    let dy = p[1] - m[1];
    let quad = q[0] * dx * dx + 2.0 * q[1] * dx * dy + q[2] * dy * dy;
    let e = (-0.5 * quad).exp();
    (o * e, e, dx, dy)
}

fn affine_value(bias: f64, w: &[f64], x: &[f64]) -> f64 {
    let mut acc = bias;
    for (&wi, &xi) in w.iter().zip(x) {
        acc += wi * xi;
    }
    acc
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn min_c(self, c: f64) -> Self {
        if self > c {
            c
        } else {
            self
        }
    }
    #[inline]
    fn max_c(self, c: f64) -> Self {
        if self < c {
            c
        } else {
            self
        }
    }
    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self {
        affine_value(bias, w, x)
    }
    fn composite(alphas: &[Self], values: &[Self], bg: f64) -> Self {
        composite_value(alphas, values, bg)
    }
    #[inline]
    fn gauss2d(mean: [Self; 2], conic: [Self; 3], opacity: Self, p: [f64; 2]) -> Self {
        gauss2d_value(mean, conic, opacity, p).0
    }
}

struct Inner {
    vals: Vec<f64>,
    starts: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    first_bad: Option<(u32, &'static str)>,
}

/// Recording of one forward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(1 << 16)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut starts = Vec::with_capacity(nodes + 1);
        starts.push(0);
        Tape {
            inner: RefCell::new(Inner {
                vals: Vec::with_capacity(nodes),
                starts,
                parents: Vec::with_capacity(nodes * 2),
                partials: Vec::with_capacity(nodes * 2),
                first_bad: None,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an independent input variable.
    pub fn leaf(&self, v: f64) -> Var<'_> {
        let idx = self.push("leaf", v, std::iter::empty());
        Var {
            tape: Some(self),
            idx,
            val: v,
        }
    }

    pub fn leaves(&self, vs: &[f64]) -> Vec<Var<'_>> {
        vs.iter().map(|&v| self.leaf(v)).collect()
    }

    fn push(&self, op: &'static str, val: f64, edges: impl Iterator<Item = (u32, f64)>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.vals.len() as u32;
        for (p, d) in edges {
            if p != NO_NODE {
                inner.parents.push(p);
                inner.partials.push(d);
            }
        }
        let end = inner.parents.len() as u32;
        inner.starts.push(end);
        inner.vals.push(val);
        if !val.is_finite() && inner.first_bad.is_none() {
            inner.first_bad = Some((idx, op));
        }
        idx
    }

    /// Runs the reverse sweep from `output` and returns the adjoint of every
    /// recorded node.
    pub fn backward(&self, output: Var<'_>) -> Result<Adjoints> {
        let inner = self.inner.borrow();
        if let Some((node, op)) = inner.first_bad {
            return Err(Error::NonFinite {
                node: node as usize,
                op,
            });
        }
        let n = inner.vals.len();
        let mut adj = vec![0.0; n];
        if output.idx == NO_NODE {
            return Ok(Adjoints { adj });
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (inner.starts[i] as usize, inner.starts[i + 1] as usize);
            for k in s..e {
                adj[inner.parents[k] as usize] += a * inner.partials[k];
            }
        }
        if let Some(i) = adj.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                node: i,
                op: "adjoint",
            });
        }
        Ok(Adjoints { adj })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn of(&self, v: Var<'_>) -> f64 {
        if v.idx == NO_NODE {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }
}

/// A value recorded on a [`Tape`], or a constant when detached.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}#{})", self.val, self.idx)
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: NO_NODE,
            val: v,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NO_NODE
    }

    /// Same value, no gradient path.
    pub fn detach(self) -> Self {
        Var::constant(self.val)
    }

    fn unary(self, op: &'static str, val: f64, d: f64) -> Self {
        match self.tape {
            Some(t) if self.idx != NO_NODE => Var {
                tape: Some(t),
                idx: t.push(op, val, std::iter::once((self.idx, d))),
                val,
            },
            _ => Var::constant(val),
        }
    }

    fn binary(self, other: Self, op: &'static str, val: f64, da: f64, db: f64) -> Self {
        let tape = if self.idx != NO_NODE { self.tape } else { other.tape };
        match tape {
            Some(t) if self.idx != NO_NODE || other.idx != NO_NODE => Var {
                tape: Some(t),
                idx: t.push(op, val, [(self.idx, da), (other.idx, db)].into_iter()),
                val,
            },
            _ => Var::constant(val),
        }
    }

    fn tape_of(xs: &[Self]) -> Option<&'t Tape> {
        xs.iter().find(|x| x.idx != NO_NODE).and_then(|x| x.tape)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, "add", self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, "sub", self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, "mul", self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let v = self.val / o.val;
        self.binary(o, "div", v, 1.0 / o.val, -v / o.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary("neg", -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        self.unary("addc", self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        self.unary("subc", self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.unary("mulc", self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self.unary("divc", self.val / c, 1.0 / c)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let v = self.val.exp();
        self.unary("exp", v, v)
    }
    fn ln(self) -> Self {
        self.unary("ln", self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        self.unary("sqrt", v, 0.5 / v)
    }
    fn abs(self) -> Self {
        let d = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.unary("abs", self.val.abs(), d)
    }
    fn min_c(self, c: f64) -> Self {
        if self.val > c {
            Var::constant(c)
        } else {
            self
        }
    }
    fn max_c(self, c: f64) -> Self {
        if self.val < c {
            Var::constant(c)
        } else {
            self
        }
    }

    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let wv: Vec<f64> = w.iter().map(|v| v.val).collect();
        let xv: Vec<f64> = x.iter().map(|v| v.val).collect();
        let val = affine_value(bias.val, &wv, &xv);
        let tape = Self::tape_of(w)
            .or_else(|| Self::tape_of(x))
            .or(if bias.idx != NO_NODE { bias.tape } else { None });
        match tape {
            None => Var::constant(val),
            Some(t) => {
                let edges = std::iter::once((bias.idx, 1.0))
                    .chain(w.iter().zip(&xv).map(|(wi, &xi)| (wi.idx, xi)))
                    .chain(x.iter().zip(&wv).map(|(xi, &wi)| (xi.idx, wi)));
                Var {
                    tape: Some(t),
                    idx: t.push("affine", val, edges),
                    val,
                }
            }
        }
    }

    fn composite(alphas: &[Self], values: &[Self], bg: f64) -> Self {
        debug_assert_eq!(alphas.len(), values.len());
        let av: Vec<f64> = alphas.iter().map(|v| v.val).collect();
        let cv: Vec<f64> = values.iter().map(|v| v.val).collect();
        let val = composite_value(&av, &cv, bg);
        let tape = match Self::tape_of(alphas).or_else(|| Self::tape_of(values)) {
            None => return Var::constant(val),
            Some(t) => t,
        };
        let n = av.len();
        // transmittance in front of each entry and the colour composited behind it
        let mut trans = Vec::with_capacity(n);
        let mut t = 1.0;
        for &a in &av {
            trans.push(t);
            t *= 1.0 - a;
        }
        let mut behind = vec![0.0; n];
        let mut b = bg;
        for i in (0..n).rev() {
            behind[i] = b;
            b = cv[i] * av[i] + (1.0 - av[i]) * b;
        }
        let edges = (0..n)
            .map(|i| (alphas[i].idx, trans[i] * (cv[i] - behind[i])))
            .chain((0..n).map(|i| (values[i].idx, av[i] * trans[i])));
        Var {
            tape: Some(tape),
            idx: tape.push("composite", val, edges),
            val,
        }
    }

    fn gauss2d(mean: [Self; 2], conic: [Self; 3], opacity: Self, p: [f64; 2]) -> Self {
        let m = [mean[0].val, mean[1].val];
        let q = [conic[0].val, conic[1].val, conic[2].val];
        let (val, e, dx, dy) = gauss2d_value(m, q, opacity.val, p);
        let inputs = [mean[0], mean[1], conic[0], conic[1], conic[2], opacity];
        let tape = match Self::tape_of(&inputs) {
            None => return Var::constant(val),
            Some(t) => t,
        };
        let edges = [
            (mean[0].idx, val * (q[0] * dx + q[1] * dy)),
            (mean[1].idx, val * (q[1] * dx + q[2] * dy)),
            (conic[0].idx, val * (-0.5 * dx * dx)),
            (conic[1].idx, val * (-dx * dy)),
            (conic[2].idx, val * (-0.5 * dy * dy)),
            (opacity.idx, e),
        ];
        Var {
            tape: Some(tape),
            idx: tape.push("gauss2d", val, edges.into_iter()),
            val,
        }
    }

    fn sum(xs: &[Self]) -> Self {
        let mut val = 0.0;
        for x in xs {
            val += x.val;
        }
        match Self::tape_of(xs) {
            None => Var::constant(val),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push("sum", val, xs.iter().map(|x| (x.idx, 1.0))),
                val,
            },
        }
    }
}

macro_rules! scalar_lhs {
    ($tr:ident, $m:ident, $body:expr) => {
        impl<'t> $tr<Var<'t>> for f64 {
            type Output = Var<'t>;
            #[inline]
            fn $m(self, v: Var<'t>) -> Var<'t> {
                #[allow(clippy::redundant_closure_call)]
                ($body)(self, v)
            }
        }
    };
}

scalar_lhs!(Add, add, |c: f64, v: Var<'t>| v + c);
scalar_lhs!(Mul, mul, |c: f64, v: Var<'t>| v * c);
scalar_lhs!(Sub, sub, |c: f64, v: Var<'t>| (-v) + c);
scalar_lhs!(Div, div, |c: f64, v: Var<'t>| {
    let val = c / v.val;
    v.unary("rdivc", val, -val / v.val)
});

// ---------------------------------------------------------------------------
// Parameter registry

#[derive(Clone, Debug, PartialEq)]
struct Segment {
    name: String,
    offset: usize,
    len: usize,
}

/// Named flat parameter segments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

/// Handle to a segment of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegId(usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, values: &[f64]) -> SegId {
        let name = name.into();
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment {name}"
        );
        self.segments.push(Segment {
            name,
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
        SegId(self.segments.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<SegId> {
        self.segments.iter().position(|s| s.name == name).map(SegId)
    }

    pub fn name(&self, id: SegId) -> &str {
        &self.segments[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = SegId> {
        (0..self.segments.len()).map(SegId)
    }

    pub fn get(&self, id: SegId) -> &[f64] {
        let s = &self.segments[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    /// Flat index range of a segment.
    pub fn range(&self, id: SegId) -> std::ops::Range<usize> {
        let s = &self.segments[id.0];
        s.offset..s.offset + s.len
    }

    pub fn get_mut(&mut self, id: SegId) -> &mut [f64] {
        let s = &self.segments[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Segment owning flat index `i`, with the offset inside it.
    pub fn locate(&self, i: usize) -> (SegId, usize) {
        let k = self
            .segments
            .iter()
            .position(|s| i >= s.offset && i < s.offset + s.len)
            .expect("index out of range");
        (SegId(k), i - self.segments[k].offset)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Params<'_, Var<'t>> {
        Params {
            set: self,
            vals: tape.leaves(&self.data),
        }
    }

    /// Plain-value view for evaluation without recording.
    pub fn plain(&self) -> Params<'_, f64> {
        Params {
            set: self,
            vals: self.data.clone(),
        }
    }

    fn with_values(&self, vals: Vec<f64>) -> Params<'_, f64> {
        Params { set: self, vals }
    }
}

/// Parameter values in some scalar type, addressed by segment.
pub struct Params<'p, R> {
    set: &'p ParamSet,
    vals: Vec<R>,
}

impl<'p, R: Copy> Params<'p, R> {
    pub fn seg(&self, id: SegId) -> &[R] {
        let s = &self.set.segments[id.0];
        &self.vals[s.offset..s.offset + s.len]
    }

    pub fn by_name(&self, name: &str) -> &[R] {
        self.seg(self.set.id(name).unwrap_or_else(|| panic!("no segment {name}")))
    }

    pub fn set(&self) -> &ParamSet {
        self.set
    }

    pub fn all(&self) -> &[R] {
        &self.vals
    }
}

/// Gradient with the same layout as a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl GradSet {
    pub fn zeros_like(p: &ParamSet) -> Self {
        GradSet {
            segments: p.segments.clone(),
            data: vec![0.0; p.data.len()],
        }
    }

    pub fn get(&self, id: SegId) -> &[f64] {
        let s = &self.segments[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|g| *g *= a);
    }

    pub fn add_scaled(&mut self, other: &GradSet, a: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (g, o) in self.data.iter_mut().zip(&other.data) {
            *g += a * o;
        }
    }
}

/// Backward pass from `loss` to every parameter in `params`.
///
/// Parameters the loss does not depend on receive exactly zero.
pub fn backward<'t>(loss: Var<'t>, params: &Params<'_, Var<'t>>, tape: &'t Tape) -> Result<GradSet> {
    let adj = tape.backward(loss)?;
    let data: Vec<f64> = params.vals.iter().map(|&v| adj.of(v)).collect();
    if let Some(i) = data.iter().position(|g| !g.is_finite()) {
        let (seg, _) = params.set.locate(i);
        return Err(Error::NonFinite {
            node: i,
            op: leak_name(params.set.name(seg)),
        });
    }
    Ok(GradSet {
        segments: params.set.segments.clone(),
        data,
    })
}

fn leak_name(s: &str) -> &'static str {
    // only hit on the error path
    Box::leak(s.to_owned().into_boxed_str())
}

/// A scalar objective that can be evaluated with any [`Real`].
pub trait Objective {
    fn eval<R: Real>(&self, params: &Params<'_, R>) -> Result<R>;
}

/// Value and gradient of an objective at `params`.
pub fn value_and_grad<O: Objective>(obj: &O, params: &ParamSet) -> Result<(f64, GradSet)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = obj.eval(&bound)?;
    let g = backward(loss, &bound, &tape)?;
    Ok((loss.val(), g))
}

/// Per-segment outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct SegmentCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Analytic and finite-difference values at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub segments: Vec<SegmentCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>14} {:>8} {:>14} {:>14}",
            "segment", "checked", "max_rel_err", "worst", "analytic", "numeric"
        )?;
        for s in &self.segments {
            writeln!(
                f,
                "{:<24} {:>8} {:>14.3e} {:>8} {:>14.6e} {:>14.6e}",
                s.name, s.checked, s.max_rel_err, s.worst_index, s.analytic, s.numeric
            )?;
        }
        writeln!(
            f,
            "overall max_rel_err={:.3e} worst={} tolerance={:.1e} {}",
            self.max_rel_err,
            self.worst,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per segment.
    pub max_per_segment: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            max_per_segment: None,
            floor: 1e-8,
        }
    }
}

/// Compares the analytic gradient against central finite differences.
///
/// Relative error is `|g_analytic - g_fd| / max(|g_fd|, floor)`.
pub fn grad_check<O: Objective>(
    obj: &O,
    params: &ParamSet,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.step <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let base = obj.eval(&params.plain())?;
    let again = obj.eval(&params.plain())?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(base, again));
    }
    let (_, grad) = value_and_grad(obj, params)?;
    let mut segments = Vec::new();
    let mut overall = (0.0f64, String::from("-"));
    for id in params.ids() {
        let s = &params.segments[id.0];
        let picks: Vec<usize> = match opts.max_per_segment {
            Some(m) if s.len > m && m > 0 => (0..m).map(|k| k * s.len / m).collect(),
            _ => (0..s.len).collect(),
        };
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for &j in &picks {
            let i = s.offset + j;
            let mut v = params.data.clone();
            v[i] = params.data[i] + opts.step;
            let up = obj.eval(&params.with_values(v.clone()))?;
            v[i] = params.data[i] - opts.step;
            let down = obj.eval(&params.with_values(v))?;
            let fd = (up - down) / (2.0 * opts.step);
            let rel = (grad.data[i] - fd).abs() / fd.abs().max(opts.floor);
            if rel >= worst.0 {
                worst = (rel, j, grad.data[i], fd);
            }
        }
        if worst.0 >= overall.0 {
            overall = (worst.0, format!("{}[{}]", s.name, worst.1));
        }
        segments.push(SegmentCheck {
            name: s.name.clone(),
            checked: picks.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
        });
    }
    Ok(GradCheckReport {
        segments,
        max_rel_err: overall.0,
        worst: overall.1,
        tolerance: opts.tolerance,
    })
}
