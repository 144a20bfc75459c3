//! MLP velocity fields with hand-written reverse-mode gradients.
//!
//! Both networks share one trunk: `[z | time features | condition embedding]`
//! through SiLU hidden layers to a linear head of width `d`. The teacher's
//! time features are `E(t)`; the student's are `W [E(t); E(r)]`.

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::embed::time_embed_batch;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const COND_EMBED: &str = "cond_embed";
pub const OUT_WEIGHT: &str = "out.weight";
pub const OUT_BIAS: &str = "out.bias";
pub const TIME_PROJ: &str = "time_proj";

fn hidden_weight(i: usize) -> String {
    format!("hidden.{i}.weight")
}

fn hidden_bias(i: usize) -> String {
    format!("hidden.{i}.bias")
}

/// Architecture descriptor. `cond_vocab` counts the real labels plus one
/// null token, which always takes the last index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub m: usize,
    pub cond_vocab: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
}

fn default_cond_dim() -> usize {
    16
}

impl Arch {
    pub fn new(
        d: usize,
        hidden: Vec<usize>,
        m: usize,
        num_classes: usize,
        cond_dim: usize,
    ) -> Self {
        Self {
            d,
            hidden,
            m,
            cond_vocab: num_classes + 1,
            cond_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.m < 2 || self.m % 2 != 0 {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and >= 2, got {}",
                self.m
            )));
        }
        if self.cond_vocab == 0 {
            return Err(Error::Config(
                "cond_vocab must include the null token".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.cond_vocab - 1
    }

    pub fn null_token(&self) -> usize {
        self.cond_vocab - 1
    }

    pub fn input_dim(&self) -> usize {
        self.d + self.m + self.cond_dim
    }

    pub fn cond_index(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Null => Ok(self.null_token()),
            Condition::Label(k) if k < self.num_classes() => Ok(k),
            Condition::Label(k) => Err(Error::Argument(format!(
                "condition label {k} out of range (classes = {})",
                self.num_classes()
            ))),
        }
    }
}

/// Conditioning input: a class label or the null token used by CFG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Label(usize),
}

impl Condition {
    pub fn from_label(label: Option<usize>) -> Self {
        label.map_or(Condition::Null, Condition::Label)
    }

    pub fn label(self) -> Option<usize> {
        match self {
            Condition::Null => None,
            Condition::Label(k) => Some(k),
        }
    }

    pub fn is_null(self) -> bool {
        matches!(self, Condition::Null)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn init_params<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> Result<ParamStore> {
    arch.validate()?;
    let mut p = ParamStore::new();
    let cond: Vec<f64> = (0..arch.cond_vocab * arch.cond_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    p.insert(
        COND_EMBED,
        ArrayD::from_shape_vec(IxDyn(&[arch.cond_vocab, arch.cond_dim]), cond).unwrap(),
    )?;
    let mut fan_in = arch.input_dim();
    let layers = arch
        .hidden
        .iter()
        .enumerate()
        .map(|(i, &h)| (hidden_weight(i), hidden_bias(i), h))
        .chain(std::iter::once((
            OUT_WEIGHT.to_string(),
            OUT_BIAS.to_string(),
            arch.d,
        )));
    for (wname, bname, width) in layers {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..fan_in * width).map(|_| dist.sample(rng)).collect();
        let b: Vec<f64> = (0..width).map(|_| dist.sample(rng)).collect();
        p.insert(
            wname,
            ArrayD::from_shape_vec(IxDyn(&[fan_in, width]), w).unwrap(),
        )?;
        p.insert(bname, ArrayD::from_shape_vec(IxDyn(&[width]), b).unwrap())?;
        fan_in = width;
    }
    Ok(p)
}

fn check_trunk_params(arch: &Arch, params: &ParamStore) -> Result<()> {
    arch.validate()?;
    let expect = |name: &str, shape: &[usize]| -> Result<()> {
        let got = params.get(name)?.shape();
        if got != shape {
            return Err(Error::Shape(format!(
                "`{name}` has shape {got:?}, expected {shape:?}"
            )));
        }
        Ok(())
    };
    expect(COND_EMBED, &[arch.cond_vocab, arch.cond_dim])?;
    let mut fan_in = arch.input_dim();
    for (i, &h) in arch.hidden.iter().enumerate() {
        expect(&hidden_weight(i), &[fan_in, h])?;
        expect(&hidden_bias(i), &[h])?;
        fan_in = h;
    }
    expect(OUT_WEIGHT, &[fan_in, arch.d])?;
    expect(OUT_BIAS, &[arch.d])
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Trace {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    cond_idx: Vec<usize>,
    /// `[E(t) | E(r)]` rows when the time features went through `W`.
    dual_time: Option<Array2<f64>>,
}

/// Records one forward pass so that [`VelocityNet::backward`] or
/// [`DualTimeVelocityNet::backward`] can differentiate through it.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    trace: Option<Trace>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }

    pub fn clear(&mut self) {
        self.trace = None;
    }

    fn take_trace(&self, expect_dual: bool) -> Result<&Trace> {
        let trace = self
            .trace
            .as_ref()
            .ok_or_else(|| Error::State("backward called before a recorded forward pass".into()))?;
        if trace.dual_time.is_some() != expect_dual {
            return Err(Error::State(
                "tape was recorded by a different network kind".into(),
            ));
        }
        Ok(trace)
    }
}

fn check_batch(
    arch: &Arch,
    z: &ArrayView2<f64>,
    t: &[f64],
    cond: &[Condition],
) -> Result<Vec<usize>> {
    let b = z.nrows();
    if z.ncols() != arch.d {
        return Err(Error::Shape(format!(
            "state has {} columns, expected d = {}",
            z.ncols(),
            arch.d
        )));
    }
    if t.len() != b || cond.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} rows given {} times and {} conditions",
            t.len(),
            cond.len()
        )));
    }
    if let Some(bad) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Argument(format!("time {bad} outside [0, 1]")));
    }
    cond.iter().map(|&c| arch.cond_index(c)).collect()
}

fn trunk_forward(
    arch: &Arch,
    params: &ParamStore,
    z: ArrayView2<f64>,
    time_feats: ArrayView2<f64>,
    cond_idx: &[usize],
    record: bool,
) -> Result<(Array2<f64>, Option<Trace>)> {
    let (b, d, m) = (z.nrows(), arch.d, arch.m);
    if time_feats.dim() != (b, m) {
        return Err(Error::Shape(format!(
            "time features {:?}, expected ({b}, {m})",
            time_feats.dim()
        )));
    }
    let table = params.matrix(COND_EMBED)?;
    let mut input = Array2::zeros((b, arch.input_dim()));
    input.slice_mut(s![.., ..d]).assign(&z);
    input.slice_mut(s![.., d..d + m]).assign(&time_feats);
    for (mut row, &k) in input
        .slice_mut(s![.., d + m..])
        .outer_iter_mut()
        .zip(cond_idx)
    {
        row.assign(&table.row(k));
    }

    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut current: Option<Array2<f64>> = None;
    for i in 0..arch.hidden.len() {
        let x = current.as_ref().map_or(input.view(), |h| h.view());
        let bias = params
            .get(&hidden_bias(i))?
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let a = x.dot(&params.matrix(&hidden_weight(i))?) + &bias;
        let h = a.mapv(silu);
        if record {
            pre.push(a);
            post.push(h.clone());
        }
        current = Some(h);
    }
    let last = current.as_ref().map_or(input.view(), |h| h.view());
    let bias = params
        .get(OUT_BIAS)?
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap();
    let out = last.dot(&params.matrix(OUT_WEIGHT)?) + &bias;

    let trace = record.then(|| Trace {
        input,
        pre,
        post,
        cond_idx: cond_idx.to_vec(),
        dual_time: None,
    });
    Ok((out, trace))
}

/// Gradients of the trunk parameters plus the gradient w.r.t. the time features.
fn trunk_backward(
    arch: &Arch,
    params: &ParamStore,
    trace: &Trace,
    dout: ArrayView2<f64>,
) -> Result<(ParamStore, Array2<f64>)> {
    let b = trace.input.nrows();
    if dout.dim() != (b, arch.d) {
        return Err(Error::Shape(format!(
            "output gradient has shape {:?}, recorded batch produced ({b}, {})",
            dout.dim(),
            arch.d
        )));
    }
    let mut grads = params.zeros_like();
    let n_hidden = arch.hidden.len();

    let last = if n_hidden == 0 {
        trace.input.view()
    } else {
        trace.post[n_hidden - 1].view()
    };
    grads.matrix_mut(OUT_WEIGHT)?.assign(&last.t().dot(&dout));
    grads
        .get_mut(OUT_BIAS)?
        .assign(&dout.sum_axis(Axis(0)).into_dyn());
    let mut dx = dout.dot(&params.matrix(OUT_WEIGHT)?.t());

    for i in (0..n_hidden).rev() {
        let mut da = dx;
        da.zip_mut_with(&trace.pre[i], |g, &a| *g *= silu_grad(a));
        let x = if i == 0 {
            trace.input.view()
        } else {
            trace.post[i - 1].view()
        };
        grads.matrix_mut(&hidden_weight(i))?.assign(&x.t().dot(&da));
        grads
            .get_mut(&hidden_bias(i))?
            .assign(&da.sum_axis(Axis(0)).into_dyn());
        dx = da.dot(&params.matrix(&hidden_weight(i))?.t());
    }

    let (d, m) = (arch.d, arch.m);
    let d_time = dx.slice(s![.., d..d + m]).to_owned();
    let d_cond = dx.slice(s![.., d + m..]);
    let mut g_table = grads.matrix_mut(COND_EMBED)?;
    for (row, &k) in d_cond.outer_iter().zip(&trace.cond_idx) {
        let mut dst = g_table.row_mut(k);
        dst += &row;
    }
    Ok((grads, d_time))
}

/// Teacher velocity field `v(z, t, c; theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    arch: Arch,
    params: ParamStore,
}

impl VelocityNet {
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        let params = init_params(&arch, rng)?;
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: Arch, params: ParamStore) -> Result<Self> {
        check_trunk_params(&arch, &params)?;
        if params.len() != 2 * arch.hidden.len() + 3 {
            return Err(Error::Shape(
                "unexpected extra parameters for a teacher network".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (Arch, ParamStore) {
        (self.arch, self.params)
    }

    /// Batched forward pass; row `i` is `v(z_i, t_i, c_i)`.
    pub fn forward(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        let idx = check_batch(&self.arch, &z, t, cond)?;
        let feats = time_embed_batch(t, self.arch.m)?;
        Ok(trunk_forward(&self.arch, &self.params, z, feats.view(), &idx, false)?.0)
    }

    /// Single-point forward pass.
    pub fn forward_one(&self, z: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let z = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(z, &[t], &[c])?.into_raw_vec_and_offset().0)
    }

    pub fn forward_recorded(
        &self,
        tape: &mut GradTape,
        z: ArrayView2<f64>,
        t: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        let idx = check_batch(&self.arch, &z, t, cond)?;
        let feats = time_embed_batch(t, self.arch.m)?;
        let (out, trace) = trunk_forward(&self.arch, &self.params, z, feats.view(), &idx, true)?;
        tape.trace = trace;
        Ok(out)
    }

    /// Gradient of a scalar loss given `dloss/doutput` for the recorded batch.
    pub fn backward(&self, tape: &GradTape, dout: ArrayView2<f64>) -> Result<ParamStore> {
        let trace = tape.take_trace(false)?;
        Ok(trunk_backward(&self.arch, &self.params, trace, dout)?.0)
    }
}

/// Student average-velocity field `u(z, t, r, c; theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTimeVelocityNet {
    arch: Arch,
    params: ParamStore,
}

impl DualTimeVelocityNet {
    /// Random trunk and random time projection.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        let mut params = init_params(&arch, rng)?;
        let m = arch.m;
        let bound = 1.0 / ((2 * m) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..2 * m * m).map(|_| dist.sample(rng)).collect();
        params.insert(
            TIME_PROJ,
            ArrayD::from_shape_vec(IxDyn(&[m, 2 * m]), w).unwrap(),
        )?;
        Ok(Self { arch, params })
    }

    /// Trunk parameters from `trunk` plus the projection `time_proj` of shape `(m, 2m)`.
    pub fn with_projection(arch: Arch, trunk: ParamStore, time_proj: Array2<f64>) -> Result<Self> {
        let mut params = trunk;
        params.insert(TIME_PROJ, time_proj.into_dyn())?;
        Self::from_parts(arch, params)
    }

    pub fn from_parts(arch: Arch, params: ParamStore) -> Result<Self> {
        check_trunk_params(&arch, &params)?;
        let w = params.get(TIME_PROJ)?;
        if w.shape() != [arch.m, 2 * arch.m] {
            return Err(Error::Shape(format!(
                "`{TIME_PROJ}` has shape {:?}, expected [{}, {}]",
                w.shape(),
                arch.m,
                2 * arch.m
            )));
        }
        if params.len() != 2 * arch.hidden.len() + 4 {
            return Err(Error::Shape(
                "unexpected extra parameters for a student network".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (Arch, ParamStore) {
        (self.arch, self.params)
    }

    pub fn time_projection(&self) -> Result<ArrayView2<'_, f64>> {
        self.params.matrix(TIME_PROJ)
    }

    fn mapped_time(&self, t: &[f64], r: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if r.len() != t.len() {
            return Err(Error::Shape(format!(
                "{} start times but {} end times",
                t.len(),
                r.len()
            )));
        }
        if let Some((a, b)) = t.iter().zip(r).find(|(a, b)| a > b) {
            return Err(Error::Ordering(format!(
                "start time {a} exceeds end time {b}"
            )));
        }
        if let Some(bad) = r.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Argument(format!("time {bad} outside [0, 1]")));
        }
        let e_t = time_embed_batch(t, self.arch.m)?;
        let e_r = time_embed_batch(r, self.arch.m)?;
        let e_tr = concatenate(Axis(1), &[e_t.view(), e_r.view()]).unwrap();
        let mapped = e_tr.dot(&self.time_projection()?.t());
        Ok((mapped, e_tr))
    }

    pub fn forward(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        r: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        let idx = check_batch(&self.arch, &z, t, cond)?;
        let (feats, _) = self.mapped_time(t, r)?;
        Ok(trunk_forward(&self.arch, &self.params, z, feats.view(), &idx, false)?.0)
    }

    pub fn forward_one(&self, z: &[f64], t: f64, r: f64, c: Condition) -> Result<Vec<f64>> {
        let z = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self
            .forward(z, &[t], &[r], &[c])?
            .into_raw_vec_and_offset()
            .0)
    }

    pub fn forward_recorded(
        &self,
        tape: &mut GradTape,
        z: ArrayView2<f64>,
        t: &[f64],
        r: &[f64],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        let idx = check_batch(&self.arch, &z, t, cond)?;
        let (feats, e_tr) = self.mapped_time(t, r)?;
        let (out, trace) = trunk_forward(&self.arch, &self.params, z, feats.view(), &idx, true)?;
        tape.trace = trace.map(|mut tr| {
            tr.dual_time = Some(e_tr);
            tr
        });
        Ok(out)
    }

    pub fn backward(&self, tape: &GradTape, dout: ArrayView2<f64>) -> Result<ParamStore> {
        let trace = tape.take_trace(true)?;
        let (mut grads, d_time) = trunk_backward(&self.arch, &self.params, trace, dout)?;
        let e_tr = trace.dual_time.as_ref().expect("checked by take_trace");
        grads.matrix_mut(TIME_PROJ)?.assign(&d_time.t().dot(e_tr));
        Ok(grads)
    }
}

/// Output bias of the head, handy for building analytic test nets.
pub fn set_output_bias(params: &mut ParamStore, bias: &[f64]) -> Result<()> {
    let b = params.get_mut(OUT_BIAS)?;
    if b.len() != bias.len() {
        return Err(Error::Shape(format!(
            "bias has {} entries, expected {}",
            bias.len(),
            b.len()
        )));
    }
    b.assign(&Array1::from(bias.to_vec()).into_dyn());
    Ok(())
}
